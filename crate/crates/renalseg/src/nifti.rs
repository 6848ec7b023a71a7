//! NIfTI-1 reading and writing for scalar volumes and label maps.
//!
//! Scope is deliberately narrow: little-endian NIfTI-1 (348-byte header,
//! magic `n+1`), 3-dimensional images, float32 (datatype 16) and uint8
//! (datatype 2) payloads, optionally gzip-compressed. Orientation information
//! beyond axis-aligned scaling plus translation is rejected rather than
//! silently reinterpreted, because reorienting a CT behind the caller's back
//! is a correctness hazard. `read` inverts `write` exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Volume, MAX_LABEL};

const HEADER_SIZE: usize = 348;
/// Data offset we write: header + 4-byte extension flag.
const VOX_OFFSET: usize = 352;

const MAGIC_NP1: &[u8; 4] = b"n+1\0";
const MAGIC_NI1: &[u8; 4] = b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;

/// Spatial units code for millimeters.
const UNITS_MM: u8 = 2;

/// Tolerance for treating header affine entries as zero / equal to pixdim.
/// NIfTI-1 stores f32; this absorbs writer rounding from other tools.
const AFFINE_EPS: f32 = 1e-4;

// Header field offsets (NIfTI-1).
mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

/// Decoded file contents: geometry plus the raw payload in its native type.
pub enum NiftiData {
    Float(Volume),
    Uint8 { geometry: Geometry, data: Vec<u8> },
}

/// Read a NIfTI-1 file as a scalar volume.
///
/// uint8 payloads are widened to f32. Float payloads containing NaN or
/// infinities are rejected.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_nifti(path.as_ref())? {
        NiftiData::Float(v) => Ok(v),
        NiftiData::Uint8 { geometry, data } => {
            Volume::new(geometry, data.into_iter().map(f32::from).collect())
        }
    }
}

/// Read a NIfTI-1 file as a label map.
///
/// Requires an integer-typed file whose values all lie in `0..=3`.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match read_nifti(path)? {
        NiftiData::Uint8 { geometry, data } => LabelMap::new(geometry, data),
        NiftiData::Float(v) => {
            // Tolerate float-typed files that hold exact small integers; many
            // tools save masks as float32.
            let (geometry, data) = v.into_parts();
            let mut labels = Vec::with_capacity(data.len());
            for value in data {
                if value.fract() != 0.0 || value < 0.0 || value > MAX_LABEL as f32 {
                    return Err(Error::LabelOutOfRange {
                        value: value as i64,
                    });
                }
                labels.push(value as u8);
            }
            LabelMap::new(geometry, labels)
        }
    }
}

/// Read a NIfTI-1 file, keeping the payload in its native type.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiData> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedNifti {
            path: path.into(),
            reason: format!("file has {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        });
    }

    let magic = &bytes[off::MAGIC..off::MAGIC + 4];
    if magic != MAGIC_NP1 && magic != MAGIC_NI1 {
        return Err(Error::BadMagic { path: path.into() });
    }
    let sizeof_hdr = LittleEndian::read_i32(&bytes[off::SIZEOF_HDR..off::SIZEOF_HDR + 4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::MalformedNifti {
            path: path.into(),
            reason: format!("sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} (big-endian files are unsupported)"),
        });
    }

    let ndim = LittleEndian::read_i16(&bytes[off::DIM..off::DIM + 2]);
    if !(1..=3).contains(&ndim) {
        return Err(Error::MalformedNifti {
            path: path.into(),
            reason: format!("only 3D images are supported, dim[0] = {ndim}"),
        });
    }
    let mut shape = [1usize; 3];
    for (a, s) in shape.iter_mut().enumerate().take(ndim as usize) {
        let d = LittleEndian::read_i16(&bytes[off::DIM + 2 + 2 * a..off::DIM + 4 + 2 * a]);
        if d < 1 {
            return Err(Error::MalformedNifti {
                path: path.into(),
                reason: format!("dim[{}] = {d} is not positive", a + 1),
            });
        }
        *s = d as usize;
    }

    let mut spacing = [1.0f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = LittleEndian::read_f32(&bytes[off::PIXDIM + 4 * (a + 1)..off::PIXDIM + 4 * (a + 2)]);
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::MalformedNifti {
                path: path.into(),
                reason: format!("pixdim[{}] = {p} is not positive", a + 1),
            });
        }
        *s = p;
    }

    let origin = decode_origin(&bytes, &spacing).map_err(|reason| Error::MalformedNifti {
        path: path.into(),
        reason,
    })?;

    let datatype = LittleEndian::read_i16(&bytes[off::DATATYPE..off::DATATYPE + 2]);
    let elem_size = match datatype {
        DT_UINT8 => 1usize,
        DT_FLOAT32 => 4usize,
        code => {
            return Err(Error::UnsupportedDatatype {
                path: path.into(),
                code,
            })
        }
    };

    let slope = LittleEndian::read_f32(&bytes[off::SCL_SLOPE..off::SCL_SLOPE + 4]);
    let inter = LittleEndian::read_f32(&bytes[off::SCL_INTER..off::SCL_INTER + 4]);
    let trivial_scaling = (slope == 0.0 || slope == 1.0) && inter == 0.0;

    let vox_offset = LittleEndian::read_f32(&bytes[off::VOX_OFFSET..off::VOX_OFFSET + 4]);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::MalformedNifti {
            path: path.into(),
            reason: format!("vox_offset {vox_offset} is invalid"),
        });
    }
    let data_start = vox_offset as usize;

    let geometry = Geometry::new(shape, spacing, origin)
        .map_err(|e| Error::MalformedNifti {
            path: path.into(),
            reason: e.to_string(),
        })?;
    let n = geometry.num_voxels();
    let need = data_start + n * elem_size;
    if bytes.len() < need {
        return Err(Error::MalformedNifti {
            path: path.into(),
            reason: format!("payload truncated: need {need} bytes, file has {}", bytes.len()),
        });
    }
    let payload = &bytes[data_start..need];

    match datatype {
        DT_UINT8 => {
            if !trivial_scaling {
                return Err(Error::MalformedNifti {
                    path: path.into(),
                    reason: format!(
                        "integer payload with nontrivial scaling (slope {slope}, inter {inter})"
                    ),
                });
            }
            Ok(NiftiData::Uint8 {
                geometry,
                data: payload.to_vec(),
            })
        }
        DT_FLOAT32 => {
            let mut data = vec![0.0f32; n];
            LittleEndian::read_f32_into(payload, &mut data);
            if !trivial_scaling {
                for v in &mut data {
                    *v = *v * slope + inter;
                }
            }
            // NaN in input files is an error, never propagated.
            Volume::new(geometry, data).map(NiftiData::Float)
        }
        _ => unreachable!(),
    }
}

/// Write a scalar volume as little-endian float32 NIfTI-1.
///
/// Gzip compression is applied when the path ends in `.gz`.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut out = encode_header(vol.geometry(), DT_FLOAT32);
    out.reserve(vol.data().len() * 4);
    let mut buf = [0u8; 4];
    for &v in vol.data() {
        LittleEndian::write_f32(&mut buf, v);
        out.extend_from_slice(&buf);
    }
    write_maybe_gz(path.as_ref(), &out)
}

/// Write a label map as little-endian uint8 NIfTI-1.
pub fn write_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = encode_header(labels.geometry(), DT_UINT8);
    out.extend_from_slice(labels.data());
    write_maybe_gz(path.as_ref(), &out)
}

/// Decode the world origin, rejecting non-axis-aligned orientations.
///
/// Accepted forms, in order of precedence:
/// - sform (`sform_code > 0`): srow rows must be diagonal with entries
///   matching pixdim; translation column becomes the origin.
/// - qform (`qform_code > 0`): identity rotation only (b = c = d = 0);
///   qoffset becomes the origin.
/// - neither: origin (0, 0, 0).
fn decode_origin(bytes: &[u8], spacing: &[f32; 3]) -> std::result::Result<[f32; 3], String> {
    let sform_code = LittleEndian::read_i16(&bytes[off::SFORM_CODE..off::SFORM_CODE + 2]);
    let qform_code = LittleEndian::read_i16(&bytes[off::QFORM_CODE..off::QFORM_CODE + 2]);

    if sform_code > 0 {
        let rows = [off::SROW_X, off::SROW_Y, off::SROW_Z];
        let mut origin = [0.0f32; 3];
        for (r, &row_off) in rows.iter().enumerate() {
            let mut row = [0.0f32; 4];
            for (c, entry) in row.iter_mut().enumerate() {
                *entry = LittleEndian::read_f32(&bytes[row_off + 4 * c..row_off + 4 * c + 4]);
            }
            for (c, &entry) in row.iter().enumerate().take(3) {
                if c == r {
                    if (entry - spacing[r]).abs() > AFFINE_EPS * spacing[r].max(1.0) {
                        return Err(format!(
                            "srow diagonal {entry} disagrees with pixdim {} (flips and oblique orientations are unsupported)",
                            spacing[r]
                        ));
                    }
                } else if entry.abs() > AFFINE_EPS {
                    return Err(format!(
                        "srow has off-diagonal entry {entry}; oblique orientations are unsupported"
                    ));
                }
            }
            origin[r] = row[3];
        }
        return Ok(origin);
    }

    if qform_code > 0 {
        for c in 0..3 {
            let q = LittleEndian::read_f32(&bytes[off::QUATERN_B + 4 * c..off::QUATERN_B + 4 * c + 4]);
            if q.abs() > AFFINE_EPS {
                return Err(format!(
                    "qform quaternion component {q} is nonzero; rotations are unsupported"
                ));
            }
        }
        let mut origin = [0.0f32; 3];
        for (c, o) in origin.iter_mut().enumerate() {
            *o = LittleEndian::read_f32(&bytes[off::QOFFSET_X + 4 * c..off::QOFFSET_X + 4 * c + 4]);
        }
        return Ok(origin);
    }

    Ok([0.0; 3])
}

/// Build the 348-byte header plus the 4-byte extension flag.
fn encode_header(geometry: &Geometry, datatype: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[off::SIZEOF_HDR..off::SIZEOF_HDR + 4], HEADER_SIZE as i32);

    LittleEndian::write_i16(&mut h[off::DIM..off::DIM + 2], 3);
    for a in 0..3 {
        LittleEndian::write_i16(
            &mut h[off::DIM + 2 + 2 * a..off::DIM + 4 + 2 * a],
            geometry.shape[a] as i16,
        );
    }
    for a in 3..7 {
        LittleEndian::write_i16(&mut h[off::DIM + 2 + 2 * a..off::DIM + 4 + 2 * a], 1);
    }

    LittleEndian::write_i16(&mut h[off::DATATYPE..off::DATATYPE + 2], datatype);
    let bitpix = if datatype == DT_UINT8 { 8 } else { 32 };
    LittleEndian::write_i16(&mut h[off::BITPIX..off::BITPIX + 2], bitpix);

    // pixdim[0] is qfac.
    LittleEndian::write_f32(&mut h[off::PIXDIM..off::PIXDIM + 4], 1.0);
    for a in 0..3 {
        LittleEndian::write_f32(
            &mut h[off::PIXDIM + 4 * (a + 1)..off::PIXDIM + 4 * (a + 2)],
            geometry.spacing[a],
        );
    }

    LittleEndian::write_f32(&mut h[off::VOX_OFFSET..off::VOX_OFFSET + 4], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[off::SCL_SLOPE..off::SCL_SLOPE + 4], 1.0);
    h[off::XYZT_UNITS] = UNITS_MM;

    LittleEndian::write_i16(&mut h[off::SFORM_CODE..off::SFORM_CODE + 2], 1);
    let rows = [off::SROW_X, off::SROW_Y, off::SROW_Z];
    for (r, &row_off) in rows.iter().enumerate() {
        LittleEndian::write_f32(
            &mut h[row_off + 4 * r..row_off + 4 * r + 4],
            geometry.spacing[r],
        );
        LittleEndian::write_f32(&mut h[row_off + 12..row_off + 16], geometry.origin[r]);
    }

    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(MAGIC_NP1);
    // Bytes 348..352 are the zeroed extension flag.
    h
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        MultiGzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes)?;
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ramp_volume(shape: [usize; 3]) -> Volume {
        let g = Geometry::new(shape, [0.78, 0.78, 0.78], [-12.5, 3.25, 100.0]).unwrap();
        let data = (0..g.num_voxels()).map(|i| i as f32 * 0.25 - 7.0).collect();
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn float_roundtrip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let vol = ramp_volume([5, 4, 3]);
        for name in ["v.nii", "v.nii.gz"] {
            let path = dir.path().join(name);
            write_volume(&vol, &path).unwrap();
            let back = read_volume(&path).unwrap();
            assert_eq!(back.geometry(), vol.geometry());
            assert_eq!(back.data(), vol.data());
        }
    }

    #[test]
    fn label_roundtrip_preserves_values_exactly() {
        let dir = tempdir().unwrap();
        let g = Geometry::new([4, 4, 4], [1.0, 2.0, 3.0], [0.0, -1.0, 5.5]).unwrap();
        let data: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
        let labels = LabelMap::new(g, data).unwrap();
        let path = dir.path().join("l.nii.gz");
        write_label_map(&labels, &path).unwrap();
        let back = read_label_map(&path).unwrap();
        assert_eq!(back, labels);
    }

    #[test]
    fn header_layout_matches_nifti1() {
        let vol = Volume::constant(
            Geometry::new([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap(),
            1.5,
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.nii");
        write_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // 348-byte header + 4-byte extension flag + 8*8*8 float32 payload.
        assert_eq!(bytes.len(), 352 + 8 * 8 * 8 * 4);
        assert_eq!(LittleEndian::read_i32(&bytes[0..4]), 348);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(LittleEndian::read_i16(&bytes[70..72]), 16);
    }

    #[test]
    fn pixdim_078_is_decoded_as_spacing() {
        let dir = tempdir().unwrap();
        let g = Geometry::new([2, 2, 2], [0.78, 0.78, 0.78], [0.0; 3]).unwrap();
        let path = dir.path().join("s.nii");
        write_volume(&Volume::constant(g, 0.0).unwrap(), &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.geometry().spacing, [0.78, 0.78, 0.78]);
    }

    #[test]
    fn zeroed_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        std::fs::write(&path, vec![0u8; 400]).unwrap();
        // sizeof_hdr is zero too, but the magic check comes first.
        assert!(matches!(
            read_volume(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_volume("/nonexistent/path.nii"),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn unsupported_datatype_is_rejected() {
        let dir = tempdir().unwrap();
        let vol = ramp_volume([2, 2, 2]);
        let path = dir.path().join("dt.nii");
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 4); // int16
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::UnsupportedDatatype { code: 4, .. })
        ));
    }

    #[test]
    fn oblique_sform_is_rejected() {
        let dir = tempdir().unwrap();
        let vol = ramp_volume([2, 2, 2]);
        let path = dir.path().join("rot.nii");
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Introduce an off-diagonal term in srow_x.
        LittleEndian::write_f32(&mut bytes[off::SROW_X + 4..off::SROW_X + 8], 0.3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::MalformedNifti { .. })));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let vol = ramp_volume([2, 2, 2]);
        let path = dir.path().join("nan.nii");
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        LittleEndian::write_f32(&mut bytes[352..356], f32::NAN);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::NonFinite(_))));
    }

    #[test]
    fn label_request_on_large_values_is_rejected() {
        let dir = tempdir().unwrap();
        let g = Geometry::with_shape([2, 2, 2]).unwrap();
        let vol = Volume::constant(g, 7.0).unwrap();
        let path = dir.path().join("big.nii");
        write_volume(&vol, &path).unwrap();
        assert!(matches!(
            read_label_map(&path),
            Err(Error::LabelOutOfRange { value: 7 })
        ));
    }
}
