//! Single-file NIfTI-1 reader and writer.
//!
//! Reads either byte order (the byte order that yields a sane `dim[0]` wins),
//! writes little-endian `.nii` with `vox_offset = 352` and `sform_code = 1`.
//! Multi-channel volumes are stored as 4D arrays; channel names round-trip
//! through the `descrip` field when they fit.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::{Matrix3, Matrix4};
use num_complex::Complex32;

use super::{Channel, Geometry, Volume, VoxelData};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_COMPLEX64: i16 = 32;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

const CHANNEL_TAG: &str = "channels:";

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => LittleEndian::read_i16(&self.bytes[off..]),
            Endian::Big => BigEndian::read_i16(&self.bytes[off..]),
        }
    }
    fn i32(&self, off: usize) -> i32 {
        match self.endian {
            Endian::Little => LittleEndian::read_i32(&self.bytes[off..]),
            Endian::Big => BigEndian::read_i32(&self.bytes[off..]),
        }
    }
    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => LittleEndian::read_f32(&self.bytes[off..]),
            Endian::Big => BigEndian::read_f32(&self.bytes[off..]),
        }
    }
    fn f64(&self, off: usize) -> f64 {
        match self.endian {
            Endian::Little => LittleEndian::read_f64(&self.bytes[off..]),
            Endian::Big => BigEndian::read_f64(&self.bytes[off..]),
        }
    }
    fn u16(&self, off: usize) -> u16 {
        match self.endian {
            Endian::Little => LittleEndian::read_u16(&self.bytes[off..]),
            Endian::Big => BigEndian::read_u16(&self.bytes[off..]),
        }
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= HEADER_SIZE && &bytes[344..348] == b"ni1\0" {
        // Header/image pair: voxels live in the sibling .img file.
        let img_path = path.with_extension("img");
        let img = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        return decode(&bytes, &img, true);
    }
    read_nifti_bytes(&bytes)
}

pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume> {
    decode(bytes, bytes, false)
}

fn decode(header: &[u8], payload: &[u8], paired: bool) -> Result<Volume> {
    if header.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!("{} bytes, header needs {HEADER_SIZE}", header.len())));
    }
    let le_dim0 = LittleEndian::read_i16(&header[40..]);
    let be_dim0 = BigEndian::read_i16(&header[40..]);
    let endian = if (1..=7).contains(&le_dim0) {
        Endian::Little
    } else if (1..=7).contains(&be_dim0) {
        Endian::Big
    } else {
        return Err(Error::MalformedHeader(format!("implausible dim[0] ({le_dim0} / {be_dim0})")));
    };
    let r = Reader { bytes: header, endian };
    let sizeof_hdr = r.i32(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::MalformedHeader(format!("sizeof_hdr = {sizeof_hdr}")));
    }
    let magic = &header[344..348];
    let expected: &[u8] = if paired { b"ni1\0" } else { b"n+1\0" };
    if magic != expected {
        return Err(Error::MalformedHeader(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }

    let ndim = r.i16(40) as usize;
    let mut dim = [1usize; 8];
    for (d, slot) in dim.iter_mut().enumerate().skip(1).take(ndim) {
        let v = r.i16(40 + 2 * d);
        if v < 1 {
            return Err(Error::MalformedHeader(format!("dim[{d}] = {v}")));
        }
        *slot = v as usize;
    }
    let dims = [dim[1], dim[2], dim[3]];
    let n_channels: usize = dim[4..=ndim.max(4)].iter().product();

    let datatype = r.i16(70);
    let bitpix = r.i16(72);
    let bytes_per = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_COMPLEX64 | DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if bitpix as usize != bytes_per * 8 {
        return Err(Error::MalformedHeader(format!("bitpix {bitpix} disagrees with datatype {datatype}")));
    }

    let mut pixdim = [0f64; 8];
    for (d, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(76 + 4 * d) as f64;
    }
    let vox_offset = if paired { 0 } else { r.f32(108) as usize };
    if !paired && vox_offset < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!("vox_offset {vox_offset} inside header")));
    }
    let slope = r.f32(112);
    let inter = r.f32(116);

    let affine = decode_affine(&r, &pixdim)?;
    let geometry = Geometry::new(dims, affine).map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let n_vox = geometry.voxel_count();
    let expected = n_vox * n_channels * bytes_per;
    let available = payload.len().saturating_sub(vox_offset);
    if available < expected {
        return Err(Error::TruncatedData { expected, actual: available });
    }
    let raw = &payload[vox_offset..vox_offset + expected];
    let pr = Reader { bytes: raw, endian };

    let names = channel_names(&header[148..228], n_channels);
    let scaled = slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0);
    let mut channels = Vec::with_capacity(n_channels);
    for (c, name) in names.into_iter().enumerate() {
        let base = c * n_vox * bytes_per;
        let at = |v: usize| base + v * bytes_per;
        let data = match datatype {
            DT_INT16 if !scaled => VoxelData::Int16((0..n_vox).map(|v| pr.i16(at(v))).collect()),
            DT_COMPLEX64 => VoxelData::Complex64(
                (0..n_vox)
                    .map(|v| {
                        let z = Complex32::new(pr.f32(at(v)), pr.f32(at(v) + 4));
                        if scaled {
                            z * slope + inter
                        } else {
                            z
                        }
                    })
                    .collect(),
            ),
            _ => {
                let get = |v: usize| -> f32 {
                    let o = at(v);
                    match datatype {
                        DT_UINT8 => raw[o] as f32,
                        DT_INT8 => raw[o] as i8 as f32,
                        DT_INT16 => pr.i16(o) as f32,
                        DT_UINT16 => pr.u16(o) as f32,
                        DT_INT32 => pr.i32(o) as f32,
                        DT_FLOAT32 => pr.f32(o),
                        DT_FLOAT64 => pr.f64(o) as f32,
                        _ => unreachable!(),
                    }
                };
                VoxelData::Float32(
                    (0..n_vox).map(|v| if scaled { get(v) * slope + inter } else { get(v) }).collect(),
                )
            }
        };
        channels.push(Channel::new(name, data));
    }
    Volume::new(geometry, channels)
}

fn decode_affine(r: &Reader, pixdim: &[f64; 8]) -> Result<Matrix4<f64>> {
    let sform_code = r.i16(254);
    let qform_code = r.i16(252);
    if sform_code > 0 {
        let mut m = Matrix4::identity();
        for row in 0..3 {
            for col in 0..4 {
                m[(row, col)] = r.f32(280 + 16 * row + 4 * col) as f64;
            }
        }
        return Ok(m);
    }
    if qform_code > 0 {
        let (b, c, d) = (r.f32(256) as f64, r.f32(260) as f64, r.f32(264) as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        );
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = Matrix3::from_diagonal(&nalgebra::Vector3::new(pixdim[1], pixdim[2], qfac * pixdim[3]));
        let lin = rot * scale;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
        m[(0, 3)] = r.f32(268) as f64;
        m[(1, 3)] = r.f32(272) as f64;
        m[(2, 3)] = r.f32(276) as f64;
        return Ok(m);
    }
    let mut m = Matrix4::identity();
    for a in 0..3 {
        m[(a, a)] = if pixdim[a + 1] > 0.0 { pixdim[a + 1] } else { 1.0 };
    }
    Ok(m)
}

fn channel_names(descrip: &[u8], n: usize) -> Vec<String> {
    let text = String::from_utf8_lossy(descrip);
    let text = text.trim_end_matches('\0');
    if let Some(list) = text.strip_prefix(CHANNEL_TAG) {
        let names: Vec<String> = list.split(',').map(str::to_string).collect();
        if names.len() == n {
            return names;
        }
    }
    if n == 1 {
        vec!["data".to_string()]
    } else {
        (0..n).map(|c| format!("c{c}")).collect()
    }
}

pub fn write_nifti(vol: &Volume, path: &Path) -> Result<()> {
    let bytes = write_nifti_bytes(vol)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_nifti_bytes(vol: &Volume) -> Result<Vec<u8>> {
    vol.validate()?;
    let g = &vol.geometry;
    let n_ch = vol.channels.len();
    let (datatype, bytes_per) = match &vol.channels[0].data {
        VoxelData::Int16(_) => (DT_INT16, 2),
        VoxelData::Float32(_) => (DT_FLOAT32, 4),
        VoxelData::Complex64(_) => (DT_COMPLEX64, 8),
    };
    let mut out = Vec::with_capacity(VOX_OFFSET + g.voxel_count() * n_ch * bytes_per);
    let mut hdr = [0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut hdr[0..], HEADER_SIZE as i32);
    let ndim: i16 = if n_ch > 1 { 4 } else { 3 };
    let mut dim = [1i16; 8];
    dim[0] = ndim;
    for a in 0..3 {
        dim[a + 1] = i16::try_from(g.dims()[a]).map_err(|_| Error::InvalidGeometry("dimension exceeds i16".into()))?;
    }
    dim[4] = i16::try_from(n_ch).map_err(|_| Error::InvalidGeometry("too many channels".into()))?;
    for (d, v) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * d..], *v);
    }
    LittleEndian::write_i16(&mut hdr[70..], datatype);
    LittleEndian::write_i16(&mut hdr[72..], (bytes_per * 8) as i16);
    let mut pixdim = [1f32; 8];
    for a in 0..3 {
        pixdim[a + 1] = g.spacing()[a] as f32;
    }
    for (d, v) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * d..], *v);
    }
    LittleEndian::write_f32(&mut hdr[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..], 1.0);
    LittleEndian::write_f32(&mut hdr[116..], 0.0);
    hdr[123] = 2 | 8; // mm, seconds

    let names: Vec<&str> = vol.channels.iter().map(|c| c.name.as_str()).collect();
    let descrip = format!("{CHANNEL_TAG}{}", names.join(","));
    if n_ch > 1 && descrip.len() < 80 {
        hdr[148..148 + descrip.len()].copy_from_slice(descrip.as_bytes());
    }
    LittleEndian::write_i16(&mut hdr[252..], 0);
    LittleEndian::write_i16(&mut hdr[254..], 1);
    let a = g.affine();
    for row in 0..3 {
        for col in 0..4 {
            LittleEndian::write_f32(&mut hdr[280 + 16 * row + 4 * col..], a[(row, col)] as f32);
        }
    }
    hdr[344..348].copy_from_slice(b"n+1\0");
    out.extend_from_slice(&hdr);
    out.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);

    for c in &vol.channels {
        match &c.data {
            VoxelData::Int16(v) => v.iter().for_each(|x| out.write_i16::<LittleEndian>(*x).unwrap()),
            VoxelData::Float32(v) => v.iter().for_each(|x| out.write_f32::<LittleEndian>(*x).unwrap()),
            VoxelData::Complex64(v) => v.iter().for_each(|z| {
                out.write_f32::<LittleEndian>(z.re).unwrap();
                out.write_f32::<LittleEndian>(z.im).unwrap();
            }),
        }
    }
    Ok(out)
}
