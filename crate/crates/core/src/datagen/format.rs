//! Little-endian binary sample records.
//!
//! A split file is `"MLSPLT01"`, a `u64` record count, then the records. Each
//! record is:
//!
//! | field | type |
//! |---|---|
//! | magic `"MLSMPL01"` | 8 bytes |
//! | `fu, fv, uc, vc` | 4 x f64 |
//! | camera width, height | 2 x u32 |
//! | `N` | u32 |
//! | `X*`, row-major vertices | `3 N^2` x f64 |
//! | `U*` | `2 N^2` x f64 |
//! | image width, height | 2 x u32 |
//! | RGB payload, row-major | `3 W H` x u8 |
//! | texture kind (0 checker, 1 stripes, 2 noise-rich, 3 plain) | u8 |
//! | texture id, texture seed | u32, u64 |
//! | material id | u8 |
//! | flags (bit 0 occluded, bit 1 blurred) | u8 |
//! | sample seed | u64 |
//! | light position, intensity, ambient | 5 x f64 |
//! | albedo | f64 |
//!
//! Pixel bytes are `round(255 v)` of the clamped float image.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::datagen::render::Light;
use crate::datagen::sample::{Sample, SampleMeta};
use crate::datagen::texture::TextureKind;
use crate::error::{Error, Result};
use crate::geometry::{Camera, MeshGrid2D, MeshGrid3D};

pub const SAMPLE_MAGIC: &[u8; 8] = b"MLSMPL01";
pub const SPLIT_MAGIC: &[u8; 8] = b"MLSPLT01";

fn kind_code(k: TextureKind) -> u8 {
    match k {
        TextureKind::Checker => 0,
        TextureKind::Stripes => 1,
        TextureKind::NoiseRich => 2,
        TextureKind::Plain => 3,
    }
}

pub fn encode_sample(s: &Sample, out: &mut Vec<u8>) {
    let f = |out: &mut Vec<u8>, x: f64| out.extend_from_slice(&x.to_le_bytes());
    let u = |out: &mut Vec<u8>, x: u32| out.extend_from_slice(&x.to_le_bytes());
    out.extend_from_slice(SAMPLE_MAGIC);
    let c = &s.camera;
    for x in [c.fu, c.fv, c.uc, c.vc] {
        f(out, x);
    }
    u(out, c.width);
    u(out, c.height);
    u(out, s.mesh3d.n() as u32);
    for p in s.mesh3d.vertices() {
        p.iter().for_each(|&x| f(out, x));
    }
    for p in s.mesh2d.vertices() {
        p.iter().for_each(|&x| f(out, x));
    }
    u(out, s.width as u32);
    u(out, s.height as u32);
    out.extend_from_slice(&s.image);
    let m = &s.meta;
    out.push(kind_code(m.texture_kind));
    u(out, m.texture_id);
    out.extend_from_slice(&m.texture_seed.to_le_bytes());
    out.push(m.material_id);
    out.push(m.occluded as u8 | (m.blurred as u8) << 1);
    out.extend_from_slice(&m.seed.to_le_bytes());
    for x in m.light.position {
        f(out, x);
    }
    f(out, m.light.intensity);
    f(out, m.light.ambient);
    f(out, m.albedo);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len())
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(r: &mut Reader) -> std::result::Result<Sample, String> {
    if r.take(8)? != SAMPLE_MAGIC {
        return Err(format!("bad sample magic at offset {}", r.pos - 8));
    }
    let (fu, fv, uc, vc) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let camera = Camera::new(fu, fv, uc, vc, r.u32()?, r.u32()?).map_err(|e| e.to_string())?;
    let n = r.u32()? as usize;
    if !(2..=4096).contains(&n) {
        return Err(format!("implausible grid side {n}"));
    }
    let x = (0..n * n).map(|_| Ok([r.f64()?, r.f64()?, r.f64()?])).collect::<std::result::Result<Vec<_>, String>>()?;
    let uv = (0..n * n).map(|_| Ok([r.f64()?, r.f64()?])).collect::<std::result::Result<Vec<_>, String>>()?;
    let (width, height) = (r.u32()? as usize, r.u32()? as usize);
    let image = r.take(3 * width * height)?.to_vec();
    let texture_kind = match r.u8()? {
        0 => TextureKind::Checker,
        1 => TextureKind::Stripes,
        2 => TextureKind::NoiseRich,
        3 => TextureKind::Plain,
        k => return Err(format!("unknown texture kind {k}")),
    };
    let texture_id = r.u32()?;
    let texture_seed = r.u64()?;
    let material_id = r.u8()?;
    let flags = r.u8()?;
    let seed = r.u64()?;
    let light = Light { position: [r.f64()?, r.f64()?, r.f64()?], intensity: r.f64()?, ambient: r.f64()? };
    let albedo = r.f64()?;
    let meta = SampleMeta {
        texture_kind,
        texture_id,
        texture_seed,
        material_id,
        occluded: flags & 1 != 0,
        blurred: flags & 2 != 0,
        seed,
        light,
        albedo,
    };
    Ok(Sample {
        width,
        height,
        image,
        mesh3d: MeshGrid3D::new(n, x).map_err(|e| e.to_string())?,
        mesh2d: MeshGrid2D::new(n, uv).map_err(|e| e.to_string())?,
        camera,
        meta,
    })
}

pub fn decode_sample(bytes: &[u8]) -> std::result::Result<Sample, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let s = decode(&mut r)?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(s)
}

pub fn encode_split(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SPLIT_MAGIC);
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        encode_sample(s, &mut out);
    }
    out
}

pub fn decode_split(bytes: &[u8]) -> std::result::Result<Vec<Sample>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != SPLIT_MAGIC {
        return Err("not a split file (bad magic)".into());
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        out.push(decode(&mut r)?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_split(path: &Path, samples: &[Sample]) -> Result<()> {
    write_atomic(path, &encode_split(samples))
}

pub fn read_split(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_split(&bytes).map_err(|d| Error::format(path, d))
}
