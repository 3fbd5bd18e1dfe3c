//! Little-endian binary checkpoints.
//!
//! Layout: magic `"MLCKPT01"`, `u32` version, `u64` completed epochs, `u32`
//! length plus UTF-8 text of the model config (config-file syntax), `u32`
//! block count, then the blocks. A block is `u32` name length, name, `u32`
//! rank, `rank` x `u64` dims, and the `f64` payload. Parameter blocks come
//! first under their own names, followed by `adam.m.<name>` and
//! `adam.v.<name>` for every parameter and one `adam.t` block holding the
//! per-parameter step counts.

use std::fs;
use std::path::Path;

use crate::config::{to_text, ModelConfig};
use crate::datagen::format::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MLCKPT01";
pub const VERSION: u32 = 1;

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    let text = to_text(&ck.config);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let p = ck.params.len();
    out.extend_from_slice(&((3 * p + 1) as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        put_block(&mut out, name, t);
    }
    for (i, (name, _)) in ck.params.iter().enumerate() {
        put_block(&mut out, &format!("adam.m.{name}"), &ck.adam.m[i]);
        put_block(&mut out, &format!("adam.v.{name}"), &ck.adam.v[i]);
    }
    let steps = Tensor::new(&[p.max(1)], ck.adam.steps.iter().map(|&s| s as f64).chain((p == 0).then_some(0.0)).collect())
        .expect("length matches");
    put_block(&mut out, "adam.t", &steps);
    out
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

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> std::result::Result<(String, Tensor), String> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| "block name is not UTF-8".to_string())?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(format!("block {name}: implausible rank {rank}"));
        }
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dims overflow")?;
        let bytes = self.take(count.checked_mul(8).ok_or("dims overflow")?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&dims, data).map_err(|e| format!("block {name}: {e}"))?;
        Ok((name, t))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<(ModelConfig, u64, Vec<(String, Tensor)>), String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let epoch = r.u64()?;
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| "config block is not UTF-8")?;
    let config = ModelConfig::from_text(text).map_err(|e| format!("config block: {e}"))?;
    let count = r.u32()? as usize;
    let blocks = (0..count).map(|_| r.block()).collect::<std::result::Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((config, epoch, blocks))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let (config, epoch, blocks) = decode_inner(bytes).map_err(|d| Error::format(path, d))?;
    let expected = Model::new(&config);
    let p = expected.params.len();
    if blocks.len() != 3 * p + 1 {
        return Err(Error::format(path, format!("{} blocks, expected {}", blocks.len(), 3 * p + 1)));
    }
    let mut it = blocks.into_iter();
    let mut params = ParamStore::new();
    for _ in 0..p {
        let (name, t) = it.next().expect("counted");
        params.insert(name, t);
    }
    let model = Model::from_params(&config, params)?;
    let (mut m, mut v) = (Vec::with_capacity(p), Vec::with_capacity(p));
    for (name, t) in model.params.iter() {
        for (prefix, dst) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
            let (bname, bt) = it.next().expect("counted");
            if bname != format!("{prefix}{name}") || bt.shape() != t.shape() {
                return Err(Error::format(path, format!("unexpected block {bname} {:?}", bt.shape())));
            }
            dst.push(bt);
        }
    }
    let (tname, steps) = it.next().expect("counted");
    if tname != "adam.t" || steps.len() != p.max(1) {
        return Err(Error::format(path, format!("unexpected block {tname} {:?}", steps.shape())));
    }
    let steps = steps.data()[..p].iter().map(|&s| s as u64).collect();
    Ok(Checkpoint { config, params: model.params, adam: Adam { m, v, steps }, epoch })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::geometry::Camera;

    fn config() -> ModelConfig {
        ModelConfig { n: 3, image_width: 16, image_height: 16, channels: 4, stage_width: 4, depth_width: 4, seed: 9, ..ModelConfig::default() }
    }

    fn trained_like() -> Checkpoint {
        let model = Model::new(&config());
        let mut ck = Checkpoint::fresh(&model);
        ck.epoch = 7;
        for (i, m) in ck.adam.m.iter_mut().enumerate() {
            *m = random_tensor(m.shape(), -1.0, 1.0, i as u64);
        }
        for (i, s) in ck.adam.steps.iter_mut().enumerate() {
            *s = 3 * i as u64;
        }
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = trained_like();
        let bytes = encode(&ck);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn reloaded_model_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = trained_like();
        save(&ck, &path).unwrap();
        let a = ck.model().unwrap();
        let b = load(&path).unwrap().model().unwrap();
        let image = random_tensor(&[16, 16, 3], 0.0, 1.0, 1);
        let cam = Camera::centered(20.0, 16, 16).unwrap();
        let (pa, pb) = (a.predict(&image, &cam).unwrap(), b.predict(&image, &cam).unwrap());
        assert_eq!(pa.mesh3d, pb.mesh3d);
        assert_eq!(pa.mesh2d, pb.mesh2d);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&trained_like());
        let p = Path::new("x");
        assert!(decode(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::Format { .. })));
        let mut other = encode(&Checkpoint::fresh(&Model::new(&ModelConfig { t_max: 2, ..config() })));
        other.truncate(other.len() - 8);
        assert!(decode(&other, p).is_err());
    }
}
