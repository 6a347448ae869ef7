//! On-disk formats: DMAP rasters and checkpoint blobs.
//!
//! DMAP is a trivially parseable raster container: the magic bytes `DMAP`,
//! three little-endian u32 fields (width, height, channels), then
//! width·height·channels little-endian f32 values, row-major,
//! channel-minor.
//!
//! A checkpoint is a manifest header followed by named DMAP records:
//!
//! ```text
//! "BGCK" u32(version=1)
//! u32(config_len) config bytes         — canonical ModelConfig text
//! u32(digest_len) digest bytes         — hex SHA-256 of frozen params
//! u32(n_records)
//!   per record: u32(name_len) name, u32(rank) rank×u32 dims, u64 offset
//! record payloads                      — DMAP blobs, back to back
//! ```
//!
//! Offsets are absolute file positions. f32 payloads round parameters to
//! f32 precision; checkpoints are for inference and evaluation, not for
//! resuming optimizer state.

use std::fs;
use std::path::Path;

use crate::align::Raster;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gate::{GateParams, MlpParams};
use crate::pipeline::StubModel;
use crate::tensor::Tensor;

const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const CKPT_MAGIC: &[u8; 4] = b"BGCK";
const CKPT_VERSION: u32 = 1;

/// Serialize a raster as DMAP bytes (f32 payload).
pub fn dmap_bytes(raster: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + raster.data.len() * 4);
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&(raster.w as u32).to_le_bytes());
    out.extend_from_slice(&(raster.h as u32).to_le_bytes());
    out.extend_from_slice(&(raster.c as u32).to_le_bytes());
    for v in &raster.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_dmap(path: &Path, raster: &Raster) -> Result<()> {
    fs::write(path, dmap_bytes(raster))?;
    Ok(())
}

/// Parse DMAP bytes back into a raster (values widened to f64).
pub fn dmap_from_bytes(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "DMAP header needs 16 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != DMAP_MAGIC {
        return Err(Error::Format("bad DMAP magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let w = u32_at(4) as usize;
    let h = u32_at(8) as usize;
    let c = u32_at(12) as usize;
    let count = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| Error::Format("DMAP dimensions overflow".into()))?;
    let expected = 16 + count * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "DMAP {w}×{h}×{c} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = 16 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Raster::new(h, w, c, data)
}

pub fn read_dmap(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path)?;
    dmap_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Tensor → DMAP raster: rank 1 becomes 1×n, rank 2 becomes rows×cols,
/// both single-channel.
fn tensor_raster(t: &Tensor) -> Raster {
    let (h, w) = match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => (other[0], t.numel() / other[0]),
    };
    Raster::new(h, w, 1, t.data().to_vec()).expect("tensor raster")
}

struct RecordMeta {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Write config, frozen digest, and the four trainable gates.
pub fn write_checkpoint(path: &Path, model: &StubModel) -> Result<()> {
    let config_text = model.config().to_text();
    let digest = model.frozen_digest();

    let mut records: Vec<(String, &Tensor)> = Vec::new();
    for (i, gate) in model.gates().iter().enumerate() {
        for (name, t) in gate.named_tensors() {
            records.push((format!("gate{i}.{name}"), t));
        }
    }

    // Manifest size must be known before offsets can be assigned.
    let mut manifest_len = 4 + 4; // magic + version
    manifest_len += 4 + config_text.len();
    manifest_len += 4 + digest.len();
    manifest_len += 4; // record count
    for (name, t) in &records {
        manifest_len += 4 + name.len() + 4 + 4 * t.shape().len() + 8;
    }

    let mut payloads: Vec<Vec<u8>> = Vec::with_capacity(records.len());
    let mut metas: Vec<RecordMeta> = Vec::with_capacity(records.len());
    let mut offset = manifest_len as u64;
    for (name, t) in &records {
        let blob = dmap_bytes(&tensor_raster(t));
        metas.push(RecordMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += blob.len() as u64;
        payloads.push(blob);
    }

    let mut out = Vec::with_capacity(offset as usize);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(digest.len() as u32).to_le_bytes());
    out.extend_from_slice(digest.as_bytes());
    out.extend_from_slice(&(metas.len() as u32).to_le_bytes());
    for meta in &metas {
        out.extend_from_slice(&(meta.name.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.name.as_bytes());
        out.extend_from_slice(&(meta.shape.len() as u32).to_le_bytes());
        for d in &meta.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&meta.offset.to_le_bytes());
    }
    debug_assert_eq!(out.len(), manifest_len);
    for blob in payloads {
        out.extend_from_slice(&blob);
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::Format(format!("unreasonable string length {len}")));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

/// Rebuild a model from a checkpoint: the config regenerates every frozen
/// parameter, the stored digest guards against a mismatched or tampered
/// file, and the gate records replace the trainable gates.
pub fn read_checkpoint(path: &Path) -> Result<StubModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_text = r.string()?;
    let digest = r.string()?;
    let cfg = ModelConfig::parse(&config_text)
        .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let mut model = StubModel::new(cfg.clone())?;
    if model.frozen_digest() != digest {
        return Err(Error::Format(
            "frozen-parameter digest does not match the embedded config".into(),
        ));
    }

    let n_records = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("record {name}: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()? as usize;
        if offset > bytes.len() {
            return Err(Error::Format(format!("record {name}: offset out of range")));
        }
        let numel: usize = shape.iter().product();
        let blob_len = 16 + numel * 4;
        if offset + blob_len > bytes.len() {
            return Err(Error::Format(format!(
                "record {name}: payload out of range"
            )));
        }
        let raster = dmap_from_bytes(&bytes[offset..offset + blob_len])
            .map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        let tensor = Tensor::new(shape, raster.data)?;
        tensors.push((name, tensor));
    }

    let gates = gates_from_records(&cfg, &tensors)?;
    model.set_gates(gates)?;
    Ok(model)
}

fn gates_from_records(cfg: &ModelConfig, tensors: &[(String, Tensor)]) -> Result<Vec<GateParams>> {
    let find = |name: &str| -> Result<Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("checkpoint is missing record {name}")))
    };
    let expect_shape = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "record {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(())
    };
    let (c, d, hidden) = (cfg.channels, cfg.proj_dim, cfg.hidden);
    let mut gates = Vec::with_capacity(4);
    for i in 0..4 {
        let grab = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
            let name = format!("gate{i}.{suffix}");
            let t = find(&name)?;
            expect_shape(&name, &t, shape)?;
            Ok(t.with_grad())
        };
        let mlp = |prefix: &str| -> Result<MlpParams> {
            Ok(MlpParams {
                w1: grab(&format!("{prefix}.mlp.w1"), &[d, hidden])?,
                b1: grab(&format!("{prefix}.mlp.b1"), &[hidden])?,
                w2: grab(&format!("{prefix}.mlp.w2"), &[hidden, c])?,
                b2: grab(&format!("{prefix}.mlp.b2"), &[c])?,
            })
        };
        gates.push(GateParams {
            wq_c: grab("cross.wq", &[c, d])?,
            wk_c: grab("cross.wk", &[c, d])?,
            wv_c: grab("cross.wv", &[c, d])?,
            mlp_c: mlp("cross")?,
            wq_s: grab("self.wq", &[c, d])?,
            wk_s: grab("self.wk", &[c, d])?,
            wv_s: grab("self.wv", &[c, d])?,
            mlp_s: mlp("self")?,
        });
    }
    Ok(gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("briges-io-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.channels = 4;
        cfg.proj_dim = 4;
        cfg.hidden = 8;
        cfg.grids = [(3, 3); 4];
        cfg.semantic_grid = (5, 5);
        cfg.out_h = 8;
        cfg.out_w = 8;
        cfg.latent_dim = 2;
        cfg.model_seed = 11;
        cfg
    }

    #[test]
    fn dmap_round_trip_at_f32_precision() {
        let mut rng = Prng::new(1);
        let raster =
            Raster::new(3, 5, 2, (0..30).map(|_| rng.uniform(-4.0, 4.0)).collect()).unwrap();
        let back = dmap_from_bytes(&dmap_bytes(&raster)).unwrap();
        assert_eq!((back.h, back.w, back.c), (3, 5, 2));
        for (a, b) in raster.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
            assert!((a - b).abs() <= (*a as f32).abs() as f64 * 1e-7 + 1e-7);
        }
    }

    #[test]
    fn dmap_rejects_malformed_bytes() {
        assert!(matches!(dmap_from_bytes(b"DMAP"), Err(Error::Format(_))));
        let mut bad = dmap_bytes(&Raster::new(1, 2, 1, vec![0.0, 1.0]).unwrap());
        bad[0] = b'X';
        assert!(matches!(dmap_from_bytes(&bad), Err(Error::Format(_))));
        let mut short = dmap_bytes(&Raster::new(1, 2, 1, vec![0.0, 1.0]).unwrap());
        short.pop();
        assert!(matches!(dmap_from_bytes(&short), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip_preserves_gates_at_f32() {
        let dir = tmpdir("roundtrip");
        let path = dir.join("model.bgck");
        let model = StubModel::new(tiny()).unwrap();
        write_checkpoint(&path, &model).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (a, b) in model.gates().iter().zip(loaded.gates()) {
            for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
                assert_eq!(ta.shape(), tb.shape());
                assert!(tb.requires_grad());
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn checkpoint_writes_are_byte_deterministic() {
        let dir = tmpdir("determinism");
        let a = dir.join("a.bgck");
        let b = dir.join("b.bgck");
        let model = StubModel::new(tiny()).unwrap();
        write_checkpoint(&a, &model).unwrap();
        write_checkpoint(&b, &model).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tmpdir("corrupt");
        let path = dir.join("model.bgck");
        let model = StubModel::new(tiny()).unwrap();
        write_checkpoint(&path, &model).unwrap();
        let good = fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'Z';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));

        // Truncated payload.
        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));

        // Tampered config (model_seed changes the frozen digest).
        let text = String::from_utf8_lossy(&good).to_string();
        let pos = text.find("model_seed = 11").unwrap();
        let mut tampered = good.clone();
        tampered[pos..pos + 15].copy_from_slice(b"model_seed = 12");
        fs::write(&path, &tampered).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn missing_file_is_io_error() {
        let missing = std::env::temp_dir().join("briges-io-definitely-missing.bgck");
        assert!(matches!(read_checkpoint(&missing), Err(Error::Io(_))));
        assert!(matches!(
            read_dmap(&std::env::temp_dir().join("briges-io-missing.dmap")),
            Err(Error::Io(_))
        ));
    }
}
