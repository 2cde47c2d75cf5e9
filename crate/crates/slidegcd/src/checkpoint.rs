//! Checkpoint serialization: magic "SGCK", a u32 version, then
//! length-prefixed named sections (config, params, buffer, log) in fixed
//! order. All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pipeline::{Checkpoint, LogRecord, ModelParams, TrainConfig};
use crate::rehearsal::{BufferEntry, NodeBuffer};
use rand::SeedableRng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: [u8; 4] = *b"SGCK";
pub const CKPT_VERSION: u32 = 1;

const SECTIONS: [&str; 4] = ["config", "params", "buffer", "log"];

fn write_section(w: &mut impl Write, name: &str, payload: &[u8]) -> Result<()> {
    w.write_all(&[name.len() as u8])?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

fn encode_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend((m.rows() as u32).to_le_bytes());
    out.extend((m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load {
                section: self.section.into(),
                msg: format!("truncated: wanted {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| Error::Load {
            section: self.section.into(),
            msg: format!("matrix shape {rows}x{cols} overflows"),
        })?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64()?);
        }
        Matrix::new(rows, cols, data).map_err(|e| Error::Load {
            section: self.section.into(),
            msg: e.to_string(),
        })
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Load {
                section: self.section.into(),
                msg: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mats: Vec<&Matrix> = params
        .trainable()
        .into_iter()
        .chain(std::iter::once(&params.w_p))
        .collect();
    let mut out = Vec::new();
    out.extend((mats.len() as u32).to_le_bytes());
    for m in mats {
        encode_matrix(&mut out, m);
    }
    out
}

fn decode_params(buf: &[u8], config: &TrainConfig) -> Result<ModelParams> {
    let mut cur = Cursor { buf, pos: 0, section: "params" };
    let count = cur.u32()? as usize;
    // rebuild a correctly-shaped skeleton, then overwrite every matrix
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(config, &mut rng);
    let trainable_count = params.trainable().len();
    if count != trainable_count + 1 {
        return Err(Error::Load {
            section: "params".into(),
            msg: format!("expected {} matrices, found {count}", trainable_count + 1),
        });
    }
    let mut fill = |slot: &mut Matrix| -> Result<()> {
        let m = cur.matrix()?;
        if m.shape() != slot.shape() {
            return Err(Error::Load {
                section: "params".into(),
                msg: format!("matrix shape {:?} does not match config ({:?})", m.shape(), slot.shape()),
            });
        }
        *slot = m;
        Ok(())
    };
    for slot in params.trainable_mut() {
        fill(slot)?;
    }
    fill(&mut params.w_p)?;
    cur.finish()?;
    Ok(params)
}

fn encode_buffer(buffer: &NodeBuffer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((buffer.capacity() as u64).to_le_bytes());
    out.extend((buffer.classes() as u32).to_le_bytes());
    out.extend((buffer.dim() as u64).to_le_bytes());
    out.extend((buffer.len() as u64).to_le_bytes());
    for c in 0..buffer.classes() {
        for e in buffer.entries(c) {
            out.extend((e.label as u32).to_le_bytes());
            out.extend(e.counter.to_le_bytes());
            for &v in &e.embedding {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}

fn decode_buffer(buf: &[u8]) -> Result<NodeBuffer> {
    let mut cur = Cursor { buf, pos: 0, section: "buffer" };
    let capacity = cur.u64()? as usize;
    let classes = cur.u32()? as usize;
    let dim = cur.u64()? as usize;
    let count = cur.u64()? as usize;
    if count > capacity {
        return Err(Error::Load {
            section: "buffer".into(),
            msg: format!("{count} entries exceed capacity {capacity}"),
        });
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let label = cur.u32()? as usize;
        let counter = cur.u64()?;
        let mut embedding = Vec::with_capacity(dim);
        for _ in 0..dim {
            embedding.push(cur.f64()?);
        }
        entries.push(BufferEntry { embedding, label, counter });
    }
    cur.finish()?;
    NodeBuffer::from_entries(capacity, classes, dim, entries)
        .map_err(|e| Error::Load { section: "buffer".into(), msg: e.to_string() })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    write_section(&mut w, "config", &serde_json::to_vec(&ckpt.config)?)?;
    write_section(&mut w, "params", &encode_params(&ckpt.params))?;
    write_section(&mut w, "buffer", &encode_buffer(&ckpt.buffer))?;
    write_section(&mut w, "log", &serde_json::to_vec(&ckpt.log)?)?;
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], section: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Load {
        section: section.into(),
        msg: "unexpected end of file".into(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Load { section: "magic".into(), msg: format!("bad magic {magic:?}") });
    }
    let mut ver = [0u8; 4];
    read_exact_or(&mut r, &mut ver, "version")?;
    let version = u32::from_le_bytes(ver);
    if version != CKPT_VERSION {
        return Err(Error::Load {
            section: "version".into(),
            msg: format!("unsupported version {version} (expected {CKPT_VERSION})"),
        });
    }

    let mut payloads: Vec<Vec<u8>> = Vec::with_capacity(SECTIONS.len());
    for expected in SECTIONS {
        let mut nlen = [0u8; 1];
        read_exact_or(&mut r, &mut nlen, expected)?;
        let mut name = vec![0u8; nlen[0] as usize];
        read_exact_or(&mut r, &mut name, expected)?;
        let name = String::from_utf8(name).map_err(|_| Error::Load {
            section: expected.into(),
            msg: "section name is not UTF-8".into(),
        })?;
        if name != expected {
            return Err(Error::Load {
                section: expected.into(),
                msg: format!("found section `{name}` where `{expected}` was expected"),
            });
        }
        let mut plen = [0u8; 8];
        read_exact_or(&mut r, &mut plen, expected)?;
        let mut payload = vec![0u8; u64::from_le_bytes(plen) as usize];
        read_exact_or(&mut r, &mut payload, expected)?;
        payloads.push(payload);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Load {
            section: "log".into(),
            msg: format!("{} trailing bytes after final section", rest.len()),
        });
    }

    let config: TrainConfig = serde_json::from_slice(&payloads[0])
        .map_err(|e| Error::Load { section: "config".into(), msg: e.to_string() })?;
    config.validate().map_err(|e| Error::Load { section: "config".into(), msg: e.to_string() })?;
    let params = decode_params(&payloads[1], &config)?;
    let buffer = decode_buffer(&payloads[2])?;
    if buffer.classes() != config.classes
        || buffer.capacity() != config.buffer_len
        || buffer.dim() != config.d_s
    {
        return Err(Error::Load {
            section: "buffer".into(),
            msg: "buffer geometry does not match config".into(),
        });
    }
    let log: Vec<LogRecord> = serde_json::from_slice(&payloads[3])
        .map_err(|e| Error::Load { section: "log".into(), msg: e.to_string() })?;
    Ok(Checkpoint { config, params, buffer, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::pipeline::{evaluate, train};
    use tempfile::tempdir;

    fn trained() -> (Checkpoint, crate::data::Dataset) {
        let spec = crate::data::SyntheticSpec {
            class_count: 2,
            train_per_class: 24,
            test_per_class: 8,
            patch_dim: 8,
            patches_min: 4,
            patches_max: 10,
            signal_fraction: 0.9,
            mean_scale: 3.0,
            cov_scale: 1.0,
            seed: 21,
        };
        let dataset = generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            d_patch: 8,
            d_s: 8,
            d_proj: 4,
            d_attn: 8,
            buffer_len: 16,
            k: 3,
            batch_size: 8,
            warmup_epochs: 2,
            total_epochs: 5,
            ..TrainConfig::default()
        };
        (train(&config, &dataset).unwrap(), dataset)
    }

    #[test]
    fn round_trip_is_identity() {
        let (ckpt, dataset) = trained();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sgck");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.params, ckpt.params);
        assert_eq!(loaded.buffer, ckpt.buffer);
        assert_eq!(loaded.log, ckpt.log);

        let before = evaluate(&ckpt, &dataset, &dataset.test).unwrap();
        let after = evaluate(&loaded, &dataset, &dataset.test).unwrap();
        assert!((before.metrics.accuracy - after.metrics.accuracy).abs() <= 1e-7);
        assert!((before.metrics.macro_f1 - after.metrics.macro_f1).abs() <= 1e-7);
    }

    #[test]
    fn truncated_file_fails_without_partial_state() {
        let (ckpt, _) = trained();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sgck");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3usize, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let short = dir.path().join(format!("cut{cut}.sgck"));
            std::fs::write(&short, &bytes[..cut]).unwrap();
            assert!(load_checkpoint(&short).is_err(), "cut at {cut} should fail");
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let (ckpt, _) = trained();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sgck");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        let p1 = dir.path().join("magic.sgck");
        std::fs::write(&p1, &corrupt).unwrap();
        match load_checkpoint(&p1) {
            Err(Error::Load { section, .. }) => assert_eq!(section, "magic"),
            other => panic!("expected magic load error, got {other:?}"),
        }
        bytes[4] = 9;
        let p2 = dir.path().join("version.sgck");
        std::fs::write(&p2, &bytes).unwrap();
        match load_checkpoint(&p2) {
            Err(Error::Load { section, .. }) => assert_eq!(section, "version"),
            other => panic!("expected version load error, got {other:?}"),
        }
    }

    #[test]
    fn save_is_deterministic_bytes() {
        let (ckpt, _) = trained();
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.sgck");
        let p2 = dir.path().join("b.sgck");
        save_checkpoint(&ckpt, &p1).unwrap();
        save_checkpoint(&ckpt, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
