//! Single-file checkpoints.
//!
//! Layout (little-endian): `b"GLPN"`, version `u32`, entry count `u32`,
//! then per entry the name length `u32`, UTF-8 name, rank `u32`, one `u32`
//! per dim and the `f32` payload; finally a CRC32 of every preceding byte.
//!
//! Besides the network tensors a checkpoint carries `@config` (the model
//! config text, one byte per element), BN running statistics under
//! `@running/` and, optionally, Adam state under `@adam/`.

use std::collections::HashSet;
use std::path::Path;

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::model::GlpDepth;
use crate::nn::ParamKind;
use crate::train::Adam;

pub const MAGIC: &[u8; 4] = b"GLPN";
pub const VERSION: u32 = 1;

const CONFIG_KEY: &str = "@config";
const ADAM_STEP: &str = "@adam/step";
const ADAM_M: &str = "@adam/m/";
const ADAM_V: &str = "@adam/v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("unexpected end of data reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Verifies the CRC, then parses every entry.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 {
        return Err(Error::Crc {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a GLPN checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at + 4,
                message: "name is not UTF-8".into(),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Parse {
                offset: at,
                message: format!("duplicate entry '{name}'"),
            });
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n.saturating_mul(4), "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::Parse {
            offset: r.pos,
            message: "trailing bytes after last entry".into(),
        });
    }
    Ok(entries)
}

fn config_entry(cfg: &ModelConfig) -> Entry {
    let text = RunConfig {
        model: cfg.clone(),
        ..RunConfig::default()
    }
    .to_text();
    let data: Vec<f32> = text.bytes().map(|b| b as f32).collect();
    Entry {
        name: CONFIG_KEY.into(),
        dims: vec![data.len()],
        data,
    }
}

fn config_from(entry: &Entry) -> Result<ModelConfig> {
    let bytes: Vec<u8> = entry.data.iter().map(|&v| v as u8).collect();
    let text = String::from_utf8(bytes).map_err(|_| Error::CheckpointMismatch("@config is not UTF-8".into()))?;
    Ok(RunConfig::parse(&text)?.model)
}

/// Everything a checkpoint of `model` (and optionally its optimizer) holds,
/// in a fixed order.
pub fn entries(model: &GlpDepth, adam: Option<&Adam>) -> Vec<Entry> {
    let mut out = vec![config_entry(&model.config)];
    let store = model.params();
    for (_, name, t) in store.iter() {
        out.push(Entry {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }
    if let Some(adam) = adam {
        out.push(Entry {
            name: ADAM_STEP.into(),
            dims: vec![1],
            data: vec![adam.step as f32],
        });
        for (prefix, bufs) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
            for (id, t) in store.trainable() {
                out.push(Entry {
                    name: format!("{prefix}{}", store.name(id)),
                    dims: t.shape().to_vec(),
                    data: bufs[id.index()].clone(),
                });
            }
        }
    }
    out
}

/// Writes to a sibling temp file and renames it into place.
pub fn save(path: &Path, model: &GlpDepth, adam: Option<&Adam>) -> Result<()> {
    let bytes = encode(&entries(model, adam));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copies checkpoint tensors into `model` (and `adam` if given). Every name
/// and shape is checked before anything is written.
pub fn restore(entries: &[Entry], model: &mut GlpDepth, adam: Option<&mut Adam>) -> Result<()> {
    let store = model.params();
    let mut plan = Vec::new();
    let mut adam_plan = Vec::new();
    let mut seen = HashSet::new();
    let mut step = None;
    let mut file_cfg = None;
    for e in entries {
        if e.name == CONFIG_KEY {
            file_cfg = Some(config_from(e)?);
            continue;
        }
        if e.name == ADAM_STEP {
            step = e.data.first().map(|&s| s as u64);
            continue;
        }
        let (target, is_m) = if let Some(rest) = e.name.strip_prefix(ADAM_M) {
            (rest, Some(true))
        } else if let Some(rest) = e.name.strip_prefix(ADAM_V) {
            (rest, Some(false))
        } else {
            (e.name.as_str(), None)
        };
        let id = store
            .find(target)
            .ok_or_else(|| Error::CheckpointMismatch(format!("unknown tensor '{}'", e.name)))?;
        let want = store.get(id).shape();
        if want != e.dims.as_slice() || e.data.len() != store.get(id).numel() {
            return Err(Error::CheckpointMismatch(format!(
                "'{}' has dims {:?}, model expects {:?}",
                e.name, e.dims, want
            )));
        }
        match is_m {
            None => {
                seen.insert(id);
                plan.push((id, &e.data));
            }
            Some(m) => {
                if store.kind(id) != ParamKind::Trainable {
                    return Err(Error::CheckpointMismatch(format!(
                        "optimizer state for buffer '{}'",
                        e.name
                    )));
                }
                adam_plan.push((id, m, &e.data));
            }
        }
    }
    if let Some(id) = store.ids().find(|id| !seen.contains(id)) {
        return Err(Error::CheckpointMismatch(format!(
            "missing tensor '{}'",
            store.name(id)
        )));
    }
    if let Some(cfg) = file_cfg {
        if cfg != model.config {
            return Err(Error::CheckpointMismatch(
                "@config differs from the model config".into(),
            ));
        }
    }
    let store = model.params_mut();
    for (id, data) in plan {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }
    if let Some(adam) = adam {
        if let Some(step) = step {
            adam.reset(store);
            adam.step = step;
            for (id, m, data) in adam_plan {
                let buf = if m {
                    &mut adam.m[id.index()]
                } else {
                    &mut adam.v[id.index()]
                };
                buf.copy_from_slice(data);
            }
        }
    }
    Ok(())
}

/// Rebuilds a model from the config stored in the checkpoint.
pub fn load_model(path: &Path) -> Result<GlpDepth> {
    let entries = read(path)?;
    let cfg = entries
        .iter()
        .find(|e| e.name == CONFIG_KEY)
        .ok_or_else(|| Error::CheckpointMismatch("checkpoint has no @config entry".into()))
        .and_then(config_from)?;
    let mut model = GlpDepth::new(cfg, 0)?;
    restore(&entries, &mut model, None)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let e = vec![
            Entry {
                name: "a".into(),
                dims: vec![2, 1],
                data: vec![1.5, -0.0],
            },
            Entry {
                name: "b".into(),
                dims: vec![],
                data: vec![f32::MIN_POSITIVE],
            },
        ];
        let bytes = encode(&e);
        assert_eq!(&bytes[..4], b"GLPN");
        assert_eq!(decode(&bytes).unwrap(), e);
    }

    #[test]
    fn any_flipped_bit_fails_the_crc() {
        let bytes = encode(&[Entry {
            name: "w".into(),
            dims: vec![3],
            data: vec![1.0, 2.0, 3.0],
        }]);
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(matches!(decode(&bad), Err(Error::Crc { .. })), "byte {i}");
        }
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Crc { .. })));
        assert!(matches!(decode(&bytes[..2]), Err(Error::Crc { .. })));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let e = Entry {
            name: "w".into(),
            dims: vec![1],
            data: vec![0.0],
        };
        assert!(matches!(decode(&encode(&[e.clone(), e])), Err(Error::Parse { .. })));
    }
}
