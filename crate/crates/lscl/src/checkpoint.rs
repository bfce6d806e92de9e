//! Checkpoint persistence.
//!
//! Binary layout: magic "LSCL", version u32 LE (= 1), entry count u32 LE,
//! then per tensor: name length u32 LE, UTF-8 name, rank u32 LE, dims
//! u32 LE x rank, float64 LE payload. Model config and optimizer state are
//! stored as reserved-name tensors so the format stays homogeneous.

use crate::error::{LsclError, Result};
use crate::optim::{OptKind, OptState};
use crate::tensor::Tensor;
use crate::unet::{Model, UNetConfig};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LSCL";
const VERSION: u32 = 1;
const CONFIG_KEY: &str = "__config";
const OPT_META_KEY: &str = "__opt.meta";

pub fn save_checkpoint(model: &Model, opt: Option<&OptState>, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    let cfg = &model.config;
    entries.push((
        CONFIG_KEY.to_string(),
        Tensor::new(
            vec![4],
            vec![
                cfg.in_channels as f64,
                cfg.num_classes as f64,
                cfg.base_channels as f64,
                cfg.depth as f64,
            ],
        ),
    ));
    for (n, t) in &model.params {
        entries.push((format!("param.{n}"), t.clone()));
    }
    if let Some(opt) = opt {
        let meta = match opt.kind {
            OptKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => vec![0.0, lr, beta1, beta2, eps, opt.step as f64],
            OptKind::SgdMomentum { lr, momentum } => {
                vec![1.0, lr, momentum, 0.0, 0.0, opt.step as f64]
            }
        };
        entries.push((OPT_META_KEY.to_string(), Tensor::new(vec![6], meta)));
        for (n, t) in &opt.m {
            entries.push((format!("__opt.m.{n}"), t.clone()));
        }
        for (n, t) in &opt.v {
            entries.push((format!("__opt.v.{n}"), t.clone()));
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| LsclError::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| LsclError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<OptState>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| LsclError::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(LsclError::CheckpointFormat(format!(
                "truncated file: need {} bytes at offset {}, have {}",
                n,
                pos,
                bytes.len()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(LsclError::CheckpointFormat("bad magic bytes".into()));
    }
    let version = read_u32(&mut pos)?;
    if version != VERSION {
        return Err(LsclError::CheckpointFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(&mut pos)? as usize;
    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| LsclError::CheckpointFormat("entry name is not UTF-8".into()))?
            .to_string();
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut pos, n * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)));
    }
    if pos != bytes.len() {
        return Err(LsclError::CheckpointFormat(format!(
            "{} trailing bytes after last entry",
            bytes.len() - pos
        )));
    }

    let find = |key: &str| entries.iter().find(|(n, _)| n == key).map(|(_, t)| t);
    let cfg_t = find(CONFIG_KEY)
        .ok_or_else(|| LsclError::CheckpointFormat("missing config entry".into()))?;
    let config = UNetConfig {
        in_channels: cfg_t.data[0] as usize,
        num_classes: cfg_t.data[1] as usize,
        base_channels: cfg_t.data[2] as usize,
        depth: cfg_t.data[3] as usize,
    };
    let mut params: Vec<(String, Tensor)> = entries
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("param.").map(|s| (s.to_string(), t.clone())))
        .collect();
    params.sort_by(|a, b| a.0.cmp(&b.0));
    let model = Model { config, params };

    let opt = match find(OPT_META_KEY) {
        None => None,
        Some(meta) => {
            let kind = match meta.data[0] as u32 {
                0 => OptKind::Adam {
                    lr: meta.data[1],
                    beta1: meta.data[2],
                    beta2: meta.data[3],
                    eps: meta.data[4],
                },
                1 => OptKind::SgdMomentum {
                    lr: meta.data[1],
                    momentum: meta.data[2],
                },
                k => {
                    return Err(LsclError::CheckpointFormat(format!(
                        "unknown optimizer kind {k}"
                    )))
                }
            };
            let collect = |prefix: &str| {
                let mut v: Vec<(String, Tensor)> = entries
                    .iter()
                    .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                    .collect();
                v.sort_by(|a, b| a.0.cmp(&b.0));
                v
            };
            Some(OptState {
                kind,
                step: meta.data[5] as u64,
                m: collect("__opt.m."),
                v: collect("__opt.v."),
            })
        }
    };
    Ok((model, opt))
}

/// Byte size the format implies for a given entry list; used to cross-check
/// emitted files against the layout definition.
pub fn expected_file_size(entries: &[(String, Vec<usize>)]) -> usize {
    let mut size = 4 + 4 + 4;
    for (name, shape) in entries {
        size += 4 + name.len() + 4 + 4 * shape.len() + 8 * shape.iter().product::<usize>();
    }
    size
}
