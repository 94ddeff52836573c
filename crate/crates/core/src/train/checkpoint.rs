//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u32` header length, a JSON header
//! (config echo, seed, step, optimizer counters, tensor table), then every
//! tensor in table order as little-endian float32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelState, NetConfig, ParamSet, StyleCode, StyleLayer};

use super::{Adam, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"S2RCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A training state plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    train: Option<TrainConfig>,
    seed: u64,
    step: u64,
    opt_g_steps: Option<u64>,
    opt_d_steps: Option<u64>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: [usize; 4],
}

fn style_tensors(prefix: &str, s: &StyleCode, out: &mut Vec<(String, Tensor)>) {
    for (i, l) in s.layers.iter().enumerate() {
        let shape = [1, l.gamma.len(), 1, 1];
        out.push((format!("{prefix}.{i}.gamma"), Tensor::from_vec(shape, l.gamma.clone()).expect("1xCx1x1")));
        out.push((format!("{prefix}.{i}.beta"), Tensor::from_vec(shape, l.beta.clone()).expect("1xCx1x1")));
    }
}

fn model_tensors(m: &ModelState) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for set in [&m.encoder, &m.decoder, &m.dis_a, &m.dis_b] {
        out.extend(set.iter().map(|(n, t)| (n.to_string(), t.clone())));
    }
    style_tensors("style_a", &m.style_a, &mut out);
    style_tensors("style_b", &m.style_b, &mut out);
    out
}

fn optimizer_tensors(prefix: &str, opt: &Adam, names: &[&String], out: &mut Vec<(String, Tensor)>) {
    for (kind, ts) in [("m", &opt.m), ("v", &opt.v)] {
        for (n, t) in names.iter().zip(ts) {
            out.push((format!("{prefix}.{kind}.{n}"), t.clone()));
        }
    }
}

fn encode(header: &Header, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let payload: usize = tensors.iter().map(|(_, t)| 4 * t.numel()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes to a sibling temporary file, then renames over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn header_for(m: &ModelState, train: Option<&TrainConfig>, step: u64, opt: Option<(u64, u64)>, tensors: &[(String, Tensor)]) -> Header {
    Header {
        net: m.config.clone(),
        train: train.cloned(),
        seed: m.seed,
        step,
        opt_g_steps: opt.map(|o| o.0),
        opt_d_steps: opt.map(|o| o.1),
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape(),
            })
            .collect(),
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let st = &ck.state;
    let m = &st.model;
    let mut tensors = model_tensors(m);
    let g_names: Vec<&String> = m.encoder.names().iter().chain(m.decoder.names()).collect();
    let d_names: Vec<&String> = m.dis_a.names().iter().chain(m.dis_b.names()).collect();
    optimizer_tensors("opt_g", &st.opt_g, &g_names, &mut tensors);
    optimizer_tensors("opt_d", &st.opt_d, &d_names, &mut tensors);
    let header = header_for(m, ck.train.as_ref(), st.step, Some((st.opt_g.t, st.opt_d.t)), &tensors);
    write_atomic(path, &encode(&header, &tensors)?)
}

/// Weights and style codes only; loads back with fresh optimizer state.
pub fn save_model(path: &Path, m: &ModelState) -> Result<()> {
    let tensors = model_tensors(m);
    let header = header_for(m, None, 0, None, &tensors);
    write_atomic(path, &encode(&header, &tensors)?)
}

fn take_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{}: truncated checkpoint header", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Version(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = take_u32(&bytes, 8, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "{}: file version {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let hlen = take_u32(&bytes, 12, path)? as usize;
    let hdr_bytes = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Format(format!("{}: truncated checkpoint header", path.display())))?;
    let header: Header =
        serde_json::from_slice(hdr_bytes).map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;

    let mut pos = 16 + hlen;
    let mut named = std::collections::HashMap::with_capacity(header.tensors.len());
    let mut order = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{}: tensor {} dims overflow", path.display(), e.name)))?;
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| Error::Format(format!("{}: truncated at tensor {}", path.display(), e.name)))?;
        pos += 4 * n;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        order.push(e.name.clone());
        if named.insert(e.name.clone(), Tensor::from_vec(e.shape, data)?).is_some() {
            return Err(Error::Format(format!("{}: duplicate tensor {}", path.display(), e.name)));
        }
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{}: {} trailing bytes", path.display(), bytes.len() - pos)));
    }

    let mut take = |name: &str| {
        named
            .remove(name)
            .ok_or_else(|| Error::Format(format!("{}: missing tensor {name}", path.display())))
    };
    let set = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| -> Result<ParamSet> {
        let names: Vec<&String> = order.iter().filter(|n| n.starts_with(&format!("{prefix}."))).collect();
        Ok(ParamSet::new(
            names
                .into_iter()
                .map(|n| Ok((n.clone(), take(n)?)))
                .collect::<Result<_>>()?,
        ))
    };
    let encoder = set("enc", &mut take)?;
    let decoder = set("dec", &mut take)?;
    let dis_a = set("dis_a", &mut take)?;
    let dis_b = set("dis_b", &mut take)?;
    let style = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| -> Result<StyleCode> {
        let layers = header.net.style_dims().len();
        let layers = (0..layers)
            .map(|i| {
                Ok(StyleLayer {
                    gamma: take(&format!("{prefix}.{i}.gamma"))?.into_data(),
                    beta: take(&format!("{prefix}.{i}.beta"))?.into_data(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(StyleCode { layers })
    };
    let style_a = style("style_a", &mut take)?;
    let style_b = style("style_b", &mut take)?;
    let model = ModelState {
        config: header.net.clone(),
        encoder,
        decoder,
        dis_a,
        dis_b,
        style_a,
        style_b,
        seed: header.seed,
    };
    model
        .check_layout()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let mut state = TrainState::new(model);
    state.step = header.step;
    let g_names: Vec<String> = state.model.encoder.names().iter().chain(state.model.decoder.names()).cloned().collect();
    let d_names: Vec<String> = state.model.dis_a.names().iter().chain(state.model.dis_b.names()).cloned().collect();
    for (prefix, steps, opt, names) in [
        ("opt_g", header.opt_g_steps, &mut state.opt_g, &g_names),
        ("opt_d", header.opt_d_steps, &mut state.opt_d, &d_names),
    ] {
        let Some(t) = steps else { continue };
        opt.t = t;
        for (i, n) in names.iter().enumerate() {
            opt.m[i] = take(&format!("{prefix}.m.{n}"))?;
            opt.v[i] = take(&format!("{prefix}.v.{n}"))?;
        }
    }
    if let Some(extra) = named.keys().next() {
        return Err(Error::Format(format!("{}: unexpected tensor {extra}", path.display())));
    }
    Ok(Checkpoint {
        state,
        train: header.train,
    })
}

/// Loads only the model part of a checkpoint.
pub fn load_model(path: &Path) -> Result<ModelState> {
    Ok(load_checkpoint(path)?.state.model)
}
