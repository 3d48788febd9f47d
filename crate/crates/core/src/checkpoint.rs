//! Checkpoint directories: `manifest.txt` (config snapshot, run metadata,
//! tensor directory, blob digest) next to `tensors.bin` (little-endian f64).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Vlamd;
use crate::trainer::AdamW;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";
const FORMAT: &str = "vlamd-checkpoint-1";

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In f64 elements from the start of the blob.
    pub offset: usize,
    pub len: usize,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Vlamd,
    pub step: usize,
    pub seed: u64,
    pub optim: Option<AdamW>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes the model (and optimizer moments if given) to manifest text
/// and blob bytes.
pub fn encode(model: &Vlamd, optim: Option<&AdamW>, step: usize, seed: u64) -> (String, Vec<u8>) {
    let mut entries: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (name, t) in model.store.iter() {
        entries.push((name.to_string(), t.shape().to_vec(), t.data()));
    }
    if let Some(o) = optim {
        for (k, (name, t)) in model.store.iter().enumerate() {
            entries.push((format!("adam.m/{name}"), t.shape().to_vec(), &o.m[k]));
            entries.push((format!("adam.v/{name}"), t.shape().to_vec(), &o.v[k]));
        }
    }
    let mut blob = Vec::new();
    let mut dir = String::new();
    let mut offset = 0;
    for (name, shape, data) in &entries {
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let shape: Vec<String> = shape.iter().map(usize::to_string).collect();
        let _ = writeln!(dir, "{name}\tf64\t{}\t{offset}\t{}", shape.join(","), data.len());
        offset += data.len();
    }
    let mut m = String::new();
    let _ = writeln!(m, "format={FORMAT}");
    let _ = writeln!(m, "step={step}");
    let _ = writeln!(m, "seed={seed}");
    let _ = writeln!(m, "charset={}", model.vocab.charset());
    if let Some(o) = optim {
        let _ = writeln!(m, "adam_t={}", o.t);
    }
    let _ = writeln!(m, "blob_sha256={}", sha256_hex(&blob));
    let _ = writeln!(m, "[config]");
    m.push_str(&model.config.to_text());
    let _ = writeln!(m, "[tensors]");
    m.push_str(&dir);
    (m, blob)
}

pub fn save(dir: &Path, model: &Vlamd, optim: Option<&AdamW>, step: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode(model, optim, step, seed);
    let p = dir.join(BLOB);
    fs::write(&p, &blob).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Digest of manifest plus blob; equal hashes mean equal checkpoints.
pub fn hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [MANIFEST, BLOB] {
        let p = dir.join(name);
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(BLOB);
    let blob = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    decode(&text, &blob)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn decode(manifest: &str, blob: &[u8]) -> Result<Checkpoint> {
    let mut header = std::collections::HashMap::new();
    let mut config_text = String::new();
    let mut entries = Vec::new();
    let mut section = "";
    for line in manifest.lines() {
        match line {
            "[config]" | "[tensors]" => {
                section = line;
                continue;
            }
            _ => {}
        }
        match section {
            "" => {
                let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
                header.insert(k.to_string(), v.to_string());
            }
            "[config]" => {
                config_text.push_str(line);
                config_text.push('\n');
            }
            _ => entries.push(parse_entry(line)?),
        }
    }
    let field = |k: &str| header.get(k).ok_or_else(|| bad(format!("missing header field {k}")));
    if field("format")? != FORMAT {
        return Err(bad(format!("unsupported format {}", field("format")?)));
    }
    if *field("blob_sha256")? != sha256_hex(blob) {
        return Err(bad("blob does not match the manifest digest"));
    }
    if !blob.len().is_multiple_of(8) {
        return Err(bad("blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let step = field("step")?.parse().map_err(|_| bad("bad step"))?;
    let seed = field("seed")?.parse().map_err(|_| bad("bad seed"))?;
    let config = Config::parse(&config_text)?;
    if *field("charset")? != config.data.charset {
        return Err(bad("charset disagrees with the config snapshot"));
    }

    let mut model = Vlamd::new(&config, seed)?;
    let mut seen = vec![false; model.store.len()];
    let n_params = model.store.len();
    let mut moments = [vec![None; n_params], vec![None; n_params]];
    for e in &entries {
        let data = values
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| bad(format!("{} points outside the blob", e.name)))?
            .to_vec();
        let (slot, name) = if let Some(n) = e.name.strip_prefix("adam.m/") {
            (Some(0), n)
        } else if let Some(n) = e.name.strip_prefix("adam.v/") {
            (Some(1), n)
        } else {
            (None, e.name.as_str())
        };
        let id = model.store.id(name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        if model.store.get(id).shape() != e.shape.as_slice() || e.len != model.store.get(id).numel() {
            return Err(bad(format!(
                "{} has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                model.store.get(id).shape()
            )));
        }
        let k = model.store.ids().position(|i| i == id).expect("registered id");
        match slot {
            None => {
                if std::mem::replace(&mut seen[k], true) {
                    return Err(bad(format!("{name} appears twice")));
                }
                model.store.set(id, data)?;
            }
            Some(s) => {
                if moments[s][k].replace(data).is_some() {
                    return Err(bad(format!("{} appears twice", e.name)));
                }
            }
        }
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        let id = model.store.ids().nth(k).expect("index in range");
        return Err(bad(format!("missing parameter {}", model.store.name(id))));
    }
    let optim = match header.get("adam_t") {
        None => None,
        Some(t) => {
            let [m, v] = moments;
            let collect = |xs: Vec<Option<Vec<f64>>>| -> Result<Vec<Vec<f64>>> {
                xs.into_iter()
                    .map(|x| x.ok_or_else(|| bad("incomplete optimizer state")))
                    .collect()
            };
            let mut o = AdamW::new(&model.store, config.train.weight_decay);
            o.m = collect(m)?;
            o.v = collect(v)?;
            o.t = t.parse().map_err(|_| bad("bad adam_t"))?;
            Some(o)
        }
    };
    Ok(Checkpoint {
        model,
        step,
        seed,
        optim,
    })
}

fn parse_entry(line: &str) -> Result<TensorEntry> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 5 || f[1] != "f64" {
        return Err(bad(format!("bad tensor line {line:?}")));
    }
    let shape = if f[2].is_empty() {
        Vec::new()
    } else {
        f[2].split(',')
            .map(|s| s.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
            .collect::<Result<Vec<usize>>>()?
    };
    Ok(TensorEntry {
        name: f[0].to_string(),
        shape,
        offset: f[3].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?,
        len: f[4].parse().map_err(|_| bad(format!("bad length in {line:?}")))?,
    })
}
