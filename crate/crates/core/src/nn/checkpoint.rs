//! Checkpoint directories: `index.txt` (versioned header plus one line per
//! tensor: name, shape, dtype, byte offset) and `tensors.bin` (raw
//! little-endian values, concatenated in index order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::model::{Model, ModelConfig};
use super::scalar::Scalar;
use crate::error::{Error, Result};

const MAGIC: &str = "respcl-checkpoint";
const VERSION: u32 = 1;
const INDEX: &str = "index.txt";
const BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub fingerprint: String,
    pub step: u64,
    pub dtype: String,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Fingerprint must match; every tensor is restored.
    Full,
    /// Only `encoder.*` tensors are restored; heads keep their initialization.
    EncoderOnly,
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, step: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = model.config();
    let mut index = format!(
        "{MAGIC} {VERSION}\nfingerprint {}\nstep {step}\nconfig {}\n",
        cfg.fingerprint(),
        serde_json::to_string(cfg).expect("config serializes"),
    );
    let mut blob = Vec::new();
    for (name, t) in model.state() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        index.push_str(&format!(
            "tensor {name} {} {} {}\n",
            dims.join("x"),
            T::DTYPE,
            blob.len()
        ));
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    fs::write(dir.join(INDEX), index).map_err(|e| Error::io(dir.join(INDEX), e))?;
    fs::write(dir.join(BLOB), blob).map_err(|e| Error::io(dir.join(BLOB), e))?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let index = fs::read_to_string(dir.join(INDEX)).map_err(|e| Error::io(dir.join(INDEX), e))?;
    let blob = fs::read(dir.join(BLOB)).map_err(|e| Error::io(dir.join(BLOB), e))?;
    let mut lines = index.lines();
    match lines.next().map(|l| l.split_whitespace().collect::<Vec<_>>()) {
        Some(v) if v.len() == 2 && v[0] == MAGIC => {
            if v[1] != VERSION.to_string() {
                return Err(corrupt(format!("unsupported version {}", v[1])));
            }
        }
        _ => return Err(corrupt("missing header")),
    }
    let mut fingerprint = None;
    let mut step = None;
    let mut config = None;
    let mut tensors = BTreeMap::new();
    let mut dtype = String::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').ok_or_else(|| corrupt("malformed index line"))?;
        match key {
            "fingerprint" => fingerprint = Some(rest.to_string()),
            "step" => step = Some(rest.parse::<u64>().map_err(|_| corrupt("bad step"))?),
            "config" => {
                config = Some(
                    serde_json::from_str::<ModelConfig>(rest)
                        .map_err(|e| corrupt(format!("bad config: {e}")))?,
                )
            }
            "tensor" => {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(corrupt(format!("malformed tensor line: {line}")));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| corrupt(format!("bad shape for {}", f[0])))?;
                let width = match f[2] {
                    "f32" => 4,
                    "f64" => 8,
                    other => return Err(corrupt(format!("unknown dtype {other}"))),
                };
                dtype = f[2].to_string();
                let offset: usize = f[3].parse().map_err(|_| corrupt("bad offset"))?;
                let n: usize = shape.iter().product();
                let end = offset + n * width;
                if end > blob.len() {
                    return Err(corrupt(format!("tensor {} runs past end of blob", f[0])));
                }
                let values = blob[offset..end]
                    .chunks_exact(width)
                    .map(|c| {
                        if width == 4 {
                            f32::read_le(c) as f64
                        } else {
                            f64::read_le(c)
                        }
                    })
                    .collect();
                tensors.insert(f[0].to_string(), TensorEntry { shape, values });
            }
            _ => return Err(corrupt(format!("unknown index key {key}"))),
        }
    }
    Ok(Checkpoint {
        config: config.ok_or_else(|| corrupt("missing config"))?,
        fingerprint: fingerprint.ok_or_else(|| corrupt("missing fingerprint"))?,
        step: step.ok_or_else(|| corrupt("missing step"))?,
        dtype,
        tensors,
    })
}

impl Checkpoint {
    /// Builds the stored architecture and loads every tensor into it.
    pub fn instantiate<T: Scalar>(&self) -> Result<Model<T>> {
        use rand::SeedableRng;
        // every tensor is overwritten, so the init stream does not matter
        let mut model = Model::new(&self.config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        self.apply_to(&mut model, LoadMode::Full)?;
        Ok(model)
    }

    /// Copies stored tensors into `model`.
    pub fn apply_to<T: Scalar>(&self, model: &mut Model<T>, mode: LoadMode) -> Result<()> {
        if mode == LoadMode::Full {
            let expected = model.config().fingerprint();
            if expected != self.fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected,
                    found: self.fingerprint.clone(),
                });
            }
        }
        let mut bad = Vec::new();
        let mut missing = Vec::new();
        let mut state = model.state_mut();
        for (name, t) in state.iter_mut() {
            if mode == LoadMode::EncoderOnly && !name.starts_with("encoder.") {
                continue;
            }
            match self.tensors.get(name.as_str()) {
                Some(e) if e.shape == t.shape() => {}
                Some(_) => bad.push(name.clone()),
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(corrupt(format!("missing tensors: {}", missing.join(", "))));
        }
        if !bad.is_empty() {
            return Err(Error::CheckpointShapes(bad));
        }
        for (name, t) in state {
            if mode == LoadMode::EncoderOnly && !name.starts_with("encoder.") {
                continue;
            }
            let e = &self.tensors[name.as_str()];
            for (dst, &v) in t.data_mut().iter_mut().zip(&e.values) {
                *dst = T::lit(v);
            }
        }
        Ok(())
    }
}
