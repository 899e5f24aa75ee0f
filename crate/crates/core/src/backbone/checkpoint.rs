//! Checkpoint directory: `params/*.tns`, optional `adam/*.tns` moment
//! buffers and `checkpoint.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, BackboneConfig, Head, ModelState, Objective, TrainConfig, Trainer};
use crate::datagen::sha256_hex;
use crate::error::{Error, Result};
use crate::tensor::{read_tns, write_tns, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the value is 128-bit.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::InvalidInput(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub config: BackboneConfig,
    pub head: Head,
    pub step: u64,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub optimizer: Option<Adam>,
    pub train: Option<TrainConfig>,
    pub objective: Option<Objective>,
    pub tensors: Vec<TensorEntry>,
}

/// Model plus whatever is needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    pub epoch: usize,
    pub optimizer: Option<Adam>,
    pub rng: Option<ChaCha8Rng>,
    pub train: Option<TrainConfig>,
    pub objective: Option<Objective>,
}

impl Checkpoint {
    pub fn model_only(state: ModelState) -> Self {
        Checkpoint { state, epoch: 0, optimizer: None, rng: None, train: None, objective: None }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            state: t.state.clone(),
            epoch: t.epoch,
            optimizer: Some(t.optimizer.clone()),
            rng: Some(t.rng.clone()),
            train: Some(t.config.clone()),
            objective: Some(t.objective.clone()),
        }
    }

    /// Rebuilds a trainer positioned exactly where the checkpoint left off.
    pub fn into_trainer(self) -> Result<Trainer> {
        match (self.optimizer, self.rng, self.train, self.objective) {
            (Some(optimizer), Some(rng), Some(config), Some(objective)) => {
                Ok(Trainer { state: self.state, optimizer, rng, config, objective, epoch: self.epoch })
            }
            _ => Err(Error::InvalidInput("checkpoint lacks optimiser or rng state".into())),
        }
    }
}

fn put(dir: &Path, rel: String, name: &str, t: &Tensor, out: &mut Vec<TensorEntry>) -> Result<()> {
    let path = dir.join(&rel);
    write_tns(&path, t)?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    out.push(TensorEntry { name: name.to_string(), file: rel, sha256: sha256_hex(&bytes) });
    Ok(())
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<CheckpointManifest> {
    ckpt.state.validate()?;
    for sub in ["params", "adam"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut tensors = Vec::new();
    for (name, p) in &ckpt.state.params {
        put(dir, format!("params/{name}.tns"), name, p, &mut tensors)?;
    }
    if let Some(opt) = &ckpt.optimizer {
        for (name, p) in &ckpt.state.params {
            if let Some((m, v)) = opt.moments(name) {
                put(dir, format!("adam/{name}.m.tns"), &format!("adam.m.{name}"), &Tensor::new(p.shape(), m.to_vec())?, &mut tensors)?;
                put(dir, format!("adam/{name}.v.tns"), &format!("adam.v.{name}"), &Tensor::new(p.shape(), v.to_vec())?, &mut tensors)?;
            }
        }
    }
    let manifest = CheckpointManifest {
        schema_version: 1,
        config: ckpt.state.config.clone(),
        head: ckpt.state.head,
        step: ckpt.state.step,
        epoch: ckpt.epoch,
        rng: ckpt.rng.as_ref().map(RngState::capture),
        optimizer: ckpt.optimizer.clone(),
        train: ckpt.train.clone(),
        objective: ckpt.objective.clone(),
        tensors,
    };
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let mut params = BTreeMap::new();
    let mut moments: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for entry in &manifest.tensors {
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Format { path: file, detail: "checksum mismatch".into() });
        }
        let t = read_tns(&file)?;
        if let Some(name) = entry.name.strip_prefix("adam.m.") {
            moments.entry(name.to_string()).or_default().0 = Some(t.into_data());
        } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
            moments.entry(name.to_string()).or_default().1 = Some(t.into_data());
        } else {
            let shape = t.shape().to_vec();
            params.insert(entry.name.clone(), Tensor::param(&shape, t.into_data())?);
        }
    }
    let state = ModelState { config: manifest.config, head: manifest.head, params, step: manifest.step };
    state.validate().map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?;
    let optimizer = manifest.optimizer.map(|mut opt| {
        for (name, (m, v)) in moments {
            if let (Some(m), Some(v)) = (m, v) {
                opt.set_moments(name, m, v);
            }
        }
        opt
    });
    Ok(Checkpoint {
        state,
        epoch: manifest.epoch,
        optimizer,
        rng: manifest.rng.as_ref().map(RngState::restore).transpose()?,
        train: manifest.train,
        objective: manifest.objective,
    })
}
