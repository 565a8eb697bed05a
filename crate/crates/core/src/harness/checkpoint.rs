use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{format_err, Error, Result};
use crate::models::{Discriminator, Generator};
use crate::tensor::{ParamStore, Tensor};

/// Shape plus little-endian `f64` bytes in base64.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRecord {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::invalid(format!("tensor payload is not base64: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::invalid("tensor payload is not a whole number of f64 values"));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Random-number state. Streams are derived from the seed, a purpose tag and
/// the step index, so the next step is all that must be stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub next_step: u64,
}

pub const RNG_ALGORITHM: &str = "chacha8-purpose-streams";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng_state: RngState,
    pub tensors: BTreeMap<String, TensorRecord>,
}

const ADAM_M: &str = ".adam_m";
const ADAM_V: &str = ".adam_v";
const ADAM_STEP: &str = ".adam_step";
const SPECTRAL_U: &str = ".sn_u";

fn capture_store(store: &ParamStore, out: &mut BTreeMap<String, TensorRecord>) {
    for p in store.iter() {
        out.insert(p.name.clone(), TensorRecord::encode(&p.value));
        out.insert(format!("{}{ADAM_M}", p.name), TensorRecord::encode(&p.adam_m));
        out.insert(format!("{}{ADAM_V}", p.name), TensorRecord::encode(&p.adam_v));
        out.insert(format!("{}{ADAM_STEP}", p.name), TensorRecord::encode(&Tensor::scalar(p.step as f64)));
        if let Some(u) = &p.spectral_u {
            let t = Tensor::new([u.len()], u.clone()).expect("vector shape");
            out.insert(format!("{}{SPECTRAL_U}", p.name), TensorRecord::encode(&t));
        }
    }
}

fn take(tensors: &BTreeMap<String, TensorRecord>, used: &mut usize, name: &str, shape: &[usize]) -> Result<Tensor> {
    let rec = tensors
        .get(name)
        .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))?;
    let t = rec.decode()?;
    if t.shape() != shape {
        return Err(Error::invalid(format!(
            "checkpoint tensor `{name}` has shape {:?}, model expects {shape:?}",
            t.shape()
        )));
    }
    *used += 1;
    Ok(t)
}

fn restore_store(store: &mut ParamStore, tensors: &BTreeMap<String, TensorRecord>, used: &mut usize) -> Result<()> {
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = take(tensors, used, &p.name, &shape)?;
        p.adam_m = take(tensors, used, &format!("{}{ADAM_M}", p.name), &shape)?;
        p.adam_v = take(tensors, used, &format!("{}{ADAM_V}", p.name), &shape)?;
        let step = take(tensors, used, &format!("{}{ADAM_STEP}", p.name), &[])?.item();
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::invalid(format!("bad Adam step count for `{}`", p.name)));
        }
        p.step = step as u64;
        p.grad = None;
        if let Some(u) = &mut p.spectral_u {
            let len = u.len();
            *u = take(tensors, used, &format!("{}{SPECTRAL_U}", p.name), &[len])?.into_data();
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, step: u64, generator: &Generator, discriminator: &Discriminator) -> Self {
        let mut tensors = BTreeMap::new();
        capture_store(generator.params(), &mut tensors);
        capture_store(discriminator.params(), &mut tensors);
        Self {
            config: config.clone(),
            step,
            rng_state: RngState {
                algorithm: RNG_ALGORITHM.to_string(),
                seed: config.seed,
                next_step: step,
            },
            tensors,
        }
    }

    /// Copies stored tensors into freshly built networks. Fails when any
    /// tensor is missing, misshaped or left over.
    pub fn restore(&self, generator: &mut Generator, discriminator: &mut Discriminator) -> Result<()> {
        if self.rng_state.algorithm != RNG_ALGORITHM || self.rng_state.seed != self.config.seed {
            return Err(Error::invalid("checkpoint rng state does not match this build"));
        }
        let mut used = 0;
        restore_store(generator.params_mut(), &self.tensors, &mut used)?;
        restore_store(discriminator.params_mut(), &self.tensors, &mut used)?;
        if used != self.tensors.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors the model does not use",
                self.tensors.len() - used
            )));
        }
        Ok(())
    }

    /// Networks described by the stored config, with stored weights.
    pub fn build_models(&self) -> Result<(Generator, Discriminator)> {
        use crate::rng::{stream, Purpose};
        self.config.validate()?;
        let mut g = Generator::build(&self.config.generator, &mut stream(self.config.seed, Purpose::Init, 0))?;
        let mut d = Discriminator::build(&self.config.discriminator, &mut stream(self.config.seed, Purpose::Init, 1))?;
        self.restore(&mut g, &mut d)?;
        Ok((g, d))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_text(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, format!("not a checkpoint: {e}")))
    }
}
