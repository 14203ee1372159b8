//! Checkpoint files: both model specs, all parameters and running
//! statistics, optimizer moments, and training progress in one container.
//!
//! Loading rebuilds the models from their stored specs and then overwrites
//! every parameter, so a checkpoint is self-describing: no external config
//! has to match for `load_generator` to work.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::{Container, TensorEntry};
use crate::error::{Error, Result, Stage};

use super::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};

const KIND: &str = "checkpoint";

/// Training progress carried across save/resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    /// Completed epochs (1-based; 0 means untrained).
    pub epoch: usize,
    /// Epoch with the lowest validation restoration error so far.
    pub best_epoch: usize,
    /// That lowest error; `None` before the first validation pass.
    pub best_val: Option<f64>,
    /// Full epochs since the last strict improvement.
    pub epochs_since_best: usize,
    /// Run seed every random stream is derived from.
    pub seed: u64,
    /// Global Adam step shared by both optimizers.
    pub adam_step: u64,
}

fn insert_tensors(
    container: &mut Container,
    prefix: &str,
    entries: impl IntoIterator<Item = (String, Tensor)>,
) -> Result<()> {
    for (name, tensor) in entries {
        container.insert(format!("{prefix}{name}"), TensorEntry::from_tensor(&tensor, Stage::Model)?);
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    state: &CheckpointState,
    generator: &Generator,
    discriminator: &Discriminator,
    opt: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": KIND,
        "state": state,
        "generator_spec": generator.spec(),
        "discriminator_spec": discriminator.spec(),
    });
    let mut container = Container::new(meta);
    let vars = |pairs: Vec<(String, candle_core::Var)>| {
        pairs.into_iter().map(|(n, v)| (n, v.as_tensor().clone()))
    };
    insert_tensors(&mut container, "gen.", vars(generator.named_vars()))?;
    insert_tensors(&mut container, "genbuf.", generator.named_buffers())?;
    insert_tensors(&mut container, "disc.", vars(discriminator.named_vars()))?;
    insert_tensors(&mut container, "discbuf.", discriminator.named_buffers())?;
    insert_tensors(&mut container, "opt.", opt.iter().map(|(n, t)| (n.clone(), t.clone())))?;
    container.write(path, Stage::Model)
}

fn parse_meta<T: serde::de::DeserializeOwned>(
    container: &Container,
    path: &Path,
    field: &str,
) -> Result<T> {
    serde_json::from_value(container.meta[field].clone()).map_err(|e| {
        Error::state(Stage::Model, format!("{}: bad checkpoint field '{field}': {e}", path.display()))
    })
}

fn check_kind(container: &Container, path: &Path) -> Result<()> {
    if container.meta["kind"] != KIND {
        return Err(Error::state(
            Stage::Model,
            format!("{}: not a checkpoint file (kind {})", path.display(), container.meta["kind"]),
        ));
    }
    Ok(())
}

/// Restore generator parameters and buffers from container entries.
fn fill_generator(container: &Container, gen: &Generator, device: &Device) -> Result<()> {
    for (name, var) in gen.named_vars() {
        let entry = container.get(&format!("gen.{name}"), Stage::Model)?;
        var.set(&entry.to_tensor(device, Stage::Model)?).map_err(Error::tensor(Stage::Model))?;
    }
    for (name, _) in gen.named_buffers() {
        let entry = container.get(&format!("genbuf.{name}"), Stage::Model)?;
        gen.set_named_buffer(&name, entry.to_tensor(device, Stage::Model)?)?;
    }
    Ok(())
}

fn fill_discriminator(container: &Container, disc: &Discriminator, device: &Device) -> Result<()> {
    for (name, var) in disc.named_vars() {
        let entry = container.get(&format!("disc.{name}"), Stage::Model)?;
        var.set(&entry.to_tensor(device, Stage::Model)?).map_err(Error::tensor(Stage::Model))?;
    }
    for (name, _) in disc.named_buffers() {
        let entry = container.get(&format!("discbuf.{name}"), Stage::Model)?;
        disc.set_named_buffer(&name, entry.to_tensor(device, Stage::Model)?)?;
    }
    Ok(())
}

pub struct LoadedCheckpoint {
    pub state: CheckpointState,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt: BTreeMap<String, Tensor>,
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<LoadedCheckpoint> {
    let container = Container::read(path, Stage::Model)?;
    check_kind(&container, path)?;
    let state: CheckpointState = parse_meta(&container, path, "state")?;
    let gen_spec: GeneratorSpec = parse_meta(&container, path, "generator_spec")?;
    let disc_spec: DiscriminatorSpec = parse_meta(&container, path, "discriminator_spec")?;

    // Seed is irrelevant here: every parameter is overwritten below.
    let generator = Generator::new(gen_spec, state.seed, device)?;
    let discriminator = Discriminator::new(disc_spec, state.seed, device)?;
    fill_generator(&container, &generator, device)?;
    fill_discriminator(&container, &discriminator, device)?;

    let mut opt = BTreeMap::new();
    for (name, entry) in &container.tensors {
        if let Some(key) = name.strip_prefix("opt.") {
            opt.insert(key.to_string(), entry.to_tensor(device, Stage::Model)?);
        }
    }
    Ok(LoadedCheckpoint { state, generator, discriminator, opt })
}

/// Generator-only load for detection; skips discriminator and optimizer.
pub fn load_generator(path: &Path, device: &Device) -> Result<Generator> {
    let container = Container::read(path, Stage::Model)?;
    check_kind(&container, path)?;
    let state: CheckpointState = parse_meta(&container, path, "state")?;
    let gen_spec: GeneratorSpec = parse_meta(&container, path, "generator_spec")?;
    let generator = Generator::new(gen_spec, state.seed, device)?;
    fill_generator(&container, &generator, device)?;
    Ok(generator)
}
