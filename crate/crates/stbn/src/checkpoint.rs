//! `STBNCKP1` model checkpoints.
//!
//! Layout: 8-byte magic, `u32` header length, a JSON header, then every
//! tensor listed in the header as `f64` values in declaration order.
//! Denoiser tensors come first, then the flow network's (if any).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stbn_core::model::{StbnConfig, StbnModel};
use stbn_core::nn::ParamStore;
use stbn_core::train::TrainConfig;
use stbn_core::Tensor;

use crate::error::{format_err, io_err, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STBNCKP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Denoiser,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: StbnConfig,
    pub train: Option<TrainConfig>,
    pub iteration: usize,
    /// Seed the model was initialised with.
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn entries(group: TensorGroup, store: &ParamStore) -> impl Iterator<Item = (TensorEntry, &Tensor)> {
    store.iter().map(move |(name, t)| {
        (
            TensorEntry {
                name: name.to_owned(),
                group,
                shape: t.shape(),
            },
            t,
        )
    })
}

fn collect(model: &StbnModel) -> Vec<(TensorEntry, &Tensor)> {
    let mut out: Vec<_> = entries(TensorGroup::Denoiser, &model.params).collect();
    if let Some(net) = model.flow_net() {
        out.extend(entries(TensorGroup::Flow, &net.params));
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &StbnModel,
    seed: u64,
    train: Option<&TrainConfig>,
    iteration: usize,
) -> Result<()> {
    let tensors = collect(model);
    let header = CheckpointHeader {
        config: model.config.clone(),
        train: train.cloned(),
        iteration,
        seed,
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    let mut body = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: StbnModel,
}

/// Rebuilds the model from the stored config (including its blind-spot
/// self-check) and overwrites every parameter. External flow backends come
/// back detached.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not an STBNCKP1 checkpoint"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(io_err(path))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|e| format_err(path, format!("truncated header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;

    let mut denoiser = Vec::new();
    let mut flow = Vec::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|err| format_err(path, format!("truncated tensor `{}`: {err}", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(e.shape, data)?;
        match e.group {
            TensorGroup::Denoiser => denoiser.push((e.name.clone(), t)),
            TensorGroup::Flow => flow.push((e.name.clone(), t)),
        }
    }
    if r.read(&mut [0u8; 1]).map_err(io_err(path))? != 0 {
        return Err(format_err(path, "trailing bytes after tensors"));
    }

    let mut model = StbnModel::new(header.config.clone(), header.seed)?;
    model.params.load(denoiser.iter().map(|(n, t)| (n.as_str(), t)))?;
    match model.flow_net_mut() {
        Some(net) => net.params.load(flow.iter().map(|(n, t)| (n.as_str(), t)))?,
        None if !flow.is_empty() => {
            return Err(format_err(path, "flow tensors stored for a backend without parameters"))
        }
        None => {}
    }
    Ok(Checkpoint { header, model })
}
