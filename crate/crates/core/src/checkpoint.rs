//! Binary checkpoints: an 8-byte little-endian header length, a JSON header
//! with everything but the weights, then the weights as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dam::{Dam, DriftState};
use crate::engine::{Model, TargetScale};
use crate::error::{Error, Result};
use crate::hla::Hla;
use crate::mdfe::{FeatureConfig, FeatureScaler};
use crate::params::{flatten, seeded_rng, unflatten, Parameterized};

const FORMAT: &str = "curvecast-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: RunConfig,
    features: FeatureConfig,
    scaler: FeatureScaler,
    target: TargetScale,
    delta0: f64,
    drift: Option<DriftState>,
    tensors: Vec<TensorEntry>,
}

fn table<P: Parameterized>(prefix: &str, p: &P, offset: &mut usize, out: &mut Vec<TensorEntry>) {
    for t in p.tensors() {
        out.push(TensorEntry {
            name: format!("{prefix}.{}", t.name),
            shape: t.shape.clone(),
            offset: *offset,
            len: t.data.len(),
        });
        *offset += t.data.len();
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    table("hla", &model.hla, &mut offset, &mut tensors);
    if let Some(d) = &model.dam {
        table("dam", d, &mut offset, &mut tensors);
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        features: model.features.clone(),
        scaler: model.scaler.clone(),
        target: model.target,
        delta0: model.delta0,
        drift: model.drift.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut weights = flatten(&model.hla);
    if let Some(d) = &model.dam {
        weights.extend(flatten(d));
    }
    let mut out = Vec::with_capacity(8 + json.len() + 8 * weights.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

fn check_table<P: Parameterized>(
    prefix: &str,
    p: &P,
    entries: &mut std::slice::Iter<'_, TensorEntry>,
) -> Result<()> {
    for t in p.tensors() {
        let e = entries
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}.{}", t.name)))?;
        let want = format!("{prefix}.{}", t.name);
        if e.name != want || e.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {want} {:?}",
                e.name, e.shape, t.shape
            )));
        }
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let data = &bytes[8 + hlen..];
    if data.len() % 8 != 0 {
        return Err(Error::Checkpoint(
            "weight section is not a whole number of f64 values".into(),
        ));
    }
    let weights: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let cfg = &header.config;
    let width = header.features.width();
    let grid = cfg.grid()?;
    // skeletons only fix the shapes; every value is overwritten below
    let mut rng = seeded_rng(0);
    let mut hla = Hla::init(&cfg.hla_config(width), &grid, &mut rng)?;
    let mut dam = if cfg.dam {
        Some(Dam::init(&cfg.dam_config(width), &grid, &mut rng)?)
    } else {
        None
    };
    let mut entries = header.tensors.iter();
    check_table("hla", &hla, &mut entries)?;
    if let Some(d) = &dam {
        check_table("dam", d, &mut entries)?;
    }
    if entries.next().is_some() {
        return Err(Error::Checkpoint("unexpected extra tensors".into()));
    }
    let n_hla = flatten(&hla).len();
    let n_dam = dam.as_ref().map_or(0, |d| flatten(d).len());
    if weights.len() != n_hla + n_dam {
        return Err(Error::Checkpoint(format!(
            "expected {} weights, found {}",
            n_hla + n_dam,
            weights.len()
        )));
    }
    unflatten(&mut hla, &weights[..n_hla])?;
    if let Some(d) = dam.as_mut() {
        unflatten(d, &weights[n_hla..])?;
    }
    Ok(Model {
        config: header.config,
        features: header.features,
        scaler: header.scaler,
        target: header.target,
        hla,
        dam,
        drift: header.drift,
        delta0: header.delta0,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
