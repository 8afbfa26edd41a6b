//! Model checkpoints: a directory of matrix CSVs plus a `manifest.toml`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Dense, MlpSpec};
use super::model::{ClientModel, OnlineParams};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: MlpSpec,
    pub tau: f64,
    pub round: usize,
}

fn write_dense(dir: &Path, stem: &str, d: &Dense) -> Result<()> {
    d.weight.write_csv(dir.join(format!("{stem}_w.csv")))?;
    Matrix::new(1, d.bias.len(), d.bias.clone())?.write_csv(dir.join(format!("{stem}_b.csv")))
}

fn read_dense(dir: &Path, stem: &str) -> Result<Dense> {
    let weight = Matrix::read_csv(dir.join(format!("{stem}_w.csv")))?;
    let bias = Matrix::read_csv(dir.join(format!("{stem}_b.csv")))?;
    if bias.rows() != 1 || bias.cols() != weight.cols() {
        return Err(Error::shape("checkpoint", format!("bias {stem} does not match its weight")));
    }
    Ok(Dense {
        weight,
        bias: bias.into_vec(),
    })
}

fn write_online(dir: &Path, prefix: &str, p: &OnlineParams) -> Result<()> {
    for (i, d) in p.encoder.iter().enumerate() {
        write_dense(dir, &format!("{prefix}_enc{i}"), d)?;
    }
    write_dense(dir, &format!("{prefix}_pred"), &p.predictor)
}

fn read_online(dir: &Path, prefix: &str, layers: usize) -> Result<OnlineParams> {
    Ok(OnlineParams {
        encoder: (0..layers)
            .map(|i| read_dense(dir, &format!("{prefix}_enc{i}")))
            .collect::<Result<_>>()?,
        predictor: read_dense(dir, &format!("{prefix}_pred"))?,
    })
}

/// Writes `model` to `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, model: &ClientModel, round: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_online(dir, "online", &model.online)?;
    write_online(dir, "momentum", &model.momentum)?;
    for (i, d) in model.target.iter().enumerate() {
        write_dense(dir, &format!("target_enc{i}"), d)?;
    }
    let manifest = CheckpointManifest {
        spec: model.spec.clone(),
        tau: model.tau,
        round,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the model and
/// the round it was taken at.
pub fn load_checkpoint(dir: &Path) -> Result<(ClientModel, usize)> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        detail: e.message().to_string(),
    })?;
    manifest.spec.validate()?;
    let layers = manifest.spec.layer_widths.len() - 1;
    let online = read_online(dir, "online", layers)?;
    let momentum = read_online(dir, "momentum", layers)?;
    let target = (0..layers)
        .map(|i| read_dense(dir, &format!("target_enc{i}")))
        .collect::<Result<Vec<_>>>()?;
    for (i, (d, w)) in online.encoder.iter().zip(manifest.spec.layer_widths.windows(2)).enumerate() {
        if d.fan_in() != w[0] || d.fan_out() != w[1] {
            return Err(Error::shape("checkpoint", format!("online layer {i} does not match the spec")));
        }
    }
    Ok((
        ClientModel {
            spec: manifest.spec,
            online,
            target,
            tau: manifest.tau,
            momentum,
        },
        manifest.round,
    ))
}

/// FNV-1a over the bit patterns of every parameter, for cheap equality checks.
pub fn fingerprint(model: &ClientModel) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for v in model.online.flatten() {
        eat(v);
    }
    for d in &model.target {
        d.weight.as_slice().iter().copied().for_each(&mut eat);
        d.bias.iter().copied().for_each(&mut eat);
    }
    h
}
