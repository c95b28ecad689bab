//! CHECKPOINT messages for encoder parameters, worlds, transforms and banks.
//! Everything is stored as f64, so imports are exact.

use super::wire::{Dtype, FederatedMessage, MessageKind, ParamArray};
use crate::datagen::{LabeledEmbedding, ShiftLayout, SyntheticWorld, WorldSpec};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::mst::{AugmentationBank, TransformNetwork};
use crate::numerics::Matrix;

fn checkpoint() -> FederatedMessage {
    FederatedMessage::new(MessageKind::Checkpoint, 0, 0, 0)
}

fn as_index(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::codec(format!("{what}: {v} is not an index")))
    }
}

fn matrix_of(a: &ParamArray) -> Result<Matrix> {
    match a.dims.as_slice() {
        &[r, c] => Matrix::from_vec(r, c, a.values.clone()),
        _ => Err(Error::codec(format!("array {} is not a matrix", a.name))),
    }
}

fn split_u64(v: u64) -> [f64; 2] {
    [f64::from(v as u32), f64::from((v >> 32) as u32)]
}

fn join_u64(lo: f64, hi: f64) -> Result<u64> {
    Ok(as_index(lo, "seed")? as u64 | (as_index(hi, "seed")? as u64) << 32)
}

/// Projection matrix and position scales of the frozen encoder.
pub fn encoder_message(encoder: &FrozenEncoder) -> Result<FederatedMessage> {
    let a = encoder.projection();
    let cfg = encoder.config();
    let [lo, hi] = split_u64(cfg.seed);
    checkpoint()
        .with("encoder.meta", Dtype::F64, &[4], &[cfg.dim as f64, cfg.max_tokens as f64, lo, hi])?
        .with("encoder.projection", Dtype::F64, &[a.rows(), a.cols()], a.data())?
        .with("encoder.position_scales", Dtype::F64, &[encoder.position_scales().len()], encoder.position_scales())
}

const SAMPLE_COLUMNS: usize = 3;

fn push_samples(m: &mut FederatedMessage, prefix: &str, samples: &[LabeledEmbedding], dim: usize) -> Result<()> {
    let mut emb = Vec::with_capacity(samples.len() * dim);
    let mut labels = Vec::with_capacity(samples.len() * SAMPLE_COLUMNS);
    for s in samples {
        emb.extend_from_slice(&s.embedding);
        labels.extend_from_slice(&[s.class as f64, s.domain as f64, f64::from(u8::from(s.augmented))]);
    }
    m.push(format!("{prefix}.embeddings"), Dtype::F64, &[samples.len(), dim], &emb)?;
    m.push(format!("{prefix}.labels"), Dtype::F64, &[samples.len(), SAMPLE_COLUMNS], &labels)
}

fn read_samples(m: &FederatedMessage, prefix: &str) -> Result<Vec<LabeledEmbedding>> {
    let emb = matrix_of(m.require(&format!("{prefix}.embeddings"))?)?;
    let labels = matrix_of(m.require(&format!("{prefix}.labels"))?)?;
    if labels.rows() != emb.rows() || labels.cols() != SAMPLE_COLUMNS {
        return Err(Error::codec(format!("{prefix}: label table does not match the embeddings")));
    }
    (0..emb.rows())
        .map(|i| {
            let l = labels.row(i);
            Ok(LabeledEmbedding {
                embedding: emb.row(i).to_vec(),
                class: as_index(l[0], "class")?,
                domain: as_index(l[1], "domain")?,
                augmented: l[2] != 0.0,
            })
        })
        .collect()
}

/// Spec, prototypes, shifts and every sample of a world.
pub fn world_message(world: &SyntheticWorld) -> Result<FederatedMessage> {
    let s = &world.spec;
    let [lo, hi] = split_u64(s.seed);
    let spec = [
        s.classes as f64,
        s.domains as f64,
        s.samples_per_cell as f64,
        s.noise,
        s.dim as f64,
        lo,
        hi,
        s.shift_magnitude,
        s.shift_overlap,
        s.token_scale,
        s.shots.map_or(-1.0, |v| v as f64),
        f64::from(s.shift_layout.code()),
    ];
    let mut m = checkpoint()
        .with("world.spec", Dtype::F64, &[spec.len()], &spec)?
        .with("world.prototypes", Dtype::F64, &[world.prototypes.rows(), s.dim], world.prototypes.data())?
        .with("world.shifts", Dtype::F64, &[world.shifts.rows(), s.dim], world.shifts.data())?;
    push_samples(&mut m, "world", &world.samples, s.dim)?;
    Ok(m)
}

pub fn world_from_message(m: &FederatedMessage) -> Result<SyntheticWorld> {
    let v = &m.require("world.spec")?.values;
    if v.len() != 12 {
        return Err(Error::codec("world.spec has the wrong length"));
    }
    let spec = WorldSpec {
        classes: as_index(v[0], "classes")?,
        domains: as_index(v[1], "domains")?,
        samples_per_cell: as_index(v[2], "samples_per_cell")?,
        noise: v[3],
        dim: as_index(v[4], "dim")?,
        seed: join_u64(v[5], v[6])?,
        shift_magnitude: v[7],
        shift_overlap: v[8],
        token_scale: v[9],
        shots: if v[10] < 0.0 { None } else { Some(as_index(v[10], "shots")?) },
        shift_layout: u8::try_from(as_index(v[11], "shift layout")?)
            .ok()
            .and_then(ShiftLayout::from_code)
            .ok_or_else(|| Error::codec("world.spec names an unknown shift layout"))?,
    };
    spec.validate()?;
    Ok(SyntheticWorld {
        prototypes: matrix_of(m.require("world.prototypes")?)?,
        shifts: matrix_of(m.require("world.shifts")?)?,
        samples: read_samples(m, "world")?,
        spec,
    })
}

/// Augmentation bank of one client, one sample table per target domain.
pub fn bank_message(bank: &AugmentationBank, dim: usize) -> Result<FederatedMessage> {
    let targets: Vec<f64> = bank.lists.iter().map(|(j, _)| *j as f64).collect();
    let mut m = checkpoint()
        .with("bank.source", Dtype::F64, &[1], &[bank.source as f64])?
        .with("bank.targets", Dtype::F64, &[targets.len()], &targets)?;
    for (j, list) in &bank.lists {
        push_samples(&mut m, &format!("bank.{j}"), list, dim)?;
    }
    Ok(m)
}

pub fn bank_from_message(m: &FederatedMessage) -> Result<AugmentationBank> {
    let source = as_index(m.require("bank.source")?.values[0], "bank source")?;
    let lists = m
        .require("bank.targets")?
        .values
        .iter()
        .map(|&j| {
            let j = as_index(j, "bank target")?;
            Ok((j, read_samples(m, &format!("bank.{j}"))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentationBank { source, lists })
}

/// Trained transforms, addressed as `mst.{source}.{target}`.
pub fn transforms_message(transforms: &[TransformNetwork]) -> Result<FederatedMessage> {
    let first = transforms.first().ok_or_else(|| Error::codec("no transforms to export"))?;
    let pairs: Vec<f64> = transforms.iter().flat_map(|q| [q.source as f64, q.target as f64]).collect();
    let mut m = checkpoint()
        .with("mst.shape", Dtype::F64, &[2], &[first.dim() as f64, first.hidden() as f64])?
        .with("mst.pairs", Dtype::F64, &[transforms.len(), 2], &pairs)?;
    for q in transforms {
        if q.dim() != first.dim() || q.hidden() != first.hidden() {
            return Err(Error::codec("transforms in one message must share a shape"));
        }
        m.push(format!("mst.{}.{}", q.source, q.target), Dtype::F64, &[q.params().len()], q.params())?;
    }
    Ok(m)
}

pub fn transforms_from_message(m: &FederatedMessage) -> Result<Vec<TransformNetwork>> {
    let shape = &m.require("mst.shape")?.values;
    let (dim, hidden) = (as_index(shape[0], "dim")?, as_index(shape[1], "hidden")?);
    let pairs = matrix_of(m.require("mst.pairs")?)?;
    (0..pairs.rows())
        .map(|r| {
            let (i, j) = (as_index(pairs.get(r, 0), "source")?, as_index(pairs.get(r, 1), "target")?);
            let params = m.require(&format!("mst.{i}.{j}"))?.values.clone();
            TransformNetwork::from_params(dim, hidden, i, j, params)
        })
        .collect()
}
