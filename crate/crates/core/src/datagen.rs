//! Synthetic multi-domain world.
//!
//! Raw images of class `y` in domain `k` are `normalize(c_y + s_k + σ·n)` with
//! `n ~ N(0, I)`, passed through the frozen image tower. Class prototypes
//! `c_y` and the shift directions are orthonormalized jointly, so domain
//! shifts never carry class information. See [`ShiftLayout`] for how the
//! shifts of different domains relate.
//!
//! Text tokens reuse the same vectors: the description of domain `k` is
//! `token_scale · s_k` and the class token of `y` is `token_scale · c_y`, so
//! text arithmetic mirrors embedding arithmetic by construction.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, normalize, Matrix};
use crate::seed::{derive_seed, rng_for};

/// The unit of all training and evaluation data.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub embedding: Vec<f64>,
    pub class: usize,
    /// World domain index (not a client slot).
    pub domain: usize,
    pub augmented: bool,
}

/// How the domain shift vectors relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftLayout {
    /// All shifts lie in one plane, evenly spaced by angle. Every domain's
    /// style is then a combination of the others', which is the regime where
    /// transferring styles between sources says something about an unseen one.
    Plane,
    /// One direction per domain, pairwise at cosine `shift_overlap`.
    Overlap,
}

impl ShiftLayout {
    pub fn code(self) -> u8 {
        match self {
            ShiftLayout::Plane => 0,
            ShiftLayout::Overlap => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ShiftLayout::Plane),
            1 => Some(ShiftLayout::Overlap),
            _ => None,
        }
    }
}

impl fmt::Display for ShiftLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftLayout::Plane => "plane",
            ShiftLayout::Overlap => "overlap",
        })
    }
}

impl FromStr for ShiftLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(ShiftLayout::Plane),
            "overlap" => Ok(ShiftLayout::Overlap),
            _ => Err(Error::config(format!("unknown shift layout {s:?} (plane, overlap)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub classes: usize,
    /// Total domains, sources plus the held-out one.
    pub domains: usize,
    pub samples_per_cell: usize,
    pub noise: f64,
    pub dim: usize,
    pub seed: u64,
    pub shift_magnitude: f64,
    pub shift_layout: ShiftLayout,
    /// Pairwise cosine between shift directions under [`ShiftLayout::Overlap`],
    /// in `[0, 1)`. Ignored by the plane layout.
    pub shift_overlap: f64,
    pub token_scale: f64,
    /// Optional per-class cap applied to every client dataset.
    pub shots: Option<usize>,
}

impl WorldSpec {
    /// K_total = 4, C = 10, 200 samples per cell, d = 64, σ = 0.1.
    pub fn desk(seed: u64) -> Self {
        Self {
            classes: 10,
            domains: 4,
            samples_per_cell: 200,
            noise: 0.1,
            dim: 64,
            seed,
            shift_magnitude: 2.0,
            shift_layout: ShiftLayout::Plane,
            shift_overlap: 0.3,
            token_scale: 1.0,
            shots: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("world needs at least 2 classes"));
        }
        if self.domains < 3 {
            return Err(Error::config(
                "world needs at least 3 domains (2 sources and 1 held-out)",
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config(format!("noise scale {} must be >= 0", self.noise)));
        }
        if self.dim < self.classes + self.domains {
            return Err(Error::config(format!(
                "dimension {} cannot hold {} orthogonal prototypes and {} shift directions",
                self.dim, self.classes, self.domains
            )));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::config("samples_per_cell must be >= 1"));
        }
        if !(self.shift_magnitude > 0.0) || !self.shift_magnitude.is_finite() {
            return Err(Error::config("shift_magnitude must be positive"));
        }
        if !(0.0..1.0).contains(&self.shift_overlap) {
            return Err(Error::config("shift_overlap must lie in [0, 1)"));
        }
        if !(self.token_scale > 0.0) || !self.token_scale.is_finite() {
            return Err(Error::config("token_scale must be positive"));
        }
        if self.shots == Some(0) {
            return Err(Error::config("shots must be >= 1 when set"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    /// C×d unit class prototypes.
    pub prototypes: Matrix,
    /// K×d domain shift vectors, each of norm `shift_magnitude`.
    pub shifts: Matrix,
    /// Ordered by domain, then class, then draw.
    pub samples: Vec<LabeledEmbedding>,
}

impl SyntheticWorld {
    pub fn domain_token(&self, k: usize) -> Vec<f64> {
        self.shifts.row(k).iter().map(|v| v * self.spec.token_scale).collect()
    }

    pub fn class_token(&self, y: usize) -> Vec<f64> {
        self.prototypes.row(y).iter().map(|v| v * self.spec.token_scale).collect()
    }

    pub fn class_tokens(&self) -> Vec<Vec<f64>> {
        (0..self.spec.classes).map(|y| self.class_token(y)).collect()
    }

    pub fn domain(&self, k: usize) -> impl Iterator<Item = &LabeledEmbedding> {
        self.samples.iter().filter(move |s| s.domain == k)
    }

    pub fn cell(&self, class: usize, domain: usize) -> impl Iterator<Item = &LabeledEmbedding> {
        self.samples
            .iter()
            .filter(move |s| s.class == class && s.domain == domain)
    }

    /// Noise-free embedding of a cell, `I(normalize(c_y + s_k))`.
    pub fn cell_center(&self, encoder: &FrozenEncoder, class: usize, domain: usize) -> Result<Vec<f64>> {
        let mut raw = self.prototypes.row(class).to_vec();
        axpy(1.0, self.shifts.row(domain), &mut raw);
        encoder.encode_image(&normalize(&raw)?)
    }
}

fn gaussian(rng: &mut impl rand::Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Modified Gram–Schmidt over fresh Gaussian draws; a draw that collapses is
/// replaced by the next one from the same stream.
fn orthonormal_basis(count: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, "world.basis", 0, 0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(&mut rng, d);
        for b in &basis {
            let p = dot(&v, b);
            axpy(-p, b, &mut v);
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `K` shifts evenly spaced by angle `2π/K` in the plane of `o_0, o_1`,
/// starting from a seeded random phase.
fn plane_shifts(plane: &[Vec<f64>], domains: usize, magnitude: f64, seed: u64) -> Vec<Vec<f64>> {
    let phase = rng_for(seed, "world.style", 0, 0).random::<f64>() * TAU;
    (0..domains)
        .map(|k| {
            let angle = phase + TAU * k as f64 / domains as f64;
            let mut s: Vec<f64> = plane[0].iter().map(|v| magnitude * angle.cos() * v).collect();
            axpy(magnitude * angle.sin(), &plane[1], &mut s);
            s
        })
        .collect()
}

/// Rows `√(1−ρ)·o_k + c·Σ_l o_l` with `c` chosen so the rows are unit and
/// pairwise at cosine `ρ`.
fn overlapping_shifts(directions: &[Vec<f64>], overlap: f64, magnitude: f64) -> Vec<Vec<f64>> {
    let k = directions.len() as f64;
    let a = (1.0 - overlap).sqrt();
    let c = ((1.0 - overlap + overlap * k).sqrt() - a) / k;
    let d = directions[0].len();
    let mut total = vec![0.0; d];
    for o in directions {
        axpy(1.0, o, &mut total);
    }
    directions
        .iter()
        .map(|o| {
            let mut s: Vec<f64> = o.iter().map(|v| a * v).collect();
            axpy(c, &total, &mut s);
            s.iter().map(|v| v * magnitude).collect()
        })
        .collect()
}

pub fn generate_world(spec: &WorldSpec, encoder: &FrozenEncoder) -> Result<SyntheticWorld> {
    spec.validate()?;
    if encoder.dim() != spec.dim {
        return Err(Error::config(format!(
            "world dimension {} does not match encoder dimension {}",
            spec.dim,
            encoder.dim()
        )));
    }
    let (c, k, d) = (spec.classes, spec.domains, spec.dim);
    let basis = orthonormal_basis(c + k, d, spec.seed);
    let prototypes = Matrix::from_rows(&basis[..c])?;
    let shifts = Matrix::from_rows(&match spec.shift_layout {
        ShiftLayout::Plane => plane_shifts(&basis[c..c + 2], k, spec.shift_magnitude, spec.seed),
        ShiftLayout::Overlap => overlapping_shifts(&basis[c..], spec.shift_overlap, spec.shift_magnitude),
    })?;

    let mut samples = Vec::with_capacity(c * k * spec.samples_per_cell);
    for domain in 0..k {
        for class in 0..c {
            let mut rng = rng_for(spec.seed, "world.cell", domain as u64, class as u64);
            let mut center = prototypes.row(class).to_vec();
            axpy(1.0, shifts.row(domain), &mut center);
            for _ in 0..spec.samples_per_cell {
                let mut raw = center.clone();
                if spec.noise > 0.0 {
                    axpy(spec.noise, &gaussian(&mut rng, d), &mut raw);
                }
                let embedding = encoder.encode_image(&normalize(&raw)?)?;
                samples.push(LabeledEmbedding {
                    embedding,
                    class,
                    domain,
                    augmented: false,
                });
            }
        }
    }
    Ok(SyntheticWorld {
        spec: spec.clone(),
        prototypes,
        shifts,
        samples,
    })
}

/// Leave-one-domain-out split: client `i` holds the `i`-th remaining domain
/// in ascending order.
#[derive(Debug, Clone)]
pub struct EvaluationSplit {
    pub holdout: usize,
    /// World domain index held by each client.
    pub sources: Vec<usize>,
    pub clients: Vec<Vec<LabeledEmbedding>>,
    pub target: Vec<LabeledEmbedding>,
}

impl EvaluationSplit {
    pub fn client_count(&self) -> usize {
        self.sources.len()
    }

    /// Client slot holding world domain `domain`, if any.
    pub fn slot_of(&self, domain: usize) -> Option<usize> {
        self.sources.iter().position(|&d| d == domain)
    }
}

pub fn leave_one_out(world: &SyntheticWorld, holdout: usize) -> Result<EvaluationSplit> {
    if holdout >= world.spec.domains {
        return Err(Error::param(format!(
            "held-out domain {holdout} out of range for {} domains",
            world.spec.domains
        )));
    }
    let sources: Vec<usize> = (0..world.spec.domains).filter(|&k| k != holdout).collect();
    let clients = sources
        .iter()
        .map(|&k| world.domain(k).cloned().collect())
        .collect();
    let target = world.domain(holdout).cloned().collect();
    Ok(EvaluationSplit {
        holdout,
        sources,
        clients,
        target,
    })
}

#[derive(Debug, Clone)]
pub struct Subsample {
    pub data: Vec<LabeledEmbedding>,
    /// True when some class had no more than `shots` samples, so it was kept whole.
    pub saturated: bool,
}

/// At most `shots` samples per class, drawn without replacement. Kept samples
/// retain their original relative order.
pub fn few_shot_subsample(data: &[LabeledEmbedding], shots: usize, seed: u64) -> Result<Subsample> {
    if shots == 0 {
        return Err(Error::param("shots must be >= 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_class.entry(s.class).or_default().push(i);
    }
    let mut keep = Vec::new();
    let mut saturated = false;
    for (&class, idx) in by_class.iter_mut() {
        if idx.len() <= shots {
            saturated = true;
            keep.extend_from_slice(idx);
        } else {
            let mut rng = rng_for(seed, "fewshot", class as u64, 0);
            idx.shuffle(&mut rng);
            keep.extend_from_slice(&idx[..shots]);
        }
    }
    keep.sort_unstable();
    Ok(Subsample {
        data: keep.into_iter().map(|i| data[i].clone()).collect(),
        saturated,
    })
}

/// Applies the world's few-shot cap (if any) to every client of a split.
pub fn apply_shots(split: &mut EvaluationSplit, shots: usize, seed: u64) -> Result<bool> {
    let mut saturated = false;
    for (slot, data) in split.clients.iter_mut().enumerate() {
        let sub = few_shot_subsample(data, shots, derive_seed(seed, "fewshot.client", slot as u64, 0))?;
        saturated |= sub.saturated;
        *data = sub.data;
    }
    Ok(saturated)
}

/// Text descriptions available to every client: one token per described
/// domain plus one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptions {
    pub domain_tokens: BTreeMap<usize, Vec<f64>>,
    pub class_tokens: Vec<Vec<f64>>,
}

impl Descriptions {
    pub fn domain_token(&self, k: usize) -> Result<&[f64]> {
        self.domain_tokens
            .get(&k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("no text description for domain {k}")))
    }

    pub fn len(&self) -> usize {
        self.domain_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain_tokens.is_empty()
    }
}

/// Descriptions of the source domains, plus the held-out domain's when
/// `include_target` is set.
pub fn target_text_toggle(world: &SyntheticWorld, split: &EvaluationSplit, include_target: bool) -> Descriptions {
    let mut domain_tokens: BTreeMap<usize, Vec<f64>> =
        split.sources.iter().map(|&k| (k, world.domain_token(k))).collect();
    if include_target {
        domain_tokens.insert(split.holdout, world.domain_token(split.holdout));
    }
    Descriptions {
        domain_tokens,
        class_tokens: world.class_tokens(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small_spec(seed: u64) -> WorldSpec {
        WorldSpec {
            classes: 3,
            domains: 4,
            samples_per_cell: 20,
            noise: 0.1,
            dim: 12,
            seed,
            shift_magnitude: 2.0,
            shift_layout: ShiftLayout::Plane,
            shift_overlap: 0.3,
            token_scale: 1.0,
            shots: None,
        }
    }

    fn encoder(d: usize) -> FrozenEncoder {
        FrozenEncoder::new(EncoderConfig::new(d, 10, 42)).unwrap()
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small_spec(1);
        s.dim = 6;
        assert!(matches!(generate_world(&s, &encoder(6)), Err(Error::Configuration(_))));
        let mut s = small_spec(1);
        s.classes = 1;
        assert!(s.validate().is_err());
        let mut s = small_spec(1);
        s.domains = 2;
        assert!(s.validate().is_err());
        let mut s = small_spec(1);
        s.noise = -0.1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn geometry_matches_construction() {
        let mut spec = small_spec(3);
        spec.shift_layout = ShiftLayout::Overlap;
        let w = generate_world(&spec, &encoder(12)).unwrap();
        for a in 0..3 {
            assert!((norm(w.prototypes.row(a)) - 1.0).abs() < 1e-12);
            for b in 0..4 {
                assert!(dot(w.prototypes.row(a), w.shifts.row(b)).abs() < 1e-12);
            }
        }
        for a in 0..4 {
            assert!((norm(w.shifts.row(a)) - 2.0).abs() < 1e-12);
            for b in (a + 1)..4 {
                let cos = dot(w.shifts.row(a), w.shifts.row(b)) / 4.0;
                assert!((cos - 0.3).abs() < 1e-12);
            }
        }
        assert!(w.samples.iter().all(|s| s.class < 3 && s.domain < 4 && !s.augmented));
        assert_eq!(w.samples.len(), 3 * 4 * 20);
    }

    #[test]
    fn plane_shifts_are_evenly_spaced() {
        let w = generate_world(&small_spec(4), &encoder(12)).unwrap();
        // Four evenly spaced unit directions: neighbours orthogonal, opposites antiparallel.
        for a in 0..4 {
            assert!((norm(w.shifts.row(a)) - 2.0).abs() < 1e-12);
            let next = dot(w.shifts.row(a), w.shifts.row((a + 1) % 4)) / 4.0;
            let opposite = dot(w.shifts.row(a), w.shifts.row((a + 2) % 4)) / 4.0;
            assert!(next.abs() < 1e-12 && (opposite + 1.0).abs() < 1e-12);
            for y in 0..3 {
                assert!(dot(w.prototypes.row(y), w.shifts.row(a)).abs() < 1e-12);
            }
        }
        assert_eq!("plane".parse::<ShiftLayout>().unwrap(), ShiftLayout::Plane);
        assert_eq!(ShiftLayout::from_code(ShiftLayout::Overlap.code()), Some(ShiftLayout::Overlap));
    }

    #[test]
    fn noiseless_cells_are_constant() {
        let mut s = small_spec(5);
        s.noise = 0.0;
        let w = generate_world(&s, &encoder(12)).unwrap();
        let cell: Vec<_> = w.cell(1, 2).collect();
        assert!(cell.windows(2).all(|p| p[0].embedding == p[1].embedding));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_world(&small_spec(9), &encoder(12)).unwrap();
        let b = generate_world(&small_spec(9), &encoder(12)).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = generate_world(&small_spec(10), &encoder(12)).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn cell_mean_concentrates_on_center() {
        // Monte-Carlo oracle: per-coordinate mean within 3σ/√n of the center.
        let mut s = small_spec(11);
        s.noise = 0.01;
        s.samples_per_cell = 400;
        let enc = encoder(12);
        let w = generate_world(&s, &enc).unwrap();
        let bound = 3.0 * s.noise / (s.samples_per_cell as f64).sqrt();
        for (class, domain) in [(0, 0), (2, 3)] {
            let center = w.cell_center(&enc, class, domain).unwrap();
            let mut mean = vec![0.0; 12];
            for e in w.cell(class, domain) {
                axpy(1.0 / s.samples_per_cell as f64, &e.embedding, &mut mean);
            }
            for (m, c) in mean.iter().zip(&center) {
                assert!((m - c).abs() < bound, "{m} vs {c} bound {bound}");
            }
        }
    }

    #[test]
    fn leave_one_out_partitions_domains() {
        let w = generate_world(&small_spec(2), &encoder(12)).unwrap();
        let split = leave_one_out(&w, 1).unwrap();
        assert_eq!(split.client_count(), 3);
        assert_eq!(split.sources, vec![0, 2, 3]);
        let mut all = split.sources.clone();
        all.push(split.holdout);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        for (slot, data) in split.clients.iter().enumerate() {
            assert!(data.iter().all(|s| s.domain == split.sources[slot]));
            // exhaustive scan: no target sample is present in any client dataset
            for t in &split.target {
                assert!(!data.contains(t));
            }
        }
        assert!(split.target.iter().all(|s| s.domain == 1));
        assert!(matches!(leave_one_out(&w, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn few_shot_caps_each_class() {
        let w = generate_world(&small_spec(4), &encoder(12)).unwrap();
        let data: Vec<_> = w.domain(0).cloned().collect();
        let one = few_shot_subsample(&data, 1, 3).unwrap();
        assert!(one.data.len() <= 3);
        for shots in [1, 2, 5, 7] {
            let sub = few_shot_subsample(&data, shots, 3).unwrap();
            let mut hist = [0usize; 3];
            for s in &sub.data {
                hist[s.class] += 1;
            }
            assert!(hist.iter().all(|&h| h <= shots));
            assert!(!sub.saturated);
            assert_eq!(sub.data, few_shot_subsample(&data, shots, 3).unwrap().data);
        }
        let all = few_shot_subsample(&data, 20, 3).unwrap();
        assert_eq!(all.data, data);
        assert!(all.saturated);
        assert!(few_shot_subsample(&data, 0, 3).is_err());
    }

    #[test]
    fn target_text_toggle_counts() {
        let w = generate_world(&small_spec(6), &encoder(12)).unwrap();
        let split = leave_one_out(&w, 0).unwrap();
        assert_eq!(target_text_toggle(&w, &split, false).len(), 3);
        let with = target_text_toggle(&w, &split, true);
        assert_eq!(with.len(), 4);
        assert!(with.domain_token(0).is_ok());
        assert!(target_text_toggle(&w, &split, false).domain_token(0).is_err());
    }
}
