//! Multi-modal style transfer in embedding space.
//!
//! A client holding domain `i` trains one residual two-layer perceptron
//! `Q^{i→j}(e) = e + W₂·tanh(W₁·e + b₁) + b₂` per external domain `j`.
//!
//! * Alignment: the image change `Q(e) − e` should point along the text change
//!   `T([t_j, t_y]) − T([t_i, t_y])`; per-sample loss `1 − cos` ∈ [0, 2].
//! * Consistency: `Q(e)` must still be classified as `y` against the class
//!   text embeddings `T([t_c])` (softmax of cosines over τ, cross-entropy).
//!
//! The combined objective is `λ·L_A + (1 − λ)·L_C` with both terms as
//! per-sample means.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::{Descriptions, LabeledEmbedding};
use crate::encoder::{FrozenEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{
    check_len, cosine_backward_into, cosine_sim, dot, norm, normalize, softmax_cross_entropy, sub, AdamConfig,
    AdamState, GradTape, LeafId,
};
use crate::seed::rng_for;

/// Below this norm an image or text change direction is unusable.
pub const MIN_DIRECTION_NORM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformNetwork {
    dim: usize,
    hidden: usize,
    pub source: usize,
    pub target: usize,
    /// Flat storage: `W₁` (h×d), `b₁` (h), `W₂` (d×h), `b₂` (d).
    params: Vec<f64>,
}

struct Cache {
    hidden: Vec<f64>,
    output: Vec<f64>,
}

impl TransformNetwork {
    pub fn param_count(dim: usize, hidden: usize) -> usize {
        2 * dim * hidden + hidden + dim
    }

    /// All-zero residual branch: `Q(e) = e`.
    pub fn identity(dim: usize, hidden: usize, source: usize, target: usize) -> Self {
        Self {
            dim,
            hidden,
            source,
            target,
            params: vec![0.0; Self::param_count(dim, hidden)],
        }
    }

    /// `W₁ ~ U(±1/√d)`, `W₂ ~ U(±output_scale/√h)`, biases zero.
    pub fn init(dim: usize, hidden: usize, source: usize, target: usize, output_scale: f64, seed: u64) -> Self {
        let mut net = Self::identity(dim, hidden, source, target);
        let mut rng = rng_for(seed, "mst.init", source as u64, target as u64);
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = output_scale / (hidden as f64).sqrt();
        let (w1, w2) = (net.w1_range(), net.w2_range());
        for v in &mut net.params[w1] {
            *v = rng.random_range(-b1..=b1);
        }
        for v in &mut net.params[w2] {
            *v = rng.random_range(-b2..=b2);
        }
        net
    }

    pub fn from_params(dim: usize, hidden: usize, source: usize, target: usize, params: Vec<f64>) -> Result<Self> {
        check_len(&params, Self::param_count(dim, hidden), "transform parameters")?;
        Ok(Self {
            dim,
            hidden,
            source,
            target,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.dim
    }

    fn b1_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.dim;
        s..s + self.hidden
    }

    fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.dim + self.hidden;
        s..s + self.dim * self.hidden
    }

    fn b2_range(&self) -> std::ops::Range<usize> {
        let s = 2 * self.hidden * self.dim + self.hidden;
        s..s + self.dim
    }

    /// Sets the output bias directly (handy for constructing exact shifts).
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        check_len(bias, self.dim, "output bias")?;
        let r = self.b2_range();
        self.params[r].copy_from_slice(bias);
        Ok(())
    }

    fn forward_cached(&self, e: &[f64]) -> Cache {
        let (d, h) = (self.dim, self.hidden);
        let w1 = &self.params[self.w1_range()];
        let b1 = &self.params[self.b1_range()];
        let w2 = &self.params[self.w2_range()];
        let b2 = &self.params[self.b2_range()];
        let hidden: Vec<f64> = (0..h)
            .map(|r| (dot(&w1[r * d..(r + 1) * d], e) + b1[r]).tanh())
            .collect();
        let output = (0..d)
            .map(|r| e[r] + dot(&w2[r * h..(r + 1) * h], &hidden) + b2[r])
            .collect();
        Cache { hidden, output }
    }

    pub fn forward(&self, e: &[f64]) -> Result<Vec<f64>> {
        check_len(e, self.dim, "transform input")?;
        Ok(self.forward_cached(e).output)
    }

    /// Accumulates `∂(g_out · Q(e)) / ∂θ` into `grad`.
    fn backward_into(&self, e: &[f64], cache: &Cache, g_out: &[f64], grad: &mut [f64]) {
        let (d, h) = (self.dim, self.hidden);
        let w2 = &self.params[self.w2_range()];
        let mut g_hidden = vec![0.0; h];
        let w2r = self.w2_range();
        for r in 0..d {
            let g = g_out[r];
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[w2r.start + r * h..w2r.start + (r + 1) * h];
            for c in 0..h {
                row[c] += g * cache.hidden[c];
                g_hidden[c] += g * w2[r * h + c];
            }
        }
        let b2r = self.b2_range();
        for (a, g) in grad[b2r].iter_mut().zip(g_out) {
            *a += g;
        }
        let w1r = self.w1_range();
        let b1r = self.b1_range();
        for r in 0..h {
            let g_pre = g_hidden[r] * (1.0 - cache.hidden[r] * cache.hidden[r]);
            if g_pre == 0.0 {
                continue;
            }
            grad[b1r.start + r] += g_pre;
            let row = &mut grad[w1r.start + r * d..w1r.start + (r + 1) * d];
            for (a, x) in row.iter_mut().zip(e) {
                *a += g_pre * x;
            }
        }
    }
}

/// Text-side supervision for one `(i → j)` pair: per-class text change
/// directions and per-class text embeddings.
#[derive(Debug, Clone)]
pub struct MstTargets {
    pub text_dirs: Vec<Vec<f64>>,
    pub class_text: Vec<Vec<f64>>,
}

impl MstTargets {
    pub fn new(encoder: &FrozenEncoder, descriptions: &Descriptions, source: usize, target: usize) -> Result<Self> {
        if source == target {
            return Err(Error::param("transform target domain equals its source"));
        }
        let d = encoder.dim();
        let (ti, tj) = (descriptions.domain_token(source)?, descriptions.domain_token(target)?);
        let mut text_dirs = Vec::with_capacity(descriptions.class_tokens.len());
        let mut class_text = Vec::with_capacity(descriptions.class_tokens.len());
        for ty in &descriptions.class_tokens {
            let to = encoder.encode_text(&TokenSequence::new(d).with_token(tj)?.with_token(ty)?)?;
            let from = encoder.encode_text(&TokenSequence::new(d).with_token(ti)?.with_token(ty)?)?;
            text_dirs.push(sub(&to, &from));
            class_text.push(encoder.encode_text(&TokenSequence::new(d).with_token(ty)?)?);
        }
        Self::from_parts(text_dirs, class_text)
    }

    pub fn from_parts(text_dirs: Vec<Vec<f64>>, class_text: Vec<Vec<f64>>) -> Result<Self> {
        if text_dirs.len() != class_text.len() {
            return Err(Error::param("one text direction per class is required"));
        }
        for dir in &text_dirs {
            let n = norm(dir);
            if !(n >= MIN_DIRECTION_NORM) {
                return Err(Error::DegenerateDirection {
                    what: "text change direction",
                    norm: n,
                });
            }
        }
        Ok(Self { text_dirs, class_text })
    }

    pub fn classes(&self) -> usize {
        self.class_text.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstConfig {
    /// Weight of the alignment term, in [0, 1].
    pub lambda: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub temperature: f64,
    /// Scale of the residual branch's output weights at initialization.
    pub output_init: f64,
}

impl MstConfig {
    pub fn desk(dim: usize) -> Self {
        Self {
            lambda: 0.5,
            adam: AdamConfig::default(),
            epochs: 3,
            batch_size: 16,
            hidden: dim / 2,
            temperature: 0.01,
            output_init: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::config("MST batch size and hidden width must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("MST temperature must be positive"));
        }
        Ok(())
    }
}

/// Per-sample means of both MST terms on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MstLossParts {
    pub alignment: f64,
    pub consistency: f64,
}

impl MstLossParts {
    pub fn combined(&self, lambda: f64) -> f64 {
        lambda * self.alignment + (1.0 - lambda) * self.consistency
    }
}

fn check_batch(batch: &[&LabeledEmbedding], targets: &MstTargets) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::param("empty MST batch"));
    }
    if let Some(s) = batch.iter().find(|s| s.class >= targets.classes()) {
        return Err(Error::Data(format!("class {} has no text description", s.class)));
    }
    Ok(())
}

fn image_direction(q: &TransformNetwork, e: &[f64], cache: &Cache) -> Result<Vec<f64>> {
    let delta = sub(&cache.output, e);
    let n = norm(&delta);
    if !(n >= MIN_DIRECTION_NORM) {
        return Err(Error::DegenerateDirection {
            what: "image change direction",
            norm: n,
        });
    }
    debug_assert_eq!(delta.len(), q.dim);
    Ok(delta)
}

/// Alignment loss summed over the batch: `Σ (1 − cos(Q(e) − e, Δ_txt[y]))`.
pub fn alignment_loss(q: &TransformNetwork, batch: &[&LabeledEmbedding], targets: &MstTargets) -> Result<f64> {
    check_batch(batch, targets)?;
    let mut total = 0.0;
    for s in batch {
        let cache = q.forward_cached(&s.embedding);
        let delta = image_direction(q, &s.embedding, &cache)?;
        total += 1.0 - cosine_sim(&delta, &targets.text_dirs[s.class])?;
    }
    Ok(total)
}

/// Mean cross-entropy of classifying `Q(e)` against the class text embeddings.
pub fn consistency_loss(q: &TransformNetwork, batch: &[&LabeledEmbedding], targets: &MstTargets, temperature: f64) -> Result<f64> {
    check_batch(batch, targets)?;
    if targets.classes() < 2 {
        return Err(Error::param("consistency loss needs at least 2 classes"));
    }
    let mut total = 0.0;
    for s in batch {
        let out = q.forward(&s.embedding)?;
        let logits = targets
            .class_text
            .iter()
            .map(|t| cosine_sim(&out, t))
            .collect::<Result<Vec<_>>>()?;
        total += softmax_cross_entropy(&logits, temperature, s.class)?.0;
    }
    Ok(total / batch.len() as f64)
}

/// `λ · mean L_A + (1 − λ) · L_C`.
pub fn mst_loss(q: &TransformNetwork, batch: &[&LabeledEmbedding], targets: &MstTargets, lambda: f64, temperature: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("lambda {lambda} outside [0, 1]")));
    }
    let la = alignment_loss(q, batch, targets)? / batch.len() as f64;
    let lc = consistency_loss(q, batch, targets, temperature)?;
    Ok(lambda * la + (1.0 - lambda) * lc)
}

/// Gradient of `wa · mean L_A + wc · L_C` with respect to the flat parameters
/// of `q`, accumulated into `leaf`. Terms with zero weight are skipped.
pub fn mst_gradient(
    q: &TransformNetwork,
    batch: &[&LabeledEmbedding],
    targets: &MstTargets,
    weights: (f64, f64),
    temperature: f64,
    tape: &mut GradTape,
    leaf: LeafId,
) -> Result<MstLossParts> {
    check_batch(batch, targets)?;
    let (wa, wc) = weights;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; q.params.len()];
    let mut parts = MstLossParts::default();
    for s in batch {
        let e = &s.embedding;
        let cache = q.forward_cached(e);
        let mut g_out = vec![0.0; q.dim];
        if wa != 0.0 {
            let delta = image_direction(q, e, &cache)?;
            let dir = &targets.text_dirs[s.class];
            parts.alignment += (1.0 - cosine_sim(&delta, dir)?) / n;
            // ∂(1 − cos(Q(e) − e, dir)) / ∂Q(e)
            cosine_backward_into(&delta, dir, -wa / n, &mut g_out);
        }
        if wc != 0.0 {
            let logits = targets
                .class_text
                .iter()
                .map(|t| cosine_sim(&cache.output, t))
                .collect::<Result<Vec<_>>>()?;
            let (loss, probs) = softmax_cross_entropy(&logits, temperature, s.class)?;
            parts.consistency += loss / n;
            for (c, t) in targets.class_text.iter().enumerate() {
                let indicator = if c == s.class { 1.0 } else { 0.0 };
                let g_logit = (probs[c] - indicator) / temperature;
                cosine_backward_into(&cache.output, t, wc * g_logit / n, &mut g_out);
            }
        }
        q.backward_into(e, &cache, &g_out, &mut grad);
    }
    tape.record("mst.backward");
    tape.accumulate(leaf, &grad)?;
    Ok(parts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEpochLog {
    pub epoch: usize,
    pub alignment: f64,
    pub consistency: f64,
    pub combined: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedTransform {
    pub network: TransformNetwork,
    pub log: Vec<MstEpochLog>,
}

/// Trains `Q^{source→target}` on `data` with Adam. Batches follow a seeded
/// per-epoch shuffle, so `(data, config, seed)` fixes the result bit-exactly.
pub fn train_transform(
    data: &[LabeledEmbedding],
    source: usize,
    target: usize,
    encoder: &FrozenEncoder,
    descriptions: &Descriptions,
    config: &MstConfig,
    seed: u64,
) -> Result<TrainedTransform> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::config(format!("client for domain {source} has no data")));
    }
    let targets = MstTargets::new(encoder, descriptions, source, target)?;
    let mut network = TransformNetwork::init(encoder.dim(), config.hidden, source, target, config.output_init, seed);
    let mut adam = AdamState::new(config.adam, network.params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let weights = (config.lambda, 1.0 - config.lambda);
    for epoch in 0..config.epochs {
        let mut rng = rng_for(seed, "mst.shuffle", target as u64, epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = MstLossParts::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledEmbedding> = chunk.iter().map(|&i| &data[i]).collect();
            let mut tape = GradTape::new();
            let leaf = tape.leaf("transform", &[network.params.len()]);
            let parts = mst_gradient(&network, &batch, &targets, weights, config.temperature, &mut tape, leaf)?;
            let w = batch.len() as f64 / data.len() as f64;
            sum.alignment += parts.alignment * w;
            sum.consistency += parts.consistency * w;
            let grad = tape.take(leaf);
            adam.step(&mut network.params, &grad)?;
        }
        let combined = sum.combined(config.lambda);
        if !combined.is_finite() {
            return Err(Error::NonFinite(format!(
                "MST loss for {source}->{target} at epoch {epoch}"
            )));
        }
        log.push(MstEpochLog {
            epoch,
            alignment: sum.alignment,
            consistency: sum.consistency,
            combined,
        });
    }
    Ok(TrainedTransform { network, log })
}

/// Augmented embeddings of one client, one list per external domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationBank {
    pub source: usize,
    pub lists: Vec<(usize, Vec<LabeledEmbedding>)>,
}

impl AugmentationBank {
    pub fn list(&self, target: usize) -> Option<&[LabeledEmbedding]> {
        self.lists.iter().find(|(j, _)| *j == target).map(|(_, l)| l.as_slice())
    }

    pub fn entries(&self) -> impl Iterator<Item = &LabeledEmbedding> {
        self.lists.iter().flat_map(|(_, l)| l.iter())
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|(_, l)| l.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Applies each transform to every source sample. Outputs are unit-normalized
/// and carry the source class, the transform's target domain and
/// `augmented = true`.
pub fn build_augmentation_bank(
    source: usize,
    data: &[LabeledEmbedding],
    external_domains: &[usize],
    transforms: &[TransformNetwork],
) -> Result<AugmentationBank> {
    let mut lists = Vec::with_capacity(external_domains.len());
    for &j in external_domains {
        if j == source {
            return Err(Error::config("a client cannot augment towards its own domain"));
        }
        let q = transforms
            .iter()
            .find(|q| q.source == source && q.target == j)
            .ok_or_else(|| Error::config(format!("missing transform {source}->{j}")))?;
        let list = data
            .iter()
            .map(|s| {
                Ok(LabeledEmbedding {
                    embedding: normalize(&q.forward(&s.embedding)?)?,
                    class: s.class,
                    domain: j,
                    augmented: true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        lists.push((j, list));
    }
    Ok(AugmentationBank { source, lists })
}

/// Index and cosine of the most similar reference entry; ties go to the
/// lowest index.
pub fn nearest_neighbor_audit(augmented: &[f64], reference: &[LabeledEmbedding]) -> Result<(usize, f64)> {
    if reference.is_empty() {
        return Err(Error::param("empty reference set"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in reference.iter().enumerate() {
        let c = cosine_sim(augmented, &r.embedding)?;
        if c > best.1 {
            best = (i, c);
        }
    }
    Ok(best)
}

/// Mean cosine between same-class augmented and real target-domain samples,
/// before and after transfer, for one `(class, i → j)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferCell {
    pub class: usize,
    pub source: usize,
    pub target: usize,
    pub before: f64,
    pub after: f64,
}

impl TransferCell {
    pub fn improved(&self) -> bool {
        self.after > self.before
    }
}

fn unit_sum<'a>(items: impl Iterator<Item = &'a LabeledEmbedding>, dim: usize) -> Result<(Vec<f64>, usize)> {
    let mut acc = vec![0.0; dim];
    let mut n = 0;
    for s in items {
        let u = normalize(&s.embedding)?;
        for (a, v) in acc.iter_mut().zip(&u) {
            *a += v;
        }
        n += 1;
    }
    Ok((acc, n))
}

/// Mean pairwise cosine between sets equals the dot product of their mean
/// unit vectors, so each cell costs one pass over its members.
pub fn transfer_cells(
    bank: &AugmentationBank,
    source_data: &[LabeledEmbedding],
    reference: &[LabeledEmbedding],
    classes: usize,
) -> Result<Vec<TransferCell>> {
    let dim = match source_data.first() {
        Some(s) => s.embedding.len(),
        None => return Ok(Vec::new()),
    };
    let mut cells = Vec::new();
    for (target, list) in &bank.lists {
        for class in 0..classes {
            let (real, nr) = unit_sum(reference.iter().filter(|s| s.domain == *target && s.class == class), dim)?;
            let (orig, no) = unit_sum(source_data.iter().filter(|s| s.class == class), dim)?;
            let (aug, na) = unit_sum(list.iter().filter(|s| s.class == class), dim)?;
            if nr == 0 || no == 0 || na == 0 {
                continue;
            }
            cells.push(TransferCell {
                class,
                source: bank.source,
                target: *target,
                before: dot(&orig, &real) / (no * nr) as f64,
                after: dot(&aug, &real) / (na * nr) as f64,
            });
        }
    }
    Ok(cells)
}
