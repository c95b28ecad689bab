//! Dual prompts, the domain classifier and domain-aware prompt generation.
//!
//! Class probabilities for an image embedding `x` under a prompt prefix `P`:
//!
//! ```text
//! p(y = c | x) = softmax_c( cos(T([P, t_c]), x) / τ )
//! ```
//!
//! `P` is the global prompt alone, the composite `[P^G, P^D_i]`, or at
//! inference `[P^G, P^N(x)]` where `P^N(x) = Σ_k g_k(x) · P^D_k` mixes the
//! collected domain prompts with the classifier's domain weights.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::datagen::LabeledEmbedding;
use crate::encoder::{FrozenEncoder, TextForward, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{
    check_finite, check_len, cosine_backward_into, cosine_sim, dot, softmax, softmax_cross_entropy, GradTape, LeafId,
    Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpgMode {
    /// Softmax weights over source domains.
    Soft,
    /// Argmax basis vector, ties to the lowest index.
    OneHot,
}

impl std::str::FromStr for DpgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(DpgMode::Soft),
            "onehot" => Ok(DpgMode::OneHot),
            other => Err(Error::config(format!("unknown DPG mode {other:?} (soft|onehot)"))),
        }
    }
}

impl std::fmt::Display for DpgMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DpgMode::Soft => "soft",
            DpgMode::OneHot => "onehot",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    pub length: usize,
    pub dim: usize,
    pub temperature: f64,
    pub dpg_mode: DpgMode,
    /// Standard deviation of the Gaussian prompt initialization.
    pub init_std: f64,
}

impl PromptConfig {
    pub fn desk(dim: usize) -> Self {
        Self {
            length: 4,
            dim,
            temperature: 0.01,
            dpg_mode: DpgMode::Soft,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("prompt length must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::config("prompt init_std must be >= 0"));
        }
        Ok(())
    }
}

/// `L×d` block of learnable prompt vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBlock(Matrix);

impl PromptBlock {
    pub fn zeros(length: usize, dim: usize) -> Self {
        Self(Matrix::zeros(length, dim))
    }

    pub fn random(length: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..length * dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self(Matrix::from_vec(length, dim, data).expect("shape is consistent"))
    }

    pub fn from_matrix(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn length(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn mean_vector(&self) -> Vec<f64> {
        self.0.mean_row()
    }
}

/// Domain prompts ordered by client slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPromptList {
    blocks: Vec<PromptBlock>,
}

impl DomainPromptList {
    pub fn new(blocks: Vec<PromptBlock>) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::config("empty domain prompt list"))?;
        let shape = first.matrix().shape();
        if blocks.iter().any(|b| b.matrix().shape() != shape) {
            return Err(Error::config("domain prompts must share one shape"));
        }
        Ok(Self { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[PromptBlock] {
        &self.blocks
    }

    pub fn get(&self, k: usize) -> Option<&PromptBlock> {
        self.blocks.get(k)
    }
}

/// Single linear layer `d → K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifier {
    domains: usize,
    dim: usize,
    /// Flat storage: weight rows (K×d) followed by the bias (K).
    params: Vec<f64>,
}

impl DomainClassifier {
    pub fn zeros(domains: usize, dim: usize) -> Self {
        Self {
            domains,
            dim,
            params: vec![0.0; domains * dim + domains],
        }
    }

    pub fn from_parts(weight: &Matrix, bias: &[f64]) -> Result<Self> {
        check_len(bias, weight.rows(), "classifier bias")?;
        let mut params = weight.data().to_vec();
        params.extend_from_slice(bias);
        check_finite(&params, "classifier")?;
        Ok(Self {
            domains: weight.rows(),
            dim: weight.cols(),
            params,
        })
    }

    pub fn param_count(domains: usize, dim: usize) -> usize {
        domains * dim + domains
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight(&self) -> Matrix {
        Matrix::from_vec(self.domains, self.dim, self.params[..self.domains * self.dim].to_vec())
            .expect("shape is consistent")
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.domains * self.dim..]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let bias = self.bias();
        (0..self.domains)
            .map(|k| dot(&self.params[k * d..(k + 1) * d], x) + bias[k])
            .collect()
    }
}

/// Frozen pieces shared by every prediction: the encoder, class tokens and τ.
#[derive(Debug, Clone, Copy)]
pub struct TextContext<'a> {
    pub encoder: &'a FrozenEncoder,
    pub class_tokens: &'a [Vec<f64>],
    pub temperature: f64,
}

impl<'a> TextContext<'a> {
    pub fn new(encoder: &'a FrozenEncoder, class_tokens: &'a [Vec<f64>], temperature: f64) -> Self {
        Self {
            encoder,
            class_tokens,
            temperature,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_tokens.len()
    }
}

/// `T(t)` for a single fixed token (e.g. a domain description).
pub fn description_embedding(encoder: &FrozenEncoder, token: &[f64]) -> Result<Vec<f64>> {
    encoder.encode_text(&TokenSequence::new(encoder.dim()).with_token(token)?)
}

/// Class text embeddings under one prompt prefix.
struct ClassTexts {
    forwards: Vec<TextForward>,
}

fn class_texts(ctx: &TextContext, prefix: &[&PromptBlock]) -> Result<ClassTexts> {
    if ctx.classes() < 2 {
        return Err(Error::param("prediction needs at least 2 classes"));
    }
    let d = ctx.encoder.dim();
    let forwards = ctx
        .class_tokens
        .iter()
        .map(|t| {
            let mut seq = TokenSequence::new(d);
            for block in prefix {
                seq = seq.with_prompt(block.matrix())?;
            }
            ctx.encoder.text_forward(&seq.with_token(t)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassTexts { forwards })
}

impl ClassTexts {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forwards.iter().map(|f| cosine_sim(&f.embedding, x)).collect()
    }
}

/// Class distribution for `x` under an arbitrary prompt prefix.
pub fn predict_with_prompts(ctx: &TextContext, x: &[f64], prefix: &[&PromptBlock]) -> Result<Vec<f64>> {
    let texts = class_texts(ctx, prefix)?;
    softmax(&texts.logits(x)?, ctx.temperature)
}

pub fn predict_global(ctx: &TextContext, x: &[f64], global: &PromptBlock) -> Result<Vec<f64>> {
    predict_with_prompts(ctx, x, &[global])
}

/// Prediction with the composite prompt `[P^G, P^D_i]`; without a global
/// prompt only the domain prompt is used.
pub fn predict_composite(ctx: &TextContext, x: &[f64], global: Option<&PromptBlock>, domain: &PromptBlock) -> Result<Vec<f64>> {
    match global {
        Some(g) => predict_with_prompts(ctx, x, &[g, domain]),
        None => predict_with_prompts(ctx, x, &[domain]),
    }
}

/// Gradient sink for one trainable tensor.
pub type GradSink<'t> = Option<(&'t mut GradTape, LeafId)>;

/// Mean cross-entropy of `predict_with_prompts` over `batch`. `trainable[b]`
/// selects which prefix block receives gradients (at most one).
fn prompted_cross_entropy(
    ctx: &TextContext,
    batch: &[&LabeledEmbedding],
    prefix: &[&PromptBlock],
    trainable: Option<usize>,
    sink: GradSink,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let texts = class_texts(ctx, prefix)?;
    let n = batch.len() as f64;
    let tau = ctx.temperature;
    let d = ctx.encoder.dim();
    let mut g_text = vec![vec![0.0; d]; ctx.classes()];
    let want_grad = sink.is_some() && trainable.is_some();
    let mut total = 0.0;
    for s in batch {
        if s.class >= ctx.classes() {
            return Err(Error::Data(format!("class label {} out of range", s.class)));
        }
        let logits = texts.logits(&s.embedding)?;
        let (loss, probs) = softmax_cross_entropy(&logits, tau, s.class)?;
        total += loss;
        if want_grad {
            for (c, f) in texts.forwards.iter().enumerate() {
                let indicator = if c == s.class { 1.0 } else { 0.0 };
                let g = (probs[c] - indicator) / (tau * n);
                cosine_backward_into(&f.embedding, &s.embedding, g, &mut g_text[c]);
            }
        }
    }
    if let (Some((tape, leaf)), Some(b)) = (sink, trainable) {
        let offset: usize = prefix[..b].iter().map(|p| p.length()).sum();
        let scales = ctx.encoder.position_scales();
        for (f, g) in texts.forwards.iter().zip(&g_text) {
            let g_z = ctx.encoder.text_backward_pre(f, g);
            for l in 0..prefix[b].length() {
                tape.accumulate_slice(leaf, l * d, scales[offset + l], &g_z);
            }
        }
        tape.record("prompt.cross_entropy.backward");
    }
    Ok(total / n)
}

/// Global-prompt loss over a batch drawn from original plus augmented data.
pub fn global_loss(ctx: &TextContext, batch: &[&LabeledEmbedding], global: &PromptBlock, sink: GradSink) -> Result<f64> {
    prompted_cross_entropy(ctx, batch, &[global], Some(0), sink)
}

/// Classification part of the domain-prompt loss. The global prompt is
/// frozen; gradients reach the domain prompt only.
pub fn composite_loss(
    ctx: &TextContext,
    batch: &[&LabeledEmbedding],
    global: Option<&PromptBlock>,
    domain: &PromptBlock,
    sink: GradSink,
) -> Result<f64> {
    match global {
        Some(g) => prompted_cross_entropy(ctx, batch, &[g, domain], Some(1), sink),
        None => prompted_cross_entropy(ctx, batch, &[domain], Some(0), sink),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log(e^{a} / (e^{a} + e^{b}))` from the two similarities.
pub fn contrastive_from_sims(positive: f64, negative: f64) -> f64 {
    softplus(negative - positive)
}

/// Contrastive separation term of the domain-prompt loss with
/// `sim(P, v) = cos(mean_rows(P), v)`. Positive pair: the domain prompt and
/// its encoded description; negative pair: the domain and global prompts.
pub fn contrastive_loss(domain: &PromptBlock, global: &PromptBlock, domain_text: &[f64], sink: GradSink) -> Result<f64> {
    let m = domain.mean_vector();
    let g = global.mean_vector();
    let a = cosine_sim(&m, domain_text)?;
    let b = cosine_sim(&m, &g)?;
    let loss = contrastive_from_sims(a, b);
    if let Some((tape, leaf)) = sink {
        let w = sigmoid(b - a);
        let mut g_m = vec![0.0; m.len()];
        cosine_backward_into(&m, domain_text, -w, &mut g_m);
        cosine_backward_into(&m, &g, w, &mut g_m);
        let inv_l = 1.0 / domain.length() as f64;
        for l in 0..domain.length() {
            tape.accumulate_slice(leaf, l * m.len(), inv_l, &g_m);
        }
        tape.record("prompt.contrastive.backward");
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DomainLossParts {
    pub classification: f64,
    pub contrastive: f64,
}

impl DomainLossParts {
    pub fn total(&self) -> f64 {
        self.classification + self.contrastive
    }
}

/// Domain-prompt loss on local data: composite cross-entropy plus, when
/// `use_contrastive` is set and a global prompt exists, the contrastive term.
pub fn domain_loss(
    ctx: &TextContext,
    batch: &[&LabeledEmbedding],
    global: Option<&PromptBlock>,
    domain: &PromptBlock,
    domain_text: &[f64],
    use_contrastive: bool,
    mut sink: GradSink,
) -> Result<DomainLossParts> {
    let reborrow = sink.as_mut().map(|(t, l)| (&mut **t, *l));
    let classification = composite_loss(ctx, batch, global, domain, reborrow)?;
    let contrastive = match (use_contrastive, global) {
        (true, Some(g)) => contrastive_loss(domain, g, domain_text, sink)?,
        _ => 0.0,
    };
    Ok(DomainLossParts {
        classification,
        contrastive,
    })
}

/// Domain weights `G` for `x`.
pub fn classify_domain(x: &[f64], classifier: &DomainClassifier, mode: DpgMode) -> Result<Vec<f64>> {
    check_len(x, classifier.dim(), "classifier input")?;
    let logits = classifier.logits(x);
    match mode {
        DpgMode::Soft => softmax(&logits, 1.0),
        DpgMode::OneHot => {
            check_finite(&logits, "classifier logits")?;
            let mut best = 0;
            for (k, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = k;
                }
            }
            let mut g = vec![0.0; logits.len()];
            g[best] = 1.0;
            Ok(g)
        }
    }
}

/// `P^N = Σ_k g_k · P^D_k`, summed in ascending `k`.
pub fn dpg_generate(weights: &[f64], list: &DomainPromptList) -> Result<PromptBlock> {
    if weights.len() != list.len() {
        return Err(Error::config(format!(
            "{} domain weights for {} domain prompts",
            weights.len(),
            list.len()
        )));
    }
    check_finite(weights, "domain weights")?;
    let first = &list.blocks[0];
    let mut out: Vec<f64> = first.data().iter().map(|v| weights[0] * v).collect();
    for (g, block) in weights.iter().zip(&list.blocks).skip(1) {
        for (o, v) in out.iter_mut().zip(block.data()) {
            *o += g * v;
        }
    }
    Ok(PromptBlock(Matrix::from_vec(first.length(), first.dim(), out)?))
}

/// Mean cross-entropy of the soft classifier output against domain slots.
pub fn classifier_loss(inputs: &[&[f64]], labels: &[usize], classifier: &DomainClassifier, sink: GradSink) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::param("empty batch"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::param("one domain label per input is required"));
    }
    let n = inputs.len() as f64;
    let (k, d) = (classifier.domains(), classifier.dim());
    let mut grad = sink.as_ref().map(|_| vec![0.0; classifier.params.len()]);
    let mut total = 0.0;
    for (x, &label) in inputs.iter().zip(labels) {
        if label >= k {
            return Err(Error::Data(format!("domain index {label} out of range for {k} domains")));
        }
        check_len(x, d, "classifier input")?;
        let (loss, probs) = softmax_cross_entropy(&classifier.logits(x), 1.0, label)?;
        total += loss;
        if let Some(grad) = grad.as_mut() {
            for c in 0..k {
                let g = (probs[c] - if c == label { 1.0 } else { 0.0 }) / n;
                for (a, xi) in grad[c * d..(c + 1) * d].iter_mut().zip(x.iter()) {
                    *a += g * xi;
                }
                grad[k * d + c] += g;
            }
        }
    }
    if let (Some((tape, leaf)), Some(grad)) = (sink, grad) {
        tape.accumulate(leaf, &grad)?;
        tape.record("classifier.backward");
    }
    Ok(total / n)
}

/// Inference path for an unseen-domain sample: `[P^G, P^N(x)]`, or `[P^N(x)]`
/// when no global prompt was trained.
pub fn predict_unseen(
    ctx: &TextContext,
    x: &[f64],
    global: Option<&PromptBlock>,
    list: &DomainPromptList,
    classifier: &DomainClassifier,
    mode: DpgMode,
) -> Result<Vec<f64>> {
    let weights = classify_domain(x, classifier, mode)?;
    let generated = dpg_generate(&weights, list)?;
    predict_composite(ctx, x, global, &generated)
}

/// Trained parameters used at inference on the held-out domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptModel {
    pub global: Option<PromptBlock>,
    pub domains: Option<DomainPromptList>,
    pub classifier: Option<DomainClassifier>,
}

impl PromptModel {
    /// `predict_unseen` when domain prompts and a classifier exist, otherwise
    /// `predict_global`.
    pub fn predict(&self, ctx: &TextContext, x: &[f64], mode: DpgMode) -> Result<Vec<f64>> {
        match (&self.domains, &self.classifier, &self.global) {
            (Some(list), Some(clf), global) => predict_unseen(ctx, x, global.as_ref(), list, clf, mode),
            (_, _, Some(g)) => predict_global(ctx, x, g),
            _ => Err(Error::config("model has neither a global prompt nor domain prompts with a classifier")),
        }
    }

    /// Top-1 accuracy over `data`.
    pub fn accuracy(&self, ctx: &TextContext, data: &[LabeledEmbedding], mode: DpgMode) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::param("accuracy over an empty set"));
        }
        let mut hits = 0usize;
        for s in data {
            if argmax(&self.predict(ctx, &s.embedding, mode)?) == s.class {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
