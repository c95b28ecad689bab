//! Frozen two-tower encoder standing in for a pretrained image/text model.
//!
//! Image tower: `I(raw) = normalize(A · raw)`.
//! Text tower: `T(tokens) = normalize(A · tanh(Σ_m s_m · token_m))`.
//!
//! `A` (d×d) is shared by both towers so image and text embeddings live in one
//! space. `s` (length M) is a per-position scaling that makes the text tower
//! order-sensitive. Both are drawn once from the seed and never change.
//!
//! # Seeding procedure
//!
//! Every parameter tensor is filled row-major from its own ChaCha20 stream.
//! The 32-byte ChaCha key is `seed ‖ tower_tag ‖ tensor_index ‖ 0u64`, each
//! field little-endian `u64`. Each value consumes one `next_u64()`:
//! `u = (x >> 11) · 2⁻⁵³ ∈ [0, 1)`, mapped affinely onto the tensor's range.
//!
//! | tensor            | tower tag          | index | range                |
//! |-------------------|--------------------|-------|----------------------|
//! | projection `A`    | [`TAG_SHARED`]     | 0     | `[−1/√d, 1/√d]`      |
//! | position scales   | [`TAG_TEXT`]       | 0     | `[0.5, 1.5]`         |

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::numerics::{check_finite, check_len, dot, norm, Matrix};

/// `b"shared\0\0"` as little-endian u64.
pub const TAG_SHARED: u64 = u64::from_le_bytes(*b"shared\0\0");
/// `b"text\0\0\0\0"` as little-endian u64.
pub const TAG_TEXT: u64 = u64::from_le_bytes(*b"text\0\0\0\0");

const POSITION_SCALE_RANGE: (f64, f64) = (0.5, 1.5);

/// Minimum pre-normalization norm accepted by the text and image towers.
const MIN_OUTPUT_NORM: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub normalize: bool,
}

impl EncoderConfig {
    pub fn new(dim: usize, max_tokens: usize, seed: u64) -> Self {
        Self {
            dim,
            max_tokens,
            seed,
            normalize: true,
        }
    }

    /// Checks `d ≥ 2` and that `max_tokens` fits two prompt blocks of
    /// `prompt_len` plus a description and a class token.
    pub fn validate(&self, prompt_len: usize) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config(format!("encoder dimension {} < 2", self.dim)));
        }
        let needed = 2 * prompt_len + 2;
        if self.max_tokens < needed {
            return Err(Error::config(format!(
                "max_tokens {} cannot hold two prompts of length {prompt_len} plus 2 fixed tokens",
                self.max_tokens
            )));
        }
        Ok(())
    }
}

/// Uniform stream described in the module docs.
pub(crate) struct SeededUniform(ChaCha20Rng);

impl SeededUniform {
    pub(crate) fn new(seed: u64, tag: u64, index: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&tag.to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        Self(ChaCha20Rng::from_seed(key))
    }

    pub(crate) fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub(crate) fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

/// Ordered token vectors fed to the text tower: prompt tokens first, then the
/// fixed description/class tokens, implicitly zero-padded to `max_tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    dim: usize,
    prompt_tokens: usize,
    tokens: Vec<f64>,
}

impl TokenSequence {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            prompt_tokens: 0,
            tokens: Vec::new(),
        }
    }

    /// Appends every row of `block` as a learnable prompt token. Prompts must
    /// precede fixed tokens.
    pub fn with_prompt(mut self, block: &Matrix) -> Result<Self> {
        if block.cols() != self.dim {
            return Err(Error::param(format!(
                "prompt width {} does not match encoder dimension {}",
                block.cols(),
                self.dim
            )));
        }
        if self.len() != self.prompt_tokens {
            return Err(Error::param("prompt tokens must precede fixed tokens"));
        }
        self.tokens.extend_from_slice(block.data());
        self.prompt_tokens += block.rows();
        Ok(self)
    }

    /// Appends a fixed (non-learnable) token such as a domain description or class name.
    pub fn with_token(mut self, token: &[f64]) -> Result<Self> {
        check_len(token, self.dim, "token")?;
        self.tokens.extend_from_slice(token);
        Ok(self)
    }

    /// Number of non-padding tokens.
    pub fn len(&self) -> usize {
        self.tokens.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_tokens
    }

    pub fn token(&self, m: usize) -> &[f64] {
        &self.tokens[m * self.dim..(m + 1) * self.dim]
    }
}

/// Cached activations of one text-tower forward pass.
#[derive(Debug, Clone)]
pub struct TextForward {
    /// `tanh(z)`
    activation: Vec<f64>,
    /// `A · tanh(z)` before normalization.
    projected: Vec<f64>,
    /// Encoder output.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    projection: Matrix,
    position_scales: Vec<f64>,
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.dim < 2 {
            return Err(Error::config(format!("encoder dimension {} < 2", config.dim)));
        }
        if config.max_tokens == 0 {
            return Err(Error::config("encoder needs at least one token position"));
        }
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = SeededUniform::new(config.seed, TAG_SHARED, 0);
        let data = (0..d * d).map(|_| rng.range(-bound, bound)).collect();
        let projection = Matrix::from_vec(d, d, data)?;
        let mut rng = SeededUniform::new(config.seed, TAG_TEXT, 0);
        let (lo, hi) = POSITION_SCALE_RANGE;
        let position_scales = (0..config.max_tokens).map(|_| rng.range(lo, hi)).collect();
        Ok(Self {
            config,
            projection,
            position_scales,
        })
    }

    /// Replaces the position scaling vector. Intended for constructing
    /// controlled encoders in tests and analyses.
    pub fn with_position_scales(mut self, scales: Vec<f64>) -> Result<Self> {
        check_len(&scales, self.config.max_tokens, "position scales")?;
        check_finite(&scales, "position scales")?;
        self.position_scales = scales;
        Ok(self)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn position_scales(&self) -> &[f64] {
        &self.position_scales
    }

    /// CRC32 over the little-endian bytes of every parameter.
    pub fn parameter_digest(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for v in self.projection.data().iter().chain(&self.position_scales) {
            hasher.update(&v.to_le_bytes());
        }
        hasher.finalize()
    }

    fn finish(&self, projected: &[f64]) -> Result<Vec<f64>> {
        if !self.config.normalize {
            return Ok(projected.to_vec());
        }
        let n = norm(projected);
        if !(n >= MIN_OUTPUT_NORM) {
            return Err(Error::domain("encoder output is a zero vector"));
        }
        Ok(projected.iter().map(|v| v / n).collect())
    }

    pub fn encode_image(&self, raw: &[f64]) -> Result<Vec<f64>> {
        check_len(raw, self.dim(), "raw image vector")?;
        check_finite(raw, "raw image vector")?;
        self.finish(&self.projection.matvec(raw))
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.text_forward(tokens)?.embedding)
    }

    pub fn text_forward(&self, tokens: &TokenSequence) -> Result<TextForward> {
        if tokens.dim != self.dim() {
            return Err(Error::param("token dimension does not match encoder"));
        }
        if tokens.len() > self.config.max_tokens {
            return Err(Error::param(format!(
                "token sequence of length {} exceeds max_tokens {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        check_finite(&tokens.tokens, "tokens")?;
        let d = self.dim();
        let mut z = vec![0.0; d];
        for m in 0..tokens.len() {
            let s = self.position_scales[m];
            for (zi, ti) in z.iter_mut().zip(tokens.token(m)) {
                *zi += s * ti;
            }
        }
        let activation: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let projected = self.projection.matvec(&activation);
        let embedding = self.finish(&projected)?;
        Ok(TextForward {
            activation,
            projected,
            embedding,
        })
    }

    /// Gradient of `upstream · T(tokens)` with respect to the pre-activation
    /// sum `z = Σ_m s_m · token_m`. Token `m` then receives `s_m · g_z`.
    pub fn text_backward_pre(&self, forward: &TextForward, upstream: &[f64]) -> Vec<f64> {
        let g_proj: Vec<f64> = if self.config.normalize {
            let n = norm(&forward.projected);
            let u = &forward.embedding;
            let along = dot(u, upstream);
            upstream.iter().zip(u).map(|(g, ui)| (g - ui * along) / n).collect()
        } else {
            upstream.to_vec()
        };
        let g_act = self.projection.matvec_t(&g_proj);
        g_act
            .iter()
            .zip(&forward.activation)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect()
    }

    /// Exact gradients of `upstream · T(tokens)` with respect to each prompt
    /// token (rows of the result). Fixed tokens are not exposed.
    pub fn encode_text_backward(&self, tokens: &TokenSequence, upstream: &[f64]) -> Result<Matrix> {
        check_len(upstream, self.dim(), "upstream gradient")?;
        let forward = self.text_forward(tokens)?;
        let g_z = self.text_backward_pre(&forward, upstream);
        let d = self.dim();
        let mut out = Matrix::zeros(tokens.prompt_len(), d);
        for m in 0..tokens.prompt_len() {
            let s = self.position_scales[m];
            for (o, g) in out.row_mut(m).iter_mut().zip(&g_z) {
                *o = s * g;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_backward_into, cosine_sim, grad_check, sub};

    fn encoder(d: usize) -> FrozenEncoder {
        FrozenEncoder::new(EncoderConfig::new(d, 12, 42)).unwrap()
    }

    fn vector(seed: u64, d: usize, scale: f64) -> Vec<f64> {
        let mut rng = SeededUniform::new(seed, 7, 7);
        (0..d).map(|_| rng.range(-scale, scale)).collect()
    }

    #[test]
    fn construction_is_bit_deterministic() {
        let a = encoder(16);
        let b = encoder(16);
        assert_eq!(a.parameter_digest(), b.parameter_digest());
        let raw = vector(1, 16, 1.0);
        let ea = a.encode_image(&raw).unwrap();
        let eb = b.encode_image(&raw).unwrap();
        assert!(ea.iter().zip(&eb).all(|(x, y)| x.to_bits() == y.to_bits()));
        let other = FrozenEncoder::new(EncoderConfig::new(16, 12, 43)).unwrap();
        assert_ne!(a.parameter_digest(), other.parameter_digest());
    }

    #[test]
    fn image_embedding_is_unit_norm() {
        let e = encoder(16).encode_image(&vector(3, 16, 2.0)).unwrap();
        assert!((norm(&e) - 1.0).abs() < 1e-12);
        assert!(encoder(16).encode_image(&[1.0; 15]).is_err());
    }

    #[test]
    fn reconstruction_oracle_seed_42() {
        // Rebuild A from the documented key layout and multiply by hand.
        let d = 8;
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&42u64.to_le_bytes());
        key[8..16].copy_from_slice(b"shared\0\0");
        let mut rng = ChaCha20Rng::from_seed(key);
        let bound = 1.0 / (d as f64).sqrt();
        let mut a = vec![[0.0f64; 8]; 8];
        for row in a.iter_mut() {
            for v in row.iter_mut() {
                let u = (rng.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0;
                *v = -bound + 2.0 * bound * u;
            }
        }
        let raw = [1.0, -0.5, 0.25, 0.0, 2.0, -1.0, 0.5, 0.75];
        let mut out = [0.0; 8];
        for i in 0..8 {
            for j in 0..8 {
                out[i] += a[i][j] * raw[j];
            }
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        let enc = FrozenEncoder::new(EncoderConfig::new(d, 4, 42)).unwrap();
        let got = enc.encode_image(&raw).unwrap();
        for i in 0..8 {
            assert!((got[i] - out[i] / n).abs() < 1e-14);
        }
    }

    #[test]
    fn all_zero_tokens_are_a_domain_error() {
        let enc = encoder(8);
        let seq = TokenSequence::new(8).with_token(&[0.0; 8]).unwrap();
        assert!(matches!(enc.encode_text(&seq), Err(Error::Domain(_))));
    }

    #[test]
    fn sequence_longer_than_max_is_rejected() {
        let enc = FrozenEncoder::new(EncoderConfig::new(4, 2, 1)).unwrap();
        let t = [0.1; 4];
        let seq = TokenSequence::new(4)
            .with_token(&t)
            .unwrap()
            .with_token(&t)
            .unwrap()
            .with_token(&t)
            .unwrap();
        assert!(matches!(enc.encode_text(&seq), Err(Error::Parameter(_))));
    }

    #[test]
    fn swapping_tokens_changes_output() {
        let enc = encoder(8);
        let (a, b) = (vector(1, 8, 0.5), vector(2, 8, 0.5));
        assert_ne!(enc.position_scales()[0], enc.position_scales()[1]);
        let ab = TokenSequence::new(8).with_token(&a).unwrap().with_token(&b).unwrap();
        let ba = TokenSequence::new(8).with_token(&b).unwrap().with_token(&a).unwrap();
        let (x, y) = (enc.encode_text(&ab).unwrap(), enc.encode_text(&ba).unwrap());
        assert!(norm(&sub(&x, &y)) > 1e-6);
    }

    #[test]
    fn prompts_must_precede_fixed_tokens() {
        let block = Matrix::zeros(2, 4);
        let seq = TokenSequence::new(4).with_token(&[1.0; 4]).unwrap();
        assert!(seq.with_prompt(&block).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_token_gradients() {
        let enc = encoder(8);
        let p = Matrix::from_vec(2, 8, vector(5, 16, 0.3)).unwrap();
        let seq = TokenSequence::new(8).with_prompt(&p).unwrap().with_token(&vector(6, 8, 0.3)).unwrap();
        let g = enc.encode_text_backward(&seq, &[0.0; 8]).unwrap();
        assert_eq!(g.shape(), (2, 8));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_scalings_give_identical_gradients() {
        let d = 6;
        let enc = FrozenEncoder::new(EncoderConfig::new(d, 4, 9))
            .unwrap()
            .with_position_scales(vec![0.8, 0.8, 1.3, 0.6])
            .unwrap();
        let v = vector(11, d, 0.2);
        let p = Matrix::from_vec(2, d, [v.clone(), v].concat()).unwrap();
        let seq = TokenSequence::new(d).with_prompt(&p).unwrap().with_token(&vector(12, d, 0.2)).unwrap();
        let g = enc.encode_text_backward(&seq, &vector(13, d, 1.0)).unwrap();
        assert_eq!(g.row(0), g.row(1));
    }

    /// Finite-difference oracle on `cos(T(tokens), target)` w.r.t. prompt tokens.
    #[test]
    fn prompt_gradient_through_cosine_matches_finite_differences() {
        let d = 8;
        let enc = encoder(d);
        let target = vector(21, d, 1.0);
        let fixed = vector(22, d, 0.5);
        let params = vector(23, 2 * d, 0.4);
        let loss = |theta: &[f64]| {
            let p = Matrix::from_vec(2, d, theta.to_vec()).unwrap();
            let seq = TokenSequence::new(d).with_prompt(&p).unwrap().with_token(&fixed).unwrap();
            cosine_sim(&enc.encode_text(&seq).unwrap(), &target).unwrap()
        };
        let p = Matrix::from_vec(2, d, params.clone()).unwrap();
        let seq = TokenSequence::new(d).with_prompt(&p).unwrap().with_token(&fixed).unwrap();
        let out = enc.encode_text(&seq).unwrap();
        let mut upstream = vec![0.0; d];
        cosine_backward_into(&out, &target, 1.0, &mut upstream);
        let analytic = enc.encode_text_backward(&seq, &upstream).unwrap();
        let report = grad_check(loss, &params, analytic.data(), 1e-5, 1e-4);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn linear_region_gradient_matches_closed_form() {
        // Small token: tanh'≈1, so g ≈ s_0 · Aᵀ · J_normalize · upstream.
        let d = 6;
        let enc = encoder(d);
        let token = vector(31, d, 1e-3);
        let upstream = vector(32, d, 1.0);
        let p = Matrix::from_vec(1, d, token.clone()).unwrap();
        let seq = TokenSequence::new(d).with_prompt(&p).unwrap();
        let g = enc.encode_text_backward(&seq, &upstream).unwrap();
        let proj = enc.projection().matvec(&token.iter().map(|t| (enc.position_scales()[0] * t).tanh()).collect::<Vec<_>>());
        let n = norm(&proj);
        let u: Vec<f64> = proj.iter().map(|v| v / n).collect();
        let along = dot(&u, &upstream);
        let jn: Vec<f64> = upstream.iter().zip(&u).map(|(g, ui)| (g - ui * along) / n).collect();
        let expected: Vec<f64> = enc.projection().matvec_t(&jn).iter().map(|v| enc.position_scales()[0] * v).collect();
        for (a, b) in g.row(0).iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
        let fd_loss = |theta: &[f64]| {
            let p = Matrix::from_vec(1, d, theta.to_vec()).unwrap();
            let seq = TokenSequence::new(d).with_prompt(&p).unwrap();
            dot(&enc.encode_text(&seq).unwrap(), &upstream)
        };
        assert!(grad_check(fd_loss, &token, g.row(0), 1e-7, 1e-4).passed());
    }

    #[test]
    fn small_tokens_are_approximately_additive() {
        let d = 16;
        let enc = encoder(d);
        let a: Vec<f64> = crate::numerics::normalize(&vector(41, d, 1.0)).unwrap().iter().map(|v| v * 0.01).collect();
        let b: Vec<f64> = crate::numerics::normalize(&vector(42, d, 1.0)).unwrap().iter().map(|v| v * 0.01).collect();
        let seq = TokenSequence::new(d).with_token(&a).unwrap().with_token(&b).unwrap();
        let t = enc.encode_text(&seq).unwrap();
        let s = enc.position_scales();
        let lin: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s[0] * x + s[1] * y).collect();
        let dir = crate::numerics::normalize(&enc.projection().matvec(&lin)).unwrap();
        assert!(norm(&sub(&t, &dir)) < 1e-3);
    }
}
