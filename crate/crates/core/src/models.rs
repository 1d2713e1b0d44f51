//! Small autoregressive next-token models and posterior simulation.
//!
//! Two backends share one flat parameter vector:
//!
//! - `Tabular`: one logit row per context tuple, `V^n x V` parameters.
//! - `LinearSoftmax`: one-hot context features (`n*V`) mapped straight to
//!   logits (`H = 0`), or through a `tanh` hidden layer of width `H`.
//!
//! Matrix blocks are stored row-major and back to back; [`AutoregressiveModel::blocks`]
//! lists them in storage order. Low-rank noise is applied per block.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;
use crate::simplex::{mixture, softmax_raw, Categorical};

/// Upper bound on parameter count, guards `V^n` blow-ups in the tabular backend.
pub const MAX_PARAMS: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Tabular,
    LinearSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: usize,
    pub bos_id: usize,
    pub eos_id: Option<usize>,
}

impl VocabSpec {
    pub fn new(size: usize, bos_id: usize, eos_id: Option<usize>) -> Result<Self> {
        let spec = Self { size, bos_id, eos_id };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(invalid(format!("vocabulary size {} < 2", self.size)));
        }
        if self.bos_id >= self.size {
            return Err(invalid(format!("bos id {} >= V", self.bos_id)));
        }
        if let Some(eos) = self.eos_id {
            if eos >= self.size {
                return Err(invalid(format!("eos id {eos} >= V")));
            }
            if eos == self.bos_id {
                return Err(invalid("bos and eos must differ"));
            }
        }
        Ok(())
    }
}

/// A parameter matrix inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoregressiveModel {
    backend: Backend,
    context_window: usize,
    hidden_width: usize,
    vocab: VocabSpec,
    params: Vec<f64>,
}

/// Cached forward pass, consumed by backprop.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    pub window: Vec<usize>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl AutoregressiveModel {
    pub fn zeros(backend: Backend, vocab: VocabSpec, context_window: usize, hidden_width: usize) -> Result<Self> {
        let n = Self::param_count(backend, vocab.size, context_window, hidden_width)?;
        Self::from_params(backend, vocab, context_window, hidden_width, vec![0.0; n])
    }

    /// Gaussian initialization with standard deviation `scale`.
    pub fn random(
        backend: Backend,
        vocab: VocabSpec,
        context_window: usize,
        hidden_width: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeros(backend, vocab, context_window, hidden_width)?;
        let mut r = rng::stream(seed);
        for p in &mut model.params {
            let z: f64 = r.sample(StandardNormal);
            *p = scale * z;
        }
        Ok(model)
    }

    pub fn from_params(
        backend: Backend,
        vocab: VocabSpec,
        context_window: usize,
        hidden_width: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        vocab.validate()?;
        let expected = Self::param_count(backend, vocab.size, context_window, hidden_width)?;
        if params.len() != expected {
            return Err(invalid(format!("expected {expected} params, got {}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        Ok(Self { backend, context_window, hidden_width, vocab, params })
    }

    pub fn param_count(backend: Backend, v: usize, n: usize, h: usize) -> Result<usize> {
        if n == 0 {
            return Err(invalid("context window must be >= 1"));
        }
        let count = match backend {
            Backend::Tabular => {
                if h != 0 {
                    return Err(invalid("tabular backend has no hidden layer"));
                }
                u32::try_from(n)
                    .ok()
                    .and_then(|n| v.checked_pow(n))
                    .and_then(|rows| rows.checked_mul(v))
            }
            Backend::LinearSoftmax => {
                let inputs = n.checked_mul(v);
                if h == 0 {
                    inputs.and_then(|i| i.checked_mul(v))
                } else {
                    inputs.and_then(|i| i.checked_mul(h)).and_then(|a| a.checked_add(h * v))
                }
            }
        };
        match count {
            Some(c) if c <= MAX_PARAMS => Ok(c),
            _ => Err(invalid(format!("model too large: V={v}, n={n}, H={h}"))),
        }
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.backend == other.backend
            && self.context_window == other.context_window
            && self.hidden_width == other.hidden_width
            && self.vocab == other.vocab
    }

    /// True when both models read the same contexts over the same vocabulary.
    pub fn compatible(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.context_window == other.context_window
    }

    pub fn blocks(&self) -> Vec<Block> {
        let v = self.vocab.size;
        let n = self.context_window;
        match (self.backend, self.hidden_width) {
            (Backend::Tabular, _) => vec![Block { offset: 0, rows: self.params.len() / v, cols: v }],
            (Backend::LinearSoftmax, 0) => vec![Block { offset: 0, rows: n * v, cols: v }],
            (Backend::LinearSoftmax, h) => vec![
                Block { offset: 0, rows: n * v, cols: h },
                Block { offset: n * v * h, rows: h, cols: v },
            ],
        }
    }

    /// Last `n` tokens of `context`, left-padded with bos.
    pub fn window(&self, context: &[usize]) -> Result<Vec<usize>> {
        let v = self.vocab.size;
        if let Some(&t) = context.iter().find(|&&t| t >= v) {
            return Err(invalid(format!("token {t} out of range for V={v}")));
        }
        let n = self.context_window;
        let mut w = vec![self.vocab.bos_id; n.saturating_sub(context.len())];
        w.extend_from_slice(&context[context.len().saturating_sub(n)..]);
        Ok(w)
    }

    pub(crate) fn forward(&self, context: &[usize]) -> Result<Activations> {
        let window = self.window(context)?;
        Ok(self.forward_window(window))
    }

    pub(crate) fn forward_window(&self, window: Vec<usize>) -> Activations {
        let v = self.vocab.size;
        match (self.backend, self.hidden_width) {
            (Backend::Tabular, _) => {
                let row = window.iter().fold(0usize, |acc, &t| acc * v + t);
                let logits = self.params[row * v..(row + 1) * v].to_vec();
                Activations { window, hidden: Vec::new(), logits }
            }
            (Backend::LinearSoftmax, 0) => {
                let mut logits = vec![0.0; v];
                for (pos, &tok) in window.iter().enumerate() {
                    let row = &self.params[(pos * v + tok) * v..(pos * v + tok + 1) * v];
                    for (l, w) in logits.iter_mut().zip(row) {
                        *l += w;
                    }
                }
                Activations { window, hidden: Vec::new(), logits }
            }
            (Backend::LinearSoftmax, h) => {
                let mut pre = vec![0.0; h];
                for (pos, &tok) in window.iter().enumerate() {
                    let row = &self.params[(pos * v + tok) * h..(pos * v + tok + 1) * h];
                    for (a, w) in pre.iter_mut().zip(row) {
                        *a += w;
                    }
                }
                let hidden: Vec<f64> = pre.iter().map(|a| a.tanh()).collect();
                let w2 = &self.params[self.context_window * v * h..];
                let mut logits = vec![0.0; v];
                for (j, &hj) in hidden.iter().enumerate() {
                    for (l, w) in logits.iter_mut().zip(&w2[j * v..(j + 1) * v]) {
                        *l += hj * w;
                    }
                }
                Activations { window, hidden, logits }
            }
        }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub(crate) fn backprop(&self, act: &Activations, dlogits: &[f64], grad: &mut [f64]) {
        let v = self.vocab.size;
        match (self.backend, self.hidden_width) {
            (Backend::Tabular, _) => {
                let row = act.window.iter().fold(0usize, |acc, &t| acc * v + t);
                for (g, d) in grad[row * v..(row + 1) * v].iter_mut().zip(dlogits) {
                    *g += d;
                }
            }
            (Backend::LinearSoftmax, 0) => {
                for (pos, &tok) in act.window.iter().enumerate() {
                    let r = pos * v + tok;
                    for (g, d) in grad[r * v..(r + 1) * v].iter_mut().zip(dlogits) {
                        *g += d;
                    }
                }
            }
            (Backend::LinearSoftmax, h) => {
                let w2_off = self.context_window * v * h;
                let mut dpre = vec![0.0; h];
                for j in 0..h {
                    let w2_row = &self.params[w2_off + j * v..w2_off + (j + 1) * v];
                    let mut dh = 0.0;
                    for ((g, w), d) in grad[w2_off + j * v..w2_off + (j + 1) * v]
                        .iter_mut()
                        .zip(w2_row)
                        .zip(dlogits)
                    {
                        *g += act.hidden[j] * d;
                        dh += w * d;
                    }
                    dpre[j] = dh * (1.0 - act.hidden[j] * act.hidden[j]);
                }
                for (pos, &tok) in act.window.iter().enumerate() {
                    let r = pos * v + tok;
                    for (g, d) in grad[r * h..(r + 1) * h].iter_mut().zip(&dpre) {
                        *g += d;
                    }
                }
            }
        }
    }

    pub fn logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        Ok(self.forward(context)?.logits)
    }

    pub fn next_token_dist(&self, context: &[usize]) -> Result<Categorical> {
        let act = self.forward(context)?;
        Categorical::new(softmax_raw(&act.logits))
    }
}

/// Which blocks receive noise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTargets {
    #[default]
    All,
    Blocks(Vec<usize>),
}

/// Low-rank Gaussian perturbation `W + (1/sqrt(r)) A Bᵀ`, factor entries `N(0, sigma²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankNoiseSpec {
    pub rank: usize,
    pub sigma: f64,
    #[serde(default)]
    pub targets: NoiseTargets,
}

impl LowRankNoiseSpec {
    pub fn new(rank: usize, sigma: f64) -> Self {
        Self { rank, sigma, targets: NoiseTargets::All }
    }

    pub fn target_blocks(&self, model: &AutoregressiveModel) -> Result<Vec<(usize, Block)>> {
        if self.rank == 0 {
            return Err(invalid("noise rank must be >= 1"));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(invalid(format!("noise sigma {} must be finite and >= 0", self.sigma)));
        }
        let blocks = model.blocks();
        let chosen: Vec<(usize, Block)> = match &self.targets {
            NoiseTargets::All => blocks.into_iter().enumerate().collect(),
            NoiseTargets::Blocks(ids) => ids
                .iter()
                .map(|&i| {
                    blocks
                        .get(i)
                        .map(|b| (i, *b))
                        .ok_or_else(|| invalid(format!("no parameter block {i}")))
                })
                .collect::<Result<_>>()?,
        };
        for (i, b) in &chosen {
            if self.rank > b.rows.min(b.cols) {
                return Err(invalid(format!(
                    "rank {} exceeds min dimension of block {i} ({}x{})",
                    self.rank, b.rows, b.cols
                )));
            }
        }
        Ok(chosen)
    }
}

/// Returns a perturbed copy; block `b` draws its factors from `derive(seed, b)`.
pub fn perturb_low_rank(model: &AutoregressiveModel, noise: &LowRankNoiseSpec, seed: u64) -> Result<AutoregressiveModel> {
    let targets = noise.target_blocks(model)?;
    let mut out = model.clone();
    if noise.sigma == 0.0 {
        return Ok(out);
    }
    let r = noise.rank;
    let scale = 1.0 / (r as f64).sqrt();
    for (id, block) in targets {
        let mut stream = rng::stream(rng::derive(seed, id as u64));
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| {
                    let z: f64 = stream.sample(StandardNormal);
                    noise.sigma * z
                })
                .collect()
        };
        let a = draw(block.rows * r);
        let b = draw(block.cols * r);
        let w = &mut out.params[block.offset..block.offset + block.len()];
        for i in 0..block.rows {
            let ai = &a[i * r..(i + 1) * r];
            for j in 0..block.cols {
                let bj = &b[j * r..(j + 1) * r];
                let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                w[i * block.cols + j] += scale * dot;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TargetFamily,
    DraftFamily,
    KOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFamily {
    members: Vec<AutoregressiveModel>,
    provenance: Provenance,
}

impl ModelFamily {
    pub fn new(members: Vec<AutoregressiveModel>, provenance: Provenance) -> Result<Self> {
        let first = members.first().ok_or_else(|| invalid("empty model family"))?;
        if members.iter().any(|m| !m.same_shape(first)) {
            return Err(invalid("family members must share shapes"));
        }
        Ok(Self { members, provenance })
    }

    pub fn members(&self) -> &[AutoregressiveModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dists(&self, context: &[usize]) -> Result<Vec<Categorical>> {
        self.members.iter().map(|m| m.next_token_dist(context)).collect()
    }
}

/// `m` independent perturbations of `base`; member `i` uses `derive(seed, i)`.
pub fn make_target_family(
    base: &AutoregressiveModel,
    m: usize,
    noise: &LowRankNoiseSpec,
    seed: u64,
) -> Result<ModelFamily> {
    if m == 0 {
        return Err(invalid("target family size must be >= 1"));
    }
    let members = (0..m)
        .map(|i| perturb_low_rank(base, noise, rng::derive(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    ModelFamily::new(members, Provenance::TargetFamily)
}

/// Uniform mixture of the members' next-token distributions.
pub fn predictive_average(family: &ModelFamily, context: &[usize]) -> Result<Categorical> {
    mixture(&family.dists(context)?, None)
}

pub(crate) fn draw_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples up to `max_len` tokens after `prompt`, stopping after eos.
pub fn sample_sequence(
    model: &AutoregressiveModel,
    prompt: &[usize],
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(invalid("max_len must be >= 1"));
    }
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(invalid(format!("temperature {temperature} must be finite and >= 0")));
    }
    let mut r = rng::stream(seed);
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let logits = model.logits(&ctx)?;
        let tok = if temperature == 0.0 {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            draw_index(&softmax_raw(&scaled), r.random::<f64>())
        };
        out.push(tok);
        ctx.push(tok);
        if Some(tok) == model.vocab.eos_id {
            break;
        }
    }
    Ok(out)
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backend: Backend,
    pub vocab_size: usize,
    pub context_window: usize,
    pub hidden_width: usize,
    pub bos_id: usize,
    pub eos_id: Option<usize>,
    pub provenance: String,
    pub seed_lineage: Vec<u64>,
    pub params: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &AutoregressiveModel, provenance: impl Into<String>, seed_lineage: Vec<u64>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            backend: model.backend,
            vocab_size: model.vocab.size,
            context_window: model.context_window,
            hidden_width: model.hidden_width,
            bos_id: model.vocab.bos_id,
            eos_id: model.vocab.eos_id,
            provenance: provenance.into(),
            seed_lineage,
            params: model.params.clone(),
        }
    }

    pub fn to_model(&self) -> Result<AutoregressiveModel> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {}", self.format_version)));
        }
        let vocab = VocabSpec::new(self.vocab_size, self.bos_id, self.eos_id)?;
        AutoregressiveModel::from_params(
            self.backend,
            vocab,
            self.context_window,
            self.hidden_width,
            self.params.clone(),
        )
    }

    /// JSON numbers are written in shortest round-trip form, so every
    /// finite double reloads bit-exactly.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::total_variation;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn vocab(v: usize) -> VocabSpec {
        VocabSpec::new(v, 0, Some(1)).unwrap()
    }

    #[test]
    fn param_layouts() {
        assert_eq!(AutoregressiveModel::param_count(Backend::Tabular, 5, 2, 0).unwrap(), 125);
        assert_eq!(AutoregressiveModel::param_count(Backend::LinearSoftmax, 5, 2, 0).unwrap(), 50);
        assert_eq!(AutoregressiveModel::param_count(Backend::LinearSoftmax, 5, 2, 3).unwrap(), 30 + 15);
        assert!(AutoregressiveModel::param_count(Backend::Tabular, 5, 2, 3).is_err());
        assert!(AutoregressiveModel::param_count(Backend::Tabular, 1000, 5, 0).is_err());
    }

    #[test]
    fn vocab_rules() {
        assert!(VocabSpec::new(1, 0, None).is_err());
        assert!(VocabSpec::new(4, 4, None).is_err());
        assert!(VocabSpec::new(4, 2, Some(2)).is_err());
        assert!(VocabSpec::new(4, 0, Some(3)).is_ok());
    }

    #[test]
    fn zero_models_are_uniform() {
        for (b, h) in [(Backend::Tabular, 0), (Backend::LinearSoftmax, 0), (Backend::LinearSoftmax, 4)] {
            let m = AutoregressiveModel::zeros(b, vocab(6), 2, h).unwrap();
            let p = m.next_token_dist(&[3, 4, 5]).unwrap();
            assert_eq!(p, Categorical::uniform(6).unwrap());
        }
    }

    #[test]
    fn tabular_row_lookup() {
        let mut m = AutoregressiveModel::zeros(Backend::Tabular, VocabSpec::new(2, 0, None).unwrap(), 1, 0).unwrap();
        m.params_mut()[2] = 2f64.ln();
        let p = m.next_token_dist(&[1]).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.probs()[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn window_pads_with_bos_and_rejects_bad_tokens() {
        let m = AutoregressiveModel::zeros(Backend::Tabular, vocab(4), 3, 0).unwrap();
        assert_eq!(m.window(&[2]).unwrap(), vec![0, 0, 2]);
        assert_eq!(m.window(&[1, 2, 3, 2]).unwrap(), vec![2, 3, 2]);
        assert!(m.next_token_dist(&[4]).is_err());
    }

    #[test]
    fn sigma_zero_perturbation_is_identity() {
        let m = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(6), 2, 3, 0.5, 1).unwrap();
        let p = perturb_low_rank(&m, &LowRankNoiseSpec::new(2, 0.0), 9).unwrap();
        assert_eq!(p, m);
    }

    #[test]
    fn perturbation_is_deterministic_and_pure() {
        let m = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(6), 2, 3, 0.5, 1).unwrap();
        let before = m.clone();
        let noise = LowRankNoiseSpec::new(2, 0.3);
        let a = perturb_low_rank(&m, &noise, 5).unwrap();
        let b = perturb_low_rank(&m, &noise, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
        assert_ne!(a, m);
    }

    #[test]
    fn rank_validation() {
        let m = AutoregressiveModel::zeros(Backend::LinearSoftmax, vocab(6), 2, 3).unwrap();
        assert!(perturb_low_rank(&m, &LowRankNoiseSpec::new(4, 0.1), 0).is_err());
        assert!(perturb_low_rank(&m, &LowRankNoiseSpec::new(0, 0.1), 0).is_err());
        let only_first = LowRankNoiseSpec { rank: 3, sigma: 0.1, targets: NoiseTargets::Blocks(vec![0]) };
        let p = perturb_low_rank(&m, &only_first, 0).unwrap();
        let w2 = m.blocks()[1];
        assert_eq!(&p.params()[w2.offset..], &m.params()[w2.offset..]);
        let bad = LowRankNoiseSpec { rank: 1, sigma: 0.1, targets: NoiseTargets::Blocks(vec![7]) };
        assert!(perturb_low_rank(&m, &bad, 0).is_err());
    }

    #[test]
    fn frobenius_energy_monte_carlo() {
        // E||ΔW||_F^2 = d1 d2 sigma^4 for the (1/sqrt r) A Bᵀ construction.
        let v = VocabSpec::new(5, 0, None).unwrap();
        let m = AutoregressiveModel::zeros(Backend::LinearSoftmax, v, 1, 0).unwrap();
        let sigma = 0.7;
        let noise = LowRankNoiseSpec::new(3, sigma);
        let trials = 10_000;
        let total: f64 = (0..trials)
            .map(|s| {
                let p = perturb_low_rank(&m, &noise, s as u64).unwrap();
                p.params().iter().map(|x| x * x).sum::<f64>()
            })
            .sum();
        let mean = total / trials as f64;
        let expected = 25.0 * sigma.powi(4);
        assert!((mean - expected).abs() / expected < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn target_family_examples() {
        let base = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(6), 2, 3, 0.5, 1).unwrap();
        let single = make_target_family(&base, 1, &LowRankNoiseSpec::new(1, 0.0), 3).unwrap();
        assert_eq!(single.members(), std::slice::from_ref(&base));
        let fam = make_target_family(&base, 3, &LowRankNoiseSpec::new(2, 0.2), 3).unwrap();
        assert_eq!(fam.provenance(), Provenance::TargetFamily);
        let ms = fam.members();
        assert!(ms[0] != ms[1] && ms[1] != ms[2] && ms[0] != ms[2]);
        assert!(make_target_family(&base, 0, &LowRankNoiseSpec::new(1, 0.0), 3).is_err());
    }

    #[test]
    fn predictive_average_examples() {
        let v = VocabSpec::new(2, 0, None).unwrap();
        let mut a = AutoregressiveModel::zeros(Backend::Tabular, v, 1, 0).unwrap();
        let mut b = a.clone();
        a.params_mut().copy_from_slice(&[40.0, -40.0, 40.0, -40.0]);
        b.params_mut().copy_from_slice(&[-40.0, 40.0, -40.0, 40.0]);
        let fam = ModelFamily::new(vec![a, b], Provenance::TargetFamily).unwrap();
        let avg = predictive_average(&fam, &[1]).unwrap();
        assert_abs_diff_eq!(avg.probs()[0], 0.5, epsilon = 1e-12);
        let direct = mixture(&fam.dists(&[1]).unwrap(), None).unwrap();
        assert_eq!(avg, direct);
    }

    #[test]
    fn greedy_decoding_breaks_ties_low() {
        let m = AutoregressiveModel::zeros(Backend::Tabular, VocabSpec::new(3, 2, None).unwrap(), 1, 0).unwrap();
        assert_eq!(sample_sequence(&m, &[1], 4, 0.0, 0).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn sampling_stops_at_eos_and_is_deterministic() {
        let m = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(5), 2, 0, 1.0, 4).unwrap();
        let a = sample_sequence(&m, &[2, 3], 8, 1.0, 77).unwrap();
        let b = sample_sequence(&m, &[2, 3], 8, 1.0, 77).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 8);
        if let Some(i) = a.iter().position(|&t| t == 1) {
            assert_eq!(i, a.len() - 1);
        }
        assert!(sample_sequence(&m, &[2], 0, 1.0, 0).is_err());
    }

    #[test]
    fn single_token_frequencies_match_distribution() {
        let m = AutoregressiveModel::random(Backend::LinearSoftmax, VocabSpec::new(6, 0, None).unwrap(), 2, 0, 1.0, 8)
            .unwrap();
        let p = m.next_token_dist(&[3, 4]).unwrap();
        let draws = 100_000;
        let mut counts = [0usize; 6];
        for s in 0..draws {
            let seq = sample_sequence(&m, &[3, 4], 1, 1.0, rng::derive(123, s)).unwrap();
            counts[seq[0]] += 1;
        }
        let freq = Categorical::new(counts.iter().map(|&c| c as f64 / draws as f64).collect()).unwrap();
        assert!(total_variation(&freq, &p).unwrap() < 0.01);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let m = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(7), 2, 3, 0.37, 21).unwrap();
        let ck = Checkpoint::from_model(&m, "target", vec![1, 2]);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model().unwrap();
        for (a, b) in m.params().iter().zip(m2.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn outputs_are_valid_categoricals(seed in any::<u64>(), h in 0usize..4, ctx in proptest::collection::vec(0usize..5, 0..5)) {
            let m = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(5), 2, h, 1.5, seed).unwrap();
            let p = m.next_token_dist(&ctx).unwrap();
            prop_assert!(p.is_strictly_positive());
        }

        #[test]
        fn average_lies_in_member_hull(seed in any::<u64>(), ctx in proptest::collection::vec(0usize..5, 0..4)) {
            let base = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(5), 2, 3, 0.8, seed).unwrap();
            let fam = make_target_family(&base, 4, &LowRankNoiseSpec::new(2, 0.5), seed ^ 1).unwrap();
            let avg = predictive_average(&fam, &ctx).unwrap();
            let dists = fam.dists(&ctx).unwrap();
            for i in 0..5 {
                let lo = dists.iter().map(|d| d.probs()[i]).fold(f64::INFINITY, f64::min);
                let hi = dists.iter().map(|d| d.probs()[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(avg.probs()[i] >= lo - 1e-15 && avg.probs()[i] <= hi + 1e-15);
            }
        }
    }
}
