//! Ground-truth epistemic uncertainty and the draft-ensemble estimator.
//!
//! The estimate at a context is `mean_k KL(q_k || proxy)`, which splits
//! exactly into a variance proxy `JSD(q_1..q_K)` and a bias proxy
//! `KL(q_mix || proxy)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec;
use crate::io;
use crate::models::{perturb_low_rank, predictive_average, AutoregressiveModel, LowRankNoiseSpec, ModelFamily, Provenance};
use crate::rng;
use crate::simplex::{entropy, jsd, kl, mixture, sorted_sum, Categorical};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEU {
    pub position: usize,
    pub variance_proxy: f64,
    #[serde(with = "extended")]
    pub bias_proxy: f64,
    #[serde(with = "extended")]
    pub estimated_total: f64,
    pub ground_truth: Option<f64>,
    /// Set when the bias term hit a support violation.
    #[serde(default)]
    pub flagged: bool,
}

/// JSON has no infinity; `+inf` is written as the string `"inf"`.
mod extended {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Err(serde::ser::Error::custom(format!("cannot encode {v}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected value {t:?}"))),
        }
    }
}

/// How the draft ensemble is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleConfig {
    /// `s` partitions times `m` trained drafts.
    #[serde(rename = "sxm")]
    SxM { s: usize, m: usize },
    /// `k` perturbed copies of one draft at inference time.
    KOnly { k: usize, noise: LowRankNoiseSpec },
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::SxM { s, m } if *s >= 1 && *m >= 1 => Ok(()),
            Self::KOnly { k, .. } if *k >= 2 => Ok(()),
            other => Err(invalid(format!("invalid ensemble config {other:?}"))),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Self::SxM { s, m } => s * m,
            Self::KOnly { k, .. } => *k,
        }
    }
}

/// Stand-in for the target's predictive average in the bias term.
#[derive(Debug, Clone, Copy)]
pub enum ProxyTarget<'a> {
    RawFamilyAverage(&'a ModelFamily),
    DistilledMix(&'a AutoregressiveModel),
}

impl ProxyTarget<'_> {
    pub fn dist(&self, context: &[usize]) -> Result<Categorical> {
        match self {
            Self::RawFamilyAverage(f) => predictive_average(f, context),
            Self::DistilledMix(m) => m.next_token_dist(context),
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            Self::RawFamilyAverage(f) => f.members()[0].vocab_size(),
            Self::DistilledMix(m) => m.vocab_size(),
        }
    }
}

fn mean_kl_to(members: &[Categorical], q: &Categorical) -> Result<f64> {
    let mut terms = members.iter().map(|p| kl(p, q)).collect::<Result<Vec<f64>>>()?;
    Ok(sorted_sum(&mut terms) / members.len() as f64)
}

/// EU of a finite family at one context in both forms:
/// `(mean KL(p_i || p_bar), H(p_bar) - mean H(p_i))`.
pub fn eu_forms(dists: &[Categorical]) -> Result<(f64, f64)> {
    if dists.is_empty() {
        return Err(invalid("empty family"));
    }
    let bar = mixture(dists, None)?;
    let kl_form = mean_kl_to(dists, &bar)?;
    let mut hs: Vec<f64> = dists.iter().map(entropy).collect();
    let entropy_form = entropy(&bar) - sorted_sum(&mut hs) / dists.len() as f64;
    Ok((kl_form, entropy_form))
}

pub fn eu_of_dists(dists: &[Categorical]) -> Result<f64> {
    Ok(eu_forms(dists)?.0)
}

/// Mutual-information EU of the family at `context` (KL form).
pub fn ground_truth_eu(family: &ModelFamily, context: &[usize]) -> Result<f64> {
    eu_of_dists(&family.dists(context)?)
}

/// Splits `mean_k KL(q_k || proxy)` into JSD and mixture-to-proxy KL.
pub fn proxy_eu(draft_dists: &[Categorical], proxy: &Categorical) -> Result<TokenEU> {
    if draft_dists.len() < 2 {
        return Err(invalid(format!("need at least 2 drafts, got {}", draft_dists.len())));
    }
    let variance_proxy = jsd(draft_dists, None)?;
    let bias_proxy = kl(&mixture(draft_dists, None)?, proxy)?;
    let estimated_total = mean_kl_to(draft_dists, proxy)?;
    Ok(TokenEU {
        position: 0,
        variance_proxy,
        bias_proxy,
        estimated_total,
        ground_truth: None,
        flagged: !bias_proxy.is_finite(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    /// `mean_i KL(p_i || q_mix)`.
    pub lhs: f64,
    pub eu: f64,
    /// `KL(p_bar || q_mix)`.
    pub gap: f64,
}

impl UpperBound {
    pub fn residual(&self) -> f64 {
        (self.lhs - self.eu - self.gap).abs()
    }
}

pub fn upper_bound_from_dists(targets: &[Categorical], drafts: &[Categorical]) -> Result<UpperBound> {
    if targets.is_empty() || drafts.is_empty() {
        return Err(invalid("upper bound needs nonempty targets and drafts"));
    }
    let q_mix = mixture(drafts, None)?;
    let p_bar = mixture(targets, None)?;
    Ok(UpperBound { lhs: mean_kl_to(targets, &q_mix)?, eu: eu_of_dists(targets)?, gap: kl(&p_bar, &q_mix)? })
}

pub fn upper_bound_identity(target_family: &ModelFamily, draft_dists: &[Categorical], context: &[usize]) -> Result<UpperBound> {
    upper_bound_from_dists(&target_family.dists(context)?, draft_dists)
}

/// One [`TokenEU`] per generated position, every model conditioned on
/// `prompt ++ sequence[..t]`.
pub fn token_eu_trace(
    drafts: &ModelFamily,
    proxy: ProxyTarget<'_>,
    target_family: Option<&ModelFamily>,
    sequence: &[usize],
    prompt: &[usize],
) -> Result<Vec<TokenEU>> {
    if sequence.is_empty() {
        return Err(invalid("empty sequence"));
    }
    if proxy.vocab_size() != drafts.members()[0].vocab_size() {
        return Err(invalid("proxy vocabulary does not match drafts"));
    }
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(sequence.len());
    for (t, &tok) in sequence.iter().enumerate() {
        let mut rec = proxy_eu(&drafts.dists(&ctx)?, &proxy.dist(&ctx)?)?;
        rec.position = t;
        if let Some(f) = target_family {
            rec.ground_truth = Some(ground_truth_eu(f, &ctx)?);
        }
        out.push(rec);
        ctx.push(tok);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
    Max,
}

/// Aggregates the estimated totals of unflagged records.
pub fn sequence_eu(trace: &[TokenEU], aggregation: Aggregation) -> Result<f64> {
    let mut vals: Vec<f64> = trace.iter().filter(|r| !r.flagged).map(|r| r.estimated_total).collect();
    if vals.is_empty() {
        return Err(invalid("no unflagged token records to aggregate"));
    }
    Ok(match aggregation {
        Aggregation::Mean => sorted_sum(&mut vals) / vals.len() as f64,
        Aggregation::Sum => sorted_sum(&mut vals),
        Aggregation::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

pub fn flagged_count(trace: &[TokenEU]) -> usize {
    trace.iter().filter(|r| r.flagged).count()
}

/// `k` independently perturbed copies of `draft`; copy `i` uses `derive(seed, i)`.
pub fn konly_family(draft: &AutoregressiveModel, k: usize, noise: &LowRankNoiseSpec, seed: u64) -> Result<ModelFamily> {
    if k < 2 {
        return Err(invalid(format!("k-only ensembles need k >= 2, got {k}")));
    }
    let members = exec::map_indexed(k, |i| perturb_low_rank(draft, noise, rng::derive(seed, i as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    ModelFamily::new(members, Provenance::KOnly)
}

pub fn konly_draft_dists(
    draft: &AutoregressiveModel,
    k: usize,
    noise: &LowRankNoiseSpec,
    seed: u64,
    context: &[usize],
) -> Result<Vec<Categorical>> {
    konly_family(draft, k, noise, seed)?.dists(context)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sequence_id: usize,
    #[serde(flatten)]
    pub token: TokenEU,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    io::write_jsonl(path, rows)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Backend, VocabSpec};
    use crate::simplex::{softmax_normalize, Logits};
    use rand::Rng as _;

    fn cat(v: &[f64]) -> Categorical {
        Categorical::new(v.to_vec()).unwrap()
    }

    fn random_dists(r: &mut rng::Rng, k: usize, v: usize) -> Vec<Categorical> {
        (0..k)
            .map(|_| {
                let scores: Vec<f64> = (0..v).map(|_| r.random_range(-4.0..4.0)).collect();
                softmax_normalize(&Logits::new(scores).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_members_have_zero_eu() {
        let p = cat(&[0.2, 0.3, 0.5]);
        assert_eq!(eu_of_dists(&[p.clone(), p.clone(), p]).unwrap(), 0.0);
    }

    #[test]
    fn opposite_point_masses_give_ln2() {
        let a = softmax_normalize(&Logits::new(vec![40.0, -40.0]).unwrap()).unwrap();
        let b = softmax_normalize(&Logits::new(vec![-40.0, 40.0]).unwrap()).unwrap();
        let (k, h) = eu_forms(&[a, b]).unwrap();
        assert!((k - 2f64.ln()).abs() < 1e-9 && (h - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn eu_forms_agree_and_respect_bounds() {
        let mut r = rng::stream(11);
        for _ in 0..1000 {
            let k = r.random_range(1..=10);
            let v = r.random_range(2..=64);
            let d = random_dists(&mut r, k, v);
            let (a, b) = eu_forms(&d).unwrap();
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            assert!(a >= 0.0 && a <= (v as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn proxy_eu_examples() {
        let p = cat(&[0.3, 0.7]);
        let t = proxy_eu(&[p.clone(), p.clone()], &p).unwrap();
        assert_eq!((t.variance_proxy, t.bias_proxy, t.estimated_total), (0.0, 0.0, 0.0));
        let t = proxy_eu(&[cat(&[1.0, 0.0]), cat(&[0.0, 1.0])], &cat(&[0.5, 0.5])).unwrap();
        assert!((t.variance_proxy - 2f64.ln()).abs() < 1e-15);
        assert_eq!(t.bias_proxy, 0.0);
        assert!((t.estimated_total - 2f64.ln()).abs() < 1e-15);
        assert!(proxy_eu(std::slice::from_ref(&p), &p).is_err());
    }

    #[test]
    fn decomposition_identity_holds() {
        let mut r = rng::stream(12);
        for _ in 0..1000 {
            let k = r.random_range(2..=6);
            let v = r.random_range(2..=32);
            let d = random_dists(&mut r, k, v);
            let proxy = random_dists(&mut r, 1, v).pop().unwrap();
            let t = proxy_eu(&d, &proxy).unwrap();
            assert!((t.estimated_total - t.variance_proxy - t.bias_proxy).abs() <= 1e-12);
        }
    }

    #[test]
    fn support_violation_is_flagged() {
        let t = proxy_eu(&[cat(&[0.5, 0.5]), cat(&[0.2, 0.8])], &cat(&[0.0, 1.0])).unwrap();
        assert!(t.flagged && t.bias_proxy.is_infinite());
        let json = serde_json::to_string(&t).unwrap();
        let back: TokenEU = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn upper_bound_identity_holds() {
        let mut r = rng::stream(13);
        for _ in 0..1000 {
            let v = r.random_range(2..=64);
            let (kt, kd) = (r.random_range(1..=10), r.random_range(1..=10));
            let targets = random_dists(&mut r, kt, v);
            let drafts = random_dists(&mut r, kd, v);
            let u = upper_bound_from_dists(&targets, &drafts).unwrap();
            assert!(u.residual() <= 1e-12);
            assert!(u.lhs - u.eu >= 0.0);
        }
        let t = random_dists(&mut r, 3, 5);
        let u = upper_bound_from_dists(&t, &t).unwrap();
        assert!(u.gap.abs() < 1e-15 && (u.lhs - u.eu).abs() < 1e-15);
    }

    #[test]
    fn permutation_does_not_change_outputs() {
        let mut r = rng::stream(14);
        let d = random_dists(&mut r, 5, 9);
        let proxy = random_dists(&mut r, 1, 9).pop().unwrap();
        let mut rev = d.clone();
        rev.reverse();
        assert_eq!(proxy_eu(&d, &proxy).unwrap(), proxy_eu(&rev, &proxy).unwrap());
        assert_eq!(eu_forms(&d).unwrap(), eu_forms(&rev).unwrap());
    }

    fn vocab() -> VocabSpec {
        VocabSpec::new(7, 0, Some(1)).unwrap()
    }

    #[test]
    fn trace_matches_manual_positions() {
        let base = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(), 2, 3, 1.0, 1).unwrap();
        let drafts = konly_family(&base, 3, &LowRankNoiseSpec::new(1, 0.4), 5).unwrap();
        let targets = konly_family(&base, 4, &LowRankNoiseSpec::new(1, 0.4), 6).unwrap();
        let seq = [3, 4, 5];
        let prompt = [2, 6];
        let trace = token_eu_trace(&drafts, ProxyTarget::RawFamilyAverage(&targets), Some(&targets), &seq, &prompt).unwrap();
        assert_eq!(trace.len(), 3);
        let mut ctx = prompt.to_vec();
        for (t, rec) in trace.iter().enumerate() {
            let manual = proxy_eu(&drafts.dists(&ctx).unwrap(), &predictive_average(&targets, &ctx).unwrap()).unwrap();
            assert_eq!(rec.estimated_total, manual.estimated_total);
            assert_eq!(rec.position, t);
            assert_eq!(rec.ground_truth, Some(ground_truth_eu(&targets, &ctx).unwrap()));
            // raw-average proxy: bias equals KL(q_mix || p_bar) from member distributions
            let q_mix = mixture(&drafts.dists(&ctx).unwrap(), None).unwrap();
            let p_bar = mixture(&targets.dists(&ctx).unwrap(), None).unwrap();
            assert!((rec.bias_proxy - kl(&q_mix, &p_bar).unwrap()).abs() <= 1e-12);
            ctx.push(seq[t]);
        }
        let single = token_eu_trace(&drafts, ProxyTarget::DistilledMix(&base), None, &[3], &prompt).unwrap();
        assert_eq!(single.len(), 1);
        assert!(token_eu_trace(&drafts, ProxyTarget::DistilledMix(&base), None, &[], &prompt).is_err());
    }

    #[test]
    fn identical_drafts_and_proxy_give_zero_trace() {
        let base = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(), 2, 0, 1.0, 1).unwrap();
        let fam = ModelFamily::new(vec![base.clone(), base.clone()], Provenance::DraftFamily).unwrap();
        let trace = token_eu_trace(&fam, ProxyTarget::DistilledMix(&base), None, &[3, 4, 5, 6], &[2]).unwrap();
        assert!(trace.iter().all(|r| r.estimated_total == 0.0 && r.variance_proxy == 0.0 && r.bias_proxy == 0.0));
    }

    fn tok(total: f64) -> TokenEU {
        TokenEU { position: 0, variance_proxy: total, bias_proxy: 0.0, estimated_total: total, ground_truth: None, flagged: false }
    }

    #[test]
    fn sequence_aggregation() {
        assert_eq!(sequence_eu(&[tok(0.7)], Aggregation::Mean).unwrap(), 0.7);
        assert!((sequence_eu(&[tok(0.1), tok(0.3)], Aggregation::Mean).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(sequence_eu(&[tok(0.1), tok(0.3)], Aggregation::Max).unwrap(), 0.3);
        assert!((sequence_eu(&[tok(0.1), tok(0.3)], Aggregation::Sum).unwrap() - 0.4).abs() < 1e-15);
        let mut bad = tok(f64::INFINITY);
        bad.flagged = true;
        assert_eq!(sequence_eu(&[tok(0.1), bad], Aggregation::Mean).unwrap(), 0.1);
        assert_eq!(flagged_count(&[tok(0.1), bad]), 1);
    }

    #[test]
    fn konly_is_deterministic_and_degenerates_at_zero_noise() {
        let base = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(), 2, 3, 1.0, 2).unwrap();
        let noise = LowRankNoiseSpec::new(2, 0.3);
        let a = konly_draft_dists(&base, 4, &noise, 9, &[3]).unwrap();
        let b = konly_draft_dists(&base, 4, &noise, 9, &[3]).unwrap();
        assert_eq!(a, b);
        let z = konly_draft_dists(&base, 4, &LowRankNoiseSpec::new(2, 0.0), 9, &[3]).unwrap();
        assert!(z.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(proxy_eu(&z, &base.next_token_dist(&[3]).unwrap()).unwrap().variance_proxy, 0.0);
        assert!(konly_draft_dists(&base, 1, &noise, 9, &[3]).is_err());
    }

    #[test]
    fn konly_spread_shrinks_with_k() {
        let base = AutoregressiveModel::random(Backend::LinearSoftmax, vocab(), 2, 3, 1.0, 3).unwrap();
        let noise = LowRankNoiseSpec::new(1, 0.5);
        let contexts: Vec<Vec<usize>> = (2..7).map(|a| vec![a, (a + 1) % 7]).collect();
        let spread = |k: usize| {
            let vals: Vec<f64> = (0..100u64)
                .map(|s| {
                    let fam = konly_family(&base, k, &noise, rng::derive(77, s)).unwrap();
                    contexts
                        .iter()
                        .map(|c| {
                            proxy_eu(&fam.dists(c).unwrap(), &base.next_token_dist(c).unwrap()).unwrap().estimated_total
                        })
                        .sum::<f64>()
                        / contexts.len() as f64
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let sds: Vec<f64> = [3, 5, 10].iter().map(|&k| spread(k)).collect();
        assert!(sds[0] > sds[1] && sds[1] > sds[2], "{sds:?}");
    }

    #[test]
    fn trace_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![TraceRow { sequence_id: 4, token: tok(0.25) }];
        let p = dir.path().join("trace.jsonl");
        write_trace(&p, &rows).unwrap();
        assert_eq!(read_trace(&p).unwrap(), rows);
    }
}
