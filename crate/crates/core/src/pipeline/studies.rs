//! Multi-seed studies: the draft-strategy sweep, proxy robustness, and the
//! forward/reverse fit on a bimodal teacher.

use serde::{Deserialize, Serialize};

use crate::distill::{fit_discretized_gaussian, osd_train, DiscretizedGaussian, KlDirection, StochasticTeacher, StrategyKind, TrainingSet};
use crate::error::{invalid, Result};
use crate::estimators::{konly_family, proxy_eu};
use crate::evaluation::MeanStd;
use crate::exec;
use crate::models::{make_target_family, predictive_average, AutoregressiveModel};
use crate::rng;
use crate::simplex::{kl, mixture, softmax_raw, Categorical};

use super::config::ExperimentConfig;
use super::experiment::{build_world, draft_template, estimate, evaluate, run_seed, train_drafts, train_proxy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed_index: usize,
    pub kind: StrategyKind,
    pub rmse: f64,
    /// Mean draft JSD over held-out evaluation positions.
    pub heldout_jsd: f64,
    pub mean_bias: f64,
    pub mean_ground_truth: f64,
}

/// Trains every strategy in `kinds` on the same per-seed world, proxy and
/// template, so only the draft construction differs.
pub fn strategy_sweep(cfg: &ExperimentConfig, kinds: &[StrategyKind], seeds: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let shared = exec::map_indexed(seeds, |i| -> Result<_> {
        let seed = run_seed(cfg, i);
        let world = build_world(cfg, seed)?;
        let template = draft_template(cfg, seed, &world)?;
        let pmix = train_proxy(cfg, seed, &world)?;
        Ok((seed, world, template, pmix))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, StrategyKind)> = (0..seeds).flat_map(|i| kinds.iter().map(move |&k| (i, k))).collect();
    exec::map_indexed(jobs.len(), |j| -> Result<SweepRow> {
        let (i, kind) = jobs[j];
        let (seed, world, template, pmix) = &shared[i];
        let mut c = cfg.clone();
        c.drafts.strategy.kind = kind;
        let (drafts, _) = train_drafts(&c, *seed, world, template)?;
        let est = estimate(&c, *seed, world, &drafts, pmix.as_ref())?;
        let m = evaluate(&c, i, *seed, &est)?;
        Ok(SweepRow {
            seed_index: i,
            kind,
            rmse: m.rmse,
            heldout_jsd: m.mean_variance_proxy,
            mean_bias: m.mean_bias_proxy,
            mean_ground_truth: m.mean_ground_truth,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessResult {
    /// `(k, spread of the K-only estimate across seeds)`.
    pub konly_spread: Vec<(usize, MeanStd)>,
    pub matched_k: usize,
    /// Bias estimate against the distilled proxy, across seeds.
    pub distilled_bias: MeanStd,
    /// Bias estimate against the average of `matched_k` raw target samples.
    pub raw_bias: MeanStd,
    pub contexts: usize,
}

fn distinct_contexts(set: &TrainingSet, limit: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for c in &set.contexts {
        if !out.contains(&c.context) {
            out.push(c.context.clone());
            if out.len() == limit {
                break;
            }
        }
    }
    out
}

/// Across-seed spread of K-only estimates for each `k` in the configured
/// variants, and of the bias term under a distilled versus a raw
/// `matched_k`-sample proxy. Drafts and contexts are fixed (run 0).
pub fn proxy_robustness(cfg: &ExperimentConfig, seeds: usize, matched_k: usize, max_contexts: usize) -> Result<RobustnessResult> {
    cfg.validate()?;
    if seeds < 2 || matched_k == 0 || max_contexts == 0 {
        return Err(invalid("need seeds >= 2, matched_k >= 1 and max_contexts >= 1"));
    }
    let seed = run_seed(cfg, 0);
    let world = build_world(cfg, seed)?;
    let template = draft_template(cfg, seed, &world)?;
    let (drafts, _) = train_drafts(cfg, seed, &world, &template)?;
    let base_proxy = train_proxy_with_seed(cfg, &world, rng::derive_named(seed, "pmix"))?;
    let set = TrainingSet::from_corpus(&world.train_data, &world.corpus, None);
    let contexts = distinct_contexts(&set, max_contexts);
    let q_mix: Vec<Categorical> =
        contexts.iter().map(|c| mixture(&drafts.dists(c)?, None)).collect::<Result<_>>()?;
    let proxy_dists: Vec<Categorical> = contexts.iter().map(|c| base_proxy.next_token_dist(c)).collect::<Result<_>>()?;
    let study_seed = rng::derive_named(cfg.seed, "robustness");

    let mut konly_spread = Vec::new();
    for &k in &cfg.konly.ks {
        let vals = exec::map_indexed(seeds, |s| -> Result<f64> {
            let fam = konly_family(&drafts.members()[0], k, &cfg.konly.noise, rng::derive(rng::derive(study_seed, k as u64), s as u64))?;
            let mut total = 0.0;
            for (c, p) in contexts.iter().zip(&proxy_dists) {
                total += proxy_eu(&fam.dists(c)?, p)?.estimated_total;
            }
            Ok(total / contexts.len() as f64)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        konly_spread.push((k, MeanStd::of(&vals).expect("nonempty")));
    }

    let bias_pairs = exec::map_indexed(seeds, |s| -> Result<(f64, f64)> {
        let s_seed = rng::derive(rng::derive_named(study_seed, "bias"), s as u64);
        let pmix = train_proxy_with_seed(cfg, &world, s_seed)?;
        let raw = make_target_family(&world.target, matched_k, &cfg.target.noise, rng::derive_named(s_seed, "raw"))?;
        let (mut d, mut r) = (0.0, 0.0);
        for (c, q) in contexts.iter().zip(&q_mix) {
            d += kl(q, &pmix.next_token_dist(c)?)?;
            r += kl(q, &predictive_average(&raw, c)?)?;
        }
        Ok((d / contexts.len() as f64, r / contexts.len() as f64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (d, r): (Vec<f64>, Vec<f64>) = bias_pairs.into_iter().unzip();
    Ok(RobustnessResult {
        konly_spread,
        matched_k,
        distilled_bias: MeanStd::of(&d).expect("nonempty"),
        raw_bias: MeanStd::of(&r).expect("nonempty"),
        contexts: contexts.len(),
    })
}

fn train_proxy_with_seed(cfg: &ExperimentConfig, world: &super::experiment::World, seed: u64) -> Result<AutoregressiveModel> {
    let teacher = StochasticTeacher::Perturbed { base: world.target.clone(), noise: cfg.target.noise.clone() };
    let set = TrainingSet::from_corpus(&world.train_data, &world.corpus, None);
    Ok(osd_train(&world.target, &teacher, &set, &cfg.proxy.osd.with_seed(seed))?.0)
}

/// Asymmetric two-bump teacher over `v` ordered tokens (`v >= 8`): bumps at
/// a quarter and three quarters of the range, weights 0.55 and 0.45.
pub fn bimodal_teacher(v: usize) -> Result<Categorical> {
    if v < 8 {
        return Err(invalid("bimodal teacher needs at least 8 tokens"));
    }
    let (a, b) = (v as f64 / 4.0, 3.0 * v as f64 / 4.0);
    let width = v as f64 / 16.0;
    let bump = |c: f64| -> Vec<f64> { softmax_raw(&(0..v).map(|i| -((i as f64 - c) / width).powi(2) / 2.0).collect::<Vec<_>>()) };
    let (l, r) = (bump(a), bump(b));
    Categorical::new(l.iter().zip(&r).map(|(x, y)| 0.55 * x + 0.45 * y).collect())
}

/// Mass of `p` on the lower and upper half of the vocabulary.
pub fn half_masses(p: &Categorical) -> (f64, f64) {
    let mid = p.len() / 2;
    let lo: f64 = p.probs()[..mid].iter().sum();
    (lo, p.probs()[mid..].iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    pub forward: DiscretizedGaussian,
    pub reverse: DiscretizedGaussian,
    /// `(lower, upper)` half masses of each fit.
    pub forward_masses: (f64, f64),
    pub reverse_masses: (f64, f64),
}

/// Forward- and reverse-KL fits of the two-parameter unimodal family.
pub fn mode_seeking_demo(teacher: &Categorical) -> ModeFit {
    let forward = fit_discretized_gaussian(teacher, KlDirection::Forward, 20_000);
    let reverse = fit_discretized_gaussian(teacher, KlDirection::Reverse, 20_000);
    ModeFit {
        forward_masses: half_masses(&forward.dist(teacher.len())),
        reverse_masses: half_masses(&reverse.dist(teacher.len())),
        forward,
        reverse,
    }
}
