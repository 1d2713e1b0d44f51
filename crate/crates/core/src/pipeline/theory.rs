//! Randomized residual checks of the exact divergence identities.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimators::{eu_forms, proxy_eu, upper_bound_from_dists};
use crate::rng;
use crate::simplex::{kl, mixture, softmax_normalize, Categorical, Logits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub identity: String,
    pub trials: usize,
    pub max_residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheckResult {
    pub tolerance: f64,
    pub rows: Vec<IdentityRow>,
}

impl TheoryCheckResult {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<34} {:>7} {:>14}  status\n", "identity", "trials", "max_residual");
        for r in &self.rows {
            s += &format!(
                "{:<34} {:>7} {:>14.3e}  {}\n",
                r.identity,
                r.trials,
                r.max_residual,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

fn random_dist(r: &mut rng::Rng, v: usize) -> Categorical {
    // mix sharp and flat instances so near-point masses are covered
    let spread = if r.random_bool(0.25) { 25.0 } else { 4.0 };
    let scores: Vec<f64> = (0..v).map(|_| r.random_range(-spread..spread)).collect();
    softmax_normalize(&Logits::new(scores).expect("finite scores")).expect("valid softmax")
}

fn random_set(r: &mut rng::Rng, k: usize, v: usize) -> Vec<Categorical> {
    (0..k).map(|_| random_dist(r, v)).collect()
}

/// Residual of the claim that the mixture minimizes `q -> mean_k KL(p_k || q)`:
/// the objective gap to a random `q` must equal `KL(p_bar || q)`, and the
/// objective's gradient at `p_bar` must be constant (`-1`) across coordinates.
fn argmin_residual(members: &[Categorical], q: &Categorical) -> Result<f64> {
    let bar = mixture(members, None)?;
    let objective = |x: &Categorical| -> Result<f64> {
        let mut s = 0.0;
        for m in members {
            s += kl(m, x)?;
        }
        Ok(s / members.len() as f64)
    };
    let gap = objective(q)? - objective(&bar)? - kl(&bar, q)?;
    let mut worst = gap.abs();
    for i in 0..bar.len() {
        let mut g = 0.0;
        for m in members {
            g -= m.probs()[i] / bar.probs()[i];
        }
        worst = worst.max((g / members.len() as f64 + 1.0).abs());
    }
    Ok(worst)
}

/// Four identity rows over `trials` random instances with `V` in `2..=64`
/// and `K` in `2..=10`. `corrupt` perturbs one term to exercise the failure path.
pub fn verify_theory(trials: usize, seed: u64, tolerance: f64, corrupt: bool) -> Result<TheoryCheckResult> {
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(invalid("tolerance must be finite and nonnegative"));
    }
    let mut r = rng::stream(rng::derive_named(seed, "theory"));
    let mut worst = [0.0f64; 4];
    for _ in 0..trials {
        let v = r.random_range(2..=64);
        let k = r.random_range(2..=10);
        let kd = r.random_range(2..=10);
        let targets = random_set(&mut r, k, v);
        let drafts = random_set(&mut r, kd, v);
        let proxy = random_dist(&mut r, v);
        let q = random_dist(&mut r, v);

        let (kl_form, ent_form) = eu_forms(&targets)?;
        worst[0] = worst[0].max((kl_form - ent_form).abs());

        let ub = upper_bound_from_dists(&targets, &drafts)?;
        worst[1] = worst[1].max(ub.residual());

        let t = proxy_eu(&drafts, &proxy)?;
        let bias = if corrupt { t.bias_proxy * (1.0 + 1e-6) + 1e-6 } else { t.bias_proxy };
        worst[2] = worst[2].max((t.estimated_total - t.variance_proxy - bias).abs());

        worst[3] = worst[3].max(argmin_residual(&targets, &q)?);
    }
    let names = ["eu_kl_vs_entropy_form", "upper_bound_decomposition", "jsd_plus_kl_decomposition", "mixture_minimizes_forward_kl"];
    let rows = names
        .iter()
        .zip(worst)
        .map(|(n, w)| IdentityRow { identity: n.to_string(), trials, max_residual: w, passed: w <= tolerance })
        .collect();
    Ok(TheoryCheckResult { tolerance, rows })
}
