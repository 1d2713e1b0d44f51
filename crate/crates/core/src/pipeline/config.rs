//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::PartitionUnit;
use crate::distill::{DraftStrategy, StrategyKind, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::estimators::{Aggregation, EnsembleConfig};
use crate::evaluation::CostMode;
use crate::models::{Backend, LowRankNoiseSpec, VocabSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub backend: Backend,
    pub vocab_size: usize,
    pub bos_id: usize,
    pub eos_id: Option<usize>,
    pub context_window: usize,
    pub target_hidden: usize,
    pub draft_hidden: usize,
    /// Standard deviation of the random initialization.
    pub init_scale: f64,
}

/// Which queries the evaluation generations are sampled for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Fresh target generations for the training queries.
    #[default]
    TrainQueries,
    /// Queries never seen by any model during training.
    HeldoutQueries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub train_queries: usize,
    /// Only used with `eval_split = "heldout_queries"`.
    pub eval_queries: usize,
    #[serde(default)]
    pub eval_split: EvalSplit,
    pub key_len: usize,
    /// Responses sampled per training query.
    pub responses_per_query: usize,
    /// Target generations per evaluation query.
    pub eval_samples: usize,
    pub temperature: f64,
    pub max_response_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// Size of the data-generating target family.
    pub family_size: usize,
    /// Which family defines ground-truth EU.
    #[serde(default)]
    pub ground_truth: GroundTruthKind,
    /// Size of the held-out family when `ground_truth = "fresh_family"`.
    pub ground_truth_size: usize,
    pub noise: LowRankNoiseSpec,
    pub pretrain: TrainConfig,
}

/// The family whose disagreement is treated as the true EU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthKind {
    /// The same perturbed targets that generated the corpus.
    #[default]
    GeneratingFamily,
    /// Independent perturbations of the base target.
    FreshFamily,
}

/// What the distilled proxy imitates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyTeacherKind {
    /// Exact average over the generating family at every step.
    #[default]
    GeneratingFamily,
    /// Fresh perturbations of the base target drawn every step.
    Perturbed,
}

/// Which model supervises each corpus record during draft distillation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftTeacherKind {
    /// The family member that generated the record.
    #[default]
    GeneratingMember,
    /// The unperturbed base target.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftConfig {
    pub strategy: DraftStrategy,
    #[serde(default)]
    pub teacher: DraftTeacherKind,
    pub init_noise: LowRankNoiseSpec,
    #[serde(default)]
    pub partition_unit: PartitionUnit,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    DistilledMix,
    RawFamilyAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    pub kind: ProxyKind,
    #[serde(default)]
    pub teacher: ProxyTeacherKind,
    pub osd: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub aggregation: Aggregation,
    pub ece_bins: usize,
    pub logistic_reg: f64,
    #[serde(default)]
    pub cost_mode: CostMode,
}

/// K-only variants scored by the proxy-robustness study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KOnlyConfig {
    pub ks: Vec<usize>,
    pub noise: LowRankNoiseSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebugConfig {
    /// Runs that abort with an injected training failure.
    #[serde(default)]
    pub fail_runs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub runs: usize,
    pub model: ModelShape,
    pub task: TaskConfig,
    pub target: TargetConfig,
    pub drafts: DraftConfig,
    pub ensemble: EnsembleConfig,
    pub proxy: ProxyConfig,
    pub konly: KOnlyConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub debug: DebugConfig,
}

fn train(learning_rate: f64, steps: usize, batch_size: usize, teacher_samples_per_step: usize) -> TrainConfig {
    TrainConfig { learning_rate, steps, batch_size, teacher_samples_per_step, seed: 0 }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            runs: 5,
            model: ModelShape {
                backend: Backend::LinearSoftmax,
                vocab_size: 12,
                bos_id: 0,
                eos_id: Some(1),
                context_window: 3,
                target_hidden: 0,
                draft_hidden: 0,
                init_scale: 0.5,
            },
            task: TaskConfig {
                train_queries: 24,
                eval_queries: 12,
                eval_split: EvalSplit::TrainQueries,
                key_len: 2,
                responses_per_query: 4,
                eval_samples: 3,
                temperature: 1.0,
                max_response_len: 4,
            },
            target: TargetConfig {
                family_size: 3,
                ground_truth: GroundTruthKind::GeneratingFamily,
                ground_truth_size: 3,
                noise: LowRankNoiseSpec::new(2, 1.0),
                pretrain: train(1.0, 400, 16, 1),
            },
            drafts: DraftConfig {
                strategy: DraftStrategy { kind: StrategyKind::Ddd, s: 2, m: 3 },
                teacher: DraftTeacherKind::GeneratingMember,
                init_noise: LowRankNoiseSpec::new(2, 0.5),
                partition_unit: PartitionUnit::Member,
                pretrain: train(1.0, 200, 16, 1),
                train: train(5.0, 500, 16, 1),
            },
            ensemble: EnsembleConfig::SxM { s: 2, m: 3 },
            proxy: ProxyConfig { kind: ProxyKind::DistilledMix, teacher: ProxyTeacherKind::GeneratingFamily, osd: train(0.5, 400, 16, 2) },
            konly: KOnlyConfig { ks: vec![3, 10], noise: LowRankNoiseSpec::new(2, 0.3) },
            eval: EvalConfig { aggregation: Aggregation::Mean, ece_bins: 10, logistic_reg: 1e-3, cost_mode: CostMode::DraftsPlusTarget },
            debug: DebugConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn vocab(&self) -> Result<VocabSpec> {
        VocabSpec::new(self.model.vocab_size, self.model.bos_id, self.model.eos_id)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        let positive = [
            ("runs", self.runs),
            ("context_window", self.model.context_window),
            ("train_queries", self.task.train_queries),
            ("key_len", self.task.key_len),
            ("responses_per_query", self.task.responses_per_query),
            ("eval_samples", self.task.eval_samples),
            ("max_response_len", self.task.max_response_len),
            ("family_size", self.target.family_size),
            ("ground_truth_size", self.target.ground_truth_size),
            ("ece_bins", self.eval.ece_bins),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.task.eval_split == EvalSplit::HeldoutQueries && self.task.eval_queries == 0 {
            return Err(invalid("held-out evaluation needs eval_queries > 0"));
        }
        if self.model.draft_hidden > self.model.target_hidden {
            return Err(invalid("draft hidden width must not exceed target hidden width"));
        }
        if !(self.model.init_scale.is_finite() && self.model.init_scale > 0.0) {
            return Err(invalid("init_scale must be positive"));
        }
        if !(self.task.temperature.is_finite() && self.task.temperature >= 0.0) {
            return Err(invalid("temperature must be nonnegative"));
        }
        if !(self.eval.logistic_reg.is_finite() && self.eval.logistic_reg >= 0.0) {
            return Err(invalid("logistic_reg must be nonnegative"));
        }
        if self.konly.ks.iter().any(|&k| k < 2) {
            return Err(invalid("k-only variants need k >= 2"));
        }
        for noise in [&self.target.noise, &self.drafts.init_noise, &self.konly.noise] {
            if noise.rank == 0 || !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
                return Err(invalid("noise specs need rank >= 1 and sigma >= 0"));
            }
        }
        for t in [&self.target.pretrain, &self.drafts.pretrain, &self.drafts.train, &self.proxy.osd] {
            t.validate()?;
        }
        self.drafts.strategy.validate()?;
        self.ensemble.validate()?;
        let st = &self.drafts.strategy;
        match &self.ensemble {
            EnsembleConfig::SxM { s, m } if (*s, *m) != (st.s, st.m) => {
                return Err(invalid(format!("ensemble {s}x{m} does not match strategy {}x{}", st.s, st.m)));
            }
            EnsembleConfig::SxM { .. } if st.members() < 2 => {
                return Err(invalid("an SxM ensemble needs at least 2 drafts"));
            }
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let canonical = serde_json::to_vec(&serde_json::to_value(self)?)?;
        Ok(Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect())
    }
}
