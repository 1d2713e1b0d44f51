//! The per-run experiment: world construction, draft and proxy training,
//! EU estimation on target generations, and metrics.

use std::path::Path;

use crate::datagen::{generate_corpus, label_correctness, make_synthetic_qa, GeneratedCorpus, LabeledResponse, QADataset, TeacherSource};
use crate::distill::{osd_train, DraftTeacher, pretrain_on_task, train_draft_family, DraftTrainConfig, MemberLog, StepLog, StochasticTeacher, TrainingSet};
use crate::error::{invalid, Error, Result};
use crate::estimators::{flagged_count, konly_family, sequence_eu, token_eu_trace, EnsembleConfig, ProxyTarget, TokenEU, TraceRow};
use crate::evaluation::{
    ccc, detection_metrics, fit_logistic, relative_flops, rmse, spearman, CostEntry, CostMode, ExperimentReport, FailedRun,
    LogisticConfig, Pass, ReportSettings, RunMetrics, Summary,
};
use crate::exec;
use crate::io;
use crate::models::{make_target_family, AutoregressiveModel, Checkpoint, ModelFamily, Provenance};
use crate::rng;

use super::config::{DraftTeacherKind, EvalSplit, ExperimentConfig, GroundTruthKind, ProxyKind, ProxyTeacherKind};
use super::report::write_report_files;

pub fn run_seed(cfg: &ExperimentConfig, run_id: usize) -> u64 {
    rng::derive(cfg.seed, run_id as u64)
}

/// Everything a run shares across draft strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub train_data: QADataset,
    pub eval_data: QADataset,
    pub target: AutoregressiveModel,
    pub target_family: ModelFamily,
    pub corpus: GeneratedCorpus,
}

pub fn build_world(cfg: &ExperimentConfig, seed: u64) -> Result<World> {
    let vocab = cfg.vocab()?;
    let n_train = cfg.task.train_queries;
    let n_eval = match cfg.task.eval_split {
        EvalSplit::TrainQueries => 0,
        EvalSplit::HeldoutQueries => cfg.task.eval_queries,
    };
    let data = make_synthetic_qa(vocab, n_train + n_eval, cfg.task.key_len, rng::derive_named(seed, "task"))?;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let eval_idx: Vec<usize> = (n_train..n_train + n_eval).collect();
    let init = AutoregressiveModel::random(
        cfg.model.backend,
        vocab,
        cfg.model.context_window,
        cfg.model.target_hidden,
        cfg.model.init_scale,
        rng::derive_named(seed, "target_init"),
    )?;
    let pretrain = cfg.target.pretrain.with_seed(rng::derive_named(seed, "target_pretrain"));
    let (target, _) = pretrain_on_task(&init, &data, &train_idx, &pretrain)?;
    let target_family =
        make_target_family(&target, cfg.target.family_size, &cfg.target.noise, rng::derive_named(seed, "target_family"))?;
    let train_data = data.subset(&train_idx);
    let corpus = generate_corpus(
        TeacherSource::Family(&target_family),
        "target_family",
        &train_data,
        cfg.task.responses_per_query,
        cfg.task.temperature,
        cfg.task.max_response_len,
        rng::derive_named(seed, "corpus"),
    )?;
    let eval_data = match cfg.task.eval_split {
        EvalSplit::TrainQueries => train_data.clone(),
        EvalSplit::HeldoutQueries => data.subset(&eval_idx),
    };
    Ok(World { train_data, eval_data, target, target_family, corpus })
}

impl World {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train_data.save(&dir.join("data/train.jsonl"))?;
        self.eval_data.save(&dir.join("data/eval.jsonl"))?;
        self.corpus.save(&dir.join("data/corpus.jsonl"))?;
        save_model(dir, "target", &self.target, "target")?;
        save_family(dir, "target_family", &self.target_family, "target_family")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train_data: QADataset::load(&dir.join("data/train.jsonl"))?,
            eval_data: QADataset::load(&dir.join("data/eval.jsonl"))?,
            corpus: GeneratedCorpus::load(&dir.join("data/corpus.jsonl"))?,
            target: load_model(dir, "target")?,
            target_family: load_family(dir, "target_family", Provenance::TargetFamily)?,
        })
    }
}

fn model_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join("models").join(format!("{name}.json"))
}

pub fn save_model(dir: &Path, name: &str, model: &AutoregressiveModel, provenance: &str) -> Result<()> {
    let path = model_path(dir, name);
    std::fs::create_dir_all(path.parent().expect("models dir"))?;
    Checkpoint::from_model(model, provenance, vec![]).save(&path)
}

pub fn load_model(dir: &Path, name: &str) -> Result<AutoregressiveModel> {
    Checkpoint::load(&model_path(dir, name))?.to_model()
}

pub fn save_family(dir: &Path, prefix: &str, family: &ModelFamily, provenance: &str) -> Result<()> {
    for (i, m) in family.members().iter().enumerate() {
        save_model(dir, &format!("{prefix}_{i}"), m, provenance)?;
    }
    Ok(())
}

pub fn load_family(dir: &Path, prefix: &str, provenance: Provenance) -> Result<ModelFamily> {
    let mut members = Vec::new();
    while model_path(dir, &format!("{prefix}_{}", members.len())).exists() {
        members.push(load_model(dir, &format!("{prefix}_{}", members.len()))?);
    }
    if members.is_empty() {
        return Err(invalid(format!("no {prefix} checkpoints in {}", dir.display())));
    }
    ModelFamily::new(members, provenance)
}

/// Task-pretrained draft that every strategy starts from.
pub fn draft_template(cfg: &ExperimentConfig, seed: u64, world: &World) -> Result<AutoregressiveModel> {
    let init = AutoregressiveModel::random(
        cfg.model.backend,
        cfg.vocab()?,
        cfg.model.context_window,
        cfg.model.draft_hidden,
        cfg.model.init_scale,
        rng::derive_named(seed, "draft_init"),
    )?;
    let items: Vec<usize> = (0..world.train_data.len()).collect();
    let pretrain = cfg.drafts.pretrain.with_seed(rng::derive_named(seed, "draft_pretrain"));
    Ok(pretrain_on_task(&init, &world.train_data, &items, &pretrain)?.0)
}

pub fn train_drafts(
    cfg: &ExperimentConfig,
    seed: u64,
    world: &World,
    template: &AutoregressiveModel,
) -> Result<(ModelFamily, Vec<MemberLog>)> {
    let dcfg = DraftTrainConfig {
        train: cfg.drafts.train.with_seed(rng::derive_named(seed, "draft_train")),
        init_noise: cfg.drafts.init_noise.clone(),
        partition_unit: cfg.drafts.partition_unit,
        shared_seed: false,
        max_response_len: cfg.task.max_response_len,
    };
    let teacher = match cfg.drafts.teacher {
        DraftTeacherKind::GeneratingMember => DraftTeacher::GeneratingMember(&world.target_family),
        DraftTeacherKind::Target => DraftTeacher::Single(&world.target),
    };
    train_draft_family(&cfg.drafts.strategy, template, teacher, &world.train_data, &world.corpus, &dcfg)
}

/// The distilled mixture proxy, or `None` when the raw family average is used.
pub fn train_proxy(cfg: &ExperimentConfig, seed: u64, world: &World) -> Result<Option<AutoregressiveModel>> {
    match cfg.proxy.kind {
        ProxyKind::RawFamilyAverage => Ok(None),
        ProxyKind::DistilledMix => {
            let teacher = match cfg.proxy.teacher {
                ProxyTeacherKind::GeneratingFamily => StochasticTeacher::Enumerated(world.target_family.clone()),
                ProxyTeacherKind::Perturbed => {
                    StochasticTeacher::Perturbed { base: world.target.clone(), noise: cfg.target.noise.clone() }
                }
            };
            let set = TrainingSet::from_corpus(&world.train_data, &world.corpus, None);
            let osd = cfg.proxy.osd.with_seed(rng::derive_named(seed, "pmix"));
            Ok(Some(osd_train(&world.target, &teacher, &set, &osd)?.0))
        }
    }
}

/// Target generations on the evaluation queries with their EU traces.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub responses: Vec<LabeledResponse>,
    pub traces: Vec<Vec<TokenEU>>,
}

impl Estimates {
    pub fn trace_rows(&self) -> Vec<TraceRow> {
        self.traces
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.iter().map(move |tok| TraceRow { sequence_id: i, token: *tok }))
            .collect()
    }

    pub fn save(&self, dir: &Path, run_id: usize) -> Result<()> {
        io::write_jsonl(&dir.join(format!("eval/generations_run_{run_id}.jsonl")), &self.responses)?;
        io::write_jsonl(&dir.join(format!("traces/run_{run_id}.jsonl")), self.trace_rows())
    }

    pub fn load(dir: &Path, run_id: usize) -> Result<Self> {
        let responses: Vec<LabeledResponse> = io::read_jsonl(&dir.join(format!("eval/generations_run_{run_id}.jsonl")))?;
        let rows: Vec<TraceRow> = io::read_jsonl(&dir.join(format!("traces/run_{run_id}.jsonl")))?;
        let mut traces = vec![Vec::new(); responses.len()];
        for r in rows {
            traces
                .get_mut(r.sequence_id)
                .ok_or_else(|| invalid(format!("trace row for unknown sequence {}", r.sequence_id)))?
                .push(r.token);
        }
        Ok(Self { responses, traces })
    }
}

/// The draft ensemble actually scored: the trained family, or K perturbed
/// copies of its first member.
pub fn ensemble_family(cfg: &ExperimentConfig, seed: u64, drafts: &ModelFamily) -> Result<ModelFamily> {
    match &cfg.ensemble {
        EnsembleConfig::SxM { .. } => Ok(drafts.clone()),
        EnsembleConfig::KOnly { k, noise } => konly_family(&drafts.members()[0], *k, noise, rng::derive_named(seed, "konly")),
    }
}

pub fn ground_truth_family(cfg: &ExperimentConfig, seed: u64, world: &World) -> Result<ModelFamily> {
    match cfg.target.ground_truth {
        GroundTruthKind::GeneratingFamily => Ok(world.target_family.clone()),
        GroundTruthKind::FreshFamily => make_target_family(
            &world.target,
            cfg.target.ground_truth_size,
            &cfg.target.noise,
            rng::derive_named(seed, "ground_truth"),
        ),
    }
}

pub fn estimate(
    cfg: &ExperimentConfig,
    seed: u64,
    world: &World,
    drafts: &ModelFamily,
    pmix: Option<&AutoregressiveModel>,
) -> Result<Estimates> {
    let ensemble = ensemble_family(cfg, seed, drafts)?;
    let truth = ground_truth_family(cfg, seed, world)?;
    let proxy = match pmix {
        Some(m) => ProxyTarget::DistilledMix(m),
        None => ProxyTarget::RawFamilyAverage(&world.target_family),
    };
    let responses = label_correctness(
        &world.target,
        &world.eval_data,
        cfg.task.eval_samples,
        cfg.task.temperature,
        cfg.task.max_response_len,
        rng::derive_named(seed, "eval_generations"),
    )?;
    let traces = exec::map_indexed(responses.len(), |i| {
        let r = &responses[i];
        token_eu_trace(&ensemble, proxy, Some(&truth), &r.response, &world.eval_data.prompt(r.query_index))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Estimates { responses, traces })
}

/// Calibration half of the deterministic 50/50 split by query id.
pub fn in_calibration_split(query_index: usize) -> bool {
    rng::avalanche(query_index as u64 ^ 0x5bd1_e995) & 1 == 0
}

fn draft_params(cfg: &ExperimentConfig) -> Result<f64> {
    Ok(AutoregressiveModel::param_count(cfg.model.backend, cfg.model.vocab_size, cfg.model.context_window, cfg.model.draft_hidden)?
        as f64)
}

fn target_params(cfg: &ExperimentConfig) -> Result<f64> {
    Ok(AutoregressiveModel::param_count(cfg.model.backend, cfg.model.vocab_size, cfg.model.context_window, cfg.model.target_hidden)?
        as f64)
}

/// Cost of the estimator and of the target-ensemble baseline, in parameter
/// counts per forward pass.
pub fn cost_entries(cfg: &ExperimentConfig, mode: CostMode) -> Result<(CostEntry, CostEntry)> {
    let tp = target_params(cfg)?;
    let baseline = CostEntry::target_ensemble(tp, cfg.target.family_size)?;
    let mut passes = vec![Pass { size: draft_params(cfg)?, count: cfg.ensemble.size() }];
    if mode == CostMode::DraftsPlusTarget {
        let count = match cfg.proxy.kind {
            ProxyKind::DistilledMix => 1,
            ProxyKind::RawFamilyAverage => cfg.target.family_size,
        };
        passes.push(Pass { size: tp, count });
    }
    let method = CostEntry::new(format!("{} drafts ({mode:?})", cfg.ensemble.size()), passes)?;
    Ok((method, baseline))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn evaluate(cfg: &ExperimentConfig, run_id: usize, seed: u64, est: &Estimates) -> Result<RunMetrics> {
    let tokens: Vec<&TokenEU> = est.traces.iter().flatten().filter(|t| !t.flagged).collect();
    let with_truth: Vec<(f64, f64)> =
        tokens.iter().filter_map(|t| t.ground_truth.map(|g| (t.estimated_total, g))).collect();
    if with_truth.is_empty() {
        return Err(invalid("no token pairs with ground truth"));
    }
    let (e, g): (Vec<f64>, Vec<f64>) = with_truth.iter().copied().unzip();

    let mut cal = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (r, trace) in est.responses.iter().zip(&est.traces) {
        let Ok(score) = sequence_eu(trace, cfg.eval.aggregation) else { continue };
        let incorrect = 1 - r.label;
        let side = if in_calibration_split(r.query_index) { &mut cal } else { &mut test };
        side.0.push(score);
        side.1.push(incorrect);
    }
    if test.0.is_empty() {
        return Err(invalid("evaluation split has no scored generations"));
    }
    let probs = match fit_logistic(&cal.0, &cal.1, cfg.eval.logistic_reg, &LogisticConfig::default()) {
        Ok(m) => m.predict_all(&test.0),
        Err(Error::InvalidInput(_)) => {
            // single-class or empty calibration half: fall back to its base rate
            let rate = if cal.1.is_empty() { 0.5 } else { cal.1.iter().map(|&l| f64::from(l)).sum::<f64>() / cal.1.len() as f64 };
            vec![rate; test.0.len()]
        }
        Err(other) => return Err(other),
    };
    let det = detection_metrics(&probs, &test.1, cfg.eval.ece_bins)?;
    let (method, baseline) = cost_entries(cfg, cfg.eval.cost_mode)?;
    Ok(RunMetrics {
        run_id,
        seed,
        rmse: rmse(&e, &g)?,
        spearman: spearman(&e, &g).ok(),
        ccc: ccc(&e, &g).ok(),
        auroc: det.auroc,
        ece: det.ece,
        brier: det.brier,
        rel_flops: relative_flops(&method, &baseline)?,
        mean_variance_proxy: mean(&tokens.iter().map(|t| t.variance_proxy).collect::<Vec<_>>()),
        mean_bias_proxy: mean(&tokens.iter().map(|t| t.bias_proxy).collect::<Vec<_>>()),
        mean_ground_truth: mean(&g),
        token_pairs: with_truth.len(),
        flagged_tokens: est.traces.iter().map(|t| flagged_count(t)).sum(),
    })
}

/// Everything one run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub estimates: Estimates,
    pub draft_logs: Vec<MemberLog>,
}

/// One complete run; training failures surface as `Error::TrainingFailure`.
pub fn run_single(cfg: &ExperimentConfig, run_id: usize) -> Result<RunOutput> {
    let seed = run_seed(cfg, run_id);
    let world = build_world(cfg, seed)?;
    if cfg.debug.fail_runs.contains(&run_id) {
        return Err(Error::TrainingFailure { step: 0, reason: "injected failure".into() });
    }
    let template = draft_template(cfg, seed, &world)?;
    let (drafts, draft_logs) = train_drafts(cfg, seed, &world, &template)?;
    let pmix = train_proxy(cfg, seed, &world)?;
    let estimates = estimate(cfg, seed, &world, &drafts, pmix.as_ref())?;
    Ok(RunOutput { metrics: evaluate(cfg, run_id, seed, &estimates)?, estimates, draft_logs })
}

/// Writes one step log per draft member as `draft_{member}.jsonl` under `dir`.
pub fn save_member_logs(dir: &Path, logs: &[MemberLog]) -> Result<()> {
    for l in logs {
        l.log.save(&dir.join(format!("draft_{}.jsonl", l.member)))?;
    }
    Ok(())
}

pub fn load_member_log(dir: &Path, member: usize) -> Result<Vec<StepLog>> {
    io::read_jsonl(&dir.join(format!("draft_{member}.jsonl")))
}

pub fn settings(cfg: &ExperimentConfig) -> ReportSettings {
    let st = &cfg.drafts.strategy;
    ReportSettings {
        strategy: format!("{} {}x{}", st.kind.name(), st.s, st.m),
        ensemble: match &cfg.ensemble {
            EnsembleConfig::SxM { s, m } => format!("sxm {s}x{m}"),
            EnsembleConfig::KOnly { k, noise } => format!("k_only k={k} rank={} sigma={}", noise.rank, noise.sigma),
        },
        proxy: match cfg.proxy.kind {
            ProxyKind::DistilledMix => "distilled_mix".into(),
            ProxyKind::RawFamilyAverage => "raw_family_average".into(),
        },
        aggregation: format!("{:?}", cfg.eval.aggregation).to_lowercase(),
        fidelity_population: "token-level pairs pooled over all evaluation generations".into(),
        ece_bins: cfg.eval.ece_bins,
        cost_mode: cfg.eval.cost_mode,
        run_variation: "task, target, corpus, training and generation seeds all derive from the run seed".into(),
    }
}

/// Assembles a report from per-run outcomes (in run order).
pub fn assemble_report(cfg: &ExperimentConfig, outcomes: Vec<(usize, Result<RunMetrics>)>) -> Result<ExperimentReport> {
    let mut per_run = Vec::new();
    let mut failed_runs = Vec::new();
    for (run_id, o) in outcomes {
        match o {
            Ok(m) => per_run.push(m),
            Err(Error::TrainingFailure { step, reason }) => failed_runs.push(FailedRun {
                run_id,
                seed: run_seed(cfg, run_id),
                reason: format!("training failed at step {step}: {reason}"),
            }),
            Err(e) => return Err(e),
        }
    }
    if per_run.is_empty() {
        let reason = failed_runs.first().map(|f| f.reason.clone()).unwrap_or_default();
        return Err(Error::TrainingFailure { step: 0, reason: format!("every run failed; first: {reason}") });
    }
    let (cost, cost_baseline) = cost_entries(cfg, cfg.eval.cost_mode)?;
    Ok(ExperimentReport {
        config_fingerprint: cfg.fingerprint()?,
        settings: settings(cfg),
        summary: Summary::from_runs(&per_run),
        rel_flops: relative_flops(&cost, &cost_baseline)?,
        per_run,
        failed_runs,
        cost,
        cost_baseline,
    })
}

/// Runs every configured run (in parallel when enabled) and, when `out` is
/// given, writes the report files and per-run traces there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let results = exec::map_indexed(cfg.runs, |r| run_single(cfg, r));
    let mut outcomes = Vec::with_capacity(results.len());
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(run) => {
                if let Some(dir) = out {
                    run.estimates.save(dir, r)?;
                    save_member_logs(&dir.join(format!("logs/run_{r}")), &run.draft_logs)?;
                }
                outcomes.push((r, Ok(run.metrics)));
            }
            Err(e) => outcomes.push((r, Err(e))),
        }
    }
    let report = assemble_report(cfg, outcomes)?;
    if let Some(dir) = out {
        write_report_files(&report, dir)?;
    }
    Ok(report)
}
