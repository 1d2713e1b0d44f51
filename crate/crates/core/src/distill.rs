//! KL-based trainers.
//!
//! All trainers run plain SGD with a constant learning rate on the flat
//! parameter vector. Per context the forward-KL gradient with respect to the
//! student logits is `p_student - p_teacher`; the reverse-KL gradient is
//! `s_j (ln s_j - ln t_j - KL(s || t))`.
//!
//! Training happens on response positions only: for a record with prompt
//! `x` and response `y`, the contexts are `x ++ y[..t]` for every `t`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{partition_corpus_by, GeneratedCorpus, PartitionUnit, QADataset};
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::io;
use crate::models::{perturb_low_rank, sample_sequence, AutoregressiveModel, LowRankNoiseSpec, ModelFamily, Provenance};
use crate::rng;
use crate::simplex::{kl_slices, softmax_raw, Categorical, ZeroMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub teacher_samples_per_step: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.teacher_samples_per_step == 0 {
            return Err(invalid("steps, batch_size and teacher_samples_per_step must be positive"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Distribution over teacher realizations.
#[derive(Debug, Clone)]
pub enum StochasticTeacher {
    /// A single deterministic teacher.
    Fixed(AutoregressiveModel),
    /// Fresh low-rank perturbations of `base` each step.
    Perturbed { base: AutoregressiveModel, noise: LowRankNoiseSpec },
    /// Finite family; every step averages over all members exactly.
    Enumerated(ModelFamily),
}

impl StochasticTeacher {
    fn reference(&self) -> &AutoregressiveModel {
        match self {
            Self::Fixed(m) => m,
            Self::Perturbed { base, .. } => base,
            Self::Enumerated(f) => &f.members()[0],
        }
    }

    /// Realizations used at `step`.
    fn realizations(&self, step_seed: u64, samples: usize) -> Result<Vec<AutoregressiveModel>> {
        match self {
            Self::Fixed(m) => Ok(vec![m.clone()]),
            Self::Perturbed { base, noise } => (0..samples)
                .map(|j| perturb_low_rank(base, noise, rng::derive(step_seed, j as u64)))
                .collect(),
            Self::Enumerated(f) => Ok(f.members().to_vec()),
        }
    }
}

/// Teacher signal for draft training.
#[derive(Debug, Clone, Copy)]
pub enum DraftTeacher<'a> {
    /// Every record is distilled from the same model.
    Single(&'a AutoregressiveModel),
    /// Each record is distilled from the family member that generated it.
    GeneratingMember(&'a ModelFamily),
}

impl<'a> DraftTeacher<'a> {
    fn reference(&self) -> &'a AutoregressiveModel {
        match self {
            Self::Single(m) => m,
            Self::GeneratingMember(f) => &f.members()[0],
        }
    }

    pub fn for_record(&self, corpus: &GeneratedCorpus, record: usize) -> Result<&'a AutoregressiveModel> {
        match self {
            Self::Single(m) => Ok(m),
            Self::GeneratingMember(f) => {
                let member = corpus.records[record]
                    .member
                    .ok_or_else(|| invalid(format!("record {record} has no generating member")))?;
                f.members().get(member).ok_or_else(|| invalid(format!("record {record}: member {member} out of range")))
            }
        }
    }
}

enum Supervision<'a> {
    HardLabels,
    Stochastic(&'a StochasticTeacher),
    PerRecord(DraftTeacher<'a>, &'a GeneratedCorpus),
}

impl Supervision<'_> {
    fn realizations(&self, seed: u64, samples: usize) -> Result<Vec<AutoregressiveModel>> {
        match self {
            Self::Stochastic(t) => t.realizations(seed, samples),
            _ => Ok(Vec::new()),
        }
    }

    /// Target distributions for one context.
    fn targets(&self, c: &TrainingContext, realizations: &[AutoregressiveModel], v: usize) -> Result<Vec<Vec<f64>>> {
        if let Some(tok) = c.target {
            let mut one_hot = vec![0.0; v];
            one_hot[tok] = 1.0;
            return Ok(vec![one_hot]);
        }
        match self {
            Self::HardLabels => Err(invalid("context without a label in a hard-label training set")),
            Self::Stochastic(_) => realizations
                .iter()
                .map(|t| t.next_token_dist(&c.context).map(Categorical::into_vec))
                .collect(),
            Self::PerRecord(t, corpus) => Ok(vec![t.for_record(corpus, c.record)?.next_token_dist(&c.context)?.into_vec()]),
        }
    }
}

/// One training context and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingContext {
    pub record: usize,
    pub context: Vec<usize>,
    /// Hard label for task pretraining; `None` means teacher-supervised.
    pub target: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingSet {
    pub contexts: Vec<TrainingContext>,
}

impl TrainingSet {
    /// Response-position contexts for `records` (all records when `None`).
    pub fn from_corpus(data: &QADataset, corpus: &GeneratedCorpus, records: Option<&[usize]>) -> Self {
        let ids: Vec<usize> = match records {
            Some(r) => r.to_vec(),
            None => (0..corpus.len()).collect(),
        };
        let mut contexts = Vec::new();
        for id in ids {
            let rec = &corpus.records[id];
            let mut ctx = data.prompt(rec.query_index);
            for &tok in &rec.response {
                contexts.push(TrainingContext { record: id, context: ctx.clone(), target: None });
                ctx.push(tok);
            }
        }
        Self { contexts }
    }

    /// Gold sequences `[answer, eos]` for the given dataset items; the
    /// record id is the item index.
    pub fn from_gold(data: &QADataset, items: &[usize]) -> Self {
        let mut contexts = Vec::new();
        for &i in items {
            let mut ctx = data.prompt(i);
            let mut seq = vec![data.items[i].gold_answer];
            seq.extend(data.vocab.eos_id);
            for tok in seq {
                contexts.push(TrainingContext { record: i, context: ctx.clone(), target: Some(tok) });
                ctx.push(tok);
            }
        }
        Self { contexts }
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub records: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// Objective over the whole training set before the first update.
    pub initial_loss: f64,
    /// Same objective after the last update.
    pub final_loss: f64,
}

impl TrainLog {
    pub fn consumed_records(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.steps.iter().flat_map(|s| s.records.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher || student)`, mode covering.
    Forward,
    /// `KL(student || teacher)`, mode seeking.
    Reverse,
}

/// Loss and `d loss / d logits` for one context.
fn logit_grad(student: &[f64], teacher: &[f64], direction: KlDirection) -> (f64, Vec<f64>) {
    match direction {
        KlDirection::Forward => {
            let loss = kl_slices(teacher, student, ZeroMode::Infinite);
            (loss, student.iter().zip(teacher).map(|(s, t)| s - t).collect())
        }
        KlDirection::Reverse => {
            let loss = kl_slices(student, teacher, ZeroMode::Infinite);
            let g = student
                .iter()
                .zip(teacher)
                .map(|(&s, &t)| if s > 0.0 { s * (s.ln() - t.ln() - loss) } else { 0.0 })
                .collect();
            (loss, g)
        }
    }
}

/// KL loss at `context` and its gradient over all parameters.
pub fn loss_and_gradient(
    model: &AutoregressiveModel,
    teacher: &Categorical,
    context: &[usize],
    direction: KlDirection,
) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != model.vocab_size() {
        return Err(invalid("teacher distribution does not match vocabulary"));
    }
    let act = model.forward(context)?;
    let probs = softmax_raw(&act.logits);
    let (loss, dlogits) = logit_grad(&probs, teacher.probs(), direction);
    let mut grad = vec![0.0; model.params().len()];
    model.backprop(&act, &dlogits, &mut grad);
    Ok((loss, grad))
}

fn loss_only(model: &AutoregressiveModel, teacher: &Categorical, context: &[usize], direction: KlDirection) -> Result<f64> {
    let probs = model.next_token_dist(context)?;
    Ok(match direction {
        KlDirection::Forward => kl_slices(teacher.probs(), probs.probs(), ZeroMode::Infinite),
        KlDirection::Reverse => kl_slices(probs.probs(), teacher.probs(), ZeroMode::Infinite),
    })
}

/// Max relative error between the analytic gradient and central finite
/// differences (step `1e-5`) over every parameter. Relative error uses
/// `max(|analytic|, |numeric|, 1e-6)` as the denominator.
pub fn check_gradients(model: &AutoregressiveModel, teacher: &Categorical, context: &[usize]) -> Result<f64> {
    check_gradients_for(model, teacher, context, KlDirection::Forward)
}

pub fn check_gradients_for(
    model: &AutoregressiveModel,
    teacher: &Categorical,
    context: &[usize],
    direction: KlDirection,
) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let (_, analytic) = loss_and_gradient(model, teacher, context, direction)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + STEP;
        let up = loss_only(&probe, teacher, context, direction)?;
        probe.params_mut()[i] = orig - STEP;
        let down = loss_only(&probe, teacher, context, direction)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn check_compatible(student: &AutoregressiveModel, teacher: &AutoregressiveModel) -> Result<()> {
    if !student.compatible(teacher) {
        return Err(invalid("student and teacher must share vocabulary and context window"));
    }
    Ok(())
}

fn sgd_step(model: &mut AutoregressiveModel, grad: &[f64], lr: f64) {
    for (p, g) in model.params_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

fn diverged(step: usize, loss: f64, model: &AutoregressiveModel) -> Option<Error> {
    if !loss.is_finite() {
        return Some(Error::TrainingFailure { step, reason: format!("non-finite loss {loss}") });
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Some(Error::TrainingFailure { step, reason: "non-finite parameter".into() });
    }
    None
}

/// Mean forward KL (or cross-entropy) over every context.
fn full_objective(
    student: &AutoregressiveModel,
    sup: &Supervision<'_>,
    realizations: &[AutoregressiveModel],
    set: &TrainingSet,
) -> Result<f64> {
    let mut total = 0.0;
    for c in &set.contexts {
        let s = student.next_token_dist(&c.context)?;
        let targets = sup.targets(c, realizations, s.len())?;
        let mut acc = 0.0;
        for t in &targets {
            acc += kl_slices(t, s.probs(), ZeroMode::Infinite);
        }
        total += acc / targets.len() as f64;
    }
    Ok(total / set.len().max(1) as f64)
}

/// Forward-KL SGD; hard-labelled contexts use cross-entropy (the KL to a
/// point mass).
fn train_forward(
    student: &AutoregressiveModel,
    sup: Supervision<'_>,
    set: &TrainingSet,
    config: &TrainConfig,
) -> Result<(AutoregressiveModel, TrainLog)> {
    config.validate()?;
    if set.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mut model = student.clone();
    let mut order = rng::stream(rng::derive_named(config.seed, "order"));
    let teacher_seed = rng::derive_named(config.seed, "teacher");
    let eval_teachers = sup.realizations(rng::derive_named(config.seed, "eval"), config.teacher_samples_per_step)?;
    let initial_loss = full_objective(&model, &sup, &eval_teachers, set)?;
    let mut steps = Vec::with_capacity(config.steps);
    let mut grad = vec![0.0; model.params().len()];
    for step in 0..config.steps {
        let realizations = sup.realizations(rng::derive(teacher_seed, step as u64), config.teacher_samples_per_step)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut records = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let c = &set.contexts[order.random_range(0..set.len())];
            records.push(c.record);
            let act = model.forward(&c.context)?;
            let probs = softmax_raw(&act.logits);
            let targets = sup.targets(c, &realizations, probs.len())?;
            let weight = 1.0 / (config.batch_size * targets.len()) as f64;
            let mut dlogits = vec![0.0; probs.len()];
            for t in &targets {
                let (l, g) = logit_grad(&probs, t, KlDirection::Forward);
                loss += weight * l;
                for (d, gi) in dlogits.iter_mut().zip(&g) {
                    *d += weight * gi;
                }
            }
            model.backprop(&act, &dlogits, &mut grad);
        }
        if let Some(e) = diverged(step, loss, &model) {
            return Err(e);
        }
        sgd_step(&mut model, &grad, config.learning_rate);
        if let Some(e) = diverged(step, loss, &model) {
            return Err(e);
        }
        records.sort_unstable();
        records.dedup();
        steps.push(StepLog { step, loss, records });
    }
    let final_loss = full_objective(&model, &sup, &eval_teachers, set)?;
    Ok((model, TrainLog { steps, initial_loss, final_loss }))
}

/// Online stochastic distillation: each step draws
/// `teacher_samples_per_step` teacher realizations and descends the mean
/// forward KL from each realization to the student.
pub fn osd_train(
    student: &AutoregressiveModel,
    teacher: &StochasticTeacher,
    set: &TrainingSet,
    config: &TrainConfig,
) -> Result<(AutoregressiveModel, TrainLog)> {
    check_compatible(student, teacher.reference())?;
    if let StochasticTeacher::Perturbed { base, noise } = teacher {
        noise.target_blocks(base)?;
    }
    train_forward(student, Supervision::Stochastic(teacher), set, config)
}

/// Forward-KL distillation of each record's teacher on `records`.
pub fn distill_records(
    student: &AutoregressiveModel,
    teacher: DraftTeacher<'_>,
    data: &QADataset,
    corpus: &GeneratedCorpus,
    records: &[usize],
    config: &TrainConfig,
) -> Result<(AutoregressiveModel, TrainLog)> {
    check_compatible(student, teacher.reference())?;
    let set = TrainingSet::from_corpus(data, corpus, Some(records));
    train_forward(student, Supervision::PerRecord(teacher, corpus), &set, config)
}

/// Cross-entropy on gold `[answer, eos]` sequences.
pub fn pretrain_on_task(
    model: &AutoregressiveModel,
    data: &QADataset,
    items: &[usize],
    config: &TrainConfig,
) -> Result<(AutoregressiveModel, TrainLog)> {
    train_forward(model, Supervision::HardLabels, &TrainingSet::from_gold(data, items), config)
}

/// Reverse-KL distillation with on-policy contexts: every step the student
/// samples one response per drawn record prompt and is trained on the
/// prefixes of its own samples.
pub fn reverse_kl_train(
    student: &AutoregressiveModel,
    teacher: DraftTeacher<'_>,
    data: &QADataset,
    corpus: &GeneratedCorpus,
    records: &[usize],
    max_len: usize,
    config: &TrainConfig,
) -> Result<(AutoregressiveModel, TrainLog)> {
    config.validate()?;
    check_compatible(student, teacher.reference())?;
    if records.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mut model = student.clone();
    let mut order = rng::stream(rng::derive_named(config.seed, "order"));
    let sample_seed = rng::derive_named(config.seed, "on_policy");
    let objective = |m: &AutoregressiveModel| -> Result<f64> {
        let set = TrainingSet::from_corpus(data, corpus, Some(records));
        let mut total = 0.0;
        for c in &set.contexts {
            let t = teacher.for_record(corpus, c.record)?.next_token_dist(&c.context)?;
            total += loss_only(m, &t, &c.context, KlDirection::Reverse)?;
        }
        Ok(total / set.len().max(1) as f64)
    };
    let initial_loss = objective(&model)?;
    let mut steps = Vec::with_capacity(config.steps);
    let mut grad = vec![0.0; model.params().len()];
    for step in 0..config.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut contexts = Vec::new();
        let mut consumed = Vec::with_capacity(config.batch_size);
        for b in 0..config.batch_size {
            let rec = records[order.random_range(0..records.len())];
            consumed.push(rec);
            let t_model = teacher.for_record(corpus, rec)?;
            let prompt = data.prompt(corpus.records[rec].query_index);
            let s = rng::derive(rng::derive(sample_seed, step as u64), b as u64);
            let response = sample_sequence(&model, &prompt, max_len, 1.0, s)?;
            let mut ctx = prompt;
            for tok in response {
                contexts.push((ctx.clone(), t_model));
                ctx.push(tok);
            }
        }
        let weight = 1.0 / contexts.len() as f64;
        let mut loss = 0.0;
        for (ctx, t_model) in &contexts {
            let act = model.forward(ctx)?;
            let probs = softmax_raw(&act.logits);
            let t = t_model.next_token_dist(ctx)?;
            let (l, g) = logit_grad(&probs, t.probs(), KlDirection::Reverse);
            loss += weight * l;
            let g: Vec<f64> = g.iter().map(|x| x * weight).collect();
            model.backprop(&act, &g, &mut grad);
        }
        if let Some(e) = diverged(step, loss, &model) {
            return Err(e);
        }
        sgd_step(&mut model, &grad, config.learning_rate);
        if let Some(e) = diverged(step, loss, &model) {
            return Err(e);
        }
        consumed.sort_unstable();
        consumed.dedup();
        steps.push(StepLog { step, loss, records: consumed });
    }
    let final_loss = objective(&model)?;
    Ok((model, TrainLog { steps, initial_loss, final_loss }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Untrained,
    Ddd,
    Idd,
    Fdd,
    ReverseKl,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [Self::Untrained, Self::Idd, Self::Ddd, Self::Fdd, Self::ReverseKl];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Untrained => "untrained",
            Self::Ddd => "ddd",
            Self::Idd => "idd",
            Self::Fdd => "fdd",
            Self::ReverseKl => "reverse_kl",
        }
    }

    fn partitions_data(&self) -> bool {
        matches!(self, Self::Ddd | Self::Fdd)
    }

    fn noisy_init(&self) -> bool {
        matches!(self, Self::Idd | Self::Fdd)
    }
}

/// `s` data partitions times `m` members per partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftStrategy {
    pub kind: StrategyKind,
    pub s: usize,
    pub m: usize,
}

impl DraftStrategy {
    pub fn new(kind: StrategyKind, s: usize, m: usize) -> Result<Self> {
        let st = Self { kind, s, m };
        st.validate()?;
        Ok(st)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.m == 0 {
            return Err(invalid("draft strategy needs s >= 1 and m >= 1"));
        }
        Ok(())
    }

    pub fn members(&self) -> usize {
        self.s * self.m
    }

    /// Partition index (imitated group) of member `i`.
    pub fn group_of(&self, i: usize) -> usize {
        i / self.m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftTrainConfig {
    pub train: TrainConfig,
    /// Initialization noise for IDD/FDD members.
    pub init_noise: LowRankNoiseSpec,
    #[serde(default)]
    pub partition_unit: PartitionUnit,
    /// Give every member the same training-order seed.
    #[serde(default)]
    pub shared_seed: bool,
    #[serde(default = "default_max_len")]
    pub max_response_len: usize,
}

fn default_max_len() -> usize {
    crate::datagen::DEFAULT_MAX_RESPONSE_LEN
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberLog {
    pub member: usize,
    pub group: usize,
    pub allowed_records: Vec<usize>,
    pub log: TrainLog,
}

/// Trains an `s x m` draft family according to `strategy`.
///
/// `template` is the starting point of every member (normally a draft that
/// was pretrained on raw task data). The forward-KL strategies distill the
/// deterministic `teacher` on response contexts of the corpus; DDD and FDD
/// restrict member `i` to the records of partition `i / m`.
pub fn train_draft_family(
    strategy: &DraftStrategy,
    template: &AutoregressiveModel,
    teacher: DraftTeacher<'_>,
    data: &QADataset,
    corpus: &GeneratedCorpus,
    config: &DraftTrainConfig,
) -> Result<(ModelFamily, Vec<MemberLog>)> {
    strategy.validate()?;
    config.train.validate()?;
    check_compatible(template, teacher.reference())?;
    if corpus.is_empty() {
        return Err(invalid("empty corpus"));
    }
    if strategy.kind.noisy_init() {
        config.init_noise.target_blocks(template)?;
    }
    let chunks: Vec<Vec<usize>> = if strategy.kind.partitions_data() {
        let plan = partition_corpus_by(
            corpus,
            strategy.s,
            config.partition_unit,
            rng::derive_named(config.train.seed, "partition"),
        )?;
        (0..strategy.s).map(|c| plan.chunk(c)).collect()
    } else {
        vec![(0..corpus.len()).collect(); strategy.s]
    };
    let results = exec::map_indexed(strategy.members(), |i| -> Result<(AutoregressiveModel, MemberLog)> {
        let group = strategy.group_of(i);
        let member_seed = if config.shared_seed {
            config.train.seed
        } else {
            rng::derive(config.train.seed, i as u64)
        };
        let train = config.train.with_seed(member_seed);
        let allowed = chunks[group].clone();
        let start = if strategy.kind.noisy_init() {
            perturb_low_rank(template, &config.init_noise, rng::derive_named(member_seed, "init"))?
        } else {
            template.clone()
        };
        let (model, log) = match strategy.kind {
            StrategyKind::Untrained => {
                let mut items: Vec<usize> = allowed.iter().map(|&r| corpus.records[r].query_index).collect();
                items.sort_unstable();
                items.dedup();
                let (m, mut log) = pretrain_on_task(&start, data, &items, &train)?;
                // record ids in the log refer to dataset items here; map back to corpus records
                for s in &mut log.steps {
                    s.records = records_for_items(corpus, &allowed, &s.records);
                }
                (m, log)
            }
            StrategyKind::Ddd | StrategyKind::Idd | StrategyKind::Fdd => {
                distill_records(&start, teacher, data, corpus, &allowed, &train)?
            }
            StrategyKind::ReverseKl => {
                reverse_kl_train(&start, teacher, data, corpus, &allowed, config.max_response_len, &train)?
            }
        };
        Ok((model, MemberLog { member: i, group, allowed_records: allowed, log }))
    });
    let mut members = Vec::with_capacity(results.len());
    let mut logs = Vec::with_capacity(results.len());
    for r in results {
        let (m, l) = r?;
        members.push(m);
        logs.push(l);
    }
    Ok((ModelFamily::new(members, Provenance::DraftFamily)?, logs))
}

fn records_for_items(corpus: &GeneratedCorpus, allowed: &[usize], items: &[usize]) -> Vec<usize> {
    allowed
        .iter()
        .copied()
        .filter(|&r| items.binary_search(&corpus.records[r].query_index).is_ok())
        .collect()
}

/// Two-parameter unimodal family over an ordered vocabulary:
/// `p_i ∝ exp(-(i - mu)² / (2 sigma²))` with `sigma = exp(log_sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedGaussian {
    pub mu: f64,
    pub log_sigma: f64,
}

impl DiscretizedGaussian {
    pub fn logits(&self, v: usize) -> Vec<f64> {
        let var = (2.0 * self.log_sigma).exp();
        (0..v).map(|i| -((i as f64 - self.mu).powi(2)) / (2.0 * var)).collect()
    }

    pub fn dist(&self, v: usize) -> Categorical {
        Categorical::new(softmax_raw(&self.logits(v))).expect("softmax output is a valid distribution")
    }

    pub fn loss(&self, teacher: &Categorical, direction: KlDirection) -> f64 {
        let s = self.dist(teacher.len());
        match direction {
            KlDirection::Forward => kl_slices(teacher.probs(), s.probs(), ZeroMode::Infinite),
            KlDirection::Reverse => kl_slices(s.probs(), teacher.probs(), ZeroMode::Infinite),
        }
    }

    /// Loss and gradient with respect to `(mu, log_sigma)`.
    pub fn loss_and_gradient(&self, teacher: &Categorical, direction: KlDirection) -> (f64, [f64; 2]) {
        let v = teacher.len();
        let probs = softmax_raw(&self.logits(v));
        let (loss, dz) = logit_grad(&probs, teacher.probs(), direction);
        let var = (2.0 * self.log_sigma).exp();
        let mut g = [0.0; 2];
        for (i, d) in dz.iter().enumerate() {
            let diff = i as f64 - self.mu;
            g[0] += d * diff / var;
            g[1] += d * diff * diff / var;
        }
        (loss, g)
    }

    /// Moment-matched starting point.
    pub fn moment_init(teacher: &Categorical) -> Self {
        let mean: f64 = teacher.probs().iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        let var: f64 = teacher.probs().iter().enumerate().map(|(i, p)| p * (i as f64 - mean).powi(2)).sum();
        Self { mu: mean, log_sigma: 0.5 * var.max(1e-6).ln() }
    }
}

/// Gradient descent with backtracking on the two-parameter family. Starts
/// from the teacher's moments and from narrow bumps spread over the support,
/// and keeps the lowest-loss result.
pub fn fit_discretized_gaussian(teacher: &Categorical, direction: KlDirection, max_iters: usize) -> DiscretizedGaussian {
    let moments = DiscretizedGaussian::moment_init(teacher);
    let v = teacher.len() as f64;
    let width = (v / 8.0).max(1.0);
    let mut starts = vec![moments];
    starts.extend((0..8).map(|k| DiscretizedGaussian { mu: (k as f64 + 0.5) * v / 8.0, log_sigma: width.ln() }));
    let mut best = (f64::INFINITY, moments);
    for start in starts {
        let fit = descend(start, teacher, direction, max_iters);
        let loss = fit.loss(teacher, direction);
        if loss < best.0 {
            best = (loss, fit);
        }
    }
    best.1
}

fn descend(start: DiscretizedGaussian, teacher: &Categorical, direction: KlDirection, max_iters: usize) -> DiscretizedGaussian {
    let mut cur = start;
    let (mut loss, mut g) = cur.loss_and_gradient(teacher, direction);
    let mut step = 1.0;
    for _ in 0..max_iters {
        let norm2 = g[0] * g[0] + g[1] * g[1];
        if norm2.sqrt() < 1e-12 {
            break;
        }
        let mut accepted = false;
        while step > 1e-14 {
            let cand = DiscretizedGaussian { mu: cur.mu - step * g[0], log_sigma: cur.log_sigma - step * g[1] };
            let (l, cg) = cand.loss_and_gradient(teacher, direction);
            if l.is_finite() && l <= loss - 1e-4 * step * norm2 {
                cur = cand;
                loss = l;
                g = cg;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    cur
}
