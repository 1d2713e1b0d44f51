//! Synthetic key→answer task, teacher-generated corpora, partitioning and
//! correctness labels.
//!
//! A query is a key of `key_len` tokens. The model is prompted with
//! `key ++ [sep]` and the first generated token is the answer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec;
use crate::io;
use crate::models::{sample_sequence, AutoregressiveModel, ModelFamily, VocabSpec};
use crate::rng;

/// Default bound on response length.
pub const DEFAULT_MAX_RESPONSE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub query: Vec<usize>,
    pub gold_answer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QADataset {
    pub items: Vec<QaItem>,
    pub task_seed: u64,
    pub sep_id: usize,
    pub vocab: VocabSpec,
}

impl QADataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn prompt(&self, index: usize) -> Vec<usize> {
        let mut p = self.items[index].query.clone();
        p.push(self.sep_id);
        p
    }

    /// Keeps only `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self { items: indices.iter().map(|&i| self.items[i].clone()).collect(), ..self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DatasetLine::Header { task_seed: self.task_seed, sep_id: self.sep_id, vocab: self.vocab };
        let items = self
            .items
            .iter()
            .enumerate()
            .map(|(index, it)| DatasetLine::Item { index, query: it.query.clone(), gold_answer: it.gold_answer });
        io::write_jsonl(path, std::iter::once(header).chain(items))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines: Vec<DatasetLine> = io::read_jsonl(path)?;
        let mut it = lines.into_iter();
        let Some(DatasetLine::Header { task_seed, sep_id, vocab }) = it.next() else {
            return Err(invalid(format!("{}: missing dataset header", path.display())));
        };
        let mut items = Vec::new();
        for line in it {
            match line {
                DatasetLine::Item { index, query, gold_answer } if index == items.len() => {
                    items.push(QaItem { query, gold_answer })
                }
                _ => return Err(invalid(format!("{}: malformed dataset line", path.display()))),
            }
        }
        Ok(Self { items, task_seed, sep_id, vocab })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DatasetLine {
    Header { task_seed: u64, sep_id: usize, vocab: VocabSpec },
    Item { index: usize, query: Vec<usize>, gold_answer: usize },
}

/// Smallest token id that is neither bos nor eos.
pub fn separator_for(vocab: &VocabSpec) -> Result<usize> {
    (0..vocab.size)
        .find(|&t| t != vocab.bos_id && Some(t) != vocab.eos_id)
        .ok_or_else(|| invalid("vocabulary has no room for a separator"))
}

fn gold_for(key: &[usize], task_seed: u64, v: usize) -> usize {
    let h = key.iter().fold(rng::avalanche(task_seed), |acc, &t| rng::derive(acc, t as u64));
    (h % v as u64) as usize
}

pub fn make_synthetic_qa(vocab: VocabSpec, n_queries: usize, key_len: usize, seed: u64) -> Result<QADataset> {
    vocab.validate()?;
    if key_len == 0 {
        return Err(invalid("key_len must be >= 1"));
    }
    let v = vocab.size;
    let total = u32::try_from(key_len)
        .ok()
        .and_then(|k| v.checked_pow(k))
        .unwrap_or(usize::MAX);
    if n_queries > total {
        return Err(invalid(format!("{n_queries} queries requested but only {total} distinct keys exist")));
    }
    let sep_id = separator_for(&vocab)?;
    let mut r = rng::stream(rng::derive_named(seed, "keys"));
    let picks = rand::seq::index::sample(&mut r, total, n_queries);
    let task_seed = rng::derive_named(seed, "answers");
    let items = picks
        .into_iter()
        .map(|mut code| {
            let mut key = vec![0; key_len];
            for slot in key.iter_mut().rev() {
                *slot = code % v;
                code /= v;
            }
            let gold_answer = gold_for(&key, task_seed, v);
            QaItem { query: key, gold_answer }
        })
        .collect();
    Ok(QADataset { items, task_seed, sep_id, vocab })
}

/// Where corpus responses come from.
#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    Model(&'a AutoregressiveModel),
    /// Each response first picks a member uniformly at random.
    Family(&'a ModelFamily),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub query_index: usize,
    pub replica: usize,
    pub teacher_tag: String,
    pub member: Option<usize>,
    pub response: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedCorpus {
    pub records: Vec<CorpusRecord>,
    pub responses_per_query: usize,
}

impl GeneratedCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CorpusLine::Header { responses_per_query: self.responses_per_query };
        let rows = self
            .records
            .iter()
            .enumerate()
            .map(|(record, r)| CorpusLine::Record { record, body: r.clone() });
        io::write_jsonl(path, std::iter::once(header).chain(rows))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines: Vec<CorpusLine> = io::read_jsonl(path)?;
        let mut it = lines.into_iter();
        let Some(CorpusLine::Header { responses_per_query }) = it.next() else {
            return Err(invalid(format!("{}: missing corpus header", path.display())));
        };
        let mut records = Vec::new();
        for line in it {
            match line {
                CorpusLine::Record { record, body } if record == records.len() => records.push(body),
                _ => return Err(invalid(format!("{}: malformed corpus line", path.display()))),
            }
        }
        Ok(Self { records, responses_per_query })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CorpusLine {
    Header {
        responses_per_query: usize,
    },
    Record {
        record: usize,
        #[serde(flatten)]
        body: CorpusRecord,
    },
}

/// `r` sampled responses per query, ordered by `(query_index, replica)`.
pub fn generate_corpus(
    teacher: TeacherSource<'_>,
    teacher_tag: &str,
    data: &QADataset,
    r: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<GeneratedCorpus> {
    if r == 0 {
        return Err(invalid("responses per query must be >= 1"));
    }
    let per_query = exec::map_indexed(data.len(), |q| -> Result<Vec<CorpusRecord>> {
        let prompt = data.prompt(q);
        (0..r)
            .map(|j| {
                let item_seed = rng::derive(rng::derive(seed, q as u64), j as u64);
                let (model, member) = match teacher {
                    TeacherSource::Model(m) => (m, None),
                    TeacherSource::Family(f) => {
                        let mut pick = rng::stream(rng::derive_named(item_seed, "member"));
                        let k = pick.random_range(0..f.len());
                        (&f.members()[k], Some(k))
                    }
                };
                let response = sample_sequence(model, &prompt, max_len, temperature, item_seed)?;
                Ok(CorpusRecord {
                    query_index: q,
                    replica: j,
                    teacher_tag: teacher_tag.to_string(),
                    member,
                    response,
                })
            })
            .collect()
    });
    let mut records = Vec::with_capacity(data.len() * r);
    for chunk in per_query {
        records.extend(chunk?);
    }
    Ok(GeneratedCorpus { records, responses_per_query: r })
}

/// What `partition_corpus` splits: individual records, whole queries
/// (all replicas of a query land in the same chunk), or generating members
/// (all records drawn from one family member land in the same chunk).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionUnit {
    #[default]
    Record,
    Query,
    Member,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignment: Vec<usize>,
    pub num_chunks: usize,
}

impl PartitionPlan {
    pub fn chunk(&self, c: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn chunk_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_chunks];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Balanced random split of the records into `s` disjoint chunks.
pub fn partition_corpus(corpus: &GeneratedCorpus, s: usize, seed: u64) -> Result<PartitionPlan> {
    partition_corpus_by(corpus, s, PartitionUnit::Record, seed)
}

pub fn partition_corpus_by(corpus: &GeneratedCorpus, s: usize, unit: PartitionUnit, seed: u64) -> Result<PartitionPlan> {
    let n = corpus.len();
    match unit {
        PartitionUnit::Record => {
            if s == 0 || s > n {
                return Err(invalid(format!("cannot split {n} records into {s} chunks")));
            }
            Ok(PartitionPlan { assignment: balanced(n, s, seed), num_chunks: s })
        }
        PartitionUnit::Query => {
            let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
            for rec in &corpus.records {
                let next = groups.len();
                groups.entry(rec.query_index).or_insert(next);
            }
            if s == 0 || s > groups.len() {
                return Err(invalid(format!("cannot split {} queries into {s} chunks", groups.len())));
            }
            // group ids follow first appearance order
            let mut order: Vec<(usize, usize)> = groups.into_iter().collect();
            order.sort_by_key(|&(_, g)| g);
            let group_chunk = balanced(order.len(), s, seed);
            let chunk_of: BTreeMap<usize, usize> = order.iter().map(|&(q, g)| (q, group_chunk[g])).collect();
            let assignment = corpus.records.iter().map(|r| chunk_of[&r.query_index]).collect();
            Ok(PartitionPlan { assignment, num_chunks: s })
        }
        PartitionUnit::Member => {
            let members: Option<Vec<usize>> = corpus.records.iter().map(|r| r.member).collect();
            let members = members.ok_or_else(|| invalid("member partitioning needs records drawn from a family"))?;
            let count = members.iter().max().map_or(0, |m| m + 1);
            if s == 0 || s > count {
                return Err(invalid(format!("cannot split {count} generating members into {s} chunks")));
            }
            let member_chunk = balanced(count, s, seed);
            Ok(PartitionPlan { assignment: members.iter().map(|&m| member_chunk[m]).collect(), num_chunks: s })
        }
    }
}

fn balanced(n: usize, s: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        assignment[i] = pos % s;
    }
    assignment
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledResponse {
    pub run_id: usize,
    pub query_index: usize,
    pub response: Vec<usize>,
    /// 1 when the answer token matches the gold answer.
    pub label: u8,
}

/// Samples `samples_per_query` independent runs over the dataset and labels
/// each response by its answer token. Output ordered by `(run_id, query_index)`.
pub fn label_correctness(
    model: &AutoregressiveModel,
    data: &QADataset,
    samples_per_query: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<LabeledResponse>> {
    if samples_per_query == 0 {
        return Err(invalid("samples_per_query must be >= 1"));
    }
    let n = data.len();
    let rows = exec::map_indexed(n * samples_per_query, |i| -> Result<LabeledResponse> {
        let (run_id, q) = (i / n, i % n);
        let s = rng::derive(rng::derive(seed, run_id as u64), q as u64);
        let response = sample_sequence(model, &data.prompt(q), max_len, temperature, s)?;
        let label = u8::from(response.first() == Some(&data.items[q].gold_answer));
        Ok(LabeledResponse { run_id, query_index: q, response, label })
    });
    rows.into_iter().collect()
}
