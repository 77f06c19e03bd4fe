//! Submission records, dataset ingestion, learner-level splitting and the
//! per-question bank of accepted solutions.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EmbeddingProvider, EncoderError};

/// Sequences shorter than this are dropped at load time.
pub const MIN_SEQUENCE_LENGTH: usize = 5;

pub const ACCEPTED: &str = "Accepted";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no sequences")]
    NoSequences,
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("cannot split {learners} learners into {partitions} non-empty partitions")]
    TooFewLearners { learners: usize, partitions: usize },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    /// 1-based and contiguous within a sequence.
    pub step: usize,
    pub question: usize,
    pub concept: usize,
    /// Code text, or the embedding key for a file provider.
    pub code: String,
    pub verdict: String,
    pub correct: bool,
}

impl SubmissionRecord {
    pub fn outcome(&self) -> u8 {
        u8::from(self.correct)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSequence {
    pub learner: String,
    pub records: Vec<SubmissionRecord>,
}

impl LearnerSequence {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<LearnerSequence>,
    pub question_count: usize,
    pub concept_count: usize,
}

impl Dataset {
    pub fn learner_count(&self) -> usize {
        self.sequences.len()
    }

    pub fn record_count(&self) -> usize {
        self.sequences.iter().map(LearnerSequence::len).sum()
    }

    pub fn find(&self, learner: &str) -> Option<&LearnerSequence> {
        self.sequences.iter().find(|s| s.learner == learner)
    }

    fn with_sequences(&self, sequences: Vec<LearnerSequence>) -> Dataset {
        Dataset { sequences, question_count: self.question_count, concept_count: self.concept_count }
    }
}

/// Verdict strings mapped to a positive outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictTable {
    pub accepted: Vec<String>,
}

impl Default for VerdictTable {
    fn default() -> Self {
        Self { accepted: vec![ACCEPTED.to_string()] }
    }
}

impl VerdictTable {
    pub fn is_accepted(&self, verdict: &str) -> bool {
        self.accepted.iter().any(|a| a == verdict)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub format: DatasetFormat,
    pub min_length: usize,
    pub verdicts: VerdictTable,
    /// Declared id ranges; ids at or above them are schema errors. Inferred when absent.
    pub question_count: Option<usize>,
    pub concept_count: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: DatasetFormat::Jsonl,
            min_length: MIN_SEQUENCE_LENGTH,
            verdicts: VerdictTable::default(),
            question_count: None,
            concept_count: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    learner: String,
    step: i64,
    question: i64,
    concept: i64,
    code: String,
    verdict: String,
}

pub fn load_dataset(path: &Path, opts: &LoadOptions) -> Result<Dataset, DataError> {
    parse_dataset(BufReader::new(File::open(path)?), opts)
}

/// Groups records by learner (first-appearance order), orders each group by
/// `step`, renumbers steps from 1 and drops short sequences.
pub fn parse_dataset<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<Dataset, DataError> {
    let mut groups: Vec<(String, Vec<(i64, SubmissionRecord)>)> = Vec::new();
    let mut by_learner: HashMap<String, usize> = HashMap::new();
    let mut concept_of: HashMap<usize, usize> = HashMap::new();
    let (mut max_q, mut max_c) = (0usize, 0usize);

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse { line: line_no, message: e.to_string() })?;
        let schema = |message: String| DataError::Schema { line: line_no, message };
        let question = usize::try_from(rec.question).map_err(|_| schema(format!("negative question id {}", rec.question)))?;
        let concept = usize::try_from(rec.concept).map_err(|_| schema(format!("negative concept id {}", rec.concept)))?;
        if let Some(m) = opts.question_count {
            if question >= m {
                return Err(schema(format!("question id {question} outside declared range {m}")));
            }
        }
        if let Some(k) = opts.concept_count {
            if concept >= k {
                return Err(schema(format!("concept id {concept} outside declared range {k}")));
            }
        }
        if let Some(&prev) = concept_of.get(&question) {
            if prev != concept {
                return Err(schema(format!("question {question} tagged with concepts {prev} and {concept}")));
            }
        }
        concept_of.insert(question, concept);
        max_q = max_q.max(question + 1);
        max_c = max_c.max(concept + 1);
        let correct = opts.verdicts.is_accepted(&rec.verdict);
        let record = SubmissionRecord { step: 0, question, concept, code: rec.code, verdict: rec.verdict, correct };
        let g = *by_learner.entry(rec.learner.clone()).or_insert_with(|| {
            groups.push((rec.learner.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push((rec.step, record));
    }

    let sequences: Vec<LearnerSequence> = groups
        .into_iter()
        .filter(|(_, recs)| recs.len() >= opts.min_length.max(1))
        .map(|(learner, mut recs)| {
            recs.sort_by_key(|(s, _)| *s);
            let records = recs
                .into_iter()
                .enumerate()
                .map(|(i, (_, mut r))| {
                    r.step = i + 1;
                    r
                })
                .collect();
            LearnerSequence { learner, records }
        })
        .collect();
    if sequences.is_empty() {
        return Err(DataError::NoSequences);
    }
    Ok(Dataset { sequences, question_count: opts.question_count.unwrap_or(max_q), concept_count: opts.concept_count.unwrap_or(max_c) })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(d, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(d: &Dataset, out: &mut W) -> Result<(), DataError> {
    for seq in &d.sequences {
        for r in &seq.records {
            let rec = JsonRecord {
                learner: seq.learner.clone(),
                step: r.step as i64,
                question: r.question as i64,
                concept: r.concept as i64,
                code: r.code.clone(),
                verdict: r.verdict.clone(),
            };
            serde_json::to_writer(&mut *out, &rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, valid: 0.1, test: 0.2 }
    }
}

impl SplitRatios {
    /// `(train, valid, test)` sizes for `n` learners: valid and test are
    /// rounded to nearest, train takes the remainder, each partition gets at least one.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize), DataError> {
        let sum = self.train + self.valid + self.test;
        if self.train <= 0.0 || self.valid <= 0.0 || self.test <= 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::BadRatios((self.train, self.valid, self.test)));
        }
        if n < 3 {
            return Err(DataError::TooFewLearners { learners: n, partitions: 3 });
        }
        let valid = ((n as f64 * self.valid).round() as usize).max(1);
        let test = ((n as f64 * self.test).round() as usize).max(1);
        if valid + test >= n {
            return Err(DataError::TooFewLearners { learners: n, partitions: 3 });
        }
        Ok((n - valid - test, valid, test))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Seeded learner-level split. Each partition keeps the input order.
pub fn split_dataset(d: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Split, DataError> {
    let n = d.learner_count();
    let (n_train, n_valid, _) = ratios.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        d.with_sequences(idx.into_iter().map(|i| d.sequences[i].clone()).collect())
    };
    Ok(Split { train: take(&order[..n_train]), valid: take(&order[n_train..n_train + n_valid]), test: take(&order[n_train + n_valid..]) })
}

/// Embeddings of accepted training submissions, keyed by question.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolutionBank {
    entries: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl SolutionBank {
    pub fn get(&self, question: usize) -> &[Vec<f64>] {
        self.entries.get(&question).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, question: usize) -> bool {
        self.entries.contains_key(&question)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn question_count(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[Vec<f64>])> {
        self.entries.iter().map(|(&q, v)| (q, v.as_slice()))
    }

    pub fn insert(&mut self, question: usize, embedding: Vec<f64>) {
        self.entries.entry(question).or_default().push(embedding);
    }
}

pub fn build_solution_bank(train: &Dataset, enc: &EmbeddingProvider) -> Result<SolutionBank, DataError> {
    let mut bank = SolutionBank::default();
    for r in train.sequences.iter().flat_map(|s| &s.records).filter(|r| r.correct) {
        bank.insert(r.question, enc.encode(&r.code)?);
    }
    Ok(bank)
}

/// A learner sequence with its code embeddings resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub learner: String,
    pub embeddings: Vec<Vec<f64>>,
    pub questions: Vec<usize>,
    pub concepts: Vec<usize>,
    pub outcomes: Vec<u8>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// First `t` steps.
    pub fn prefix(&self, t: usize) -> EncodedSequence {
        EncodedSequence {
            learner: self.learner.clone(),
            embeddings: self.embeddings[..t].to_vec(),
            questions: self.questions[..t].to_vec(),
            concepts: self.concepts[..t].to_vec(),
            outcomes: self.outcomes[..t].to_vec(),
        }
    }
}

pub fn encode_sequence(seq: &LearnerSequence, enc: &EmbeddingProvider) -> Result<EncodedSequence, EncoderError> {
    Ok(EncodedSequence {
        learner: seq.learner.clone(),
        embeddings: seq.records.iter().map(|r| enc.encode(&r.code)).collect::<Result<_, _>>()?,
        questions: seq.records.iter().map(|r| r.question).collect(),
        concepts: seq.records.iter().map(|r| r.concept).collect(),
        outcomes: seq.records.iter().map(SubmissionRecord::outcome).collect(),
    })
}

pub fn encode_dataset(d: &Dataset, enc: &EmbeddingProvider) -> Result<Vec<EncodedSequence>, EncoderError> {
    d.sequences.iter().map(|s| encode_sequence(s, enc)).collect()
}
