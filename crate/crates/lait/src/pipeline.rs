//! Segmenting raw task fields and running the layer-adjustable encoder.
//!
//! Each segment is encoded on its own for the first `P` layers, the results
//! are concatenated, and the remaining `L - P` layers attend across the whole
//! sequence. Parallel layers number positions from zero inside each segment;
//! joint layers number them over the concatenation.

use std::collections::HashMap;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::{cache_key, CacheEntry, RepCache};
use crate::config::{ModelConfig, RESERVED_IDS};
use crate::encoder::{embed, run_layers, OpCounter};
use crate::error::{LaitError, Result};
use crate::io::fnv1a64;
use crate::mask::{build_block_mask, AttentionMask};
use crate::tensor::{dot, Matrix, Scalar};
use crate::weights::{ClassifierHead, ModelWeights};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prefix {
    Literal(String),
    /// `"<value of field>: "`.
    FromField(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub prefix: Prefix,
    pub field: String,
}

/// How a task's fields become ordered segments, plus its label set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskTemplate {
    pub task_id: String,
    /// Empty for the `raw` task, whose fields already are the segments.
    pub slots: Vec<Slot>,
    pub labels: Vec<String>,
}

pub const BUILTIN_TASKS: &[&str] = &[
    "mnli",
    "rte",
    "qqp",
    "stsb",
    "wic",
    "boolq",
    "boolq_split",
    "fever",
    "vitaminc",
    "ae",
    "multirc",
    "raw",
];

fn lit(prefix: &str, field: &str) -> Slot {
    Slot {
        prefix: Prefix::Literal(format!("{prefix}: ")),
        field: field.into(),
    }
}

impl TaskTemplate {
    pub fn new(task_id: impl Into<String>, slots: Vec<Slot>, labels: &[&str]) -> Result<Self> {
        let t = Self {
            task_id: task_id.into(),
            slots,
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        let mut seen = std::collections::HashSet::new();
        for s in &t.slots {
            if let Prefix::Literal(p) = &s.prefix {
                if !seen.insert(p.clone()) {
                    return Err(LaitError::Config(format!(
                        "duplicate prefix `{p}` in template `{}`",
                        t.task_id
                    )));
                }
            }
        }
        Ok(t)
    }

    pub fn builtin(task_id: &str) -> Result<Self> {
        let binary = &["true", "false"];
        let nli3 = &["entailment", "neutral", "contradiction"];
        let fact = &["supported", "refuted", "NotEnoughInfo"];
        match task_id {
            "mnli" => Self::new(
                task_id,
                vec![lit("hypothesis", "hypothesis"), lit("premise", "premise")],
                nli3,
            ),
            "rte" => Self::new(
                task_id,
                vec![lit("hypothesis", "hypothesis"), lit("premise", "premise")],
                &["entailment", "not_entailment"],
            ),
            "qqp" => Self::new(
                task_id,
                vec![lit("question1", "question1"), lit("question2", "question2")],
                &["duplicate", "not_duplicate"],
            ),
            "stsb" => Self::new(
                task_id,
                vec![lit("sentence1", "sentence1"), lit("sentence2", "sentence2")],
                &[],
            ),
            "wic" => Self::new(
                task_id,
                ["sentence1", "sentence2"]
                    .iter()
                    .map(|f| Slot {
                        prefix: Prefix::FromField("word".into()),
                        field: f.to_string(),
                    })
                    .collect(),
                binary,
            ),
            "boolq" => Self::new(
                task_id,
                vec![lit("question", "question"), lit("passage", "passage")],
                binary,
            ),
            "boolq_split" => {
                let mut slots = vec![lit("question", "question")];
                slots.extend((1..=5).map(|i| lit(&format!("passage{i}"), &format!("passage{i}"))));
                Self::new(task_id, slots, binary)
            }
            "fever" | "vitaminc" => Self::new(
                task_id,
                vec![lit("hypothesis", "claim"), lit("premise", "evidence")],
                fact,
            ),
            "ae" => Self::new(
                task_id,
                vec![
                    lit("question", "question"),
                    lit("answer1", "answer1"),
                    lit("answer2", "answer2"),
                ],
                binary,
            ),
            "multirc" => Self::new(
                task_id,
                vec![
                    lit("question", "question"),
                    lit("answer", "answer"),
                    lit("paragraph", "paragraph"),
                ],
                binary,
            ),
            "raw" => Self::new(task_id, Vec::new(), &[]),
            other => Err(LaitError::UnknownTask(other.into())),
        }
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| LaitError::UnknownLabel {
                task: self.task_id.clone(),
                label: label.into(),
            })
    }
}

/// Renders one segment string per template slot, in slot order.
pub fn apply_template(template: &TaskTemplate, fields: &HashMap<String, String>) -> Result<Vec<String>> {
    let get = |name: &str| fields.get(name).ok_or_else(|| LaitError::MissingField(name.into()));
    template
        .slots
        .iter()
        .map(|slot| {
            let text = get(&slot.field)?;
            Ok(match &slot.prefix {
                Prefix::Literal(p) => format!("{p}{text}"),
                Prefix::FromField(f) => format!("{}: {text}", get(f)?),
            })
        })
        .collect()
}

/// Whitespace tokenizer with hashed ids: lowercase, split, map each word to
/// `2 + fnv1a64(word) mod (vocab - 2)`, append EOS.
pub fn tokenize(text: &str, cfg: &ModelConfig) -> Result<Vec<u32>> {
    let lower = text.to_lowercase();
    let range = (cfg.vocab_size - RESERVED_IDS) as u64;
    let mut ids: Vec<u32> = lower
        .split_whitespace()
        .map(|w| (RESERVED_IDS as u64 + fnv1a64(w.as_bytes()) % range) as u32)
        .collect();
    if ids.is_empty() {
        return Err(LaitError::EmptyText);
    }
    ids.push(EOS_ID);
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedExample {
    pub segments: Vec<Vec<u32>>,
    #[serde(default)]
    pub segment_texts: Vec<String>,
    #[serde(default)]
    pub task_id: String,
    #[serde(default)]
    pub label: Option<String>,
}

impl SegmentedExample {
    pub fn from_segments(segments: Vec<Vec<u32>>) -> Result<Self> {
        let ex = Self {
            segments,
            segment_texts: Vec::new(),
            task_id: "raw".into(),
            label: None,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(LaitError::EmptySegment(0));
        }
        if let Some(i) = self.segments.iter().position(Vec::is_empty) {
            return Err(LaitError::EmptySegment(i));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }
}

pub fn segment_lengths(ex: &SegmentedExample) -> Vec<usize> {
    ex.segments.iter().map(Vec::len).collect()
}

/// Field values of an input line: named fields, or pre-split segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Fields {
    Named(serde_json::Map<String, serde_json::Value>),
    Segments(Vec<String>),
}

/// One line of the input JSONL corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub task: String,
    pub fields: Fields,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl InputRecord {
    pub fn to_example(&self, cfg: &ModelConfig) -> Result<SegmentedExample> {
        let template = TaskTemplate::builtin(&self.task)?;
        let texts = if template.slots.is_empty() {
            match &self.fields {
                Fields::Segments(s) => s.clone(),
                Fields::Named(m) => m.values().map(value_text).collect(),
            }
        } else {
            let map = match &self.fields {
                Fields::Named(m) => m.iter().map(|(k, v)| (k.clone(), value_text(v))).collect(),
                Fields::Segments(_) => {
                    return Err(LaitError::Config(format!("task `{}` expects named fields", self.task)));
                }
            };
            apply_template(&template, &map)?
        };
        if let Some(l) = &self.label {
            if !template.labels.is_empty() {
                template.label_index(l)?;
            }
        }
        let segments = texts.iter().map(|t| tokenize(t, cfg)).collect::<Result<Vec<_>>>()?;
        let ex = SegmentedExample {
            segments,
            segment_texts: texts,
            task_id: self.task.clone(),
            label: self.label.clone(),
        };
        ex.validate()?;
        Ok(ex)
    }
}

fn value_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses a JSONL corpus; errors carry 1-based line numbers. Blank lines are skipped.
pub fn read_input_jsonl(reader: impl BufRead) -> Result<Vec<InputRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InputRecord = serde_json::from_str(&line).map_err(|e| LaitError::Input {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn local_positions(lengths: &[usize]) -> Vec<i64> {
    lengths.iter().flat_map(|&l| 0..l as i64).collect()
}

pub fn global_positions(total: usize) -> Vec<i64> {
    (0..total as i64).collect()
}

#[derive(Clone, Debug)]
pub struct Encoding<T = f32> {
    /// `m x d_model` token representations after the last layer.
    pub reps: Matrix<T>,
    pub counter: OpCounter,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

fn check_weights<T: Scalar>(ex: &SegmentedExample, weights: &ModelWeights<T>) -> Result<()> {
    ex.validate()?;
    weights.config().validate()?;
    Ok(())
}

/// The first `P` layers over one segment alone, with local positions.
pub fn encode_segment_parallel<T: Scalar>(
    tokens: &[u32],
    weights: &ModelWeights<T>,
    counter: &mut OpCounter,
) -> Result<Matrix<T>> {
    let p = weights.config().parallel_layers;
    let x = embed(tokens, weights)?;
    run_layers(
        &x,
        &AttentionMask::full(tokens.len()),
        &local_positions(&[tokens.len()]),
        weights,
        0,
        p,
        counter,
    )
}

/// Separate-then-concatenate encoding, optionally reusing cached layer-`P`
/// segment representations. Cache entries are only consulted when `P >= 1`;
/// a segment too large for the cache budget is simply recomputed each time.
pub fn lait_encode<T: Scalar>(
    ex: &SegmentedExample,
    weights: &ModelWeights<T>,
    cache: Option<&RepCache<T>>,
) -> Result<Encoding<T>> {
    check_weights(ex, weights)?;
    let cfg = weights.config();
    let p = cfg.parallel_layers;
    let cache = cache.filter(|_| p >= 1);
    let mut counter = OpCounter::default();
    let (mut hits, mut misses) = (0, 0);
    let mut parts: Vec<Arc<Matrix<T>>> = Vec::with_capacity(ex.segments.len());
    for seg in &ex.segments {
        let rep = match cache {
            Some(c) => {
                let key = cache_key(weights.fingerprint(), p, seg)?;
                match c.get_checked(&key, seg) {
                    Some(r) => {
                        hits += 1;
                        r
                    }
                    None => {
                        misses += 1;
                        let r = Arc::new(encode_segment_parallel(seg, weights, &mut counter)?);
                        match c.put(CacheEntry::with_tokens(key, Arc::clone(&r), seg)?) {
                            Ok(_) | Err(LaitError::EntryTooLarge { .. }) => {}
                            Err(e) => return Err(e),
                        }
                        r
                    }
                }
            }
            None => Arc::new(encode_segment_parallel(seg, weights, &mut counter)?),
        };
        parts.push(rep);
    }
    let joined = Matrix::vstack(&parts.iter().map(|m| (**m).clone()).collect::<Vec<_>>())?;
    let m = joined.rows();
    let reps = run_layers(
        &joined,
        &AttentionMask::full(m),
        &global_positions(m),
        weights,
        p,
        cfg.layers,
        &mut counter,
    )?;
    Ok(Encoding {
        reps,
        counter,
        cache_hits: hits,
        cache_misses: misses,
    })
}

/// Single pass over the concatenation with a per-layer mask schedule:
/// block-diagonal with local positions below `P`, full with global positions
/// from `P` on.
pub fn lait_encode_masked<T: Scalar>(ex: &SegmentedExample, weights: &ModelWeights<T>) -> Result<Encoding<T>> {
    check_weights(ex, weights)?;
    let cfg = weights.config();
    let lengths = segment_lengths(ex);
    let x = Matrix::vstack(
        &ex.segments
            .iter()
            .map(|s| embed(s, weights))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let m = x.rows();
    let mut counter = OpCounter::default();
    let block = build_block_mask(&lengths)?;
    let h = run_layers(
        &x,
        &block,
        &local_positions(&lengths),
        weights,
        0,
        cfg.parallel_layers,
        &mut counter,
    )?;
    let reps = run_layers(
        &h,
        &AttentionMask::full(m),
        &global_positions(m),
        weights,
        cfg.parallel_layers,
        cfg.layers,
        &mut counter,
    )?;
    Ok(Encoding {
        reps,
        counter,
        cache_hits: 0,
        cache_misses: 0,
    })
}

/// Plain full-attention encoder over the concatenated segments.
pub fn vanilla_encode<T: Scalar>(ex: &SegmentedExample, weights: &ModelWeights<T>) -> Result<Encoding<T>> {
    check_weights(ex, weights)?;
    let x = Matrix::vstack(
        &ex.segments
            .iter()
            .map(|s| embed(s, weights))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let m = x.rows();
    let mut counter = OpCounter::default();
    let reps = run_layers(
        &x,
        &AttentionMask::full(m),
        &global_positions(m),
        weights,
        0,
        weights.config().layers,
        &mut counter,
    )?;
    Ok(Encoding {
        reps,
        counter,
        cache_hits: 0,
        cache_misses: 0,
    })
}

/// Mean-pools the representations and applies the linear head. Returns the
/// argmax label index (lowest index wins ties) and the logits.
pub fn classify<T: Scalar>(reps: &Matrix<T>, head: &ClassifierHead<T>) -> Result<(usize, Vec<T>)> {
    if reps.cols() != head.w.rows() {
        return Err(LaitError::shape(
            "classify",
            format!("reps width {} for head input {}", reps.cols(), head.w.rows()),
        ));
    }
    let pooled = reps.mean_rows();
    let wt = head.w.transpose();
    let logits: Vec<T> = (0..head.num_labels())
        .map(|j| dot(&pooled, wt.row(j)) + head.b[j])
        .collect();
    Ok((argmax(&logits), logits))
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
