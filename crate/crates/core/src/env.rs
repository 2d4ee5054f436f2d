//! Synthetic question-answering task with gold relevance, factuality and
//! completeness scoring.
//!
//! Each instance draws three gold token sets: `relevant`, `forbidden`
//! (disjoint from `relevant`) and `required` (a subset of `relevant`). The
//! prompt is built from the relevant tokens, so a policy that reads its
//! prompt can find them. Responses are scored per fixed-length segment for
//! relevance and factuality and once per sequence for completeness.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::hash_words;

pub type Token = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub max_gen_len: usize,
    /// Tokens per fine-grained segment.
    pub segment_len: usize,
    pub relevant_frac: f64,
    pub forbidden_frac: f64,
    pub required_count: usize,
    /// Train / validation / test instance counts.
    pub split_sizes: [usize; 3],
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl TaskSpec {
    pub fn desk() -> Self {
        Self {
            vocab_size: 32,
            prompt_len: 8,
            max_gen_len: 24,
            segment_len: 4,
            relevant_frac: 0.25,
            forbidden_frac: 0.25,
            required_count: 4,
            split_sizes: [256, 64, 64],
        }
    }

    /// Input and generation lengths of the full-size setup, with the
    /// 3,853/500/948 split.
    pub fn paper() -> Self {
        Self {
            prompt_len: 1024,
            max_gen_len: 200,
            split_sizes: [3853, 500, 948],
            ..Self::desk()
        }
    }

    pub fn relevant_count(&self) -> usize {
        (self.relevant_frac * self.vocab_size as f64).round() as usize
    }

    pub fn forbidden_count(&self) -> usize {
        (self.forbidden_frac * self.vocab_size as f64).round() as usize
    }

    pub fn total_instances(&self) -> usize {
        self.split_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config("task.vocab_size must be at least 4"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("task.vocab_size does not fit a token id"));
        }
        if self.prompt_len == 0 {
            return Err(Error::config("task.prompt_len must be positive"));
        }
        if self.segment_len == 0 {
            return Err(Error::config("task.segment_len must be positive"));
        }
        if self.max_gen_len < self.segment_len {
            return Err(Error::config(
                "task.max_gen_len must be at least task.segment_len",
            ));
        }
        for (key, v) in [
            ("task.relevant_frac", self.relevant_frac),
            ("task.forbidden_frac", self.forbidden_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{key} must lie in [0, 1], got {v}")));
            }
        }
        if self.relevant_frac + self.forbidden_frac > 1.0 {
            return Err(Error::config(
                "task.relevant_frac + task.forbidden_frac exceeds 1.0",
            ));
        }
        if self.relevant_count() + self.forbidden_count() > self.vocab_size {
            return Err(Error::config(
                "task.relevant_frac and task.forbidden_frac do not fit the vocabulary",
            ));
        }
        if self.required_count > self.relevant_count() {
            return Err(Error::config(format!(
                "task.required_count ({}) exceeds the relevant set size ({})",
                self.required_count,
                self.relevant_count()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Relevance,
    Factuality,
    Completeness,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Relevance, Axis::Factuality, Axis::Completeness];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Relevance => "relevance",
            Axis::Factuality => "factuality",
            Axis::Completeness => "completeness",
        }
    }

    /// Relevance and factuality are judged per segment, completeness once
    /// per response.
    pub fn is_segment_level(self) -> bool {
        !matches!(self, Axis::Completeness)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relevance" => Ok(Axis::Relevance),
            "factuality" => Ok(Axis::Factuality),
            "completeness" => Ok(Axis::Completeness),
            other => Err(Error::usage(format!(
                "unknown axis `{other}` (expected relevance, factuality or completeness)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub instance_id: u64,
    pub prompt_tokens: Vec<Token>,
    /// Sorted ascending.
    pub relevant_set: Vec<Token>,
    /// Sorted ascending.
    pub forbidden_set: Vec<Token>,
    /// Sorted ascending; a subset of `relevant_set`.
    pub required_set: Vec<Token>,
    pub split: Split,
}

impl TaskInstance {
    pub fn is_relevant(&self, t: Token) -> bool {
        self.relevant_set.binary_search(&t).is_ok()
    }

    pub fn is_forbidden(&self, t: Token) -> bool {
        self.forbidden_set.binary_search(&t).is_ok()
    }

    pub fn is_required(&self, t: Token) -> bool {
        self.required_set.binary_search(&t).is_ok()
    }

    /// Fraction of `required_set` covered by the distinct tokens of
    /// `tokens`. An empty required set counts as fully covered.
    pub fn coverage(&self, tokens: &[Token]) -> f64 {
        if self.required_set.is_empty() {
            return 1.0;
        }
        let hit = self
            .required_set
            .iter()
            .filter(|r| tokens.contains(r))
            .count();
        hit as f64 / self.required_set.len() as f64
    }

    /// Strict majority of the tokens lie in the relevant set.
    pub fn segment_relevant(&self, tokens: &[Token]) -> bool {
        let hits = tokens.iter().filter(|&&t| self.is_relevant(t)).count();
        2 * hits > tokens.len()
    }

    pub fn segment_factual(&self, tokens: &[Token]) -> bool {
        !tokens.iter().any(|&t| self.is_forbidden(t))
    }
}

/// Half-open token range `[start, end)` of a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<Token>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

fn split_of(spec: &TaskSpec, instance_id: u64) -> Split {
    let [train, valid, _] = spec.split_sizes;
    let id = instance_id as usize;
    if id < train {
        Split::Train
    } else if id < train + valid {
        Split::Valid
    } else {
        Split::Test
    }
}

pub fn generate_instance(spec: &TaskSpec, seed: u64, instance_id: u64) -> Result<TaskInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[seed, instance_id]));

    let mut perm: Vec<Token> = (0..spec.vocab_size as Token).collect();
    perm.shuffle(&mut rng);
    let n_rel = spec.relevant_count();
    let n_forb = spec.forbidden_count();

    let relevant_draw = perm[..n_rel].to_vec();
    let mut forbidden_set = perm[n_rel..n_rel + n_forb].to_vec();
    let mut required_set = relevant_draw[..spec.required_count].to_vec();

    // Prompt: required tokens first, then the rest of the relevant set,
    // cycled to length and shuffled. Without relevant tokens, fall back to
    // the non-forbidden remainder.
    let source: &[Token] = if n_rel > 0 {
        &relevant_draw
    } else {
        &perm[n_forb..]
    };
    let mut prompt_tokens: Vec<Token> = source.iter().copied().cycle().take(spec.prompt_len).collect();
    prompt_tokens.shuffle(&mut rng);

    let mut relevant_set = relevant_draw;
    relevant_set.sort_unstable();
    forbidden_set.sort_unstable();
    required_set.sort_unstable();

    Ok(TaskInstance {
        instance_id,
        prompt_tokens,
        relevant_set,
        forbidden_set,
        required_set,
        split: split_of(spec, instance_id),
    })
}

/// Instances `0..total` tagged train, then valid, then test.
pub fn make_splits(spec: &TaskSpec, seed: u64) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    (0..spec.total_instances() as u64)
        .map(|id| generate_instance(spec, seed, id))
        .collect()
}

/// The three splits as separate collections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<TaskInstance>,
    pub valid: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl Splits {
    pub fn generate(spec: &TaskSpec, seed: u64) -> Result<Self> {
        let mut out = Splits::default();
        for inst in make_splits(spec, seed)? {
            match inst.split {
                Split::Train => out.train.push(inst),
                Split::Valid => out.valid.push(inst),
                Split::Test => out.test.push(inst),
            }
        }
        Ok(out)
    }
}

pub fn segment_response(response: &[Token], segment_len: usize) -> Result<Vec<Segment>> {
    if segment_len == 0 {
        return Err(Error::usage("segment length must be at least 1"));
    }
    Ok(response
        .chunks(segment_len)
        .enumerate()
        .map(|(i, chunk)| {
            let start = i * segment_len;
            Segment {
                start,
                end: start + chunk.len(),
                tokens: chunk.to_vec(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum GoldScore {
    /// One judgement per segment.
    Segments(Vec<bool>),
    /// Sequence-level coverage in `[0, 1]`.
    Coverage(f64),
}

pub fn gold_score(
    instance: &TaskInstance,
    response: &[Token],
    axis: Axis,
    segment_len: usize,
) -> Result<GoldScore> {
    let segments = segment_response(response, segment_len)?;
    Ok(match axis {
        Axis::Relevance => GoldScore::Segments(
            segments
                .iter()
                .map(|s| instance.segment_relevant(&s.tokens))
                .collect(),
        ),
        Axis::Factuality => GoldScore::Segments(
            segments
                .iter()
                .map(|s| instance.segment_factual(&s.tokens))
                .collect(),
        ),
        Axis::Completeness => GoldScore::Coverage(instance.coverage(response)),
    })
}
