//! Probe-data collection: run the RAG loop over every instance, label the
//! outcome against the known correct/target answers, and build the normalized
//! activation dataset used to train the detector.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSplit, SplitTag};
use crate::embed::{encode, sim, EmbedConfig, Metric, Role};
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::langmodel::LanguageModel;
use crate::retrieve::{top_k, Index};

/// Dataset label for a response that reproduced the correct answer.
pub const LABEL_CORRECT: u8 = 1;
/// Dataset label for a response that reproduced the attacker's target answer.
pub const LABEL_POISONED: u8 = 0;

/// Which split the normalization statistics are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsScope {
    Train,
    All,
}

impl Default for StatsScope {
    fn default() -> Self {
        StatsScope::Train
    }
}

impl std::str::FromStr for StatsScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(StatsScope::Train),
            "all" => Ok(StatsScope::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown stats scope '{other}' (expected train or all)"
            ))),
        }
    }
}

/// How a generated answer is matched against a reference answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchMode {
    /// Exact token-sequence equality.
    Closed,
    /// Cosine similarity of embedded answers at or above the threshold.
    Open { tau: f64 },
}

/// Per-dimension normalization statistics over flattened activation maps.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-8;

impl NormStats {
    /// Identity statistics (subtract 0, divide by 1) for the given flat size.
    pub fn identity(len: usize) -> NormStats {
        NormStats {
            mu: vec![0.0; len],
            sigma: vec![1.0; len],
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// One labeled activation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub matrix: Array2<f64>,
    pub label: u8,
    pub instance_id: usize,
    pub tag: SplitTag,
}

/// Labeled, split-tagged activation maps with shared normalization stats.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub samples: Vec<Sample>,
    pub stats: NormStats,
    pub rows: usize,
    pub cols: usize,
    pub normalized: bool,
}

/// Triplet of dataset sample indices for margin-loss training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Outcome counters from `collect`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CollectReport {
    pub n_correct: usize,
    pub n_poisoned: usize,
    pub n_discarded: usize,
}

/// Whether `answer` matches `reference` under the given mode. In open-ended
/// mode both strings are embedded as passages and compared by cosine.
pub fn answers_match(
    answer: &str,
    reference: &str,
    mode: &MatchMode,
    embed_config: &EmbedConfig,
) -> bool {
    match mode {
        MatchMode::Closed => answer == reference,
        MatchMode::Open { tau } => {
            let a = encode(answer, Role::Passage, embed_config);
            let b = encode(reference, Role::Passage, embed_config);
            sim(&a, &b, Metric::Cosine).map(|s| s >= *tau).unwrap_or(false)
        }
    }
}

/// Label a generated answer: correct takes precedence over the poisoned
/// target; `None` means the sample is discarded.
pub fn label_for(
    answer: &str,
    correct_answer: &str,
    target_answer: Option<&str>,
    mode: &MatchMode,
    embed_config: &EmbedConfig,
) -> Option<u8> {
    if answers_match(answer, correct_answer, mode, embed_config) {
        return Some(LABEL_CORRECT);
    }
    if let Some(target) = target_answer {
        if answers_match(answer, target, mode, embed_config) {
            return Some(LABEL_POISONED);
        }
    }
    None
}

/// Run retrieval + generation over every instance, capture last-token
/// activations, and keep only samples whose answer matches the correct or the
/// target answer. Samples come back in instance-id order.
pub fn collect(
    corpus: &Corpus,
    index: &Index,
    lm: &LanguageModel,
    k: usize,
    split: &CorpusSplit,
    mode: &MatchMode,
) -> Result<(ActivationDataset, CollectReport)> {
    let texts: HashMap<usize, &str> =
        corpus.documents.iter().map(|d| (d.id, d.text.as_str())).collect();
    let mut samples = Vec::new();
    let mut report = CollectReport::default();
    let mut shape: Option<(usize, usize)> = None;
    let mut ordered: Vec<&crate::corpus::QaTriple> = corpus.triples.iter().collect();
    ordered.sort_by_key(|t| t.id);
    for triple in ordered {
        let result = top_k(index, &triple.question, k);
        let contexts: Vec<String> = result
            .entries
            .iter()
            .filter_map(|(id, _)| texts.get(id).map(|t| t.to_string()))
            .collect();
        let prompt = crate::langmodel::assemble_prompt(&triple.question, &contexts);
        let (answer, act) = lm.generate(&prompt, true)?;
        let act = act.expect("capture requested");
        let label = label_for(
            &answer,
            &triple.correct_answer,
            triple.target_answer.as_deref(),
            mode,
            &index.config,
        );
        let Some(label) = label else {
            report.n_discarded += 1;
            continue;
        };
        if label == LABEL_CORRECT {
            report.n_correct += 1;
        } else {
            report.n_poisoned += 1;
        }
        let tag = split.tag_of(triple.id).ok_or_else(|| {
            Error::InvalidArgument(format!("instance {} missing from split", triple.id))
        })?;
        let dim = act.matrix.dim();
        match shape {
            None => shape = Some(dim),
            Some(s) if s != dim => {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", s),
                    got: format!("{:?}", dim),
                })
            }
            _ => {}
        }
        samples.push(Sample {
            matrix: act.matrix,
            label,
            instance_id: triple.id,
            tag,
        });
    }
    let (rows, cols) = shape.unwrap_or((lm.config.n_layers + 1, lm.config.d_model));
    let dataset = ActivationDataset {
        samples,
        stats: NormStats::identity(rows * cols),
        rows,
        cols,
        normalized: false,
    };
    Ok((dataset, report))
}

impl ActivationDataset {
    pub fn flat_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Indices of samples carrying the given split tag.
    pub fn indices_of(&self, tag: SplitTag) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.tag == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Compute per-dimension population statistics over the scoped samples and
    /// transform every split with them. Dimensions with σ below epsilon map
    /// to zero.
    pub fn normalize(&mut self, scope: StatsScope) -> Result<()> {
        let pool: Vec<usize> = match scope {
            StatsScope::Train => self.indices_of(SplitTag::Train),
            StatsScope::All => (0..self.samples.len()).collect(),
        };
        if pool.is_empty() {
            return Err(Error::EmptyCorpus(
                "normalization requires a non-empty statistics split".into(),
            ));
        }
        let flat = self.flat_len();
        let n = pool.len() as f64;
        let mut mu = vec![0.0; flat];
        for &i in &pool {
            for (j, v) in self.samples[i].matrix.iter().enumerate() {
                mu[j] += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; flat];
        for &i in &pool {
            for (j, v) in self.samples[i].matrix.iter().enumerate() {
                let d = v - mu[j];
                var[j] += d * d;
            }
        }
        let sigma: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        let epsilon = DEFAULT_EPSILON;
        for sample in self.samples.iter_mut() {
            for (j, v) in sample.matrix.iter_mut().enumerate() {
                *v = if sigma[j] < epsilon { 0.0 } else { (*v - mu[j]) / sigma[j] };
            }
        }
        self.stats = NormStats { mu, sigma, epsilon };
        self.normalized = true;
        Ok(())
    }

    /// Persist as a binary activation file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut w = BinWriter::new(std::io::BufWriter::new(file));
        w.magic(b"ACTV")?;
        w.u32(1)?;
        w.u32(self.samples.len() as u32)?;
        w.u32(self.rows as u32)?;
        w.u32(self.cols as u32)?;
        w.u8(self.normalized as u8)?;
        w.f32_slice(&self.stats.mu)?;
        w.f32_slice(&self.stats.sigma)?;
        for s in &self.samples {
            w.u8(s.label)?;
            w.u8(s.tag as u8)?;
            w.u32(s.instance_id as u32)?;
            let flat: Vec<f64> = s.matrix.iter().copied().collect();
            w.f32_slice(&flat)?;
        }
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ActivationDataset> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut r = BinReader::new(std::io::BufReader::new(file));
        r.magic(b"ACTV")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported activation file version {version}"
            )));
        }
        let n = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let normalized = r.u8()? != 0;
        let flat = rows * cols;
        let mu = r.f32_vec(flat)?;
        let sigma = r.f32_vec(flat)?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.u8()?;
            let tag = SplitTag::from_u8(r.u8()?)?;
            let instance_id = r.u32()? as usize;
            let data = r.f32_vec(flat)?;
            let matrix = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(format!("bad sample shape: {e}")))?;
            samples.push(Sample {
                matrix,
                label,
                instance_id,
                tag,
            });
        }
        Ok(ActivationDataset {
            samples,
            stats: NormStats {
                mu,
                sigma,
                epsilon: DEFAULT_EPSILON,
            },
            rows,
            cols,
            normalized,
        })
    }
}

/// Sample `count` triplets from the train split: uniform anchor, positive
/// uniform from the anchor's class excluding the anchor, negative uniform from
/// the other class. Deterministic by seed.
pub fn sample_triplets(
    dataset: &ActivationDataset,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let train = dataset.indices_of(SplitTag::Train);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in &train {
        let label = dataset.samples[i].label;
        if label > 1 {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has non-binary label {label}"
            )));
        }
        by_class[label as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(Error::InvalidArgument(
            "triplet sampling requires both classes in the train split".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = train[rng.random_range(0..train.len())];
        let class = dataset.samples[anchor].label as usize;
        let same = &by_class[class];
        if same.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "anchor class {class} has fewer than 2 train samples"
            )));
        }
        let positive = loop {
            let c = same[rng.random_range(0..same.len())];
            if c != anchor {
                break c;
            }
        };
        let other = &by_class[1 - class];
        let negative = other[rng.random_range(0..other.len())];
        triplets.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(triplets)
}
