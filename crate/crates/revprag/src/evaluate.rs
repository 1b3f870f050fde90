//! Detection metrics, noise injection, wall-clock benchmarking and 2D
//! projection of activation datasets.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_typo, protected_positions};
use crate::corpus::Corpus;
use crate::detector::{classify, train_detector, DetectorConfig, DetectorParams, SupportSet, VerdictLabel};
use crate::error::{Error, Result};
use crate::probedata::{ActivationDataset, LABEL_POISONED};

/// Confusion counts with the poisoned class as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// A rate that may be undefined when its denominator is zero. Undefined is a
/// distinct marker, never reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Defined(f64),
    Undefined,
}

impl Rate {
    pub fn value(&self) -> Option<f64> {
        match self {
            Rate::Defined(v) => Some(*v),
            Rate::Undefined => None,
        }
    }
}

impl std::fmt::Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rate::Defined(v) => write!(f, "{v:.6}"),
            Rate::Undefined => write!(f, "undefined"),
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rate::Defined(v) => s.serialize_f64(*v),
            Rate::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Rate::Defined(v)),
            Raw::Text(t) if t == "undefined" => Ok(Rate::Undefined),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad rate '{t}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub tpr: Rate,
    pub fpr: Rate,
    pub counts: ConfusionCounts,
}

/// TPR/FPR with the poisoned class as positive. `truth` holds dataset labels
/// (0 = poisoned, 1 = correct).
pub fn metrics(verdicts: &[VerdictLabel], truth: &[u8]) -> Result<Metrics> {
    if verdicts.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "verdict/truth length mismatch: {} vs {}",
            verdicts.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (v, &t) in verdicts.iter().zip(truth) {
        let actual_pos = t == LABEL_POISONED;
        let predicted_pos = *v == VerdictLabel::Poisoned;
        match (actual_pos, predicted_pos) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    let rate = |num: usize, den: usize| {
        if den == 0 {
            Rate::Undefined
        } else {
            Rate::Defined(num as f64 / den as f64)
        }
    };
    Ok(Metrics {
        tpr: rate(c.tp, c.tp + c.fn_),
        fpr: rate(c.fp, c.fp + c.tn),
        counts: c,
    })
}

/// Apply character-level typos to a seeded selection of clean documents.
/// `doc_fraction` of the clean documents are modified; in each, ⌈word_fraction
/// · wordcount⌉ words receive one typo. Answer tokens of supporting texts are
/// never modified, and poisoned documents pass through byte-identical.
pub fn add_noise(corpus: &Corpus, doc_fraction: f64, word_fraction: f64, seed: u64) -> Result<Corpus> {
    for (name, f) in [("doc", doc_fraction), ("word", word_fraction)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!(
                "{name} fraction {f} outside [0, 1]"
            )));
        }
    }
    let mut out = corpus.clone();
    let clean_ids: Vec<usize> = corpus.clean_documents().map(|d| d.id).collect();
    let n_modify = (doc_fraction * clean_ids.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = clean_ids;
    picked.shuffle(&mut rng);
    picked.truncate(n_modify);
    picked.sort_unstable();
    for doc in out.documents.iter_mut() {
        if !picked.binary_search(&doc.id).is_ok() {
            continue;
        }
        let mut words: Vec<String> = doc.text.split_whitespace().map(str::to_string).collect();
        // protect the answer tokens of the triple this document supports
        let protected = match corpus.triple(doc.id) {
            Some(t) => protected_positions(&words, &t.correct_answer),
            None => vec![false; words.len()],
        };
        let quota = (word_fraction * words.len() as f64).ceil() as usize;
        let mut candidates: Vec<usize> =
            (0..words.len()).filter(|&i| !protected[i]).collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(quota);
        for &i in &candidates {
            words[i] = apply_typo(&words[i], &mut rng);
        }
        doc.text = words.join(" ");
    }
    Ok(out)
}

/// Wall-clock benchmark of detector training and inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_warmup: usize,
    pub n_measured: usize,
    /// Mean detector training time for one epoch, seconds.
    pub train_s_per_epoch: f64,
    /// Mean detector inference time per sample, seconds (microsecond
    /// resolution).
    pub infer_s_per_sample: f64,
    /// Published full-scale reference figures, attached for comparison only
    /// and never asserted against.
    pub reference_train_s_per_epoch: f64,
    pub reference_infer_s_per_sample: f64,
}

/// Reference timings from the original full-scale experiments (NQ dataset).
pub const REFERENCE_TRAIN_S_PER_EPOCH: f64 = 19.31;
pub const REFERENCE_INFER_S_PER_SAMPLE: f64 = 0.0021;

/// Benchmark one detector training epoch and per-sample classification over
/// the dataset, averaging `n_measured` runs after `n_warmup` warmup runs.
pub fn bench_detector(
    dataset: &ActivationDataset,
    config: &DetectorConfig,
    n_warmup: usize,
    n_measured: usize,
    seed: u64,
) -> Result<(BenchReport, DetectorParams)> {
    if n_measured == 0 {
        return Err(Error::InvalidArgument("n_measured must be positive".into()));
    }
    let one_epoch = DetectorConfig {
        epochs: 1,
        ..config.clone()
    };
    let mut trained = None;
    let mut train_times = Vec::with_capacity(n_measured);
    for run in 0..n_warmup + n_measured {
        let t0 = Instant::now();
        let (det, _) = train_detector(dataset, &one_epoch, seed)?;
        let dt = t0.elapsed().as_secs_f64();
        if run >= n_warmup {
            train_times.push(dt);
        }
        trained = Some(det);
    }
    let det = trained.expect("at least one measured run");
    // classification timing over every sample, via a singleton support set
    let first = &dataset.samples[0];
    let support = SupportSet {
        embeddings: vec![det.embed_map(&first.matrix)?],
        labels: vec![first.label],
        source_ids: vec![first.instance_id],
    };
    let mut infer_times = Vec::with_capacity(n_measured);
    for run in 0..n_warmup + n_measured {
        let t0 = Instant::now();
        for s in &dataset.samples {
            classify(&det, &support, &s.matrix)?;
        }
        let dt = t0.elapsed().as_secs_f64() / dataset.samples.len() as f64;
        if run >= n_warmup {
            infer_times.push(dt);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    // microsecond resolution for the per-sample figure
    let infer = (mean(&infer_times) * 1e6).round() / 1e6;
    Ok((
        BenchReport {
            n_warmup,
            n_measured,
            train_s_per_epoch: mean(&train_times),
            infer_s_per_sample: infer,
            reference_train_s_per_epoch: REFERENCE_TRAIN_S_PER_EPOCH,
            reference_infer_s_per_sample: REFERENCE_INFER_S_PER_SAMPLE,
        },
        det,
    ))
}

/// One projected point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub label: u8,
}

fn power_iteration(cov: &Array2<f64>, seed: u64) -> Array1<f64> {
    let n = cov.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array1::from_shape_fn(n, |_| rng.random::<f64>() - 0.5);
    let norm = |v: &Array1<f64>| v.dot(v).sqrt();
    let m = norm(&v);
    v.mapv_inplace(|x| x / m);
    for _ in 0..500 {
        let mut next = cov.dot(&v);
        let m = norm(&next);
        if m < 1e-12 {
            return v; // zero-variance direction; any unit vector will do
        }
        next.mapv_inplace(|x| x / m);
        let delta = (&next - &v).mapv(f64::abs).sum();
        v = next;
        if delta < 1e-12 {
            break;
        }
    }
    v
}

/// Project every sample onto the two leading principal directions of the
/// mean-centered flattened activations. Returns (x, y, label) points in
/// sample order.
pub fn project2d(dataset: &ActivationDataset) -> Result<Vec<ProjectedPoint>> {
    let n = dataset.samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "projection requires at least 2 samples, got {n}"
        )));
    }
    let d = dataset.flat_len();
    let mut data = Array2::zeros((n, d));
    for (i, s) in dataset.samples.iter().enumerate() {
        for (j, &v) in s.matrix.iter().enumerate() {
            data[[i, j]] = v;
        }
    }
    let mean = data.sum_axis(ndarray::Axis(0)) / n as f64;
    for mut row in data.rows_mut() {
        row -= &mean;
    }
    let cov = data.t().dot(&data) / n as f64;
    let v1 = power_iteration(&cov, 1);
    let lambda1 = v1.dot(&cov.dot(&v1));
    // deflate and extract the second component
    let mut cov2 = cov.clone();
    for i in 0..d {
        for j in 0..d {
            cov2[[i, j]] -= lambda1 * v1[i] * v1[j];
        }
    }
    let v2 = power_iteration(&cov2, 2);
    Ok(dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| ProjectedPoint {
            x: data.row(i).dot(&v1),
            y: data.row(i).dot(&v2),
            label: s.label,
        })
        .collect())
}

/// Write projected points as a CSV with an `x,y,label` header.
pub fn write_projection_csv(points: &[ProjectedPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("x,y,label\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.x, p.y, p.label));
    }
    std::fs::write(path.as_ref(), s)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SplitTag};
    use crate::probedata::{NormStats, Sample};

    fn labels(v: &[(VerdictLabel, u8)]) -> (Vec<VerdictLabel>, Vec<u8>) {
        (v.iter().map(|x| x.0).collect(), v.iter().map(|x| x.1).collect())
    }

    #[test]
    fn metrics_arithmetic() {
        use VerdictLabel::{Correct, Poisoned};
        let mut pairs = Vec::new();
        pairs.extend(std::iter::repeat_n((Poisoned, 0u8), 98)); // tp
        pairs.extend(std::iter::repeat_n((Correct, 0u8), 2)); // fn
        pairs.extend(std::iter::repeat_n((Poisoned, 1u8), 1)); // fp
        pairs.extend(std::iter::repeat_n((Correct, 1u8), 99)); // tn
        let (v, t) = labels(&pairs);
        let m = metrics(&v, &t).unwrap();
        assert_eq!(m.tpr, Rate::Defined(0.98));
        assert_eq!(m.fpr, Rate::Defined(0.01));
        assert_eq!(m.counts.total(), 200);
    }

    #[test]
    fn metrics_undefined_without_positives() {
        use VerdictLabel::Correct;
        let (v, t) = labels(&[(Correct, 1), (Correct, 1)]);
        let m = metrics(&v, &t).unwrap();
        assert_eq!(m.tpr, Rate::Undefined);
        assert_eq!(m.fpr, Rate::Defined(0.0));
        assert_eq!(m.tpr.to_string(), "undefined");
    }

    #[test]
    fn metrics_perfect_classifier() {
        use VerdictLabel::{Correct, Poisoned};
        let (v, t) = labels(&[(Poisoned, 0), (Poisoned, 0), (Correct, 1)]);
        let m = metrics(&v, &t).unwrap();
        assert_eq!(m.tpr, Rate::Defined(1.0));
        assert_eq!(m.fpr, Rate::Defined(0.0));
    }

    #[test]
    fn metrics_rejects_length_mismatch() {
        assert!(metrics(&[VerdictLabel::Correct], &[1, 0]).is_err());
    }

    #[test]
    fn metrics_round_trip_through_json() {
        use VerdictLabel::{Correct, Poisoned};
        let (v, t) = labels(&[(Poisoned, 0), (Correct, 1), (Correct, 0)]);
        let m = metrics(&v, &t).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: Metrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tpr, m.tpr);
        assert_eq!(back.fpr, m.fpr);
        assert_eq!(back.counts, m.counts);
    }

    #[test]
    fn noise_modifies_half_the_clean_docs() {
        let corpus = gen_synthetic(40, 0.5, 5).unwrap();
        let noisy = add_noise(&corpus, 0.5, 0.1, 9).unwrap();
        assert_eq!(noisy.documents.len(), corpus.documents.len());
        let mut changed = 0;
        for (a, b) in corpus.documents.iter().zip(&noisy.documents) {
            assert_eq!(a.id, b.id);
            if a.text != b.text {
                changed += 1;
                // word counts preserved: each noised word maps to one word
                assert_eq!(
                    a.text.split_whitespace().count(),
                    b.text.split_whitespace().count()
                );
            }
        }
        let n_clean = corpus.clean_documents().count();
        // typos can occasionally reproduce the original word (e.g. duplicate
        // of a repeated char), so allow a small shortfall
        let target = (0.5 * n_clean as f64).round() as usize;
        assert!(changed <= target && changed >= target.saturating_sub(2), "{changed} vs {target}");
    }

    #[test]
    fn noise_identity_at_zero_fraction() {
        let corpus = gen_synthetic(15, 0.5, 7).unwrap();
        let noisy = add_noise(&corpus, 0.0, 0.1, 11).unwrap();
        assert_eq!(corpus, noisy);
    }

    #[test]
    fn noise_leaves_poisoned_docs_untouched() {
        let corpus = gen_synthetic(30, 0.5, 13).unwrap();
        let spec = crate::attack::AttackSpec::default();
        let cfg = crate::embed::EmbedConfig::default();
        let batches = crate::attack::generate_all(&corpus, &spec, &cfg, 17).unwrap();
        let (poisoned, _) = crate::attack::inject(&corpus, &batches, &cfg).unwrap();
        let noisy = add_noise(&poisoned, 1.0, 0.2, 19).unwrap();
        for (a, b) in poisoned.documents.iter().zip(&noisy.documents) {
            if a.provenance.is_poisoned() {
                assert_eq!(a.text, b.text, "poisoned doc {} changed", a.id);
            }
        }
    }

    #[test]
    fn noise_preserves_answer_tokens() {
        let corpus = gen_synthetic(30, 0.5, 23).unwrap();
        let noisy = add_noise(&corpus, 1.0, 0.3, 29).unwrap();
        for t in &noisy.triples {
            let doc = noisy.documents.iter().find(|d| d.id == t.id).unwrap();
            assert!(
                doc.text.split_whitespace().any(|w| w == t.correct_answer),
                "answer '{}' lost from '{}'",
                t.correct_answer,
                doc.text
            );
        }
    }

    #[test]
    fn noise_is_deterministic() {
        let corpus = gen_synthetic(20, 0.5, 31).unwrap();
        let a = add_noise(&corpus, 0.5, 0.1, 37).unwrap();
        let b = add_noise(&corpus, 0.5, 0.1, 37).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_rejects_bad_fractions() {
        let corpus = gen_synthetic(5, 0.0, 1).unwrap();
        assert!(add_noise(&corpus, 1.5, 0.1, 1).is_err());
        assert!(add_noise(&corpus, 0.5, -0.1, 1).is_err());
    }

    fn flat_dataset(points: &[(Vec<f64>, u8)]) -> ActivationDataset {
        let cols = points[0].0.len();
        let samples: Vec<Sample> = points
            .iter()
            .enumerate()
            .map(|(i, (v, label))| Sample {
                matrix: Array2::from_shape_vec((1, cols), v.clone()).unwrap(),
                label: *label,
                instance_id: i,
                tag: SplitTag::Train,
            })
            .collect();
        ActivationDataset {
            samples,
            stats: NormStats::identity(cols),
            rows: 1,
            cols,
            normalized: true,
        }
    }

    #[test]
    fn projection_of_2d_data_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut pts: Vec<(Vec<f64>, u8)> = (0..30)
            .map(|i| {
                (
                    vec![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 2.0 - 1.0],
                    (i % 2) as u8,
                )
            })
            .collect();
        // center the data so the projection is exactly a rotation
        let n = pts.len() as f64;
        for dim in 0..2 {
            let mean: f64 = pts.iter().map(|(v, _)| v[dim]).sum::<f64>() / n;
            for (v, _) in pts.iter_mut() {
                v[dim] -= mean;
            }
        }
        let d = flat_dataset(&pts);
        let proj = project2d(&d).unwrap();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let orig = ((pts[i].0[0] - pts[j].0[0]).powi(2)
                    + (pts[i].0[1] - pts[j].0[1]).powi(2))
                .sqrt();
                let new = ((proj[i].x - proj[j].x).powi(2) + (proj[i].y - proj[j].y).powi(2)).sqrt();
                assert!((orig - new).abs() <= 1e-6, "{orig} vs {new}");
            }
        }
    }

    #[test]
    fn duplicate_samples_project_identically() {
        let d = flat_dataset(&[
            (vec![1.0, 2.0, 3.0], 0),
            (vec![1.0, 2.0, 3.0], 1),
            (vec![-1.0, 0.5, 2.0], 0),
            (vec![0.3, -0.2, 1.0], 1),
        ]);
        let proj = project2d(&d).unwrap();
        assert_eq!(proj[0].x, proj[1].x);
        assert_eq!(proj[0].y, proj[1].y);
        assert_ne!(proj[0].label, proj[1].label);
    }

    #[test]
    fn first_component_carries_most_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let pts: Vec<(Vec<f64>, u8)> = (0..50)
            .map(|_| {
                (
                    vec![
                        rng.random::<f64>() * 10.0,
                        rng.random::<f64>(),
                        rng.random::<f64>() * 0.1,
                    ],
                    0,
                )
            })
            .collect();
        let d = flat_dataset(&pts);
        let proj = project2d(&d).unwrap();
        let var = |take: fn(&ProjectedPoint) -> f64| {
            let m: f64 = proj.iter().map(take).sum::<f64>() / proj.len() as f64;
            proj.iter().map(|p| (take(p) - m).powi(2)).sum::<f64>() / proj.len() as f64
        };
        assert!(var(|p| p.x) >= var(|p| p.y));
    }

    #[test]
    fn projection_requires_two_samples() {
        let d = flat_dataset(&[(vec![1.0, 2.0], 0)]);
        assert!(project2d(&d).is_err());
    }

    #[test]
    fn projection_csv_format() {
        let d = flat_dataset(&[(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)]);
        let proj = project2d(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("proj.csv");
        write_projection_csv(&proj, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,label");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",0"));
        assert!(lines[2].ends_with(",1"));
    }

    #[test]
    fn bench_reports_sane_figures() {
        // tiny synthetic activation data keeps this fast
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let pts: Vec<(Vec<f64>, u8)> = (0..16)
            .map(|i| {
                let c = if i % 2 == 0 { -1.0 } else { 1.0 };
                (
                    (0..6).map(|_| c + rng.random::<f64>() * 0.1).collect(),
                    (i % 2) as u8,
                )
            })
            .collect();
        let d = flat_dataset(&pts);
        let config = DetectorConfig {
            e: 4,
            epochs: 1,
            triplets_per_epoch: 8,
            batch: 8,
            ..DetectorConfig::default()
        };
        let (report, _) = bench_detector(&d, &config, 1, 1, 3).unwrap();
        assert!(report.train_s_per_epoch > 0.0);
        assert!(report.infer_s_per_sample >= 0.0);
        assert_eq!(report.n_measured, 1);
        assert_eq!(report.reference_train_s_per_epoch, 19.31);
        assert_eq!(report.reference_infer_s_per_sample, 0.0021);
    }
}
