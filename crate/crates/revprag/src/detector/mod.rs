//! The detector: a shared-weight convolutional embedding network trained with
//! triplet margin loss, plus support-set nearest-neighbor classification of
//! activation maps as correct or poisoned.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{randn_matrix, ParamSet, Sgd, Tape, Var};
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::probedata::{sample_triplets, ActivationDataset, Triplet, LABEL_CORRECT};
use crate::corpus::SplitTag;
use crate::derive_seed;

/// Number of channels in the convolutional trunk.
const CHANNELS: usize = 8;
/// Convolution kernel size (square, zero-padded "same").
const KERNEL: usize = 3;

fn default_e() -> usize {
    64
}
fn default_margin() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    32
}
fn default_support_size() -> usize {
    100
}
fn default_triplets_per_epoch() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Embedding dimension.
    pub e: usize,
    /// Triplet margin.
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Support-set size cap.
    pub support_size: usize,
    pub triplets_per_epoch: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            e: default_e(),
            margin: default_margin(),
            lr: default_lr(),
            epochs: default_epochs(),
            batch: default_batch(),
            support_size: default_support_size(),
            triplets_per_epoch: default_triplets_per_epoch(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e < 2 {
            return Err(Error::Config("embedding dim e must be >= 2".into()));
        }
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return Err(Error::Config("margin must be a positive real".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch == 0 || self.triplets_per_epoch == 0 {
            return Err(Error::Config("epochs, batch and triplets_per_epoch must be positive".into()));
        }
        if self.support_size == 0 {
            return Err(Error::Config("support_size must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding network weights: an initial 3x3 convolution to 8 channels, two
/// residual convolutional blocks, global average pooling, and a linear map to
/// the embedding dimension.
pub struct DetectorParams {
    pub config: DetectorConfig,
    /// Expected activation-map shape.
    pub rows: usize,
    pub cols: usize,
    pub params: ParamSet,
}

fn register_params(config: &DetectorConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let kk = KERNEL * KERNEL;
    // Kaiming-style init: std = sqrt(2 / fan_in)
    let conv = |p: &mut ParamSet, name: &str, in_ch: usize, rng: &mut ChaCha8Rng| {
        let fan_in = in_ch * kk;
        let std = (2.0 / fan_in as f64).sqrt();
        p.add(format!("{name}_w"), randn_matrix(rng, CHANNELS, fan_in, std));
        p.add(format!("{name}_b"), Array2::zeros((CHANNELS, 1)));
    };
    conv(&mut p, "conv1", 1, &mut rng);
    for b in 0..2 {
        conv(&mut p, &format!("block{b}_conv1"), CHANNELS, &mut rng);
        conv(&mut p, &format!("block{b}_conv2"), CHANNELS, &mut rng);
    }
    let std = (2.0 / CHANNELS as f64).sqrt();
    p.add("linear_w", randn_matrix(&mut rng, config.e, CHANNELS, std));
    p.add("linear_b", Array2::zeros((config.e, 1)));
    p
}

impl DetectorParams {
    pub fn init(config: DetectorConfig, rows: usize, cols: usize, seed: u64) -> Result<DetectorParams> {
        config.validate()?;
        let params = register_params(&config, seed);
        Ok(DetectorParams {
            config,
            rows,
            cols,
            params,
        })
    }

    /// Forward pass on the tape; `x` is a (1, rows·cols) single-channel map.
    /// Returns the (e, 1) embedding.
    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let (h, w) = (self.rows, self.cols);
        let pvar = |tape: &mut Tape, params: &ParamSet, pid: usize| {
            tape.param(params.get(pid).clone(), pid)
        };
        let conv = |tape: &mut Tape, params: &ParamSet, pid: usize, x: Var| {
            let wv = pvar(tape, params, pid);
            let bv = pvar(tape, params, pid + 1);
            let cols = tape.im2col(x, h, w, KERNEL);
            let y = tape.matmul(wv, cols);
            tape.add_col(y, bv)
        };
        let mut t = conv(tape, &self.params, 0, x);
        t = tape.gelu(t);
        for b in 0..2 {
            let base = 2 + b * 4;
            let mut u = conv(tape, &self.params, base, t);
            u = tape.gelu(u);
            u = conv(tape, &self.params, base + 2, u);
            let s = tape.add(t, u);
            t = tape.gelu(s);
        }
        let pooled = tape.mean_cols(t); // (CHANNELS, 1)
        let wl = pvar(tape, &self.params, 10);
        let bl = pvar(tape, &self.params, 11);
        let z = tape.matmul(wl, pooled);
        tape.add(z, bl)
    }

    /// Embed one normalized activation map.
    pub fn embed_map(&self, map: &Array2<f64>) -> Result<Vec<f64>> {
        if map.dim() != (self.rows, self.cols) {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {})", self.rows, self.cols),
                got: format!("({}, {})", map.nrows(), map.ncols()),
            });
        }
        let mut tape = Tape::new();
        let flat: Vec<f64> = map.iter().copied().collect();
        let x = tape.constant(Array2::from_shape_vec((1, self.rows * self.cols), flat).unwrap());
        let z = self.forward(&mut tape, x);
        Ok(tape.value(z).iter().copied().collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut w = BinWriter::new(std::io::BufWriter::new(file));
        w.magic(b"RVPD")?;
        w.u32(1)?;
        w.u32(self.config.e as u32)?;
        w.u64(self.config.margin.to_bits())?;
        w.u64(self.config.lr.to_bits())?;
        w.u32(self.config.epochs as u32)?;
        w.u32(self.config.batch as u32)?;
        w.u32(self.config.support_size as u32)?;
        w.u32(self.config.triplets_per_epoch as u32)?;
        w.u32(self.rows as u32)?;
        w.u32(self.cols as u32)?;
        w.u32(self.params.len() as u32)?;
        for t in self.params.tensors() {
            w.tensor(t)?;
        }
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DetectorParams> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut r = BinReader::new(std::io::BufReader::new(file));
        r.magic(b"RVPD")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported detector version {version}")));
        }
        let config = DetectorConfig {
            e: r.u32()? as usize,
            margin: f64::from_bits(r.u64()?),
            lr: f64::from_bits(r.u64()?),
            epochs: r.u32()? as usize,
            batch: r.u32()? as usize,
            support_size: r.u32()? as usize,
            triplets_per_epoch: r.u32()? as usize,
        };
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = r.u32()? as usize;
        // rebuild with the canonical names, then overwrite tensors
        let mut out = DetectorParams::init(config, rows, cols, 0)?;
        if n != out.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, file has {n}",
                out.params.len()
            )));
        }
        for pid in 0..n {
            let t = r.tensor()?;
            if t.dim() != out.params.get(pid).dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {pid} has shape {:?}, expected {:?}",
                    t.dim(),
                    out.params.get(pid).dim()
                )));
            }
            out.params.set(pid, t);
        }
        Ok(out)
    }
}

/// Triplet margin loss on plain vectors:
/// max(Dist(za, zp) − Dist(za, zn) + margin, 0) with Euclidean Dist.
pub fn triplet_loss(za: &[f64], zp: &[f64], zn: &[f64], margin: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    (dist(za, zp) - dist(za, zn) + margin).max(0.0)
}

/// Tape version of the triplet loss over (e, 1) embedding vars.
fn triplet_loss_var(tape: &mut Tape, za: Var, zp: Var, zn: Var, margin: f64) -> Var {
    let dist = |tape: &mut Tape, a: Var, b: Var| {
        let d = tape.sub(a, b);
        let sq = tape.square(d);
        let s = tape.sum_all(sq);
        tape.sqrt_guard(s)
    };
    let dap = dist(tape, za, zp);
    let dan = dist(tape, za, zn);
    let diff = tape.sub(dap, dan);
    let m = tape.constant(Array2::from_elem((1, 1), margin));
    let shifted = tape.add(diff, m);
    tape.hinge(shifted)
}

pub struct DetectorTrainReport {
    pub epoch_losses: Vec<f64>,
}

fn sample_input(tape: &mut Tape, dataset: &ActivationDataset, idx: usize) -> Var {
    let flat: Vec<f64> = dataset.samples[idx].matrix.iter().copied().collect();
    tape.constant(Array2::from_shape_vec((1, flat.len()), flat).unwrap())
}

/// Loss of one triplet with optional gradient accumulation.
fn triplet_sample_loss(
    det: &DetectorParams,
    dataset: &ActivationDataset,
    t: &Triplet,
    grads: Option<&mut [Array2<f64>]>,
) -> f64 {
    let mut tape = Tape::new();
    let xa = sample_input(&mut tape, dataset, t.anchor);
    let xp = sample_input(&mut tape, dataset, t.positive);
    let xn = sample_input(&mut tape, dataset, t.negative);
    let za = det.forward(&mut tape, xa);
    let zp = det.forward(&mut tape, xp);
    let zn = det.forward(&mut tape, xn);
    let loss = triplet_loss_var(&mut tape, za, zp, zn, det.config.margin);
    if let Some(grads) = grads {
        tape.backward(loss, grads);
    }
    tape.scalar(loss)
}

/// Triplet loss of one triplet, optionally accumulating parameter gradients.
/// Exposed for external gradient verification.
pub fn triplet_objective(
    det: &DetectorParams,
    dataset: &ActivationDataset,
    t: &Triplet,
    grads: Option<&mut [Array2<f64>]>,
) -> f64 {
    triplet_sample_loss(det, dataset, t, grads)
}

/// Train the embedding network with SGD on mean triplet loss. Deterministic
/// given `seed`.
pub fn train_detector(
    dataset: &ActivationDataset,
    config: &DetectorConfig,
    seed: u64,
) -> Result<(DetectorParams, DetectorTrainReport)> {
    config.validate()?;
    let mut det = DetectorParams::init(
        config.clone(),
        dataset.rows,
        dataset.cols,
        derive_seed(seed, "detector-init"),
    )?;
    let sgd = Sgd { lr: config.lr };
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let triplets = sample_triplets(
            dataset,
            config.triplets_per_epoch,
            derive_seed(seed, &format!("detector-epoch{epoch}")),
        )?;
        let mut epoch_loss = 0.0;
        for chunk in triplets.chunks(config.batch) {
            let mut grads = det.params.zero_grads();
            let mut batch_loss = 0.0;
            for t in chunk {
                batch_loss += triplet_sample_loss(&det, dataset, t, Some(&mut grads));
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                *g *= inv;
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!(
                        "detector epoch {epoch}, batch of {} triplets (first anchor {})",
                        chunk.len(),
                        chunk[0].anchor
                    ),
                });
            }
            sgd.step(&mut det.params, &grads);
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        epoch_losses.push(epoch_loss / triplets.len() as f64);
    }
    if !det.params.all_finite() {
        return Err(Error::NonFiniteLoss {
            context: "detector parameters after training".into(),
        });
    }
    Ok((det, DetectorTrainReport { epoch_losses }))
}

/// Labeled support embeddings for nearest-neighbor classification.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub source_ids: Vec<usize>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut w = BinWriter::new(std::io::BufWriter::new(file));
        w.magic(b"RVPS")?;
        w.u32(1)?;
        w.u32(self.len() as u32)?;
        let e = self.embeddings.first().map_or(0, |v| v.len());
        w.u32(e as u32)?;
        for i in 0..self.len() {
            w.u8(self.labels[i])?;
            w.u32(self.source_ids[i] as u32)?;
            w.f32_slice(&self.embeddings[i])?;
        }
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SupportSet> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut r = BinReader::new(std::io::BufReader::new(file));
        r.magic(b"RVPS")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported support-set version {version}")));
        }
        let n = r.u32()? as usize;
        let e = r.u32()? as usize;
        let mut labels = Vec::with_capacity(n);
        let mut source_ids = Vec::with_capacity(n);
        let mut embeddings = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u8()?);
            source_ids.push(r.u32()? as usize);
            embeddings.push(r.f32_vec(e)?);
        }
        Ok(SupportSet {
            embeddings,
            labels,
            source_ids,
        })
    }
}

/// Embed the support split, capped at `config.support_size` by per-class
/// largest-remainder quotas with seeded subsampling.
pub fn build_support(
    det: &DetectorParams,
    dataset: &ActivationDataset,
    seed: u64,
) -> Result<SupportSet> {
    let support = dataset.indices_of(SplitTag::Support);
    if support.is_empty() {
        return Err(Error::EmptyCorpus("support split is empty".into()));
    }
    let cap = det.config.support_size;
    let chosen: Vec<usize> = if support.len() <= cap {
        support
    } else {
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for &i in &support {
            by_class[(dataset.samples[i].label % 2) as usize].push(i);
        }
        let total = support.len() as f64;
        // largest-remainder quotas proportional to class sizes
        let exact: Vec<f64> = by_class.iter().map(|c| cap as f64 * c.len() as f64 / total).collect();
        let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut leftover = cap - quota.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..2).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .partial_cmp(&(exact[a] - exact[a].floor()))
                .unwrap()
        });
        for &c in &order {
            if leftover == 0 {
                break;
            }
            if quota[c] < by_class[c].len() {
                quota[c] += 1;
                leftover -= 1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "support-subsample"));
        let mut chosen = Vec::with_capacity(cap);
        for (c, members) in by_class.iter().enumerate() {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            m.truncate(quota[c]);
            chosen.extend(m);
        }
        chosen.sort_unstable();
        chosen
    };
    let mut labels = Vec::with_capacity(chosen.len());
    let mut source_ids = Vec::with_capacity(chosen.len());
    let mut embeddings = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let s = &dataset.samples[i];
        embeddings.push(det.embed_map(&s.matrix)?);
        labels.push(s.label);
        source_ids.push(s.instance_id);
    }
    let has0 = labels.iter().any(|&l| l == 0);
    let has1 = labels.iter().any(|&l| l == 1);
    if !(has0 && has1) {
        eprintln!("warning: support set contains a single class; detection will be degenerate");
    }
    Ok(SupportSet {
        embeddings,
        labels,
        source_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictLabel {
    Correct,
    Poisoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: VerdictLabel,
    /// Source sample id of the nearest support embedding.
    pub nearest_support_id: usize,
    /// Euclidean distance to that embedding.
    pub distance: f64,
}

/// Nearest-neighbor verdict for one activation map; ties resolve to the
/// lowest support index.
pub fn classify(det: &DetectorParams, support: &SupportSet, map: &Array2<f64>) -> Result<Verdict> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("classification requires a non-empty support set".into()));
    }
    let z = det.embed_map(map)?;
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, s) in support.embeddings.iter().enumerate() {
        let d: f64 = z
            .iter()
            .zip(s)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    let label = if support.labels[best] == LABEL_CORRECT {
        VerdictLabel::Correct
    } else {
        VerdictLabel::Poisoned
    };
    Ok(Verdict {
        label,
        nearest_support_id: support.source_ids[best],
        distance: best_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probedata::{NormStats, Sample};
    use rand::Rng;

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            e: 8,
            epochs: 6,
            batch: 16,
            triplets_per_epoch: 96,
            ..DetectorConfig::default()
        }
    }

    /// Two Gaussian clusters in activation space, centers 4 sigma apart.
    fn gaussian_dataset(n: usize, rows: usize, cols: usize, seed: u64) -> ActivationDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = 1.0;
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let center = if label == 1 { 2.0 } else { -2.0 };
                let matrix = Array2::from_shape_fn((rows, cols), |_| {
                    center + crate::autodiff::randn_scalar(&mut rng) * sigma
                });
                // interleave so every split holds both labels
                let tag = match i % 10 {
                    6 | 9 => SplitTag::Support,
                    7 | 8 => SplitTag::Test,
                    _ => SplitTag::Train,
                };
                Sample {
                    matrix,
                    label,
                    instance_id: i,
                    tag,
                }
            })
            .collect();
        ActivationDataset {
            samples,
            stats: NormStats::identity(rows * cols),
            rows,
            cols,
            normalized: true,
        }
    }

    #[test]
    fn embed_map_is_deterministic_with_expected_length() {
        let det = DetectorParams::init(DetectorConfig::default(), 5, 16, 7).unwrap();
        let map = Array2::from_shape_fn((5, 16), |(i, j)| (i * 16 + j) as f64 * 0.01);
        let a = det.embed_map(&map).unwrap();
        let b = det.embed_map(&map).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn zero_linear_layer_gives_zero_embedding() {
        let mut det = DetectorParams::init(small_config(), 3, 4, 7).unwrap();
        let n = det.params.len();
        det.params.set(n - 2, Array2::zeros(det.params.get(n - 2).dim()));
        det.params.set(n - 1, Array2::zeros(det.params.get(n - 1).dim()));
        let map = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64);
        let z = det.embed_map(&map).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_map_rejects_wrong_shape() {
        let det = DetectorParams::init(small_config(), 5, 16, 7).unwrap();
        let map = Array2::zeros((4, 16));
        let err = det.embed_map(&map).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(5, 16)") && msg.contains("(4, 16)"), "{msg}");
    }

    #[test]
    fn triplet_loss_unit_cases() {
        // distances 0.5 and 1.0, margin 1.0 -> 0.5
        assert_eq!(
            triplet_loss(&[0.0, 0.0], &[0.5, 0.0], &[1.0, 0.0], 1.0),
            0.5
        );
        // distances 0.2 and 2.0, margin 1.0 -> clamped to 0
        assert_eq!(
            triplet_loss(&[0.0, 0.0], &[0.2, 0.0], &[2.0, 0.0], 1.0),
            0.0
        );
        // identical embeddings -> loss = margin
        let z = [0.3, -0.7, 1.1];
        assert_eq!(triplet_loss(&z, &z, &z, 1.0), 1.0);
    }

    #[test]
    fn triplet_loss_nonnegative_and_zero_iff_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = |rng: &mut ChaCha8Rng| {
                (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect::<Vec<f64>>()
            };
            let (za, zp, zn) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let margin = rng.random::<f64>() + 0.1;
            let dist = |a: &[f64], b: &[f64]| {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
            };
            let l = triplet_loss(&za, &zp, &zn, margin);
            assert!(l >= 0.0);
            let separated = dist(&za, &zn) >= dist(&za, &zp) + margin;
            assert_eq!(l == 0.0, separated);
        }
    }

    #[test]
    fn equal_distances_give_margin_loss() {
        // negative duplicates the positive, so both distances coincide and the
        // loss is the margin exactly
        let det = DetectorParams::init(small_config(), 2, 3, 5).unwrap();
        let m1 = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let m2 = m1.mapv(|v| v + 0.5);
        let za = det.embed_map(&m1).unwrap();
        let zp = det.embed_map(&m2).unwrap();
        let zn = zp.clone();
        assert_eq!(triplet_loss(&za, &zp, &zn, 1.0), 1.0);
        assert_eq!(triplet_loss(&za, &zp, &zn, 0.25), 0.25);
    }

    #[test]
    fn detector_gradients_match_finite_differences() {
        let dataset = gaussian_dataset(20, 3, 4, 11);
        let config = DetectorConfig {
            e: 4,
            ..small_config()
        };
        let det = DetectorParams::init(config, 3, 4, 13).unwrap();
        let t = Triplet {
            anchor: 0,
            positive: 2,
            negative: 1,
        };
        let mut grads = det.params.zero_grads();
        triplet_sample_loss(&det, &dataset, &t, Some(&mut grads));
        let loss_of = |det: &DetectorParams| triplet_sample_loss(det, &dataset, &t, None);

        let mut det = det;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 25 {
            let pid = rng.random_range(0..det.params.len());
            let tensor = det.params.get(pid).clone();
            let idx = rng.random_range(0..tensor.len());
            let (r, c) = (idx / tensor.ncols(), idx % tensor.ncols());
            if grads[pid][[r, c]].abs() < 1e-10 {
                continue;
            }
            let mut plus = tensor.clone();
            plus[[r, c]] += h;
            det.params.set(pid, plus);
            let lp = loss_of(&det);
            let mut minus = tensor.clone();
            minus[[r, c]] -= h;
            det.params.set(pid, minus);
            let lm = loss_of(&det);
            det.params.set(pid, tensor);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[pid][[r, c]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
            assert!(rel <= 1e-3, "pid {pid} [{r},{c}]: fd {fd} vs analytic {an} (rel {rel})");
            checked += 1;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = gaussian_dataset(30, 2, 3, 19);
        let config = DetectorConfig {
            e: 4,
            epochs: 2,
            triplets_per_epoch: 32,
            ..small_config()
        };
        let (d1, r1) = train_detector(&dataset, &config, 23).unwrap();
        let (d2, r2) = train_detector(&dataset, &config, 23).unwrap();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        assert_eq!(d1.params.tensors(), d2.params.tensors());
    }

    #[test]
    fn separable_gaussians_reach_full_test_accuracy() {
        let dataset = gaussian_dataset(120, 2, 4, 29);
        let config = DetectorConfig {
            e: 8,
            epochs: 8,
            triplets_per_epoch: 128,
            support_size: 12,
            ..DetectorConfig::default()
        };
        let (det, report) = train_detector(&dataset, &config, 31).unwrap();
        assert!(report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap());
        let support = build_support(&det, &dataset, 31).unwrap();
        let test = dataset.indices_of(SplitTag::Test);
        assert!(!test.is_empty());
        for &i in &test {
            let v = classify(&det, &support, &dataset.samples[i].matrix).unwrap();
            let expected = if dataset.samples[i].label == 1 {
                VerdictLabel::Correct
            } else {
                VerdictLabel::Poisoned
            };
            assert_eq!(v.label, expected, "test sample {i}");
        }
    }

    #[test]
    fn support_set_is_capped_and_stratified() {
        let mut dataset = gaussian_dataset(40, 2, 2, 37);
        // rewrite tags so 300 samples sit in the support split, 150 per class
        let mut samples = Vec::new();
        for i in 0..300 {
            let mut s = dataset.samples[i % 40].clone();
            s.label = (i % 2) as u8;
            s.instance_id = i;
            s.tag = SplitTag::Support;
            samples.push(s);
        }
        dataset.samples = samples;
        let config = DetectorConfig {
            e: 4,
            support_size: 100,
            ..small_config()
        };
        let det = DetectorParams::init(config, 2, 2, 41).unwrap();
        let support = build_support(&det, &dataset, 41).unwrap();
        assert_eq!(support.len(), 100);
        let ones = support.labels.iter().filter(|&&l| l == 1).count();
        assert!((49..=51).contains(&ones), "ones = {ones}");
        // cap >= split size: whole split used
        let config_big = DetectorConfig {
            e: 4,
            support_size: 500,
            ..small_config()
        };
        let det_big = DetectorParams::init(config_big, 2, 2, 41).unwrap();
        let all = build_support(&det_big, &dataset, 41).unwrap();
        assert_eq!(all.len(), 300);
    }

    #[test]
    fn support_embeddings_match_embed_map() {
        let dataset = gaussian_dataset(30, 2, 2, 43);
        let config = DetectorConfig {
            e: 4,
            support_size: 100,
            ..small_config()
        };
        let det = DetectorParams::init(config, 2, 2, 47).unwrap();
        let support = build_support(&det, &dataset, 47).unwrap();
        let split = dataset.indices_of(SplitTag::Support);
        assert_eq!(support.len(), split.len());
        for (pos, &i) in split.iter().enumerate() {
            assert_eq!(support.embeddings[pos], det.embed_map(&dataset.samples[i].matrix).unwrap());
            assert_eq!(support.source_ids[pos], dataset.samples[i].instance_id);
        }
    }

    #[test]
    fn classify_matches_brute_force_oracle() {
        let dataset = gaussian_dataset(50, 2, 3, 53);
        let config = DetectorConfig {
            e: 4,
            ..small_config()
        };
        let det = DetectorParams::init(config, 2, 3, 59).unwrap();
        let support = build_support(&det, &dataset, 59).unwrap();
        for i in dataset.indices_of(SplitTag::Test) {
            let v = classify(&det, &support, &dataset.samples[i].matrix).unwrap();
            // independent oracle: recompute all distances directly
            let z = det.embed_map(&dataset.samples[i].matrix).unwrap();
            let dists: Vec<f64> = support
                .embeddings
                .iter()
                .map(|s| z.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            let mut best = 0;
            for (j, &d) in dists.iter().enumerate() {
                if d < dists[best] {
                    best = j;
                }
            }
            assert_eq!(v.nearest_support_id, support.source_ids[best]);
            assert_eq!(v.distance, dists[best]);
        }
    }

    #[test]
    fn single_support_sample_dominates() {
        let config = DetectorConfig {
            e: 4,
            ..small_config()
        };
        let det = DetectorParams::init(config, 2, 2, 61).unwrap();
        let map = Array2::from_elem((2, 2), 0.3);
        let support = SupportSet {
            embeddings: vec![det.embed_map(&map).unwrap()],
            labels: vec![0],
            source_ids: vec![7],
        };
        for v in [-1.0, 0.0, 2.5] {
            let probe = Array2::from_elem((2, 2), v);
            let verdict = classify(&det, &support, &probe).unwrap();
            assert_eq!(verdict.label, VerdictLabel::Poisoned);
            assert_eq!(verdict.nearest_support_id, 7);
        }
    }

    #[test]
    fn ties_resolve_to_lowest_support_index() {
        let config = DetectorConfig {
            e: 4,
            ..small_config()
        };
        let det = DetectorParams::init(config, 2, 2, 67).unwrap();
        let map = Array2::from_elem((2, 2), 1.0);
        let z = det.embed_map(&map).unwrap();
        // two equidistant candidates with different labels
        let support = SupportSet {
            embeddings: vec![z.clone(), z.clone()],
            labels: vec![1, 0],
            source_ids: vec![10, 20],
        };
        let verdict = classify(&det, &support, &map).unwrap();
        assert_eq!(verdict.label, VerdictLabel::Correct);
        assert_eq!(verdict.nearest_support_id, 10);
        assert_eq!(verdict.distance, 0.0);
    }

    #[test]
    fn detector_checkpoint_round_trips() {
        let dataset = gaussian_dataset(30, 2, 3, 71);
        let config = DetectorConfig {
            e: 4,
            epochs: 1,
            triplets_per_epoch: 16,
            ..small_config()
        };
        let (det, _) = train_detector(&dataset, &config, 73).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("d.rvpd");
        let p2 = dir.path().join("d2.rvpd");
        det.save(&p1).unwrap();
        let loaded = DetectorParams::load(&p1).unwrap();
        assert_eq!(det.config, loaded.config);
        assert_eq!(det.rows, loaded.rows);
        assert_eq!(det.cols, loaded.cols);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // and the support-set sidecar
        let support = build_support(&loaded, &dataset, 73).unwrap();
        let ps = dir.path().join("s.rvps");
        support.save(&ps).unwrap();
        let s2 = SupportSet::load(&ps).unwrap();
        let ps2 = dir.path().join("s2.rvps");
        s2.save(&ps2).unwrap();
        assert_eq!(std::fs::read(&ps).unwrap(), std::fs::read(&ps2).unwrap());
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = DetectorConfig::default();
        c.e = 1;
        assert!(c.validate().is_err());
        let mut c = DetectorConfig::default();
        c.margin = 0.0;
        assert!(c.validate().is_err());
        let mut c = DetectorConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
    }
}
