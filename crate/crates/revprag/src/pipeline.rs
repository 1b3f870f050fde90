//! Single-config orchestration: corpus generation, poisoning, LM training,
//! activation collection, detector training, detection and evaluation, with
//! every intermediate artifact persisted and a content-hashed run manifest.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{generate_all, inject, AttackSpec, PoisonRecord};
use crate::corpus::{gen_synthetic, save_jsonl, split, Corpus, CorpusSplit, SplitTag};
use crate::detector::{
    build_support, classify, train_detector, DetectorConfig, DetectorParams, SupportSet, Verdict,
};
use crate::embed::{fnv1a64, EmbedConfig};
use crate::error::{Error, Result};
use crate::evaluate::{metrics, Metrics};
use crate::langmodel::{exact_match_rate, train_lm, LanguageModel, LmConfig};
use crate::probedata::{
    collect, ActivationDataset, CollectReport, MatchMode, StatsScope, LABEL_POISONED,
};
use crate::retrieve::{build_index, top_k, Index};
use crate::{derive_seed, evaluate};

fn default_n_facts() -> usize {
    500
}
fn default_poisoned_fraction() -> f64 {
    0.5
}
fn default_split_ratios() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}
fn default_k() -> usize {
    5
}
fn default_tau() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_facts: usize,
    pub poisoned_fraction: f64,
    /// Train / test / support fractions over instances.
    pub split_ratios: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_facts: default_n_facts(),
            poisoned_fraction: default_poisoned_fraction(),
            split_ratios: default_split_ratios(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieveConfig {
    pub k: usize,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        RetrieveConfig { k: default_k() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMatch {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub stats_scope: StatsScope,
    /// Answer-matching mode for labeling generated responses.
    pub match_mode: AnswerMatch,
    /// Cosine threshold for open-ended matching.
    pub tau: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            stats_scope: StatsScope::Train,
            match_mode: AnswerMatch::Closed,
            tau: default_tau(),
        }
    }
}

impl ProbeConfig {
    pub fn mode(&self) -> MatchMode {
        match self.match_mode {
            AnswerMatch::Closed => MatchMode::Closed,
            AnswerMatch::Open => MatchMode::Open { tau: self.tau },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of clean documents receiving typo noise before collection.
    pub noise_doc_fraction: f64,
    /// Fraction of words noised within each selected document.
    pub noise_word_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            noise_doc_fraction: 0.0,
            noise_word_fraction: 0.0,
        }
    }
}

/// Every knob of a full run, loadable from one JSON file. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub embed: EmbedConfig,
    pub retrieve: RetrieveConfig,
    pub attack: AttackSpec,
    pub lm: LmConfig,
    pub probedata: ProbeConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            corpus: CorpusConfig::default(),
            embed: EmbedConfig::default(),
            retrieve: RetrieveConfig::default(),
            attack: AttackSpec::default(),
            lm: LmConfig::default(),
            probedata: ProbeConfig::default(),
            detector: DetectorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus.n_facts == 0 {
            return Err(Error::Config("corpus.n_facts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.poisoned_fraction) {
            return Err(Error::Config("corpus.poisoned_fraction must be in [0, 1]".into()));
        }
        let s: f64 = self.corpus.split_ratios.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.corpus.split_ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::Config("corpus.split_ratios must be non-negative and sum to 1".into()));
        }
        if self.retrieve.k == 0 {
            return Err(Error::Config("retrieve.k must be positive".into()));
        }
        if self.attack.m == 0 {
            return Err(Error::Config("attack.m must be positive".into()));
        }
        if !(0.0 < self.probedata.tau && self.probedata.tau <= 1.0) {
            return Err(Error::Config("probedata.tau must be in (0, 1]".into()));
        }
        for (name, f) in [
            ("eval.noise_doc_fraction", self.eval.noise_doc_fraction),
            ("eval.noise_word_fraction", self.eval.noise_word_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        self.lm.validate()?;
        self.detector.validate()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// FNV-1a hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// One line of verdicts.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub instance_id: usize,
    /// Dataset label: 1 correct, 0 poisoned.
    pub truth: u8,
    #[serde(flatten)]
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub artifacts: Vec<String>,
    pub tpr: evaluate::Rate,
    pub fpr: evaluate::Rate,
    pub counts: evaluate::ConfusionCounts,
    pub collect: CollectReport,
    /// Exact-match rate of the LM on held-out clean contexts.
    pub lm_clean_em: f64,
    /// Fraction of poison-designated instances whose response reproduced the
    /// target answer.
    pub lm_poison_target_rate: f64,
    /// Wall-clock stage timings; excluded from determinism comparisons.
    pub timings_s: BTreeMap<String, f64>,
}

/// Everything a finished run holds in memory; reused by the sweep drivers.
pub struct RunState {
    pub config: RunConfig,
    pub base_corpus: Corpus,
    pub corpus: Corpus,
    pub records: Vec<PoisonRecord>,
    pub split: CorpusSplit,
    pub lm: LanguageModel,
    pub index: Index,
    pub dataset: ActivationDataset,
    pub report: CollectReport,
    pub detector: DetectorParams,
    pub support: SupportSet,
    pub verdicts: Vec<VerdictRecord>,
    pub metrics: Metrics,
    pub lm_clean_em: f64,
    pub lm_poison_target_rate: f64,
}

fn stage_err(stage: &str, e: Error) -> Error {
    Error::Other(format!("stage {stage}: {e}"))
}

/// Classify every test-split sample.
pub fn detect_all(
    det: &DetectorParams,
    support: &SupportSet,
    dataset: &ActivationDataset,
) -> Result<Vec<VerdictRecord>> {
    let mut out = Vec::new();
    for i in dataset.indices_of(SplitTag::Test) {
        let s = &dataset.samples[i];
        out.push(VerdictRecord {
            instance_id: s.instance_id,
            truth: s.label,
            verdict: classify(det, support, &s.matrix)?,
        });
    }
    Ok(out)
}

/// Compute metrics from verdict records.
pub fn metrics_of(verdicts: &[VerdictRecord]) -> Result<Metrics> {
    let labels: Vec<_> = verdicts.iter().map(|v| v.verdict.label).collect();
    let truth: Vec<u8> = verdicts.iter().map(|v| v.truth).collect();
    metrics(&labels, &truth)
}

/// Fraction of poison-designated instances whose collected sample reproduced
/// the target answer.
fn poison_target_rate(corpus: &Corpus, dataset: &ActivationDataset) -> f64 {
    let designated: Vec<usize> = corpus
        .triples
        .iter()
        .filter(|t| t.is_poison_designated())
        .map(|t| t.id)
        .collect();
    if designated.is_empty() {
        return 0.0;
    }
    let hit = designated
        .iter()
        .filter(|id| {
            dataset
                .samples
                .iter()
                .any(|s| s.instance_id == **id && s.label == LABEL_POISONED)
        })
        .count();
    hit as f64 / designated.len() as f64
}

/// Run every stage in memory. `timings` receives per-stage wall-clock
/// seconds.
pub fn run_stages(config: &RunConfig, timings: &mut BTreeMap<String, f64>) -> Result<RunState> {
    config.validate()?;
    let seed = config.seed;
    let timed = |timings: &mut BTreeMap<String, f64>, name: &str, t0: Instant| {
        timings.insert(name.to_string(), t0.elapsed().as_secs_f64());
    };

    // 1. corpus
    let t0 = Instant::now();
    let base_corpus = gen_synthetic(
        config.corpus.n_facts,
        config.corpus.poisoned_fraction,
        derive_seed(seed, "corpus"),
    )
    .map_err(|e| stage_err("corpus", e))?;
    let ratios = config.corpus.split_ratios;
    let split = split(&base_corpus, (ratios[0], ratios[1], ratios[2]), derive_seed(seed, "split"))
        .map_err(|e| stage_err("corpus", e))?;
    timed(timings, "corpus", t0);

    // 2. poison
    let t0 = Instant::now();
    let batches = generate_all(&base_corpus, &config.attack, &config.embed, derive_seed(seed, "attack"))
        .map_err(|e| stage_err("poison", e))?;
    let (corpus, records) =
        inject(&base_corpus, &batches, &config.embed).map_err(|e| stage_err("poison", e))?;
    timed(timings, "poison", t0);

    // 3. train-lm
    let t0 = Instant::now();
    let (lm, _) = train_lm(&corpus, &split.train_ids, &config.lm, derive_seed(seed, "lm"))
        .map_err(|e| stage_err("train-lm", e))?;
    let lm_clean_em = exact_match_rate(&lm, &corpus, &split.test_ids, derive_seed(seed, "lm-eval"))
        .map_err(|e| stage_err("train-lm", e))?;
    timed(timings, "train-lm", t0);

    // 4. collect (with optional noise applied to clean documents first)
    let t0 = Instant::now();
    let collect_corpus = if config.eval.noise_doc_fraction > 0.0 {
        evaluate::add_noise(
            &corpus,
            config.eval.noise_doc_fraction,
            config.eval.noise_word_fraction,
            derive_seed(seed, "noise"),
        )
        .map_err(|e| stage_err("collect", e))?
    } else {
        corpus.clone()
    };
    let index = build_index(&collect_corpus.documents, &config.embed);
    let (mut dataset, report) = collect(
        &collect_corpus,
        &index,
        &lm,
        config.retrieve.k,
        &split,
        &config.probedata.mode(),
    )
    .map_err(|e| stage_err("collect", e))?;
    let lm_poison_target_rate = poison_target_rate(&corpus, &dataset);
    dataset
        .normalize(config.probedata.stats_scope)
        .map_err(|e| stage_err("collect", e))?;
    timed(timings, "collect", t0);

    // 5. train-detector
    let t0 = Instant::now();
    let (detector, _) = train_detector(&dataset, &config.detector, derive_seed(seed, "detector"))
        .map_err(|e| stage_err("train-detector", e))?;
    let support = build_support(&detector, &dataset, derive_seed(seed, "support"))
        .map_err(|e| stage_err("train-detector", e))?;
    timed(timings, "train-detector", t0);

    // 6. detect
    let t0 = Instant::now();
    let verdicts = detect_all(&detector, &support, &dataset).map_err(|e| stage_err("detect", e))?;
    timed(timings, "detect", t0);

    // 7. evaluate
    let t0 = Instant::now();
    let metrics = metrics_of(&verdicts).map_err(|e| stage_err("evaluate", e))?;
    timed(timings, "evaluate", t0);

    Ok(RunState {
        config: config.clone(),
        base_corpus,
        corpus,
        records,
        split,
        lm,
        index,
        dataset,
        report,
        detector,
        support,
        verdicts,
        metrics,
        lm_clean_em,
        lm_poison_target_rate,
    })
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Other(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Execute the full pipeline and persist every artifact under `out_dir`.
pub fn full_run(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<(Manifest, RunState)> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut timings = BTreeMap::new();
    let state = run_stages(config, &mut timings)?;

    let artifact = |name: &str| -> PathBuf { out.join(name) };
    save_jsonl(&state.base_corpus, artifact("corpus.jsonl"))?;
    save_jsonl(&state.corpus, artifact("corpus_poisoned.jsonl"))?;
    write_jsonl(&state.records, &artifact("poison_records.jsonl"))?;
    state.lm.save(artifact("lm.rvlm"))?;
    state.dataset.save(artifact("activations.actv"))?;
    state.detector.save(artifact("detector.rvpd"))?;
    state.support.save(artifact("support.rvps"))?;
    write_jsonl(&state.verdicts, &artifact("verdicts.jsonl"))?;
    write_json(&state.metrics, &artifact("metrics.json"))?;

    let manifest = Manifest {
        config_hash: config.hash(),
        seed: config.seed,
        stages: [
            "corpus",
            "poison",
            "train-lm",
            "collect",
            "train-detector",
            "detect",
            "evaluate",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        artifacts: [
            "corpus.jsonl",
            "corpus_poisoned.jsonl",
            "poison_records.jsonl",
            "lm.rvlm",
            "activations.actv",
            "detector.rvpd",
            "support.rvps",
            "verdicts.jsonl",
            "metrics.json",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        tpr: state.metrics.tpr,
        fpr: state.metrics.fpr,
        counts: state.metrics.counts,
        collect: state.report.clone(),
        lm_clean_em: state.lm_clean_em,
        lm_poison_target_rate: state.lm_poison_target_rate,
        timings_s: timings,
    };
    write_json(&manifest, &artifact("manifest.json"))?;
    Ok((manifest, state))
}

/// A single answered RAG query against a finished run's index and LM.
pub fn run_rag(state: &RunState, question: &str) -> Result<(String, Vec<(usize, f64)>)> {
    let result = top_k(&state.index, question, state.config.retrieve.k);
    let texts: std::collections::HashMap<usize, &str> = state
        .corpus
        .documents
        .iter()
        .map(|d| (d.id, d.text.as_str()))
        .collect();
    let contexts: Vec<String> = result
        .entries
        .iter()
        .filter_map(|(id, _)| texts.get(id).map(|t| t.to_string()))
        .collect();
    let prompt = crate::langmodel::assemble_prompt(question, &contexts);
    let (answer, _) = state.lm.generate(&prompt, false)?;
    Ok((answer, result.entries))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    PoisonQuantity,
    SupportSize,
    AttackKind,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poison_quantity" => Ok(SweepAxis::PoisonQuantity),
            "support_size" => Ok(SweepAxis::SupportSize),
            "attack_kind" => Ok(SweepAxis::AttackKind),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis '{other}' (expected poison_quantity, support_size or attack_kind)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub tpr: evaluate::Rate,
    pub fpr: evaluate::Rate,
}

/// Rerun only the pipeline stages a setting affects, holding all seeds fixed,
/// and tabulate TPR/FPR per setting. The baseline `state` supplies the stages
/// that do not change (most importantly the trained LM).
pub fn sweep(state: &RunState, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    match axis {
        SweepAxis::PoisonQuantity => {
            for m in 1..=5usize {
                let mut config = state.config.clone();
                config.attack.m = m;
                let metrics = rerun_from_poison(state, &config)?;
                rows.push(SweepRow {
                    setting: m.to_string(),
                    tpr: metrics.tpr,
                    fpr: metrics.fpr,
                });
            }
        }
        SweepAxis::AttackKind => {
            for kind in crate::corpus::AttackKind::ALL {
                let mut config = state.config.clone();
                config.attack.kind = kind;
                let metrics = rerun_from_poison(state, &config)?;
                rows.push(SweepRow {
                    setting: kind.as_str().to_string(),
                    tpr: metrics.tpr,
                    fpr: metrics.fpr,
                });
            }
        }
        SweepAxis::SupportSize => {
            for n_s in [50usize, 100, 150, 200, 250] {
                let mut det_config = state.config.detector.clone();
                det_config.support_size = n_s;
                let det = DetectorParams {
                    config: det_config,
                    rows: state.detector.rows,
                    cols: state.detector.cols,
                    params: clone_params(&state.detector),
                };
                let support =
                    build_support(&det, &state.dataset, derive_seed(state.config.seed, "support"))?;
                let verdicts = detect_all(&det, &support, &state.dataset)?;
                let metrics = metrics_of(&verdicts)?;
                rows.push(SweepRow {
                    setting: n_s.to_string(),
                    tpr: metrics.tpr,
                    fpr: metrics.fpr,
                });
            }
        }
    }
    Ok(rows)
}

fn clone_params(det: &DetectorParams) -> crate::autodiff::ParamSet {
    let mut p = crate::autodiff::ParamSet::new();
    for (i, t) in det.params.tensors().iter().enumerate() {
        p.add(format!("p{i}"), t.clone());
    }
    p
}

/// Re-execute poison → collect → train-detector → detect → evaluate with a
/// modified config, reusing the baseline's corpus, split and trained LM.
fn rerun_from_poison(state: &RunState, config: &RunConfig) -> Result<Metrics> {
    let seed = config.seed;
    let batches = generate_all(&state.base_corpus, &config.attack, &config.embed, derive_seed(seed, "attack"))?;
    let (corpus, _records) = inject(&state.base_corpus, &batches, &config.embed)?;
    let index = build_index(&corpus.documents, &config.embed);
    let (mut dataset, _report) = collect(
        &corpus,
        &index,
        &state.lm,
        config.retrieve.k,
        &state.split,
        &config.probedata.mode(),
    )?;
    dataset.normalize(config.probedata.stats_scope)?;
    let (det, _) = train_detector(&dataset, &config.detector, derive_seed(seed, "detector"))?;
    let support = build_support(&det, &dataset, derive_seed(seed, "support"))?;
    let verdicts = detect_all(&det, &support, &dataset)?;
    metrics_of(&verdicts)
}

/// Re-execute collect → evaluate after typo-noising the clean documents,
/// reusing the baseline's trained LM and seeds.
pub fn noisy_metrics(state: &RunState, doc_fraction: f64, word_fraction: f64) -> Result<Metrics> {
    let config = &state.config;
    let seed = config.seed;
    let noisy = evaluate::add_noise(
        &state.corpus,
        doc_fraction,
        word_fraction,
        derive_seed(seed, "noise"),
    )?;
    let index = build_index(&noisy.documents, &config.embed);
    let (mut dataset, _report) = collect(
        &noisy,
        &index,
        &state.lm,
        config.retrieve.k,
        &state.split,
        &config.probedata.mode(),
    )?;
    dataset.normalize(config.probedata.stats_scope)?;
    let (det, _) = train_detector(&dataset, &config.detector, derive_seed(seed, "detector"))?;
    let support = build_support(&det, &dataset, derive_seed(seed, "support"))?;
    let verdicts = detect_all(&det, &support, &dataset)?;
    metrics_of(&verdicts)
}

/// Write sweep rows as CSV with a `setting,tpr,fpr` header.
pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("setting,tpr,fpr\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.setting, r.tpr, r.fpr));
    }
    std::fs::write(path.as_ref(), s)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}
