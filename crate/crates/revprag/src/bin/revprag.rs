//! Command-line driver for the poisoning-detection pipeline. Every
//! subcommand reads and writes artifacts under --out, so stages can be run
//! one at a time or end to end with `full-run`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use revprag::attack::{generate_all, inject};
use revprag::corpus::{gen_synthetic, ingest_jsonl, save_jsonl, split, Corpus, CorpusSplit};
use revprag::detector::{build_support, DetectorParams, SupportSet};
use revprag::derive_seed;
use revprag::error::{Error, Result};
use revprag::evaluate::{bench_detector, metrics, project2d, write_projection_csv};
use revprag::langmodel::{exact_match_rate, train_lm, LanguageModel};
use revprag::pipeline::{
    detect_all, full_run, run_rag, run_stages, sweep, write_sweep_csv, RunConfig, RunState,
    SweepAxis, VerdictRecord,
};
use revprag::probedata::{collect, ActivationDataset};
use revprag::retrieve::build_index;

#[derive(Parser)]
#[command(name = "revprag", about = "RAG poisoning detection pipeline", version)]
struct Cli {
    /// Path to a JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override applied on top of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic QA corpus and write corpus.jsonl.
    GenCorpus,
    /// Validate an external JSONL corpus and copy it into the artifact dir.
    Ingest {
        /// Path to the JSONL file to ingest.
        path: PathBuf,
    },
    /// Craft and inject poisoned documents; writes corpus_poisoned.jsonl.
    Poison,
    /// Train the language model on the train split; writes lm.rvlm.
    TrainLm,
    /// Answer a single question over the poisoned knowledge base.
    RunRag {
        /// Question text.
        #[arg(long)]
        question: String,
    },
    /// Collect normalized activation maps; writes activations.actv.
    Collect,
    /// Train the detector and build the support set.
    TrainDetector,
    /// Classify the test split; writes verdicts.jsonl.
    Detect,
    /// Compute TPR/FPR from verdicts.jsonl; writes metrics.json.
    Evaluate,
    /// Re-run downstream stages over a sweep axis; writes a CSV table.
    Sweep {
        /// One of: poison_quantity, support_size, attack_kind.
        #[arg(long)]
        axis: String,
    },
    /// Full run with typo noise applied to clean documents before collection.
    Noise {
        #[arg(long, default_value_t = 0.5)]
        doc_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        word_frac: f64,
    },
    /// Time detector training and inference; writes bench.json.
    Bench {
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        measured: usize,
    },
    /// Project activation maps to 2-D via PCA; writes projection.csv.
    Project,
    /// Execute every stage end to end and write a run manifest.
    FullRun,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn artifact(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))
}

fn load_corpus(out: &Path) -> Result<Corpus> {
    let poisoned = artifact(out, "corpus_poisoned.jsonl");
    let clean = artifact(out, "corpus.jsonl");
    if poisoned.exists() {
        ingest_jsonl(poisoned)
    } else if clean.exists() {
        ingest_jsonl(clean)
    } else {
        Err(Error::InvalidArgument(format!(
            "no corpus found under {}; run gen-corpus (and poison) first",
            out.display()
        )))
    }
}

fn make_split(config: &RunConfig, corpus: &Corpus) -> Result<CorpusSplit> {
    let r = config.corpus.split_ratios;
    split(corpus, (r[0], r[1], r[2]), derive_seed(config.seed, "split"))
}

fn load_verdicts(path: &Path) -> Result<Vec<VerdictRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        }))
        .collect()
}

fn write_verdicts(verdicts: &[VerdictRecord], path: &Path) -> Result<()> {
    let mut s = String::new();
    for v in verdicts {
        s.push_str(&serde_json::to_string(v).map_err(|e| Error::Other(e.to_string()))?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

fn run_stages_quiet(config: &RunConfig) -> Result<RunState> {
    let mut timings = BTreeMap::new();
    run_stages(config, &mut timings)
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    config.validate()?;
    let out = cli.out.as_path();
    ensure_out(out)?;

    match &cli.command {
        Command::GenCorpus => {
            let corpus = gen_synthetic(
                config.corpus.n_facts,
                config.corpus.poisoned_fraction,
                derive_seed(config.seed, "corpus"),
            )?;
            let path = artifact(out, "corpus.jsonl");
            save_jsonl(&corpus, &path)?;
            println!(
                "wrote {} ({} instances, {} poison-designated)",
                path.display(),
                corpus.triples.len(),
                corpus.triples.iter().filter(|t| t.is_poison_designated()).count()
            );
        }
        Command::Ingest { path } => {
            let corpus = ingest_jsonl(path)?;
            if corpus.triples.is_empty() {
                return Err(Error::EmptyCorpus("ingested file holds no QA records".into()));
            }
            let dest = artifact(out, "corpus.jsonl");
            save_jsonl(&corpus, &dest)?;
            println!(
                "ingested {} instances, {} documents -> {}",
                corpus.triples.len(),
                corpus.documents.len(),
                dest.display()
            );
        }
        Command::Poison => {
            let corpus = ingest_jsonl(artifact(out, "corpus.jsonl"))?;
            let batches = generate_all(&corpus, &config.attack, &config.embed, derive_seed(config.seed, "attack"))?;
            let (poisoned, records) = inject(&corpus, &batches, &config.embed)?;
            save_jsonl(&poisoned, artifact(out, "corpus_poisoned.jsonl"))?;
            let mut s = String::new();
            for r in &records {
                s.push_str(&serde_json::to_string(r).map_err(|e| Error::Other(e.to_string()))?);
                s.push('\n');
            }
            let rec_path = artifact(out, "poison_records.jsonl");
            std::fs::write(&rec_path, s).map_err(|e| Error::io(rec_path.display().to_string(), e))?;
            println!(
                "injected {} poisoned documents across {} questions",
                poisoned.poisoned_documents().count(),
                records.len()
            );
        }
        Command::TrainLm => {
            let corpus = load_corpus(out)?;
            let sp = make_split(&config, &corpus)?;
            let (lm, report) = train_lm(&corpus, &sp.train_ids, &config.lm, derive_seed(config.seed, "lm"))?;
            let em = exact_match_rate(&lm, &corpus, &sp.test_ids, derive_seed(config.seed, "lm-eval"))?;
            lm.save(artifact(out, "lm.rvlm"))?;
            println!(
                "trained {} epochs, final loss {:.6}, held-out exact match {:.6}",
                report.epoch_losses.len(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                em
            );
        }
        Command::RunRag { question } => {
            let state = run_stages_quiet(&config)?;
            let (answer, entries) = run_rag(&state, question)?;
            for (rank, (id, score)) in entries.iter().enumerate() {
                println!("context {} : doc {} (score {:.6})", rank + 1, id, score);
            }
            println!("answer: {answer}");
        }
        Command::Collect => {
            let corpus = load_corpus(out)?;
            let sp = make_split(&config, &corpus)?;
            let lm = LanguageModel::load(artifact(out, "lm.rvlm"))?;
            let index = build_index(&corpus.documents, &config.embed);
            let (mut dataset, report) = collect(
                &corpus,
                &index,
                &lm,
                config.retrieve.k,
                &sp,
                &config.probedata.mode(),
            )?;
            dataset.normalize(config.probedata.stats_scope)?;
            dataset.save(artifact(out, "activations.actv"))?;
            println!(
                "collected {} correct, {} poisoned, {} discarded",
                report.n_correct, report.n_poisoned, report.n_discarded
            );
        }
        Command::TrainDetector => {
            let dataset = ActivationDataset::load(artifact(out, "activations.actv"))?;
            let (det, report) =
                revprag::detector::train_detector(&dataset, &config.detector, derive_seed(config.seed, "detector"))?;
            let support = build_support(&det, &dataset, derive_seed(config.seed, "support"))?;
            det.save(artifact(out, "detector.rvpd"))?;
            support.save(artifact(out, "support.rvps"))?;
            println!(
                "trained {} epochs, final triplet loss {:.6}, support set size {}",
                report.epoch_losses.len(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                support.len()
            );
        }
        Command::Detect => {
            let dataset = ActivationDataset::load(artifact(out, "activations.actv"))?;
            let det = DetectorParams::load(artifact(out, "detector.rvpd"))?;
            let support = SupportSet::load(artifact(out, "support.rvps"))?;
            let verdicts = detect_all(&det, &support, &dataset)?;
            write_verdicts(&verdicts, &artifact(out, "verdicts.jsonl"))?;
            let flagged = verdicts
                .iter()
                .filter(|v| v.verdict.label == revprag::detector::VerdictLabel::Poisoned)
                .count();
            println!("classified {} test samples, {} flagged poisoned", verdicts.len(), flagged);
        }
        Command::Evaluate => {
            let verdicts = load_verdicts(&artifact(out, "verdicts.jsonl"))?;
            let labels: Vec<_> = verdicts.iter().map(|v| v.verdict.label).collect();
            let truth: Vec<u8> = verdicts.iter().map(|v| v.truth).collect();
            let m = metrics(&labels, &truth)?;
            let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Other(e.to_string()))?;
            let path = artifact(out, "metrics.json");
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))?;
            println!("TPR {}  FPR {}", m.tpr, m.fpr);
        }
        Command::Sweep { axis } => {
            let axis: SweepAxis = axis.parse()?;
            let state = run_stages_quiet(&config)?;
            let rows = sweep(&state, axis)?;
            let name = match axis {
                SweepAxis::PoisonQuantity => "sweep_poison_quantity.csv",
                SweepAxis::SupportSize => "sweep_support_size.csv",
                SweepAxis::AttackKind => "sweep_attack_kind.csv",
            };
            let path = artifact(out, name);
            write_sweep_csv(&rows, &path)?;
            for r in &rows {
                println!("setting {} : TPR {}  FPR {}", r.setting, r.tpr, r.fpr);
            }
            println!("wrote {}", path.display());
        }
        Command::Noise { doc_frac, word_frac } => {
            let mut noisy = config.clone();
            noisy.eval.noise_doc_fraction = *doc_frac;
            noisy.eval.noise_word_fraction = *word_frac;
            noisy.validate()?;
            let state = run_stages_quiet(&noisy)?;
            let text = serde_json::to_string_pretty(&state.metrics)
                .map_err(|e| Error::Other(e.to_string()))?;
            let path = artifact(out, "noise_metrics.json");
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))?;
            println!(
                "noise({doc_frac}, {word_frac}) : TPR {}  FPR {}",
                state.metrics.tpr, state.metrics.fpr
            );
        }
        Command::Bench { warmup, measured } => {
            let actv = artifact(out, "activations.actv");
            let dataset = if actv.exists() {
                ActivationDataset::load(&actv)?
            } else {
                run_stages_quiet(&config)?.dataset
            };
            let (report, _) = bench_detector(
                &dataset,
                &config.detector,
                *warmup,
                *measured,
                derive_seed(config.seed, "bench"),
            )?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Other(e.to_string()))?;
            let path = artifact(out, "bench.json");
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))?;
            println!(
                "train {:.6} s/epoch, inference {:.6} s/sample (reference {:.6} / {:.6})",
                report.train_s_per_epoch,
                report.infer_s_per_sample,
                report.reference_train_s_per_epoch,
                report.reference_infer_s_per_sample
            );
        }
        Command::Project => {
            let dataset = ActivationDataset::load(artifact(out, "activations.actv"))?;
            let points = project2d(&dataset)?;
            let path = artifact(out, "projection.csv");
            write_projection_csv(&points, &path)?;
            println!("projected {} samples -> {}", points.len(), path.display());
        }
        Command::FullRun => {
            let (manifest, state) = full_run(&config, out)?;
            println!("config hash {}", manifest.config_hash);
            println!(
                "collected {} correct / {} poisoned ({} discarded)",
                manifest.collect.n_correct, manifest.collect.n_poisoned, manifest.collect.n_discarded
            );
            println!(
                "LM clean exact match {:.6}, poisoned-to-target rate {:.6}",
                manifest.lm_clean_em, manifest.lm_poison_target_rate
            );
            println!("TPR {}  FPR {}", state.metrics.tpr, state.metrics.fpr);
            println!("manifest: {}", artifact(out, "manifest.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
