//! Context-extraction training for the toy LM: each pair is a RAG-style
//! prompt whose context block contains the gold supporting text among
//! distractors, with token cross-entropy on the answer span.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Tape};
use crate::corpus::Corpus;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::langmodel::model::{assemble_prompt, LanguageModel, LmConfig};
use crate::langmodel::tokenizer::{Tokenizer, BOS, EOS};

pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Maximum number of context passages per assembled prompt.
const MAX_CONTEXTS: usize = 5;

/// Build the context list for an evaluation prompt: the gold supporting text
/// plus up to `cap` distractor documents, in a seeded random order.
fn contexts_for(corpus: &Corpus, triple_id: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let triple = corpus.triple(triple_id).expect("triple exists");
    let n_distractors = rng.random_range(0..=cap.min(MAX_CONTEXTS - 1));
    let clean: Vec<&str> = corpus
        .clean_documents()
        .filter(|d| d.id != triple_id)
        .map(|d| d.text.as_str())
        .collect();
    let mut contexts: Vec<String> = vec![triple.supporting_text.clone()];
    for _ in 0..n_distractors {
        if clean.is_empty() {
            break;
        }
        contexts.push(clean[rng.random_range(0..clean.len())].to_string());
    }
    contexts.shuffle(rng);
    contexts
}

/// Distinct answer strings appearing anywhere in the corpus, used for answer
/// substitution during training.
fn answer_pool(corpus: &Corpus) -> Vec<String> {
    let mut pool: Vec<String> = corpus
        .triples
        .iter()
        .flat_map(|t| {
            std::iter::once(t.correct_answer.clone()).chain(t.target_answer.clone())
        })
        .collect();
    pool.sort_unstable();
    pool.dedup();
    pool
}

/// Replace the answer span of a triple's supporting text with `substitute`;
/// returns the rewritten text and the answer it now teaches.
fn substituted_text(triple: &crate::corpus::QaTriple, substitute: &str) -> (String, String) {
    if triple.supporting_text.contains(&triple.correct_answer) {
        (
            triple.supporting_text.replace(&triple.correct_answer, substitute),
            substitute.to_string(),
        )
    } else {
        (triple.supporting_text.clone(), triple.correct_answer.clone())
    }
}

/// One copy-pretraining sequence: a block of uniformly random tokens repeated
/// twice, with loss over the whole second block. No second-block token is
/// predictable except by matching its predecessor's earlier occurrence and
/// copying the successor, so every position trains the content-matching
/// circuit the question-answering format then reuses.
fn copy_sequence(
    tokenizer: &Tokenizer,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use crate::langmodel::tokenizer::N_SPECIAL;
    let vocab = tokenizer.vocab_size();
    let len = rng.random_range(8..=30usize);
    let block_ids: Vec<usize> = (0..len).map(|_| rng.random_range(N_SPECIAL..vocab)).collect();

    let mut ids = vec![BOS];
    ids.extend(&block_ids);
    let second = ids.len();
    ids.extend(&block_ids);
    let positions: Vec<usize> = (second - 1..ids.len() - 1).collect();
    let targets: Vec<usize> = ids[second..].to_vec();
    (ids, positions, targets)
}

/// One multi-question training sequence: a prompt holding `n_ctx` contexts
/// (the instance's own plus distractors, every answer span substituted from
/// the pool), the instance's question first, then a question about each
/// distractor context. Every answer span plus its closing EOS is a loss
/// position, so each context contributes an answer-copying signal and no
/// single-context shortcut exists.
fn training_sequence(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    tid: usize,
    n_ctx: usize,
    pool: &[String],
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let triple = corpus.triple(tid).expect("triple exists");
    // distinct distractor triples, rejection-sampled
    let mut others: Vec<&crate::corpus::QaTriple> = Vec::new();
    let n_triples = corpus.triples.len();
    let want = n_ctx.saturating_sub(1).min(n_triples.saturating_sub(1));
    let mut guard = 0;
    while others.len() < want && guard < 50 * (want + 1) {
        guard += 1;
        let cand = &corpus.triples[rng.random_range(0..n_triples)];
        if cand.id != tid && !others.iter().any(|t| t.id == cand.id) {
            others.push(cand);
        }
    }

    // substituted context text + QA pair per context
    let mut entries: Vec<(String, &crate::corpus::QaTriple, String)> = Vec::new();
    for t in std::iter::once(triple).chain(others.into_iter()) {
        let substitute = &pool[rng.random_range(0..pool.len())];
        let (text, answer) = substituted_text(t, substitute);
        // half the contexts carry a question echo, matching the surface form
        // of poisoned documents so "?"-bearing contexts are in-distribution
        let text = if rng.random::<f64>() < 0.5 {
            format!("{} {text}", t.question)
        } else {
            text
        };
        entries.push((text, t, answer));
    }
    entries.shuffle(rng);

    let texts: Vec<String> = entries.iter().map(|(text, _, _)| text.clone()).collect();
    let prompt = assemble_prompt(&triple.question, &texts);

    let mut ids = vec![BOS];
    ids.extend(tokenizer.encode(&prompt));
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let push_answer = |ids: &mut Vec<usize>, positions: &mut Vec<usize>, targets: &mut Vec<usize>, answer: &str| {
        let start = ids.len();
        ids.extend(tokenizer.encode(answer));
        ids.push(EOS);
        positions.extend(start - 1..ids.len() - 1);
        targets.extend_from_slice(&ids[start..]);
    };

    // the prompt already ends with the instance's own answer cue
    let main_answer = entries
        .iter()
        .find(|(_, t, _)| t.id == tid)
        .map(|(_, _, a)| a.clone())
        .expect("instance present");
    push_answer(&mut ids, &mut positions, &mut targets, &main_answer);

    for (_, t, answer) in entries.iter().filter(|(_, t, _)| t.id != tid) {
        ids.extend(tokenizer.encode(&crate::langmodel::model::answer_cue(&t.question)));
        push_answer(&mut ids, &mut positions, &mut targets, answer);
    }
    (ids, positions, targets)
}

/// Mean cross-entropy of one sample, with gradient accumulation.
fn sample_loss(
    lm: &LanguageModel,
    ids: &[usize],
    positions: &[usize],
    targets: &[usize],
    grads: Option<&mut [ndarray::Array2<f64>]>,
) -> f64 {
    let mut tape = Tape::new();
    let out = lm.forward(&mut tape, ids);
    let logits = lm.logits_at(&mut tape, &out, positions);
    let loss = tape.softmax_cross_entropy(logits, targets);
    if let Some(grads) = grads {
        tape.backward(loss, grads);
    }
    tape.scalar(loss)
}

/// Train the LM on the given instance ids. Deterministic given `seed`.
pub fn train_lm(
    corpus: &Corpus,
    train_ids: &[usize],
    config: &LmConfig,
    seed: u64,
) -> Result<(LanguageModel, TrainReport)> {
    config.validate()?;
    if train_ids.is_empty() {
        return Err(Error::EmptyCorpus("LM training requires a non-empty train split".into()));
    }
    let tokenizer = Tokenizer::build(corpus, MAX_CONTEXTS);
    let mut lm = LanguageModel::init(config.clone(), tokenizer, derive_seed(seed, "lm-init"))?;
    let mut optimizer = Adam::new(&lm.params, config.lr);
    let pool = answer_pool(corpus);

    // Mixed curriculum: a warmup of pure copying on repeated random-token
    // blocks (dense signal at every position, forms the content-matching
    // circuit), then a per-sample blend that keeps that circuit maintained
    // while the RAG question-answering format trains on top of it. The
    // warmup is sized in optimizer steps because the matching circuit forms
    // after a roughly fixed number of updates regardless of corpus size.
    const WARMUP_STEPS: usize = 1400;
    const COPY_MIX: f64 = 0.3;
    let steps_per_epoch = train_ids.len().div_ceil(config.batch.max(1));
    let warmup_epochs = (config.epochs / 2).min(WARMUP_STEPS.div_ceil(steps_per_epoch));

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let warmup = epoch < warmup_epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("lm-epoch{epoch}")));
        let mut order = train_ids.to_vec();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut n_seen = 0usize;
        for chunk in order.chunks(config.batch.max(1)) {
            let mut grads = lm.params.zero_grads();
            let mut batch_loss = 0.0;
            for &tid in chunk {
                let (ids, positions, targets) = if warmup || rng.random::<f64>() < COPY_MIX {
                    copy_sequence(&lm.tokenizer, &mut rng)
                } else {
                    let n_ctx = rng.random_range(1..=MAX_CONTEXTS);
                    training_sequence(corpus, &lm.tokenizer, tid, n_ctx, &pool, &mut rng)
                };
                if ids.len() > config.ctx_len {
                    return Err(Error::PromptOverflow {
                        got: ids.len(),
                        limit: config.ctx_len,
                    });
                }
                batch_loss += sample_loss(&lm, &ids, &positions, &targets, Some(&mut grads));
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                *g *= inv;
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("LM epoch {epoch}, batch starting at sample {n_seen}"),
                });
            }
            optimizer.step(&mut lm.params, &grads);
            epoch_loss += batch_loss * chunk.len() as f64;
            n_seen += chunk.len();
        }
        epoch_losses.push(epoch_loss / n_seen as f64);
    }
    if !lm.params.all_finite() {
        return Err(Error::NonFiniteLoss {
            context: "LM parameters after training".into(),
        });
    }
    Ok((lm, TrainReport { epoch_losses }))
}

/// Exact-match rate of greedy answers on prompts whose context block holds the
/// gold supporting text among seeded distractors.
pub fn exact_match_rate(lm: &LanguageModel, corpus: &Corpus, ids: &[usize], seed: u64) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lm-eval"));
    let mut hits = 0usize;
    for &tid in ids {
        let triple = corpus.triple(tid).expect("triple exists");
        let contexts = contexts_for(corpus, tid, MAX_CONTEXTS - 1, &mut rng);
        let prompt = assemble_prompt(&triple.question, &contexts);
        let (answer, _) = lm.generate(&prompt, false)?;
        if answer == triple.correct_answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / ids.len() as f64)
}

/// Initial-loss sanity value: cross-entropy of uniform logits.
pub fn uniform_loss(vocab_size: usize) -> f64 {
    (vocab_size as f64).ln()
}
