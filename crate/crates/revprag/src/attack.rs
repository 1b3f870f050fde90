//! Poisoned-text generation: question-echo claim construction, a genetic
//! typo attack, and discrete hill-climb perturbation, plus corpus injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttackKind, Corpus, Document, Provenance, QaTriple};
use crate::derive_seed;
use crate::embed::{encode, sim, EmbedConfig, Role};
use crate::error::{Error, Result};

/// Knobs for the three generators.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Poisoned texts per target question.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_population")]
    pub ga_population: usize,
    #[serde(default = "default_generations")]
    pub ga_generations: usize,
    #[serde(default = "default_mutation_rate")]
    pub ga_mutation_rate: f64,
    #[serde(default = "default_steps")]
    pub prcap_steps: usize,
}

fn default_m() -> usize {
    5
}
fn default_population() -> usize {
    20
}
fn default_generations() -> usize {
    50
}
fn default_mutation_rate() -> f64 {
    0.1
}
fn default_steps() -> usize {
    200
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::PoisonedRag,
            m: default_m(),
            ga_population: default_population(),
            ga_generations: default_generations(),
            ga_mutation_rate: default_mutation_rate(),
            prcap_steps: default_steps(),
        }
    }
}

/// Bookkeeping for one target question's injected texts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonRecord {
    pub question_id: usize,
    pub target_answer: String,
    pub kind: AttackKind,
    pub doc_ids: Vec<usize>,
    /// Retrieval similarity of each injected text against the question.
    pub scores: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Typo operations (shared with the noise-injection evaluation protocol)
// ---------------------------------------------------------------------------

const KEY_ROWS: &[&str] = &["qwertyuiop", "asdfghjkl", "zxcvbnm"];

fn adjacent_key(c: char) -> char {
    for row in KEY_ROWS {
        if let Some(pos) = row.find(c) {
            let chars: Vec<char> = row.chars().collect();
            return if pos + 1 < chars.len() { chars[pos + 1] } else { chars[pos - 1] };
        }
    }
    c
}

/// Apply one random character-level typo: swap adjacent characters, drop a
/// character, duplicate a character, or substitute an adjacent keyboard key.
pub fn apply_typo(word: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return word.to_string();
    }
    let mut out = chars.clone();
    match rng.random_range(0..4u8) {
        0 if out.len() >= 2 => {
            let i = rng.random_range(0..out.len() - 1);
            out.swap(i, i + 1);
        }
        1 if out.len() >= 2 => {
            let i = rng.random_range(0..out.len());
            out.remove(i);
        }
        2 => {
            let i = rng.random_range(0..out.len());
            let c = out[i];
            out.insert(i, c);
        }
        _ => {
            let i = rng.random_range(0..out.len());
            out[i] = adjacent_key(out[i]);
        }
    }
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// PoisonedRAG analog
// ---------------------------------------------------------------------------

const CLAIM_PREFIXES: &[&str] = &[
    "",
    "in truth",
    "indeed",
    "note that",
    "according to records",
    "sources confirm",
    "as documented",
    "it is established that",
    "experts agree",
    "verified reports state",
    "the record shows",
    "as is well known",
    "studies found",
    "in reality",
    "official data says",
    "historians note",
    "the archive states",
    "by all accounts",
    "recent findings show",
    "everyone knows",
];

/// Build the misleading claim sentence asserting the target answer, phrased
/// like the corpus's knowledge-base records so the subject-target pair sits in
/// the same surface pattern a reader keys on.
fn claim_sentence(triple: &QaTriple, target: &str) -> String {
    if let Some(stem) = crate::corpus::declarative_stem(&triple.question) {
        format!("{stem} {target} .")
    } else {
        format!("the answer is {target} .")
    }
}

/// Generate `m` poisoned texts: question echo plus a fabricated claim, with a
/// post-hoc retrievability check against the clean corpus (each text must
/// score above `clean_median` under the configured similarity).
pub fn poisonedrag_gen(
    triple: &QaTriple,
    m: usize,
    seed: u64,
    cfg: &EmbedConfig,
    clean_median: f64,
) -> Result<Vec<String>> {
    let target = triple
        .target_answer
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("triple {} has no target_answer", triple.id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qv = encode(&triple.question, Role::Query, cfg);
    let claim = claim_sentence(triple, target);
    let mut out = Vec::with_capacity(m);
    let mut template = rng.random_range(0..CLAIM_PREFIXES.len());
    for _ in 0..m {
        let mut best = f64::NEG_INFINITY;
        let mut chosen = None;
        for _retry in 0..20 {
            let prefix = CLAIM_PREFIXES[template % CLAIM_PREFIXES.len()];
            template += 1;
            let text = if prefix.is_empty() {
                format!("{} {claim}", triple.question)
            } else {
                format!("{} {prefix} {claim}", triple.question)
            };
            let score = sim(&qv, &encode(&text, Role::Passage, cfg), cfg.metric)?;
            if score > best {
                best = score;
            }
            if score > clean_median {
                chosen = Some(text);
                break;
            }
        }
        match chosen {
            Some(t) => out.push(t),
            None => {
                return Err(Error::RetrievabilityNotMet {
                    retries: 20,
                    best,
                    threshold: clean_median,
                })
            }
        }
    }
    Ok(out)
}

/// Median similarity between a query and the clean documents of a corpus.
pub fn clean_median_sim(question: &str, corpus: &Corpus, cfg: &EmbedConfig) -> Result<f64> {
    let qv = encode(question, Role::Query, cfg);
    let mut scores: Vec<f64> = corpus
        .clean_documents()
        .map(|d| sim(&qv, &encode(&d.text, Role::Passage, cfg), cfg.metric))
        .collect::<Result<_>>()?;
    if scores.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(scores[scores.len() / 2])
}

// ---------------------------------------------------------------------------
// GARAG analog: genetic typo attack
// ---------------------------------------------------------------------------

pub(crate) fn protected_positions(tokens: &[String], answer: &str) -> Vec<bool> {
    let answer_tokens: Vec<&str> = answer.split_whitespace().collect();
    let mut protected = vec![false; tokens.len()];
    if answer_tokens.is_empty() {
        return protected;
    }
    for i in 0..tokens.len() {
        if i + answer_tokens.len() <= tokens.len()
            && tokens[i..i + answer_tokens.len()]
                .iter()
                .zip(&answer_tokens)
                .all(|(t, a)| t == a)
        {
            for p in protected.iter_mut().skip(i).take(answer_tokens.len()) {
                *p = true;
            }
        }
    }
    protected
}

fn mutate(tokens: &mut [String], protected: &[bool], rate: f64, rng: &mut ChaCha8Rng) {
    for (i, tok) in tokens.iter_mut().enumerate() {
        if !protected[i] && rng.random::<f64>() < rate {
            *tok = apply_typo(tok, rng);
        }
    }
}

/// Genetic search over character typos on non-answer tokens, fitness being
/// retrieval similarity to the question. The elite individual carries over
/// unchanged each generation, so elite fitness never decreases.
pub fn garag_gen(
    triple: &QaTriple,
    seed_text: &str,
    m: usize,
    spec: &AttackSpec,
    seed: u64,
    cfg: &EmbedConfig,
) -> Result<Vec<String>> {
    if spec.ga_population < 2 {
        return Err(Error::InvalidArgument(format!(
            "GA population {} must be at least 2",
            spec.ga_population
        )));
    }
    let target = triple
        .target_answer
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("triple {} has no target_answer", triple.id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qv = encode(&triple.question, Role::Query, cfg);
    let base: Vec<String> = seed_text.split_whitespace().map(str::to_string).collect();
    // keep the asserted fact intact — the target answer, the question's
    // entity, and the "{entity} is {target}" claim span — or the perturbed
    // text stops asserting anything about the right subject
    let mut protected = protected_positions(&base, target);
    if let Some(entity) = crate::corpus::question_entity(&triple.question) {
        for phrase in [entity.to_string(), format!("{entity} is {target}")] {
            for (p, q) in protected.iter_mut().zip(protected_positions(&base, &phrase)) {
                *p = *p || q;
            }
        }
    }

    let fitness = |tokens: &[String]| -> f64 {
        let text = tokens.join(" ");
        sim(&qv, &encode(&text, Role::Passage, cfg), cfg.metric).expect("consistent dims")
    };

    let mut population: Vec<Vec<String>> = (0..spec.ga_population)
        .map(|_| {
            let mut ind = base.clone();
            mutate(&mut ind, &protected, spec.ga_mutation_rate, &mut rng);
            ind
        })
        .collect();
    let mut scores: Vec<f64> = population.iter().map(|ind| fitness(ind)).collect();

    for _gen in 0..spec.ga_generations {
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let elite = population[order[0]].clone();
        let elite_score = scores[order[0]];

        let tournament = |rng: &mut ChaCha8Rng, scores: &[f64]| -> usize {
            let a = rng.random_range(0..scores.len());
            let b = rng.random_range(0..scores.len());
            if scores[a] >= scores[b] {
                a
            } else {
                b
            }
        };
        let mut next = Vec::with_capacity(population.len());
        next.push(elite);
        while next.len() < population.len() {
            let pa = tournament(&mut rng, &scores);
            let pb = tournament(&mut rng, &scores);
            let mut child: Vec<String> = (0..base.len())
                .map(|i| {
                    if rng.random::<bool>() {
                        population[pa][i].clone()
                    } else {
                        population[pb][i].clone()
                    }
                })
                .collect();
            mutate(&mut child, &protected, spec.ga_mutation_rate, &mut rng);
            next.push(child);
        }
        population = next;
        scores = population.iter().map(|ind| fitness(ind)).collect();
        // elite is index 0 and was carried unchanged
        debug_assert!(scores[0] >= elite_score - 1e-12);
    }

    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(m)
        .map(|i| population[i].join(" "))
        .collect())
}

// ---------------------------------------------------------------------------
// PRCAP analog: greedy hill climb in discrete token space
// ---------------------------------------------------------------------------

/// Greedy single-token substitution search maximizing the mean similarity to
/// a set of queries. A proposal is accepted only if the mean strictly
/// increases, so the returned trajectory is non-decreasing. Tokens of
/// any of the `protected_terms` are never substituted.
pub fn prcap_gen(
    queries: &[String],
    base_text: &str,
    protected_terms: &[&str],
    steps: usize,
    seed: u64,
    cfg: &EmbedConfig,
    vocabulary: &[String],
) -> Result<(String, Vec<f64>)> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("prcap requires at least one query".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qvs: Vec<Vec<f64>> = queries.iter().map(|q| encode(q, Role::Query, cfg)).collect();
    let mean_sim = |text: &str| -> f64 {
        let pv = encode(text, Role::Passage, cfg);
        qvs.iter()
            .map(|qv| sim(qv, &pv, cfg.metric).expect("consistent dims"))
            .sum::<f64>()
            / qvs.len() as f64
    };

    let mut tokens: Vec<String> = base_text.split_whitespace().map(str::to_string).collect();
    let mut protected = vec![false; tokens.len()];
    for term in protected_terms {
        for (p, q) in protected.iter_mut().zip(protected_positions(&tokens, term)) {
            *p = *p || q;
        }
    }
    let mut score = mean_sim(&tokens.join(" "));
    let mut trajectory = vec![score];
    for _ in 0..steps {
        if tokens.is_empty() || vocabulary.is_empty() {
            trajectory.push(score);
            continue;
        }
        let pos = rng.random_range(0..tokens.len());
        let cand = vocabulary[rng.random_range(0..vocabulary.len())].clone();
        if protected[pos] {
            trajectory.push(score);
            continue;
        }
        let old = std::mem::replace(&mut tokens[pos], cand);
        let new_score = mean_sim(&tokens.join(" "));
        if new_score > score {
            score = new_score;
        } else {
            tokens[pos] = old;
        }
        trajectory.push(score);
    }
    Ok((tokens.join(" "), trajectory))
}

// ---------------------------------------------------------------------------
// Orchestration and injection
// ---------------------------------------------------------------------------

/// Texts generated for one target question, pre-injection.
#[derive(Debug, Clone)]
pub struct GeneratedPoison {
    pub question_id: usize,
    pub kind: AttackKind,
    pub texts: Vec<String>,
}

/// Whitespace token vocabulary of the clean documents, sorted and deduped.
pub fn corpus_vocabulary(corpus: &Corpus) -> Vec<String> {
    let mut vocab: Vec<String> = corpus
        .clean_documents()
        .flat_map(|d| d.text.split_whitespace().map(str::to_string))
        .collect();
    vocab.sort_unstable();
    vocab.dedup();
    vocab
}

/// Generate poisoned texts for every poison-designated triple in the corpus.
pub fn generate_all(corpus: &Corpus, spec: &AttackSpec, cfg: &EmbedConfig, seed: u64) -> Result<Vec<GeneratedPoison>> {
    let vocab = corpus_vocabulary(corpus);
    let mut out = Vec::new();
    for triple in corpus.triples.iter().filter(|t| t.is_poison_designated()) {
        let qseed = derive_seed(seed, &format!("attack:{}:{}", spec.kind, triple.id));
        let median = clean_median_sim(&triple.question, corpus, cfg)?;
        let texts = match spec.kind {
            AttackKind::PoisonedRag => poisonedrag_gen(triple, spec.m, qseed, cfg, median)?,
            AttackKind::Garag => {
                let seed_text = poisonedrag_gen(triple, 1, qseed, cfg, median)?.remove(0);
                garag_gen(triple, &seed_text, spec.m, spec, derive_seed(qseed, "ga"), cfg)?
            }
            AttackKind::Prcap => {
                let target = triple.target_answer.as_deref().unwrap();
                let bases = poisonedrag_gen(triple, spec.m, qseed, cfg, median)?;
                let queries = vec![triple.question.clone()];
                let mut terms = vec![target, "is"];
                if let Some(entity) = crate::corpus::question_entity(&triple.question) {
                    terms.push(entity);
                }
                bases
                    .iter()
                    .enumerate()
                    .map(|(i, base)| {
                        prcap_gen(
                            &queries,
                            base,
                            &terms,
                            spec.prcap_steps,
                            derive_seed(qseed, &format!("hc{i}")),
                            cfg,
                            &vocab,
                        )
                        .map(|(text, _)| text)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        out.push(GeneratedPoison {
            question_id: triple.id,
            kind: spec.kind,
            texts,
        });
    }
    Ok(out)
}

/// Append poisoned documents to a corpus. Original documents are untouched;
/// new ids continue from the current maximum.
pub fn inject(corpus: &Corpus, batches: &[GeneratedPoison], cfg: &EmbedConfig) -> Result<(Corpus, Vec<PoisonRecord>)> {
    let mut out = corpus.clone();
    let mut records = Vec::with_capacity(batches.len());
    let mut next_id = out.next_doc_id();
    for batch in batches {
        let triple = corpus
            .triple(batch.question_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown question id {}", batch.question_id)))?;
        let qv = encode(&triple.question, Role::Query, cfg);
        let mut rec = PoisonRecord {
            question_id: batch.question_id,
            target_answer: triple.target_answer.clone().unwrap_or_default(),
            kind: batch.kind,
            doc_ids: Vec::new(),
            scores: Vec::new(),
        };
        for text in &batch.texts {
            let doc = Document::new(next_id, text.clone(), Provenance::Poisoned(batch.kind))?;
            rec.scores
                .push(sim(&qv, &encode(text, Role::Passage, cfg), cfg.metric)?);
            rec.doc_ids.push(next_id);
            next_id += 1;
            out.documents.push(doc);
        }
        records.push(rec);
    }
    Ok((out, records))
}
