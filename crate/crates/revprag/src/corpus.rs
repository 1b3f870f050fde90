//! Knowledge database and QA triples: synthetic generation, JSONL
//! ingest/persist, and stratified train/test/support splitting.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Poisoned-text generation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    PoisonedRag,
    Garag,
    Prcap,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::PoisonedRag, AttackKind::Garag, AttackKind::Prcap];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::PoisonedRag => "poisonedrag",
            AttackKind::Garag => "garag",
            AttackKind::Prcap => "prcap",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisonedrag" => Ok(AttackKind::PoisonedRag),
            "garag" => Ok(AttackKind::Garag),
            "prcap" => Ok(AttackKind::Prcap),
            other => Err(Error::InvalidArgument(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// Origin of a knowledge-database document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Clean,
    Poisoned(AttackKind),
}

impl Provenance {
    pub fn is_poisoned(&self) -> bool {
        matches!(self, Provenance::Poisoned(_))
    }

    pub fn as_string(&self) -> String {
        match self {
            Provenance::Clean => "clean".to_string(),
            Provenance::Poisoned(kind) => format!("poisoned:{kind}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "clean" {
            return Ok(Provenance::Clean);
        }
        if let Some(kind) = s.strip_prefix("poisoned:") {
            return Ok(Provenance::Poisoned(kind.parse()?));
        }
        Err(Error::InvalidArgument(format!("unknown provenance {s:?}")))
    }
}

/// One entry of the knowledge database.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: usize,
    pub text: String,
    pub provenance: Provenance,
}

impl Document {
    pub fn new(id: usize, text: String, provenance: Provenance) -> Result<Self> {
        if text.split_whitespace().next().is_none() {
            return Err(Error::InvalidArgument(format!(
                "document {id} has empty text after tokenization"
            )));
        }
        Ok(Document { id, text, provenance })
    }
}

/// A (question, supporting text, correct answer) record, optionally carrying
/// an attacker target answer when the instance is designated poisoned.
#[derive(Debug, Clone, PartialEq)]
pub struct QaTriple {
    pub id: usize,
    pub question: String,
    pub supporting_text: String,
    pub correct_answer: String,
    pub target_answer: Option<String>,
}

impl QaTriple {
    pub fn is_poison_designated(&self) -> bool {
        self.target_answer.is_some()
    }
}

/// Immutable-after-construction corpus of QA triples plus the knowledge
/// database documents (one clean document per triple, poisoned documents
/// appended by injection).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub triples: Vec<QaTriple>,
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn next_doc_id(&self) -> usize {
        self.documents.iter().map(|d| d.id + 1).max().unwrap_or(0)
    }

    pub fn triple(&self, id: usize) -> Option<&QaTriple> {
        self.triples.iter().find(|t| t.id == id)
    }

    pub fn clean_documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(|d| !d.provenance.is_poisoned())
    }

    pub fn poisoned_documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(|d| d.provenance.is_poisoned())
    }
}

/// Disjoint instance-id partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub support_ids: Vec<usize>,
}

impl CorpusSplit {
    pub fn tag_of(&self, id: usize) -> Option<SplitTag> {
        if self.train_ids.contains(&id) {
            Some(SplitTag::Train)
        } else if self.test_ids.contains(&id) {
            Some(SplitTag::Test)
        } else if self.support_ids.contains(&id) {
            Some(SplitTag::Support)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train = 0,
    Test = 1,
    Support = 2,
}

impl SplitTag {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(SplitTag::Train),
            1 => Ok(SplitTag::Test),
            2 => Ok(SplitTag::Support),
            other => Err(Error::InvalidArgument(format!("bad split tag {other}"))),
        }
    }
}

/// The entity a question asks about: its last word, skipping a trailing "?".
/// Used by the prompt template's answer cue and by attack-side token
/// protection.
pub fn question_entity(question: &str) -> Option<&str> {
    question.split_whitespace().rev().find(|w| *w != "?")
}

/// Restate a "what is X ?" question as the declarative stem "X is", the exact
/// word sequence a knowledge-base record uses right before the fact's value.
/// The prompt's answer cue ends with this stem so producing the answer is a
/// verbatim continuation of the supporting record.
pub fn declarative_stem(question: &str) -> Option<String> {
    let body = question
        .trim()
        .strip_prefix("what is ")?
        .trim_end()
        .strip_suffix('?')?
        .trim_end();
    if body.is_empty() {
        None
    } else {
        Some(format!("{body} is"))
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

const ATTRIBUTES: &[&str] = &[
    "color", "size", "shape", "weight", "sound", "taste", "origin", "texture", "speed", "smell",
    "age", "height",
];

const VALUE_POOLS: &[&[&str]] = &[
    &["red", "blue", "green", "amber", "violet", "crimson", "teal", "ivory", "silver", "golden"],
    &["tiny", "small", "medium", "large", "huge", "giant", "narrow", "wide", "compact", "vast"],
    &["round", "square", "oval", "flat", "curved", "angular", "spiral", "conical", "cubic", "hollow"],
    &["light", "heavy", "feathery", "dense", "massive", "weightless", "hefty", "slight", "solid", "airy"],
    &["quiet", "loud", "humming", "ringing", "buzzing", "silent", "whistling", "booming", "soft", "sharp"],
    &["sweet", "sour", "bitter", "salty", "spicy", "mild", "savory", "tangy", "bland", "smoky"],
    &["north", "south", "east", "west", "inland", "coastal", "mountain", "valley", "desert", "forest"],
    &["smooth", "rough", "silky", "grainy", "sticky", "slippery", "bumpy", "velvety", "coarse", "polished"],
    &["slow", "fast", "rapid", "gradual", "sudden", "steady", "brisk", "sluggish", "swift", "crawling"],
    &["floral", "musty", "fresh", "earthy", "minty", "pungent", "faint", "fruity", "woody", "crisp"],
    &["ancient", "young", "old", "new", "modern", "primeval", "recent", "timeless", "mature", "newborn"],
    &["short", "tall", "towering", "low", "lofty", "stubby", "elevated", "middling", "soaring", "squat"],
];

const SYLLABLES: &[&str] = &[
    "ba", "zo", "mi", "ta", "ke", "lu", "ra", "ven", "dor", "fel", "gos", "hin", "jor", "kal",
    "mer", "nix", "pol", "qua", "rud", "sel", "tov", "ulm", "var", "wex", "yal", "zeb",
];

/// Deterministically generate a synthetic corpus of `n_facts` templated
/// subject-attribute-value triples. A `poisoned_fraction` share of instances
/// (rounded) is designated poisoned and given a distinct wrong target answer.
pub fn gen_synthetic(n_facts: usize, poisoned_fraction: f64, seed: u64) -> Result<Corpus> {
    if n_facts == 0 {
        return Err(Error::EmptyCorpus("n_facts must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&poisoned_fraction) {
        return Err(Error::InvalidArgument(format!(
            "poisoned_fraction {poisoned_fraction} not in [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // One distinct subject per fact, so a subject names exactly one record.
    let mut subjects: Vec<String> = Vec::with_capacity(n_facts);
    let mut seen: HashSet<String> = HashSet::new();
    while subjects.len() < n_facts {
        let a = SYLLABLES[rng.random_range(0..SYLLABLES.len())];
        let b = SYLLABLES[rng.random_range(0..SYLLABLES.len())];
        let c = SYLLABLES[rng.random_range(0..SYLLABLES.len())];
        let name = format!("{a}{b}{c}");
        if seen.insert(name.clone()) {
            subjects.push(name);
        }
    }

    let pairs: Vec<(usize, usize)> = (0..n_facts)
        .map(|s| (s, rng.random_range(0..ATTRIBUTES.len())))
        .collect();

    let n_poisoned = (n_facts as f64 * poisoned_fraction).round() as usize;
    let mut designation: Vec<bool> = (0..n_facts).map(|i| i < n_poisoned).collect();
    designation.shuffle(&mut rng);

    let mut triples = Vec::with_capacity(n_facts);
    let mut documents = Vec::with_capacity(n_facts);
    for (id, &(si, ai)) in pairs.iter().enumerate() {
        let subject = &subjects[si];
        let attr = ATTRIBUTES[ai];
        let pool = VALUE_POOLS[ai];
        let value = pool[rng.random_range(0..pool.len())];
        // every record states its fact as "the {attr} of {subject} is {value}",
        // the declarative stem the prompt's answer cue replays
        let supporting_text = match rng.random_range(0..2u8) {
            0 => format!("the {attr} of {subject} is {value} ."),
            _ => format!("records confirm that the {attr} of {subject} is {value} ."),
        };
        let question = format!("what is the {attr} of {subject} ?");
        let target_answer = if designation[id] {
            let mut wrong = pool[rng.random_range(0..pool.len())];
            while wrong == value {
                wrong = pool[rng.random_range(0..pool.len())];
            }
            Some(wrong.to_string())
        } else {
            None
        };
        documents.push(Document::new(id, supporting_text.clone(), Provenance::Clean)?);
        triples.push(QaTriple {
            id,
            question,
            supporting_text,
            correct_answer: value.to_string(),
            target_answer,
        });
    }
    Ok(Corpus { triples, documents })
}

// ---------------------------------------------------------------------------
// JSONL ingest / persist
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TripleRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    question: String,
    supporting_text: String,
    correct_answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    id: usize,
    text: String,
    provenance: String,
}

const TRIPLE_FIELDS: &[&str] = &["question", "supporting_text", "correct_answer"];

/// Read a corpus from JSONL. Each line is either a triple record (keys
/// `question`, `supporting_text`, `correct_answer`, optional `target_answer`,
/// `id`) or a standalone document record (keys `id`, `text`, `provenance`),
/// as written by [`save_jsonl`]. Triple ids default to line order from 0.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);

    let mut corpus = Corpus::default();
    let mut questions_seen: HashSet<String> = HashSet::new();
    let mut next_id = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("invalid JSON: {e}"),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;

        if obj.contains_key("text") && !obj.contains_key("question") {
            let rec: DocRecord = serde_json::from_value(value.clone()).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let provenance = Provenance::parse(&rec.provenance).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            corpus.documents.push(Document::new(rec.id, rec.text, provenance)?);
            continue;
        }

        for field in TRIPLE_FIELDS {
            if !obj.contains_key(*field) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("missing field {field}"),
                });
            }
        }
        let rec: TripleRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.question.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty question".into(),
            });
        }
        if rec.target_answer.as_deref() == Some(rec.correct_answer.as_str()) {
            return Err(Error::Parse {
                line: line_no,
                message: "target_answer equals correct_answer".into(),
            });
        }
        if !questions_seen.insert(rec.question.clone()) {
            eprintln!("warning: line {line_no}: duplicate question text {:?} (both kept)", rec.question);
        }
        let id = rec.id.unwrap_or(next_id);
        next_id = id + 1;
        corpus
            .documents
            .push(Document::new(id, rec.supporting_text.clone(), Provenance::Clean)?);
        corpus.triples.push(QaTriple {
            id,
            question: rec.question,
            supporting_text: rec.supporting_text,
            correct_answer: rec.correct_answer,
            target_answer: rec.target_answer,
        });
    }
    Ok(corpus)
}

/// Persist a corpus as JSONL: one triple record per instance followed by one
/// document record per poisoned document. Re-ingesting the output and saving
/// again reproduces the file byte-exactly.
pub fn save_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for t in &corpus.triples {
        let rec = TripleRecord {
            id: Some(t.id),
            question: t.question.clone(),
            supporting_text: t.supporting_text.clone(),
            correct_answer: t.correct_answer.clone(),
            target_answer: t.target_answer.clone(),
            provenance: None,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Other(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    for d in corpus.poisoned_documents() {
        let rec = DocRecord {
            id: d.id,
            text: d.text.clone(),
            provenance: d.provenance.as_string(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Other(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Stratified split of instance ids into train/test/support.
///
/// Global split sizes: test and support are floored, train takes the rest.
/// Within that constraint each class (benign vs poison-designated) is spread
/// across splits proportionally, leftover slots going to the classes with the
/// largest fractional remainders.
pub fn split(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<CorpusSplit> {
    let (r_train, r_test, r_support) = ratios;
    for r in [r_train, r_test, r_support] {
        if r <= 0.0 {
            return Err(Error::InvalidArgument(format!("split ratio {r} must be positive")));
        }
    }
    if (r_train + r_test + r_support - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("split ratios must sum to 1".into()));
    }
    let n = corpus.triples.len();
    if n == 0 {
        return Err(Error::EmptyCorpus("cannot split an empty corpus".into()));
    }

    let n_test = (n as f64 * r_test).floor() as usize;
    let n_support = (n as f64 * r_support).floor() as usize;

    // Two strata: benign (false) and poison-designated (true).
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
    for t in &corpus.triples {
        classes[usize::from(t.is_poison_designated())].push(t.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in classes.iter_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
    }

    let quota = |total: usize, ratio: f64| -> Vec<usize> {
        let mut counts: Vec<usize> = classes.iter().map(|c| (c.len() as f64 * ratio).floor() as usize).collect();
        let mut leftover = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = classes[a].len() as f64 * ratio;
            let fb = classes[b].len() as f64 * ratio;
            (fb - fb.floor()).partial_cmp(&(fa - fa.floor())).unwrap().then(a.cmp(&b))
        });
        for &c in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            if counts[c] < classes[c].len() {
                counts[c] += 1;
                leftover -= 1;
            }
        }
        counts
    };
    let test_counts = quota(n_test, r_test);
    let support_counts = quota(n_support, r_support);

    let mut out = CorpusSplit {
        train_ids: Vec::new(),
        test_ids: Vec::new(),
        support_ids: Vec::new(),
    };
    for (c, ids) in classes.iter().enumerate() {
        let (tc, sc) = (test_counts[c].min(ids.len()), support_counts[c]);
        let sc = sc.min(ids.len() - tc);
        out.test_ids.extend_from_slice(&ids[..tc]);
        out.support_ids.extend_from_slice(&ids[tc..tc + sc]);
        out.train_ids.extend_from_slice(&ids[tc + sc..]);
    }
    out.train_ids.sort_unstable();
    out.test_ids.sort_unstable();
    out.support_ids.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_designation() {
        let c = gen_synthetic(3000, 0.5, 1).unwrap();
        assert_eq!(c.triples.len(), 3000);
        assert_eq!(c.documents.len(), 3000);
        let poisoned = c.triples.iter().filter(|t| t.is_poison_designated()).count();
        assert_eq!(poisoned, 1500);
    }

    #[test]
    fn synthetic_deterministic() {
        let a = gen_synthetic(1, 0.5, 7).unwrap();
        let b = gen_synthetic(1, 0.5, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_answer_in_supporting_text() {
        let c = gen_synthetic(10, 0.5, 1).unwrap();
        for t in &c.triples {
            assert!(
                t.supporting_text.contains(&t.correct_answer),
                "answer {:?} not in {:?}",
                t.correct_answer,
                t.supporting_text
            );
            if let Some(ta) = &t.target_answer {
                assert_ne!(ta, &t.correct_answer);
            }
        }
    }

    #[test]
    fn synthetic_zero_is_error() {
        assert!(matches!(gen_synthetic(0, 0.5, 1), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn split_sizes_3000() {
        let c = gen_synthetic(3000, 0.5, 1).unwrap();
        let s = split(&c, (0.7, 0.2, 0.1), 2).unwrap();
        assert_eq!(s.train_ids.len(), 2100);
        assert_eq!(s.test_ids.len(), 600);
        assert_eq!(s.support_ids.len(), 300);
    }

    #[test]
    fn split_sizes_10_rounding() {
        let c = gen_synthetic(10, 0.5, 1).unwrap();
        let s = split(&c, (0.7, 0.2, 0.1), 2).unwrap();
        assert_eq!(s.train_ids.len(), 7);
        assert_eq!(s.test_ids.len(), 2);
        assert_eq!(s.support_ids.len(), 1);
    }

    #[test]
    fn split_stratified_within_one() {
        let c = gen_synthetic(3000, 0.5, 3).unwrap();
        let s = split(&c, (0.7, 0.2, 0.1), 4).unwrap();
        for ids in [&s.train_ids, &s.test_ids, &s.support_ids] {
            let pois = ids
                .iter()
                .filter(|&&id| c.triple(id).unwrap().is_poison_designated())
                .count();
            let half = ids.len() as f64 / 2.0;
            assert!((pois as f64 - half).abs() <= 1.0, "{pois} of {}", ids.len());
        }
    }

    #[test]
    fn split_disjoint_and_complete() {
        let c = gen_synthetic(101, 0.3, 9).unwrap();
        let s = split(&c, (0.7, 0.2, 0.1), 5).unwrap();
        let mut all: Vec<usize> = s
            .train_ids
            .iter()
            .chain(&s.test_ids)
            .chain(&s.support_ids)
            .copied()
            .collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..101).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn split_deterministic() {
        let c = gen_synthetic(50, 0.5, 1).unwrap();
        let a = split(&c, (0.7, 0.2, 0.1), 11).unwrap();
        let b = split(&c, (0.7, 0.2, 0.1), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_bad_ratio() {
        let c = gen_synthetic(10, 0.5, 1).unwrap();
        assert!(split(&c, (0.9, 0.1, 0.0), 1).is_err());
        assert!(split(&c, (0.5, 0.2, 0.1), 1).is_err());
    }

    #[test]
    fn ingest_three_lines() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for i in 0..3 {
            writeln!(
                f,
                r#"{{"question":"q{i} ?","supporting_text":"t{i} x","correct_answer":"a{i}"}}"#
            )
            .unwrap();
        }
        let c = ingest_jsonl(f.path()).unwrap();
        assert_eq!(c.triples.len(), 3);
        assert_eq!(c.documents.len(), 3);
        assert_eq!(c.triples.iter().map(|t| t.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn ingest_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let c = ingest_jsonl(f.path()).unwrap();
        assert!(c.triples.is_empty());
        assert!(c.documents.is_empty());
    }

    #[test]
    fn ingest_missing_question() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"question":"q ?","supporting_text":"t","correct_answer":"a"}}"#).unwrap();
        writeln!(f, r#"{{"supporting_text":"t","correct_answer":"a"}}"#).unwrap();
        let err = ingest_jsonl(f.path()).unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing field question");
    }

    #[test]
    fn persist_round_trips_bit_exactly() {
        let mut c = gen_synthetic(20, 0.5, 5).unwrap();
        // include a poisoned document so the doc-record path is exercised
        let id = c.next_doc_id();
        c.documents.push(
            Document::new(id, "evil text here .".into(), Provenance::Poisoned(AttackKind::Garag)).unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c1.jsonl");
        let p2 = dir.path().join("c2.jsonl");
        save_jsonl(&c, &p1).unwrap();
        let c2 = ingest_jsonl(&p1).unwrap();
        save_jsonl(&c2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(c, c2);
    }
}
