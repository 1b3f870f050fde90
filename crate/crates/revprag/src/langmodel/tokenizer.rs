//! Whitespace tokenizer over a closed vocabulary built from the corpus.

use std::collections::HashMap;

use crate::corpus::Corpus;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const N_SPECIAL: usize = 4;

const SPECIAL_NAMES: [&str; N_SPECIAL] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Words of the RAG prompt template, always present in the vocabulary.
pub const TEMPLATE_WORDS: &[&str] = &[
    "answer", "the", "question", "using", "context", ".", ":", "?",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Build a dense vocabulary from every document, question and answer in
    /// the corpus, plus the prompt template words and context numerals.
    pub fn build(corpus: &Corpus, max_contexts: usize) -> Tokenizer {
        let mut words: Vec<String> = Vec::new();
        for d in &corpus.documents {
            words.extend(d.text.split_whitespace().map(str::to_string));
        }
        for t in &corpus.triples {
            words.extend(t.question.split_whitespace().map(str::to_string));
            words.extend(t.correct_answer.split_whitespace().map(str::to_string));
            if let Some(ta) = &t.target_answer {
                words.extend(ta.split_whitespace().map(str::to_string));
            }
        }
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        for i in 1..=max_contexts.max(1) {
            words.push(i.to_string());
        }
        words.sort_unstable();
        words.dedup();

        Tokenizer::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Tokenizer {
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !SPECIAL_NAMES.contains(&w.as_str())));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Tokenizer { tokens, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id_of(w)).collect()
    }

    /// Join token strings with single spaces, dropping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= N_SPECIAL && id < self.tokens.len())
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_synthetic;

    #[test]
    fn ids_dense_and_round_trip() {
        let c = gen_synthetic(20, 0.5, 1).unwrap();
        let tok = Tokenizer::build(&c, 5);
        assert!(tok.vocab_size() > N_SPECIAL);
        for (i, t) in tok.tokens().iter().enumerate() {
            assert_eq!(tok.id_of(t), i);
        }
        let text = &c.triples[0].question;
        assert_eq!(tok.decode(&tok.encode(text)), *text);
    }

    #[test]
    fn oov_maps_to_unk() {
        let c = gen_synthetic(5, 0.5, 1).unwrap();
        let tok = Tokenizer::build(&c, 5);
        assert_eq!(tok.encode("zzzznotaword"), vec![UNK]);
    }
}
