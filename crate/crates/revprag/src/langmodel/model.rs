//! Decoder-only transformer: pre-norm blocks, learned positional embeddings,
//! shifted-token embedding channels (one-back and two-back token identity
//! added to each position's input), greedy decoding, and residual-stream
//! activation capture at the last prompt token.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{randn_matrix, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::langmodel::tokenizer::{Tokenizer, BOS, EOS, PAD};

/// Hard cap on greedily generated tokens.
pub const MAX_NEW_TOKENS: usize = 32;

/// Embedding tables use a fixed small scale; weight matrices are fan-in
/// scaled (1/sqrt(rows)) so attention-mediated paths carry usable gradient
/// from the first steps even in a shallow model.
const EMB_STD: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_ctx")]
    pub ctx_len: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
}

fn d_layers() -> usize {
    2
}
fn d_model() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_ctx() -> usize {
    256
}
fn d_lr() -> f64 {
    3e-3
}
fn d_epochs() -> usize {
    60
}
fn d_batch() -> usize {
    8
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: d_layers(),
            d_model: d_model(),
            n_heads: d_heads(),
            ctx_len: d_ctx(),
            lr: d_lr(),
            epochs: d_epochs(),
            batch: d_batch(),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ctx_len == 0 {
            return Err(Error::Config("LM dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-layer last-token activations: row 0 is the embedding-layer output,
/// rows 1..=L the post-block residual stream, all at the final prompt token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub matrix: Array2<f64>,
    /// 1 = correct response, 0 = poisoned response.
    pub label: Option<u8>,
    pub sample_id: usize,
}

struct LayerPids {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct Pids {
    tok_emb: usize,
    prev_emb: usize,
    prev2_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerPids>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
}

fn register_params(config: &LmConfig, vocab: usize, mut init: impl FnMut(usize, usize, Init) -> Array2<f64>) -> (ParamSet, Pids) {
    let d = config.d_model;
    let mut p = ParamSet::new();
    let tok_emb = p.add("tok_emb", init(vocab, d, Init::Embed));
    let prev_emb = p.add("prev_emb", init(vocab, d, Init::Embed));
    let prev2_emb = p.add("prev2_emb", init(vocab, d, Init::Embed));
    let pos_emb = p.add("pos_emb", init(config.ctx_len, d, Init::Embed));
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let lp = LayerPids {
            ln1_g: p.add(format!("l{l}.ln1.gain"), init(1, d, Init::One)),
            ln1_b: p.add(format!("l{l}.ln1.bias"), init(1, d, Init::Zero)),
            wq: p.add(format!("l{l}.attn.wq"), init(d, d, Init::Weight)),
            bq: p.add(format!("l{l}.attn.bq"), init(1, d, Init::Zero)),
            wk: p.add(format!("l{l}.attn.wk"), init(d, d, Init::Weight)),
            bk: p.add(format!("l{l}.attn.bk"), init(1, d, Init::Zero)),
            wv: p.add(format!("l{l}.attn.wv"), init(d, d, Init::Weight)),
            bv: p.add(format!("l{l}.attn.bv"), init(1, d, Init::Zero)),
            wo: p.add(format!("l{l}.attn.wo"), init(d, d, Init::Weight)),
            bo: p.add(format!("l{l}.attn.bo"), init(1, d, Init::Zero)),
            ln2_g: p.add(format!("l{l}.ln2.gain"), init(1, d, Init::One)),
            ln2_b: p.add(format!("l{l}.ln2.bias"), init(1, d, Init::Zero)),
            w1: p.add(format!("l{l}.mlp.w1"), init(d, 4 * d, Init::Weight)),
            b1: p.add(format!("l{l}.mlp.b1"), init(1, 4 * d, Init::Zero)),
            w2: p.add(format!("l{l}.mlp.w2"), init(4 * d, d, Init::Weight)),
            b2: p.add(format!("l{l}.mlp.b2"), init(1, d, Init::Zero)),
        };
        layers.push(lp);
    }
    let lnf_g = p.add("lnf.gain", init(1, d, Init::One));
    let lnf_b = p.add("lnf.bias", init(1, d, Init::Zero));
    let w_out = p.add("w_out", init(d, vocab, Init::Weight));
    (
        p,
        Pids {
            tok_emb,
            prev_emb,
            prev2_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
        },
    )
}

#[derive(Clone, Copy)]
enum Init {
    /// Embedding table: fixed small scale.
    Embed,
    /// Weight matrix: fan-in scaled normal.
    Weight,
    Zero,
    One,
}

pub struct LanguageModel {
    pub config: LmConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamSet,
    pids: Pids,
}

/// Tape handles produced by a forward pass.
pub struct ForwardOutput {
    /// Embedding-layer output (token + positional), shape (n, d).
    pub embedded: Var,
    /// Residual stream after each block, shape (n, d) each.
    pub residuals: Vec<Var>,
    /// Final layer-normed hidden states, shape (n, d).
    pub final_hidden: Var,
}

impl LanguageModel {
    pub fn init(config: LmConfig, tokenizer: Tokenizer, seed: u64) -> Result<LanguageModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = tokenizer.vocab_size();
        let (params, pids) = register_params(&config, vocab, |n, m, kind| match kind {
            Init::Embed => randn_matrix(&mut rng, n, m, EMB_STD),
            Init::Weight => randn_matrix(&mut rng, n, m, 1.0 / (n as f64).sqrt()),
            Init::Zero => Array2::zeros((n, m)),
            Init::One => Array2::from_elem((n, m), 1.0),
        });
        Ok(LanguageModel {
            config,
            tokenizer,
            params,
            pids,
        })
    }

    /// Forward pass over a token id sequence, recording onto `tape`.
    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> ForwardOutput {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dk = d / cfg.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let p = |tape: &mut Tape, pid: usize| tape.param(self.params.get(pid).clone(), pid);

        let tok_emb = p(tape, self.pids.tok_emb);
        let prev_emb = p(tape, self.pids.prev_emb);
        let prev2_emb = p(tape, self.pids.prev2_emb);
        let pos_emb = p(tape, self.pids.pos_emb);
        let toks = tape.gather_rows(tok_emb, ids);
        // shifted-token channels: each position also carries the identity of
        // the one-back and two-back tokens, so a single attention layer can
        // express prefix matching without head composition
        let prev_ids: Vec<usize> = std::iter::once(PAD)
            .chain(ids[..ids.len() - 1].iter().copied())
            .collect();
        let prev2_ids: Vec<usize> = (0..ids.len()).map(|i| if i >= 2 { ids[i - 2] } else { PAD }).collect();
        let prevs = tape.gather_rows(prev_emb, &prev_ids);
        let prev2s = tape.gather_rows(prev2_emb, &prev2_ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let poss = tape.gather_rows(pos_emb, &positions);
        let mut x = tape.add(toks, prevs);
        x = tape.add(x, prev2s);
        x = tape.add(x, poss);
        let embedded = x;

        let mut residuals = Vec::with_capacity(cfg.n_layers);
        for lp in &self.pids.layers {
            let (ln1_g, ln1_b) = (p(tape, lp.ln1_g), p(tape, lp.ln1_b));
            let h = tape.layer_norm(x, ln1_g, ln1_b);
            let (wq, bq) = (p(tape, lp.wq), p(tape, lp.bq));
            let (wk, bk) = (p(tape, lp.wk), p(tape, lp.bk));
            let (wv, bv) = (p(tape, lp.wv), p(tape, lp.bv));
            let q = tape.matmul(h, wq);
            let q = tape.add_row(q, bq);
            let k = tape.matmul(h, wk);
            let k = tape.add_row(k, bk);
            let v = tape.matmul(h, wv);
            let v = tape.add_row(v, bv);

            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hi in 0..cfg.n_heads {
                let (s, e) = (hi * dk, (hi + 1) * dk);
                let qh = tape.slice_cols(q, s, e);
                let kh = tape.slice_cols(k, s, e);
                let vh = tape.slice_cols(v, s, e);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let att = tape.causal_softmax(scores);
                heads.push(tape.matmul(att, vh));
            }
            let ctx = tape.concat_cols(&heads);
            let (wo, bo) = (p(tape, lp.wo), p(tape, lp.bo));
            let proj = tape.matmul(ctx, wo);
            let proj = tape.add_row(proj, bo);
            x = tape.add(x, proj);

            let (ln2_g, ln2_b) = (p(tape, lp.ln2_g), p(tape, lp.ln2_b));
            let h2 = tape.layer_norm(x, ln2_g, ln2_b);
            let (w1, b1) = (p(tape, lp.w1), p(tape, lp.b1));
            let (w2, b2) = (p(tape, lp.w2), p(tape, lp.b2));
            let m = tape.matmul(h2, w1);
            let m = tape.add_row(m, b1);
            let m = tape.gelu(m);
            let m = tape.matmul(m, w2);
            let m = tape.add_row(m, b2);
            x = tape.add(x, m);
            residuals.push(x);
        }

        let (lnf_g, lnf_b) = (p(tape, self.pids.lnf_g), p(tape, self.pids.lnf_b));
        let final_hidden = tape.layer_norm(x, lnf_g, lnf_b);
        ForwardOutput {
            embedded,
            residuals,
            final_hidden,
        }
    }

    /// Logits at selected sequence positions: (len(positions), vocab).
    pub fn logits_at(&self, tape: &mut Tape, out: &ForwardOutput, positions: &[usize]) -> Var {
        let picked = tape.gather_rows(out.final_hidden, positions);
        let w_out = tape.param(self.params.get(self.pids.w_out).clone(), self.pids.w_out);
        tape.matmul(picked, w_out)
    }

    fn check_fits(&self, n_prompt_tokens: usize) -> Result<()> {
        let limit = self.config.ctx_len.saturating_sub(MAX_NEW_TOKENS);
        if n_prompt_tokens > limit {
            return Err(Error::PromptOverflow {
                got: n_prompt_tokens,
                limit,
            });
        }
        Ok(())
    }

    /// Greedy decoding until EOS or [`MAX_NEW_TOKENS`]. The activation map is
    /// captured at the final token of the input prompt, before any generation,
    /// and capture never affects the generated answer.
    pub fn generate(&self, prompt: &str, capture: bool) -> Result<(String, Option<ActivationMap>)> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenizer.encode(prompt));
        self.check_fits(ids.len())?;
        let prompt_last = ids.len() - 1;

        let mut activations = None;
        let mut generated = Vec::new();
        for step in 0..MAX_NEW_TOKENS {
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, &ids);
            if step == 0 && capture {
                let d = self.config.d_model;
                let mut matrix = Array2::zeros((self.config.n_layers + 1, d));
                matrix.row_mut(0).assign(&tape.value(out.embedded).row(prompt_last));
                for (l, r) in out.residuals.iter().enumerate() {
                    matrix.row_mut(l + 1).assign(&tape.value(*r).row(prompt_last));
                }
                activations = Some(ActivationMap {
                    matrix,
                    label: None,
                    sample_id: 0,
                });
            }
            let logits = self.logits_at(&mut tape, &out, &[ids.len() - 1]);
            let row = tape.value(logits).row(0).to_owned();
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == EOS {
                break;
            }
            ids.push(best);
            generated.push(best);
        }
        Ok((self.tokenizer.decode(&generated), activations))
    }

    // ------------------------------------------------------------------
    // Checkpoint: magic "RVLM", version, config, vocabulary, tensors in
    // registration order.
    // ------------------------------------------------------------------

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut w = BinWriter::new(BufWriter::new(file));
        w.magic(b"RVLM")?;
        w.u32(1)?;
        w.u32(self.config.n_layers as u32)?;
        w.u32(self.config.d_model as u32)?;
        w.u32(self.config.n_heads as u32)?;
        w.u32(self.config.ctx_len as u32)?;
        w.u64(self.config.lr.to_bits())?;
        w.u32(self.config.epochs as u32)?;
        w.u32(self.config.batch as u32)?;
        w.u32(self.tokenizer.vocab_size() as u32)?;
        for t in self.tokenizer.tokens() {
            w.string(t)?;
        }
        w.u32(self.params.len() as u32)?;
        for t in self.params.tensors() {
            w.tensor(t)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LanguageModel> {
        let file = File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut r = BinReader::new(BufReader::new(file));
        r.magic(b"RVLM")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported RVLM version {version}")));
        }
        let config = LmConfig {
            n_layers: r.u32()? as usize,
            d_model: r.u32()? as usize,
            n_heads: r.u32()? as usize,
            ctx_len: r.u32()? as usize,
            lr: f64::from_bits(r.u64()?),
            epochs: r.u32()? as usize,
            batch: r.u32()? as usize,
        };
        config.validate()?;
        let vocab = r.u32()? as usize;
        let mut words = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            words.push(r.string()?);
        }
        // words include the specials at the front; from_words re-prepends them
        let tokenizer = Tokenizer::from_words(words.split_off(crate::langmodel::tokenizer::N_SPECIAL));
        if tokenizer.vocab_size() != vocab {
            return Err(Error::Checkpoint("vocabulary size mismatch".into()));
        }
        let n_tensors = r.u32()? as usize;
        let (mut params, pids) = register_params(&config, vocab, |n, m, _| Array2::zeros((n, m)));
        if params.len() != n_tensors {
            return Err(Error::Checkpoint(format!(
                "tensor count mismatch: expected {}, file has {n_tensors}",
                params.len()
            )));
        }
        for pid in 0..n_tensors {
            let t = r.tensor()?;
            if t.dim() != params.get(pid).dim() {
                return Err(Error::Checkpoint(format!("tensor {pid} shape mismatch")));
            }
            params.set(pid, t);
        }
        Ok(LanguageModel {
            config,
            tokenizer,
            params,
            pids,
        })
    }
}

/// Fixed RAG prompt template: instruction, enumerated contexts in rank order,
/// answer cue. The cue restates the question as a declarative stem ("the
/// color of X is") so the answer is a verbatim continuation of the supporting
/// record; the stem is the only place the question's words appear, keeping
/// the record the longest match for it. Byte-exact for identical inputs.
pub fn assemble_prompt(question: &str, contexts: &[String]) -> String {
    let mut s = String::from("answer the question using the context .");
    for (i, c) in contexts.iter().enumerate() {
        s.push_str(&format!(" context {} : {}", i + 1, c.trim()));
    }
    s.push(' ');
    s.push_str(&answer_cue(question));
    s
}

/// The answer cue that ends every prompt: the question's declarative stem, or
/// a question echo ending on its entity when no stem can be derived.
pub(crate) fn answer_cue(question: &str) -> String {
    if let Some(stem) = crate::corpus::declarative_stem(question) {
        return stem;
    }
    let mut s = format!("question : {} answer :", question.trim());
    if let Some(entity) = crate::corpus::question_entity(question) {
        s.push(' ');
        s.push_str(entity);
    }
    s
}
