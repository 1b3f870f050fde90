//! Small decoder-only transformer answering questions from retrieved
//! context, with per-layer last-token activation capture.

pub mod model;
pub mod tokenizer;
pub mod train;

pub use model::{assemble_prompt, ActivationMap, LanguageModel, LmConfig, MAX_NEW_TOKENS};
pub use tokenizer::Tokenizer;
pub use train::{exact_match_rate, train_lm, TrainReport};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::corpus::gen_synthetic;
    use crate::langmodel::tokenizer::BOS;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> LmConfig {
        LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            ctx_len: 160,
            lr: 1e-3,
            epochs: 1,
            batch: 4,
        }
    }

    fn tiny_model(seed: u64) -> LanguageModel {
        let c = gen_synthetic(10, 0.5, 3).unwrap();
        let tok = Tokenizer::build(&c, 5);
        LanguageModel::init(tiny_config(), tok, seed).unwrap()
    }

    #[test]
    fn prompt_template_shape() {
        let p = assemble_prompt("what is x ?", &[]);
        assert_eq!(p, "answer the question using the context . x is");
        let contexts = vec!["ctx one".to_string(), "ctx two".to_string()];
        let p2 = assemble_prompt("q ?", &contexts);
        assert_eq!(
            p2,
            "answer the question using the context . context 1 : ctx one context 2 : ctx two question : q ? answer : q"
        );
        assert_eq!(p2, assemble_prompt("q ?", &contexts));
    }

    #[test]
    fn contexts_appear_in_given_order() {
        let contexts: Vec<String> = (0..5).map(|i| format!("passage number {i}")).collect();
        let p = assemble_prompt("q ?", &contexts);
        let mut last = 0;
        for c in &contexts {
            let pos = p.find(c.as_str()).unwrap();
            assert!(pos > last);
            last = pos;
        }
    }

    #[test]
    fn activation_map_shape() {
        let c = gen_synthetic(10, 0.5, 3).unwrap();
        let tok = Tokenizer::build(&c, 5);
        let cfg = LmConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            ..tiny_config()
        };
        let lm = LanguageModel::init(cfg, tok, 1).unwrap();
        let (_, act) = lm.generate("question : what ? answer :", true).unwrap();
        assert_eq!(act.unwrap().matrix.dim(), (5, 64));
    }

    #[test]
    fn generation_deterministic_and_capture_neutral() {
        let lm = tiny_model(7);
        let prompt = "answer the question using the context . question : what ? answer :";
        let (a1, act1) = lm.generate(prompt, true).unwrap();
        let (a2, act2) = lm.generate(prompt, true).unwrap();
        let (a3, act3) = lm.generate(prompt, false).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(act1.as_ref().unwrap().matrix, act2.unwrap().matrix);
        assert_eq!(a1, a3);
        assert!(act3.is_none());
    }

    #[test]
    fn forced_argmax_model_repeats_token() {
        // Zero all weights, then force every position's final hidden state to
        // e_0 via the final layer norm (gain 0, bias e_0) and set w_out so
        // that e_0 scores token 5. Every step then emits token 5 and
        // generation runs to the cap.
        let mut lm = tiny_model(3);
        let n_params = lm.params.len();
        for pid in 0..n_params {
            let dim = lm.params.get(pid).dim();
            lm.params.set(pid, Array2::zeros(dim));
        }
        // final layer norm: gain 0, bias e_0
        let d = lm.config.d_model;
        let lnf_g_pid = n_params - 3;
        let lnf_b_pid = n_params - 2;
        let w_out_pid = n_params - 1;
        let mut bias = Array2::zeros((1, d));
        bias[[0, 0]] = 1.0;
        lm.params.set(lnf_b_pid, bias);
        lm.params.set(lnf_g_pid, Array2::zeros((1, d)));
        let vocab = lm.tokenizer.vocab_size();
        let mut w_out = Array2::zeros((d, vocab));
        w_out[[0, 5]] = 1.0;
        lm.params.set(w_out_pid, w_out);

        // independent prediction: logits = onehot(5), argmax 5 at every step,
        // never EOS, so the answer is token 5 repeated MAX_NEW_TOKENS times
        let (answer, _) = lm.generate("question : x ? answer :", false).unwrap();
        let tok5 = lm.tokenizer.tokens()[5].clone();
        let expected = vec![tok5; MAX_NEW_TOKENS].join(" ");
        assert_eq!(answer, expected);
    }

    #[test]
    fn greedy_invariant_to_positive_logit_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let c = rng.random::<f64>() * 9.9 + 0.1;
            let argmax = |v: &[f64]| {
                let mut b = 0;
                for (i, &x) in v.iter().enumerate() {
                    if x > v[b] {
                        b = i;
                    }
                }
                b
            };
            let scaled: Vec<f64> = z.iter().map(|x| c * x).collect();
            assert_eq!(argmax(&z), argmax(&scaled));
        }
    }

    #[test]
    fn causal_masking_blocks_future_edits() {
        let lm = tiny_model(11);
        let ids: Vec<usize> = vec![BOS, 5, 6, 7, 8, 9];
        let mut tape = Tape::new();
        let out = lm.forward(&mut tape, &ids);
        let logits = lm.logits_at(&mut tape, &out, &[2]);
        let before = tape.value(logits).to_owned();

        let mut edited = ids.clone();
        edited[4] = 10;
        edited[5] = 11;
        let mut tape2 = Tape::new();
        let out2 = lm.forward(&mut tape2, &edited);
        let logits2 = lm.logits_at(&mut tape2, &out2, &[2]);
        assert_eq!(before, tape2.value(logits2).to_owned());
    }

    #[test]
    fn init_loss_close_to_ln_vocab() {
        let c = gen_synthetic(20, 0.5, 9).unwrap();
        let tok = Tokenizer::build(&c, 5);
        let v = tok.vocab_size();
        let lm = LanguageModel::init(tiny_config(), tok, 2).unwrap();
        let t = &c.triples[0];
        let prompt = assemble_prompt(&t.question, std::slice::from_ref(&t.supporting_text));
        let mut ids = vec![BOS];
        ids.extend(lm.tokenizer.encode(&prompt));
        let p = ids.len();
        ids.extend(lm.tokenizer.encode(&t.correct_answer));
        ids.push(crate::langmodel::tokenizer::EOS);
        let positions: Vec<usize> = (p - 1..ids.len() - 1).collect();
        let targets: Vec<usize> = ids[p..].to_vec();
        let mut tape = Tape::new();
        let out = lm.forward(&mut tape, &ids);
        let logits = lm.logits_at(&mut tape, &out, &positions);
        let loss = tape.softmax_cross_entropy(logits, &targets);
        let expect = train::uniform_loss(v);
        let got = tape.scalar(loss);
        // fan-in-scaled output weights give the fresh model mildly non-uniform
        // logits, so allow a modest excess over the uniform baseline
        assert!(
            (got - expect).abs() / expect < 0.2,
            "init loss {got} vs ln V {expect}"
        );
    }

    #[test]
    fn training_deterministic() {
        let c = gen_synthetic(12, 0.5, 21).unwrap();
        let ids: Vec<usize> = (0..12).collect();
        let cfg = LmConfig {
            epochs: 2,
            ..tiny_config()
        };
        let (lm1, r1) = train_lm(&c, &ids, &cfg, 31).unwrap();
        let (lm2, r2) = train_lm(&c, &ids, &cfg, 31).unwrap();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        assert_eq!(lm1.params.tensors(), lm2.params.tensors());
    }

    #[test]
    fn lm_gradient_matches_finite_differences() {
        let c = gen_synthetic(8, 0.5, 17).unwrap();
        let tok = Tokenizer::build(&c, 5);
        let lm = LanguageModel::init(tiny_config(), tok, 13).unwrap();
        let t = &c.triples[0];
        let prompt = assemble_prompt(&t.question, std::slice::from_ref(&t.supporting_text));
        let mut ids = vec![BOS];
        ids.extend(lm.tokenizer.encode(&prompt));
        let p = ids.len();
        ids.extend(lm.tokenizer.encode(&t.correct_answer));
        ids.push(crate::langmodel::tokenizer::EOS);
        let positions: Vec<usize> = (p - 1..ids.len() - 1).collect();
        let targets: Vec<usize> = ids[p..].to_vec();

        let loss_of = |lm: &LanguageModel| {
            let mut tape = Tape::new();
            let out = lm.forward(&mut tape, &ids);
            let logits = lm.logits_at(&mut tape, &out, &positions);
            let l = tape.softmax_cross_entropy(logits, &targets);
            tape.scalar(l)
        };

        let mut grads = lm.params.zero_grads();
        {
            let mut tape = Tape::new();
            let out = lm.forward(&mut tape, &ids);
            let logits = lm.logits_at(&mut tape, &out, &positions);
            let l = tape.softmax_cross_entropy(logits, &targets);
            tape.backward(l, &mut grads);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        let mut lm = lm;
        let mut checked = 0;
        while checked < 25 {
            let pid = rng.random_range(0..lm.params.len());
            let tensor = lm.params.get(pid).clone();
            let idx = rng.random_range(0..tensor.len());
            let (r, c2) = (idx / tensor.ncols(), idx % tensor.ncols());
            // skip params with (near) zero gradient: uninvolved vocab rows
            if grads[pid][[r, c2]].abs() < 1e-10 {
                continue;
            }
            let mut plus = tensor.clone();
            plus[[r, c2]] += h;
            lm.params.set(pid, plus);
            let lp = loss_of(&lm);
            let mut minus = tensor.clone();
            minus[[r, c2]] -= h;
            lm.params.set(pid, minus);
            let lmn = loss_of(&lm);
            lm.params.set(pid, tensor);
            let fd = (lp - lmn) / (2.0 * h);
            let an = grads[pid][[r, c2]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
            assert!(rel <= 1e-3, "pid {pid} [{r},{c2}]: fd {fd} vs analytic {an} (rel {rel})");
            checked += 1;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let lm = tiny_model(23);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.rvlm");
        lm.save(&path).unwrap();
        let loaded = LanguageModel::load(&path).unwrap();
        assert_eq!(lm.config, loaded.config);
        assert_eq!(lm.tokenizer, loaded.tokenizer);
        // tensors pass through f32, so compare after the same rounding
        for (a, b) in lm.params.tensors().iter().zip(loaded.params.tensors()) {
            let a32 = a.mapv(|x| x as f32 as f64);
            assert_eq!(&a32, b);
        }
        // saving the loaded model reproduces the file bit-exactly
        let path2 = dir.path().join("lm2.rvlm");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn prompt_overflow_is_reported() {
        let lm = tiny_model(29);
        let long = vec!["word"; 300].join(" ");
        let err = lm.generate(&long, false).unwrap_err();
        assert!(matches!(err, crate::Error::PromptOverflow { .. }), "{err}");
    }
}
