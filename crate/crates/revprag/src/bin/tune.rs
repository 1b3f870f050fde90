use std::time::Instant;

use revprag::corpus::{gen_synthetic, split};
use revprag::langmodel::{exact_match_rate, train_lm, LmConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let layers: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4);
    let d_model: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let corpus = gen_synthetic(n, 0.5, 42).unwrap();
    let sp = split(&corpus, (0.7, 0.2, 0.1), 42).unwrap();
    let cfg = LmConfig {
        epochs,
        lr,
        batch,
        n_layers: layers,
        d_model,
        ..LmConfig::default()
    };
    let t0 = Instant::now();
    let (lm, report) = train_lm(&corpus, &sp.train_ids, &cfg, 42).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {e}: loss {l:.4}");
    }
    println!("train time: {train_time:.1}s ({:.1}s/epoch)", train_time / epochs as f64);
    // show a few concrete predictions
    {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for &tid in sp.test_ids.iter().take(12) {
            let t = corpus.triple(tid).unwrap();
            let mut ctxs: Vec<String> = vec![t.supporting_text.clone()];
            for _ in 0..4 {
                use rand::Rng;
                let d = &corpus.triples[rng.random_range(0..corpus.triples.len())];
                ctxs.push(d.supporting_text.clone());
            }
            use rand::seq::SliceRandom;
            ctxs.shuffle(&mut rng);
            let p = revprag::langmodel::assemble_prompt(&t.question, &ctxs);
            let (ans, _) = lm.generate(&p, false).unwrap();
            println!("q: {}  want: {}  got: {}", t.question, t.correct_answer, ans);
        }
    }
    let t1 = Instant::now();
    let em_train = exact_match_rate(&lm, &corpus, &sp.train_ids[..100.min(sp.train_ids.len())], 1).unwrap();
    let em_test = exact_match_rate(&lm, &corpus, &sp.test_ids, 1).unwrap();
    println!("EM train(100): {em_train:.3}  EM test: {em_test:.3}  eval time {:.1}s", t1.elapsed().as_secs_f64());
}
