use revprag::corpus::SplitTag;
use revprag::probedata::ActivationDataset;

fn dist(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    (a - b).mapv(|x| x * x).sum()
}

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| "/tmp/out_full/activations.actv".into());
    let ds = ActivationDataset::load(&path).unwrap();
    println!("samples {} rows {} cols {} normalized {}", ds.samples.len(), ds.rows, ds.cols, ds.normalized);
    for tag in [SplitTag::Train, SplitTag::Test, SplitTag::Support] {
        let idx = ds.indices_of(tag);
        let n1 = idx.iter().filter(|&&i| ds.samples[i].label == 1).count();
        println!("{tag:?}: n={} correct={} poisoned={}", idx.len(), n1, idx.len() - n1);
    }
    // raw 1-NN: support as reference, test as queries
    let sup = ds.indices_of(SplitTag::Support);
    let test = ds.indices_of(SplitTag::Test);
    let mut hit = 0;
    for &t in &test {
        let mut best = f64::INFINITY;
        let mut lab = 2u8;
        for &s in &sup {
            let d = dist(&ds.samples[t].matrix, &ds.samples[s].matrix);
            if d < best {
                best = d;
                lab = ds.samples[s].label;
            }
        }
        if lab == ds.samples[t].label {
            hit += 1;
        }
    }
    println!("raw 1-NN accuracy (full map): {:.3}", hit as f64 / test.len() as f64);
    // linear probe: project onto class-mean difference (train), threshold at midpoint
    {
        let train = ds.indices_of(SplitTag::Train);
        let d = ds.rows * ds.cols;
        let mut mu1 = vec![0.0; d];
        let mut mu0 = vec![0.0; d];
        let (mut n1, mut n0) = (0.0, 0.0);
        for &i in &train {
            let flat: Vec<f64> = ds.samples[i].matrix.iter().copied().collect();
            if ds.samples[i].label == 1 {
                n1 += 1.0;
                for (a, b) in mu1.iter_mut().zip(&flat) { *a += b; }
            } else {
                n0 += 1.0;
                for (a, b) in mu0.iter_mut().zip(&flat) { *a += b; }
            }
        }
        for a in mu1.iter_mut() { *a /= n1; }
        for a in mu0.iter_mut() { *a /= n0; }
        let w: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
        let proj = |i: usize| -> f64 {
            ds.samples[i].matrix.iter().zip(&w).map(|(x, wi)| x * wi).sum()
        };
        let thr = (mu1.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>()
            + mu0.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>()) / 2.0;
        let mut hit = 0;
        for &t in &test {
            let pred = if proj(t) > thr { 1 } else { 0 };
            if pred == ds.samples[t].label { hit += 1; }
        }
        println!("linear mean-diff probe accuracy: {:.3}", hit as f64 / test.len() as f64);
    }
    // per-row (layer) 1-NN accuracy
    for r in 0..ds.rows {
        let mut hit = 0;
        for &t in &test {
            let mut best = f64::INFINITY;
            let mut lab = 2u8;
            let tr = ds.samples[t].matrix.row(r).to_owned();
            for &s in &sup {
                let sr = ds.samples[s].matrix.row(r).to_owned();
                let d = (&tr - &sr).mapv(|x| x * x).sum();
                if d < best {
                    best = d;
                    lab = ds.samples[s].label;
                }
            }
            if lab == ds.samples[t].label {
                hit += 1;
            }
        }
        println!("row {r} 1-NN accuracy: {:.3}", hit as f64 / test.len() as f64);
    }
}
