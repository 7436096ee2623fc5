//! Helpers shared by the integration tests.

use mbf::data::SparseVector;

/// Multinomial logistic regression trained by full-batch gradient descent.
/// Returns held-out accuracy.
pub fn softmax_probe(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], m: usize) -> f64 {
    let dim = train[0].0.len();
    let mut w = vec![vec![0.0; dim]; m];
    let mut b = vec![0.0; m];
    let logits = |w: &[Vec<f64>], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|c| b[c] + w[c].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
            .collect()
    };
    let lr = 0.5;
    for _ in 0..200 {
        let mut gw = vec![vec![0.0; dim]; m];
        let mut gb = vec![0.0; m];
        for (x, y) in train {
            let z = logits(&w, &b, x);
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..m {
                let g = e[c] / s - f64::from(u8::from(c == *y));
                gb[c] += g;
                for (gi, xi) in gw[c].iter_mut().zip(x) {
                    *gi += g * xi;
                }
            }
        }
        let n = train.len() as f64;
        for c in 0..m {
            b[c] -= lr * gb[c] / n;
            for (wi, gi) in w[c].iter_mut().zip(&gw[c]) {
                *wi -= lr * gi / n;
            }
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z = logits(&w, &b, x);
            let best = (0..m).fold(0, |best, c| if z[c] > z[best] { c } else { best });
            best == *y
        })
        .count();
    correct as f64 / test.len() as f64
}

pub fn dense_log1p(v: &SparseVector, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (i, x) in v.iter() {
        out[i] = x.ln_1p();
    }
    out
}
