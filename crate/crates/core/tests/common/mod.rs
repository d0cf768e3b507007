//! Oracles shared by the integration tests.

use wsban::Tensor;

/// Literal per-part loop: mask the features with one attention channel,
/// then average over pixels.
pub fn bap_oracle(f: &Tensor<f64>, a: &Tensor<f64>) -> Vec<f64> {
    let (b, h, w, n) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    let m = a.shape()[3];
    let mut out = Vec::with_capacity(b * m * n);
    for bi in 0..b {
        for k in 0..m {
            let mut masked = vec![0.0; h * w * n];
            for px in 0..h * w {
                for c in 0..n {
                    masked[px * n + c] = a.data()[(bi * h * w + px) * m + k] * f.data()[(bi * h * w + px) * n + c];
                }
            }
            for c in 0..n {
                let mut s = 0.0;
                for px in 0..h * w {
                    s += masked[px * n + c];
                }
                out.push(s / (h * w) as f64);
            }
        }
    }
    out
}
