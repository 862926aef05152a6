use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Row-major `rows x cols` matrix with orthonormal rows or columns (whichever
/// is fewer), scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(n, k, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(w: &[f64], rows: usize, cols: usize, by_rows: bool) -> Vec<f64> {
        let n = if by_rows { rows } else { cols };
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = if by_rows {
                    (0..cols).map(|j| w[a * cols + j] * w[b * cols + j]).sum()
                } else {
                    (0..rows).map(|i| w[i * cols + a] * w[i * cols + b]).sum()
                };
            }
        }
        g
    }

    #[test]
    fn orthonormal_in_both_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (rows, cols) in [(4, 4), (16, 8), (3, 10)] {
            let w = orthogonal(rows, cols, 2.0, &mut rng);
            let by_rows = rows <= cols;
            let n = rows.min(cols);
            let g = gram(&w, rows, cols, by_rows);
            for a in 0..n {
                for b in 0..n {
                    let expect = if a == b { 4.0 } else { 0.0 };
                    assert!((g[a * n + b] - expect).abs() < 1e-12);
                }
            }
        }
    }
}
