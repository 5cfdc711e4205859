//! Reference implementations shared by integration tests.

use dualformer::Tensor;

/// SSIM by the textbook definition: explicit 2-D Gaussian window, direct
/// weighted moments at every valid position.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let k = 11;
    let sigma = 1.5f64;
    let mut win = vec![vec![0.0; k]; k];
    let mut norm = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            let mut plane_sum = 0.0;
            let mut positions = 0;
            for y in 0..=s.h() - k {
                for x in 0..=s.w() - k {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wgt = win[i][j] / norm;
                            ma += wgt * a.at([n, c, y + i, x + j]);
                            mb += wgt * b.at([n, c, y + i, x + j]);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wgt = win[i][j] / norm;
                            let da = a.at([n, c, y + i, x + j]) - ma;
                            let db = b.at([n, c, y + i, x + j]) - mb;
                            va += wgt * da * da;
                            vb += wgt * db * db;
                            cov += wgt * da * db;
                        }
                    }
                    plane_sum +=
                        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    positions += 1;
                }
            }
            total += plane_sum / positions as f64;
            count += 1;
        }
    }
    total / count as f64
}

pub fn psnr_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let n = a.numel() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    -10.0 * mse.log10()
}
