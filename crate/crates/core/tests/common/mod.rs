use octgan_core::Image;

/// Direct per-window SSIM: a full 11x11 Gaussian (normalized in 2-D) at
/// every valid position, statistics summed in place.
pub fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let (n, sigma) = (11usize, 1.5f64);
    let r = (n / 2) as f64;
    let mut w = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            w[i * n + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));

    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=a.height - n {
        for x in 0..=a.width - n {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    ma += w[i * n + j] * a.get(y + i, x + j) as f64;
                    mb += w[i * n + j] * b.get(y + i, x + j) as f64;
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let da = a.get(y + i, x + j) as f64 - ma;
                    let db = b.get(y + i, x + j) as f64 - mb;
                    va += w[i * n + j] * da * da;
                    vb += w[i * n + j] * db * db;
                    cov += w[i * n + j] * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}
