//! Independent reference implementations for integration tests. Nothing here
//! calls into the library's linear algebra or feature builders.
#![allow(dead_code)]

use parasim::model::ContextFeatures;

pub type Dense = Vec<Vec<f64>>;

/// Solves `A X = B` by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan(mut a: Dense, mut b: Dense) -> Dense {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        assert!(a[pivot][col].abs() > 1e-300, "singular matrix in oracle");
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for x in a[col].iter_mut() {
            *x /= p;
        }
        for x in b[col].iter_mut() {
            *x /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = a[row][col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..n {
                a[row][k] -= factor * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= factor * b[col][k];
            }
        }
    }
    b
}

pub fn identity(n: usize) -> Dense {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn inverse(a: &Dense) -> Dense {
    gauss_jordan(a.clone(), identity(a.len()))
}

pub fn solve(a: &Dense, b: &[f64]) -> Vec<f64> {
    let rhs = b.iter().map(|&x| vec![x]).collect();
    gauss_jordan(a.clone(), rhs).into_iter().map(|r| r[0]).collect()
}

pub fn mat_vec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn diag(d: &[f64]) -> Dense {
    let mut m = vec![vec![0.0; d.len()]; d.len()];
    for (i, &x) in d.iter().enumerate() {
        m[i][i] = x;
    }
    m
}

/// One-shot conjugate posterior from all observations at once:
/// `Σ = (Σ₀⁻¹ + σ⁻² XᵀX)⁻¹`, `μ = Σ (Σ₀⁻¹ μ₀ + σ⁻² Xᵀy)`.
pub fn batch_posterior(
    mu0: &[f64],
    sigma0: &Dense,
    xs: &[Vec<f64>],
    ys: &[f64],
    noise_var: f64,
) -> (Vec<f64>, Dense) {
    let n = mu0.len();
    let mut precision = inverse(sigma0);
    let mut rhs = mat_vec(&precision, mu0);
    for (x, &y) in xs.iter().zip(ys) {
        for i in 0..n {
            for j in 0..n {
                precision[i][j] += x[i] * x[j] / noise_var;
            }
            rhs[i] += x[i] * y / noise_var;
        }
    }
    let sigma = inverse(&precision);
    let mu = mat_vec(&sigma, &rhs);
    (mu, sigma)
}

/// Ridge fit by least squares on the stacked design
/// `[X/σ; D^{-1/2}] θ ≈ [y/σ; D^{-1/2} c]` for diagonal `D`.
pub fn stacked_ridge(xs: &[Vec<f64>], ys: &[f64], center: &[f64], scale_diag: &[f64], noise_var: f64) -> Vec<f64> {
    let p = center.len();
    let sd = noise_var.sqrt();
    let mut rows: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v / sd).collect()).collect();
    let mut targets: Vec<f64> = ys.iter().map(|y| y / sd).collect();
    for k in 0..p {
        let w = 1.0 / scale_diag[k].sqrt();
        let mut row = vec![0.0; p];
        row[k] = w;
        rows.push(row);
        targets.push(w * center[k]);
    }
    let mut ata = vec![vec![0.0; p]; p];
    let mut atb = vec![0.0; p];
    for (row, &t) in rows.iter().zip(&targets) {
        for i in 0..p {
            atb[i] += row[i] * t;
            for j in 0..p {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    solve(&ata, &atb)
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `g = (1, temperature, prior30, yesterday, dosage, engagement, location, variation)`.
pub fn g_oracle(c: &ContextFeatures, dosage: f64) -> Vec<f64> {
    vec![
        1.0,
        c.temperature,
        c.prior_30min_steps,
        c.yesterday_steps,
        dosage,
        ind(c.engagement),
        ind(c.location),
        ind(c.variation),
    ]
}

/// `f = (1, dosage, engagement, location, variation)`.
pub fn f_oracle(c: &ContextFeatures, dosage: f64) -> Vec<f64> {
    vec![1.0, dosage, ind(c.engagement), ind(c.location), ind(c.variation)]
}

pub fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Kolmogorov–Smirnov distance of a sample from Uniform[0, 1].
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            (hi - x).max(x - lo)
        })
        .fold(0.0, f64::max)
}

/// `Φ(x)` by its Taylor series `1/2 + φ(0)·Σ (−1)^k x^{2k+1} / (2^k k! (2k+1))`.
pub fn normal_cdf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut k = 0.0;
    while term.abs() > 1e-18 {
        k += 1.0;
        term *= -x * x / (2.0 * k);
        sum += term / (2.0 * k + 1.0);
    }
    0.5 + sum / (2.0 * std::f64::consts::PI).sqrt()
}
