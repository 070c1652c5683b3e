//! Exact t-SNE: perplexity-calibrated Gaussian affinities in the input space,
//! Student-t affinities in the plane, and momentum gradient descent on
//! KL(P || Q).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EmbeddingConfig, EmbeddingError, JobControl};

/// Dense row-major N x N matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

pub fn pairwise_sq_distances(vectors: &[Vec<f64>]) -> SquareMatrix {
    let n = vectors.len();
    let mut m = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            m.data[i * n + j] = d;
            m.data[j * n + i] = d;
        }
    }
    m
}

const ENTROPY_TOLERANCE: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;
const MAX_BRACKET_STEPS: usize = 200;

/// Unnormalized conditional weights `exp(-beta * (d - d_min))` for row `i`
/// (zero at `i`), their sum, and the entropy in bits.
fn row_entropy(row: &[f64], i: usize, d_min: f64, beta: f64, weights: &mut [f64]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, w)) in row.iter().zip(weights.iter_mut()).enumerate() {
        if j == i {
            *w = 0.0;
            continue;
        }
        let shifted = d - d_min;
        *w = (-beta * shifted).exp();
        sum += *w;
        weighted += *w * shifted;
    }
    let nats = sum.ln() + beta * weighted / sum;
    (sum, nats / std::f64::consts::LN_2)
}

/// Finds, for every point, the Gaussian bandwidth whose conditional
/// neighbor distribution has the requested perplexity.
pub fn calibrate_sigmas(distances_sq: &SquareMatrix, perplexity: f64) -> Result<Vec<f64>, EmbeddingError> {
    let n = distances_sq.len();
    let target = perplexity.log2();
    let mut weights = vec![0.0; n];
    let mut sigmas = Vec::with_capacity(n);

    for i in 0..n {
        let row = distances_sq.row(i);
        let others = || row.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, &d)| d);
        let d_min = others().fold(f64::INFINITY, f64::min);
        let d_max = others().fold(f64::NEG_INFINITY, f64::max);
        if n < 2 || !(d_max > d_min) {
            // Every bandwidth yields the uniform distribution over the others.
            sigmas.push(1.0);
            continue;
        }
        let spread = others().map(|d| d - d_min).sum::<f64>() / (n - 1) as f64;
        let mut beta = 1.0 / spread.max(f64::MIN_POSITIVE);
        let entropy = |b: f64, w: &mut [f64]| row_entropy(row, i, d_min, b, w).1;

        // Entropy falls as beta grows; bracket the target, then bisect.
        let h0 = entropy(beta, &mut weights);
        let (mut lo, mut hi);
        if (h0 - target).abs() < ENTROPY_TOLERANCE {
            sigmas.push((0.5 / beta).sqrt());
            continue;
        } else if h0 > target {
            lo = beta;
            let mut steps = 0;
            loop {
                beta *= 2.0;
                steps += 1;
                if !beta.is_finite() || steps > MAX_BRACKET_STEPS {
                    return Err(EmbeddingError::CalibrationFailure(i));
                }
                if entropy(beta, &mut weights) <= target {
                    hi = beta;
                    break;
                }
                lo = beta;
            }
        } else {
            hi = beta;
            let mut steps = 0;
            loop {
                beta *= 0.5;
                steps += 1;
                if beta == 0.0 || steps > MAX_BRACKET_STEPS {
                    return Err(EmbeddingError::CalibrationFailure(i));
                }
                if entropy(beta, &mut weights) >= target {
                    lo = beta;
                    break;
                }
                hi = beta;
            }
        }

        let mut best = (f64::INFINITY, beta);
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            let h = entropy(mid, &mut weights);
            let err = (h - target).abs();
            if err < best.0 {
                best = (err, mid);
            }
            if err < ENTROPY_TOLERANCE {
                break;
            }
            if h > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        sigmas.push((0.5 / best.1).sqrt());
    }
    Ok(sigmas)
}

/// Row-normalized conditional distributions `P_{j|i}` for the given
/// bandwidths; the diagonal is zero.
pub fn conditional_probabilities(distances_sq: &SquareMatrix, sigmas: &[f64]) -> SquareMatrix {
    let n = distances_sq.len();
    let mut p = SquareMatrix::zeros(n);
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let row = distances_sq.row(i);
        let d_min = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .fold(f64::INFINITY, |m, (_, &d)| m.min(d));
        let beta = 0.5 / (sigmas[i] * sigmas[i]);
        let (sum, _) = row_entropy(row, i, d_min, beta, &mut weights);
        for j in 0..n {
            p.data[i * n + j] = weights[j] / sum;
        }
    }
    p
}

/// Symmetrized joint affinities `(P_{j|i} + P_{i|j}) / 2N`, floored at
/// 1e-12 off the diagonal and renormalized to sum to one.
pub fn joint_probabilities(conditional: &SquareMatrix) -> SquareMatrix {
    let n = conditional.len();
    let scale = 1.0 / (2.0 * n as f64);
    let mut p = SquareMatrix::from_fn(n, |i, j| {
        if i == j {
            0.0
        } else {
            ((conditional.get(i, j) + conditional.get(j, i)) * scale).max(1e-12)
        }
    });
    let total = p.sum();
    p.data.iter_mut().for_each(|x| *x /= total);
    p
}

/// KL(P || Q) where Q is the Student-t affinity of `coords`.
pub fn kl_divergence(p: &SquareMatrix, coords: &[[f64; 2]]) -> f64 {
    let n = coords.len();
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            z += 2.0 / (1.0 + sq_dist(coords[i], coords[j]));
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.get(i, j);
            if i == j || pij <= 0.0 {
                continue;
            }
            let q = 1.0 / ((1.0 + sq_dist(coords[i], coords[j])) * z);
            kl += pij * (pij / q.max(f64::MIN_POSITIVE)).ln();
        }
    }
    kl
}

/// Gradient of KL(exaggeration * P || Q) with respect to every coordinate.
pub fn kl_gradient(p: &SquareMatrix, coords: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let mut grad = vec![[0.0; 2]; coords.len()];
    kl_gradient_into(p, coords, exaggeration, &mut grad, &mut vec![[0.0; 2]; coords.len()]);
    grad
}

fn kl_gradient_into(
    p: &SquareMatrix,
    coords: &[[f64; 2]],
    exaggeration: f64,
    grad: &mut [[f64; 2]],
    repulsive: &mut [[f64; 2]],
) {
    let n = coords.len();
    grad.iter_mut().for_each(|g| *g = [0.0; 2]);
    repulsive.iter_mut().for_each(|r| *r = [0.0; 2]);
    let mut z = 0.0;
    for i in 0..n {
        let [xi, yi] = coords[i];
        let prow = &p.data[i * n..(i + 1) * n];
        let (mut ax, mut ay, mut rx, mut ry) = (0.0, 0.0, 0.0, 0.0);
        for j in (i + 1)..n {
            let dx = xi - coords[j][0];
            let dy = yi - coords[j][1];
            let w = 1.0 / (1.0 + dx * dx + dy * dy);
            z += 2.0 * w;
            let attr = exaggeration * prow[j] * w;
            let rep = w * w;
            ax += attr * dx;
            ay += attr * dy;
            rx += rep * dx;
            ry += rep * dy;
            grad[j][0] -= attr * dx;
            grad[j][1] -= attr * dy;
            repulsive[j][0] -= rep * dx;
            repulsive[j][1] -= rep * dy;
        }
        grad[i][0] += ax;
        grad[i][1] += ay;
        repulsive[i][0] += rx;
        repulsive[i][1] += ry;
    }
    for (g, r) in grad.iter_mut().zip(repulsive.iter()) {
        g[0] = 4.0 * (g[0] - r[0] / z);
        g[1] = 4.0 * (g[1] - r[1] / z);
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOutput {
    pub coords: Vec<[f64; 2]>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

pub fn tsne_embed(vectors: &[Vec<f64>], config: &EmbeddingConfig) -> Result<TsneOutput, EmbeddingError> {
    tsne_embed_with(vectors, config, &JobControl::default())
}

/// Same as [`tsne_embed`], checking `control` for cancellation once per
/// iteration and reporting progress through it.
pub fn tsne_embed_with(
    vectors: &[Vec<f64>],
    config: &EmbeddingConfig,
    control: &JobControl,
) -> Result<TsneOutput, EmbeddingError> {
    let n = vectors.len();
    if n < 4 {
        return Err(EmbeddingError::TooFewPoints(n));
    }
    config.validate_tsne(n)?;

    let distances = pairwise_sq_distances(vectors);
    let sigmas = calibrate_sigmas(&distances, config.perplexity)?;
    let p = joint_probabilities(&conditional_probabilities(&distances, &sigmas));
    drop(distances);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut coords: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let initial_kl = kl_divergence(&p, &coords);

    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0_f64; 2]; n];
    let mut grad = vec![[0.0; 2]; n];
    let mut scratch = vec![[0.0; 2]; n];
    for iter in 0..config.iterations {
        if control.is_cancelled() {
            return Err(EmbeddingError::Cancelled);
        }
        let early = iter < config.exaggeration_iterations;
        let exaggeration = if early { config.early_exaggeration } else { 1.0 };
        let momentum = if iter < config.momentum_switch_iteration {
            config.momentum
        } else {
            config.final_momentum
        };
        kl_gradient_into(&p, &coords, exaggeration, &mut grad, &mut scratch);

        for i in 0..n {
            for d in 0..2 {
                let g = grad[i][d];
                let gain = &mut gains[i][d];
                *gain = if (g > 0.0) != (update[i][d] > 0.0) {
                    *gain + 0.2
                } else {
                    (*gain * 0.8).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - config.learning_rate * *gain * g;
                coords[i][d] += update[i][d];
            }
        }
        let (mx, my) = coords
            .iter()
            .fold((0.0, 0.0), |(sx, sy), c| (sx + c[0], sy + c[1]));
        let (mx, my) = (mx / n as f64, my / n as f64);
        coords.iter_mut().for_each(|c| {
            c[0] -= mx;
            c[1] -= my;
        });
        control.set_progress(iter + 1);
    }

    let final_kl = kl_divergence(&p, &coords);
    Ok(TsneOutput {
        coords,
        initial_kl,
        final_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    /// Perplexity recomputed straight from the definition.
    fn achieved_perplexity(d: &SquareMatrix, i: usize, sigma: f64) -> f64 {
        let w: Vec<f64> = (0..d.len())
            .map(|j| if j == i { 0.0 } else { (-d.get(i, j) / (2.0 * sigma * sigma)).exp() })
            .collect();
        let s: f64 = w.iter().sum();
        let h: f64 = w
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| {
                let p = x / s;
                -p * p.log2()
            })
            .sum();
        h.exp2()
    }

    #[test]
    fn equidistant_triangle_is_uniform() {
        let d = SquareMatrix::from_fn(3, |i, j| if i == j { 0.0 } else { 4.0 });
        let sigmas = calibrate_sigmas(&d, 2.0).unwrap();
        let p = conditional_probabilities(&d, &sigmas);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert_eq!(p.get(i, j), want);
            }
            assert_eq!(achieved_perplexity(&d, i, sigmas[i]), 2.0);
        }
    }

    #[test]
    fn duplicate_rows_become_uniform() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let d = pairwise_sq_distances(&pts);
        let sigmas = calibrate_sigmas(&d, 3.0).unwrap();
        let p = conditional_probabilities(&d, &sigmas);
        assert!((p.get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn unreachable_perplexity_fails() {
        let pts = random_points(5, 3, 9);
        let d = pairwise_sq_distances(&pts);
        assert!(matches!(
            calibrate_sigmas(&d, 4.5),
            Err(EmbeddingError::CalibrationFailure(_))
        ));
    }

    #[test]
    fn calibration_200_points() {
        let pts = random_points(200, 10, 11);
        let d = pairwise_sq_distances(&pts);
        let sigmas = calibrate_sigmas(&d, 30.0).unwrap();
        let p = conditional_probabilities(&d, &sigmas);
        for i in 0..200 {
            assert!((achieved_perplexity(&d, i, sigmas[i]) - 30.0).abs() < 1e-3);
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(10, 10, 6);
        let d = pairwise_sq_distances(&pts);
        let p = joint_probabilities(&conditional_probabilities(&d, &calibrate_sigmas(&d, 3.0).unwrap()));
        let y: Vec<[f64; 2]> = (0..10)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let g = kl_gradient(&p, &y, 1.0);
        let h = 1e-5;
        for i in 0..10 {
            for k in 0..2 {
                let mut plus = y.clone();
                plus[i][k] += h;
                let mut minus = y.clone();
                minus[i][k] -= h;
                let fd = (kl_divergence(&p, &plus) - kl_divergence(&p, &minus)) / (2.0 * h);
                assert!((fd - g[i][k]).abs() <= 1e-6 + 1e-4 * fd.abs(), "{fd} vs {}", g[i][k]);
            }
        }
    }

    #[test]
    fn too_few_points() {
        let cfg = EmbeddingConfig { perplexity: 2.0, ..EmbeddingConfig::default() };
        assert!(matches!(
            tsne_embed(&random_points(3, 2, 1), &cfg),
            Err(EmbeddingError::TooFewPoints(3))
        ));
    }

    #[test]
    fn cancellation_stops_the_run() {
        let control = JobControl::default();
        control.cancel();
        let cfg = EmbeddingConfig { perplexity: 5.0, ..EmbeddingConfig::default() };
        assert!(matches!(
            tsne_embed_with(&random_points(20, 3, 1), &cfg, &control),
            Err(EmbeddingError::Cancelled)
        ));
    }

    #[test]
    fn deterministic_and_decreasing() {
        let pts = random_points(60, 5, 3);
        let cfg = EmbeddingConfig {
            perplexity: 10.0,
            seed: 42,
            ..EmbeddingConfig::default()
        };
        let a = tsne_embed(&pts, &cfg).unwrap();
        let b = tsne_embed(&pts, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.final_kl < a.initial_kl);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn calibration_hits_target(n in 10usize..300, seed in any::<u64>(), frac in 0.1f64..0.9) {
            let perplexity = 2.0 + frac * ((n as f64 - 3.0).min(30.0) - 2.0);
            let pts = random_points(n, 4, seed);
            let d = pairwise_sq_distances(&pts);
            let sigmas = calibrate_sigmas(&d, perplexity).unwrap();
            for i in 0..n {
                prop_assert!((achieved_perplexity(&d, i, sigmas[i]) - perplexity).abs() < 1e-3);
            }
        }

        #[test]
        fn joint_is_symmetric_and_normalized(n in 5usize..60, seed in any::<u64>()) {
            let pts = random_points(n, 3, seed);
            let d = pairwise_sq_distances(&pts);
            let p = joint_probabilities(&conditional_probabilities(&d, &calibrate_sigmas(&d, 3.0).unwrap()));
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            for i in 0..n {
                prop_assert_eq!(p.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(p.get(i, j), p.get(j, i));
                }
            }
        }
    }
}
