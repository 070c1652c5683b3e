//! Principal component projection used both as the `pca` embedding method
//! and as preprocessing ahead of t-SNE.

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, one row per component, ordered by
    /// descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Projected coordinates, one row per input vector.
    pub coords: Vec<Vec<f64>>,
}

/// Projects `vectors` onto their top `out_dims` principal components.
/// The result has `min(out_dims, D, N)` columns.
pub fn pca_project(vectors: &[Vec<f64>], out_dims: usize) -> Vec<Vec<f64>> {
    pca_fit(vectors, out_dims).coords
}

pub fn pca_fit(vectors: &[Vec<f64>], out_dims: usize) -> PcaProjection {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    let k = out_dims.min(d).min(n);

    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n.max(1) as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let denom = (n.max(2) - 1) as f64;

    // Eigen-decompose whichever Gram matrix is smaller.
    let (eigenvalues, mut components) = if d <= n {
        let cov = (centered.transpose() * &centered) / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        let comps: Vec<Vec<f64>> = order[..k]
            .iter()
            .map(|&c| eig.eigenvectors.column(c).iter().copied().collect())
            .collect();
        (order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect::<Vec<_>>(), comps)
    } else {
        let gram = (&centered * centered.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let top = order.first().map_or(0.0, |&c| eig.eigenvalues[c]);
        let mut values = Vec::with_capacity(k);
        let mut comps = Vec::with_capacity(k);
        for &c in &order[..k] {
            let dir = centered.transpose() * eig.eigenvectors.column(c);
            let norm = dir.norm();
            let mut dir: Vec<f64> = dir.iter().copied().collect();
            if eig.eigenvalues[c] > 1e-12 * top && norm > 0.0 {
                dir.iter_mut().for_each(|x| *x /= norm);
            } else {
                // Zero-variance direction: any unit vector orthogonal to the
                // rest would do; coordinates along it are zero either way.
                dir = orthogonal_unit(&comps, d);
            }
            values.push(eig.eigenvalues[c].max(0.0));
            comps.push(dir);
        }
        (values, comps)
    };

    for comp in &mut components {
        let lead = comp
            .iter()
            .copied()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            comp.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().zip(centered.row(i).iter()).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();

    PcaProjection {
        mean,
        components,
        eigenvalues,
        coords,
    }
}

fn descending(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

fn orthogonal_unit(existing: &[Vec<f64>], d: usize) -> Vec<f64> {
    for axis in 0..d {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        for e in existing {
            let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(e).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
    vec![0.0; d]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn identical_points_project_to_zero() {
        let pts = vec![vec![3.0, -1.0, 2.0]; 5];
        for row in pca_project(&pts, 2) {
            assert!(row.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn collinear_points_are_rank_one() {
        let pts: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64; 3]).collect();
        let fit = pca_fit(&pts, 2);
        let total: f64 = fit.eigenvalues.iter().sum();
        assert!((fit.eigenvalues[0] / total - 1.0).abs() < 1e-12);
        for row in &fit.coords {
            assert!(row[1].abs() < 1e-12);
        }
        let inv = 1.0 / 3f64.sqrt();
        for x in &fit.components[0] {
            assert!((x - inv).abs() < 1e-12);
        }
    }

    #[test]
    fn output_width_is_bounded() {
        let pts = random_matrix(3, 8, 1);
        assert_eq!(pca_project(&pts, 5)[0].len(), 3);
        let pts = random_matrix(20, 4, 2);
        assert_eq!(pca_project(&pts, 5)[0].len(), 4);
    }

    #[test]
    fn wide_data_uses_gram_path() {
        // D > N goes through the N x N Gram matrix.
        let pts = random_matrix(6, 15, 3);
        let fit = pca_fit(&pts, 6);
        for (i, row) in pts.iter().enumerate() {
            for j in 0..15 {
                let rec: f64 = fit.mean[j]
                    + fit
                        .components
                        .iter()
                        .zip(&fit.coords[i])
                        .map(|(c, y)| c[j] * y)
                        .sum::<f64>();
                assert!((rec - row[j]).abs() < 1e-9);
            }
        }
        for (a, ca) in fit.components.iter().enumerate() {
            for (b, cb) in fit.components.iter().enumerate() {
                let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "{a} {b} {dot}");
            }
        }
    }

    #[test]
    fn sign_convention() {
        let fit = pca_fit(&random_matrix(40, 5, 4), 5);
        for c in &fit.components {
            let lead = c.iter().copied().fold(0.0_f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn projected_coordinates_are_uncorrelated() {
        let pts = random_matrix(100, 6, 5);
        let fit = pca_fit(&pts, 6);
        let n = pts.len() as f64;
        let top = fit.eigenvalues[0];
        for a in 0..6 {
            for b in 0..6 {
                if a == b {
                    continue;
                }
                let cov: f64 = fit.coords.iter().map(|r| r[a] * r[b]).sum::<f64>() / (n - 1.0);
                assert!(cov.abs() < 1e-8 * top);
            }
        }
    }
}
