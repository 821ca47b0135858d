//! Gauss–Hermite rules for integrals against `exp(-t^2)`.

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// `n`-point rule via the Golub–Welsch eigenproblem. Nodes ascend.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "need at least one node");
        if n == 1 {
            return GaussHermite {
                nodes: vec![0.0],
                weights: vec![std::f64::consts::PI.sqrt()],
            };
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = off;
            jacobi[(k, k - 1)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mu0 = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], mu0 * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize to remove eigen-solver noise
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let t = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-t, w);
            pairs[j] = (t, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// E[f(X)] for X ~ N(mean, sd^2).
    pub fn normal_expectation(&self, mean: f64, sd: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let s2 = std::f64::consts::SQRT_2 * sd;
        let mut acc = 0.0;
        for (t, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mean + s2 * t);
        }
        acc / std::f64::consts::PI.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_low_order_moments() {
        // [TRIVIAL] normal moments
        for n in [1, 2, 5, 15, 30] {
            let gh = GaussHermite::new(n);
            let s0: f64 = gh.weights.iter().sum();
            assert!((s0 - std::f64::consts::PI.sqrt()).abs() < 1e-12, "n={n}");
            let m1 = gh.normal_expectation(0.3, 2.0, |x| x);
            assert!((m1 - 0.3).abs() < 1e-12);
            if n >= 2 {
                let m2 = gh.normal_expectation(0.0, 2.0, |x| x * x);
                assert!((m2 - 4.0).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn exact_up_to_degree_2n_minus_1() {
        // [DERIVED] exact polynomial moments
        // E[X^8] = 105 for a standard normal; 5 nodes integrate degree 9 exactly
        let gh = GaussHermite::new(5);
        let m8 = gh.normal_expectation(0.0, 1.0, |x| x.powi(8));
        assert!((m8 - 105.0).abs() < 1e-9);
    }
}
