//! Diagonal-covariance Gaussian mixtures.

use std::f64::consts::PI;

/// Lower bound applied to every variance after re-estimation.
pub const VAR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    // ln w_k - 0.5 * (D ln 2pi + sum ln var)
    consts: Vec<f64>,
    inv_vars: Vec<Vec<f64>>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Self {
        assert!(!weights.is_empty() && weights.len() == means.len() && means.len() == vars.len());
        let dim = means[0].len();
        let consts = weights
            .iter()
            .zip(&vars)
            .map(|(w, v)| w.ln() - 0.5 * (dim as f64 * (2.0 * PI).ln() + v.iter().map(|x| x.ln()).sum::<f64>()))
            .collect();
        let inv_vars = vars.iter().map(|v| v.iter().map(|x| 1.0 / x).collect()).collect();
        Self { weights, means, vars, consts, inv_vars }
    }

    pub fn single(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }

    fn component_ll(&self, k: usize, x: &[f64]) -> f64 {
        let (m, iv) = (&self.means[k], &self.inv_vars[k]);
        let mut q = 0.0;
        for j in 0..x.len() {
            let d = x[j] - m[j];
            q += d * d * iv[j];
        }
        self.consts[k] - 0.5 * q
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        if self.weights.len() == 1 {
            return self.component_ll(0, x);
        }
        let mut best = f64::NEG_INFINITY;
        let mut lls = [0.0f64; 64];
        let n = self.weights.len().min(64);
        for (k, ll) in lls.iter_mut().enumerate().take(n) {
            *ll = self.component_ll(k, x);
            best = best.max(*ll);
        }
        if best == f64::NEG_INFINITY {
            return best;
        }
        best + lls[..n].iter().map(|l| (l - best).exp()).sum::<f64>().ln()
    }

    /// One EM iteration on `frames`. With a single component this is the
    /// closed-form maximum-likelihood estimate. Components that receive no
    /// responsibility keep their parameters and get zero weight.
    pub fn em_step(&self, frames: &[&[f64]], floor: f64) -> Gmm {
        let n = frames.len();
        if n == 0 {
            return self.clone();
        }
        let k_max = self.n_components();
        let dim = self.dim();
        let mut resp = vec![0.0; n * k_max];
        for (i, x) in frames.iter().enumerate() {
            let r = &mut resp[i * k_max..(i + 1) * k_max];
            if k_max == 1 {
                r[0] = 1.0;
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for (k, rk) in r.iter_mut().enumerate() {
                *rk = self.component_ll(k, x);
                best = best.max(*rk);
            }
            let mut s = 0.0;
            for rk in r.iter_mut() {
                *rk = (*rk - best).exp();
                s += *rk;
            }
            r.iter_mut().for_each(|rk| *rk /= s);
        }
        let mut weights = Vec::with_capacity(k_max);
        let mut means = Vec::with_capacity(k_max);
        let mut vars = Vec::with_capacity(k_max);
        for k in 0..k_max {
            let occ: f64 = (0..n).map(|i| resp[i * k_max + k]).sum();
            if occ <= 1e-10 {
                weights.push(0.0);
                means.push(self.means[k].clone());
                vars.push(self.vars[k].clone());
                continue;
            }
            let mut mean = vec![0.0; dim];
            for (i, x) in frames.iter().enumerate() {
                let g = resp[i * k_max + k];
                mean.iter_mut().zip(x.iter()).for_each(|(m, v)| *m += g * v);
            }
            mean.iter_mut().for_each(|m| *m /= occ);
            let mut var = vec![0.0; dim];
            for (i, x) in frames.iter().enumerate() {
                let g = resp[i * k_max + k];
                for j in 0..dim {
                    let d = x[j] - mean[j];
                    var[j] += g * d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = (*v / occ).max(floor));
            weights.push(occ / n as f64);
            means.push(mean);
            vars.push(var);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Gmm::new(weights, means, vars)
    }

    /// Split heaviest components (ties to the lower index) until `target`
    /// components exist or no component has at least `min_occ` frames of
    /// the state's `occupancy`.
    pub fn split(&self, target: usize, occupancy: f64, min_occ: f64) -> Gmm {
        let (mut w, mut m, mut v) = (self.weights.clone(), self.means.clone(), self.vars.clone());
        while w.len() < target {
            let mut pick: Option<usize> = None;
            for k in 0..w.len() {
                if w[k] * occupancy >= min_occ && pick.is_none_or(|p| w[k] > w[p]) {
                    pick = Some(k);
                }
            }
            let Some(k) = pick else { break };
            let sd: Vec<f64> = v[k].iter().map(|x| 0.1 * x.sqrt()).collect();
            let plus: Vec<f64> = m[k].iter().zip(&sd).map(|(a, s)| a + s).collect();
            m[k].iter_mut().zip(&sd).for_each(|(a, s)| *a -= s);
            w[k] /= 2.0;
            w.push(w[k]);
            m.push(plus);
            v.push(v[k].clone());
        }
        Gmm::new(w, m, v)
    }

    /// Keep the `k` heaviest components (ties to the lower index), weights
    /// renormalized.
    pub fn truncate(&self, k: usize) -> Gmm {
        if k >= self.weights.len() {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        order.truncate(k.max(1));
        order.sort_unstable();
        let z: f64 = order.iter().map(|&i| self.weights[i]).sum();
        Gmm::new(
            order.iter().map(|&i| self.weights[i] / z).collect(),
            order.iter().map(|&i| self.means[i].clone()).collect(),
            order.iter().map(|&i| self.vars[i].clone()).collect(),
        )
    }

    /// Weights sum to one, variances respect the floor, all values finite.
    pub fn check(&self, floor: f64) -> Result<(), String> {
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(format!("mixture weights sum to {s}"));
        }
        for (m, v) in self.means.iter().zip(&self.vars) {
            if m.iter().any(|x| !x.is_finite()) {
                return Err("non-finite mean".into());
            }
            if v.iter().any(|x| !x.is_finite() || *x < floor) {
                return Err("variance below floor or non-finite".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_density() {
        let g = Gmm::single(vec![0.0], vec![1.0]);
        assert!((g.log_likelihood(&[0.0]) + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn em_single_component_is_mle() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let rows: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let g = Gmm::single(vec![0.0, 0.0], vec![1.0, 1.0]).em_step(&rows, VAR_FLOOR);
        assert!((g.means()[0][0] - 4.5).abs() < 1e-12);
        assert!((g.vars()[0][0] - 8.25).abs() < 1e-12);
        assert_eq!(g.vars()[0][1], VAR_FLOOR);
        g.check(VAR_FLOOR).unwrap();
    }

    #[test]
    fn mixture_em_does_not_decrease_likelihood() {
        let data: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { -2.0 } else { 3.0 } + (i as f64 * 0.37).sin()]).collect();
        let rows: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let mut g = Gmm::single(vec![0.0], vec![1.0]).em_step(&rows, VAR_FLOOR).split(2, 40.0, 1.0);
        let ll = |g: &Gmm| rows.iter().map(|x| g.log_likelihood(x)).sum::<f64>();
        for _ in 0..10 {
            let next = g.em_step(&rows, VAR_FLOOR);
            assert!(ll(&next) >= ll(&g) - 1e-9);
            next.check(VAR_FLOOR).unwrap();
            g = next;
        }
    }

    #[test]
    fn split_rules() {
        let g = Gmm::single(vec![0.0], vec![4.0]);
        let s = g.split(2, 100.0, 20.0);
        assert_eq!(s.n_components(), 2);
        assert_eq!(s.means()[0][0], -0.2);
        assert_eq!(s.means()[1][0], 0.2);
        assert_eq!(g.split(2, 10.0, 20.0).n_components(), 1);
        assert_eq!(g.split(8, 1000.0, 20.0).n_components(), 8);
    }
}
