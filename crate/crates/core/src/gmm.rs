//! Diagonal-covariance Gaussian mixtures over prosody embeddings.
//!
//! A network emits an unconstrained [`RawGmmParams`] per phone: mixture
//! logits, means and log-variances. [`activate`] maps these onto a valid
//! [`DiagGmm`] (softmax weights, identity means, exponentiated variances).
//! Densities and posteriors are evaluated in log space throughout.
//!
//! All arrays are stored row-major: component `i`, dimension `d` lives at
//! `i * dim + d`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-variances are clamped to this range before exponentiation.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// A phone-level prosody embedding.
pub type Embedding = Vec<f64>;

/// Unconstrained mixture parameters as produced by a network head.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGmmParams {
    /// Mixture logits, length `M`.
    pub alpha: Vec<f64>,
    /// Means, `M x D`.
    pub means: Vec<f64>,
    /// Log-variances, `M x D`.
    pub log_vars: Vec<f64>,
    dim: usize,
}

impl RawGmmParams {
    pub fn new(alpha: Vec<f64>, means: Vec<f64>, log_vars: Vec<f64>) -> Result<Self> {
        let m = alpha.len();
        if m == 0 {
            return Err(Error::shape("mixture needs at least one component"));
        }
        if means.is_empty() || !means.len().is_multiple_of(m) {
            return Err(Error::shape(format!(
                "means length {} is not a positive multiple of {m} components",
                means.len()
            )));
        }
        if log_vars.len() != means.len() {
            return Err(Error::shape(format!(
                "log-variance length {} differs from means length {}",
                log_vars.len(),
                means.len()
            )));
        }
        let dim = means.len() / m;
        Ok(Self {
            alpha,
            means,
            log_vars,
            dim,
        })
    }

    pub fn zeros(components: usize, dim: usize) -> Self {
        Self {
            alpha: vec![0.0; components],
            means: vec![0.0; components * dim],
            log_vars: vec![0.0; components * dim],
            dim,
        }
    }

    pub fn components(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_finite(&self) -> Result<()> {
        let groups = [
            ("alpha", &self.alpha),
            ("means", &self.means),
            ("log_vars", &self.log_vars),
        ];
        for (name, values) in groups {
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite {name}[{i}] = {}",
                    values[i]
                )));
            }
        }
        Ok(())
    }
}

/// An activated diagonal Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
}

impl DiagGmm {
    /// Builds a mixture from already-constrained parameters, validating the
    /// simplex and positivity invariants.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.is_empty() || !means.len().is_multiple_of(m) || variances.len() != means.len() {
            return Err(Error::shape(format!(
                "inconsistent mixture shapes: {} weights, {} means, {} variances",
                m,
                means.len(),
                variances.len()
            )));
        }
        if let Some(i) = weights
            .iter()
            .position(|w| !w.is_finite() || *w < 0.0 || *w > 1.0)
        {
            return Err(Error::InvalidParameter(format!(
                "weight {i} = {} is not a probability",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "weights sum to {total}, not 1"
            )));
        }
        if let Some(i) = means.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite mean {i}")));
        }
        if let Some(i) = variances.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "variance {i} = {} is not strictly positive",
                variances[i]
            )));
        }
        let dim = means.len() / m;
        Ok(Self {
            weights,
            means,
            variances,
            dim,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self, component: usize) -> &[f64] {
        &self.means[component * self.dim..(component + 1) * self.dim]
    }

    pub fn variance(&self, component: usize) -> &[f64] {
        &self.variances[component * self.dim..(component + 1) * self.dim]
    }

    /// Mixture mean `Σ w_i μ_i`.
    pub fn overall_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (o, mu) in out.iter_mut().zip(self.mean(i)) {
                *o += w * mu;
            }
        }
        out
    }

    fn check_dim(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.dim {
            return Err(Error::shape(format!(
                "embedding has dimension {}, mixture has {}",
                e.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Per-component `log w_i + log N(e; μ_i, σ²_i)`.
    pub fn component_log_joint(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(e)?;
        Ok((0..self.components())
            .map(|i| self.weights[i].ln() + self.component_log_pdf(i, e))
            .collect())
    }

    fn component_log_pdf(&self, i: usize, e: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((x, mu), var) in e.iter().zip(self.mean(i)).zip(self.variance(i)) {
            let diff = x - mu;
            acc += LN_2PI + var.ln() + diff * diff / var;
        }
        -0.5 * acc
    }
}

/// Numerically stable `ln Σ exp(x_i)`. Returns `-inf` for an all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// Normalises log-joint scores into posterior probabilities.
fn normalise_log(log_joint: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_joint);
    if !lse.is_finite() {
        // every score is -inf (or +inf); spread mass over the maximal ones
        let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hits = log_joint.iter().filter(|v| **v == max).count() as f64;
        return log_joint
            .iter()
            .map(|v| if *v == max { 1.0 / hits } else { 0.0 })
            .collect();
    }
    let mut gamma: Vec<f64> = log_joint.iter().map(|v| (v - lse).exp()).collect();
    let total: f64 = gamma.iter().sum();
    for g in gamma.iter_mut() {
        *g /= total;
    }
    gamma
}

/// Maps raw network outputs onto a valid mixture.
pub fn activate(raw: &RawGmmParams) -> Result<DiagGmm> {
    activate_clamped(raw, LOG_VAR_CLAMP)
}

/// [`activate`] with an explicit log-variance clamp range.
pub fn activate_clamped(raw: &RawGmmParams, clamp: (f64, f64)) -> Result<DiagGmm> {
    raw.check_finite()?;
    let weights = softmax(&raw.alpha);
    let (lo, hi) = clamp;
    let variances = raw.log_vars.iter().map(|v| v.clamp(lo, hi).exp()).collect();
    Ok(DiagGmm {
        weights,
        means: raw.means.clone(),
        variances,
        dim: raw.dim,
    })
}

/// `ln Σ_i w_i N(e; μ_i, σ²_i)`.
pub fn log_density(gmm: &DiagGmm, e: &[f64]) -> Result<f64> {
    Ok(log_sum_exp(&gmm.component_log_joint(e)?))
}

/// Component responsibilities `γ_j ∝ w_j N(e; μ_j, σ²_j)`.
pub fn posterior(gmm: &DiagGmm, e: &[f64]) -> Result<Vec<f64>> {
    Ok(normalise_log(&gmm.component_log_joint(e)?))
}

/// Index of the component with the largest posterior; ties go to the lowest
/// index.
pub fn map_component(gmm: &DiagGmm, e: &[f64]) -> Result<usize> {
    let gamma = posterior(gmm, e)?;
    Ok(argmax(&gamma))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws a component from the mixture weights.
pub fn sample_component<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            cumulative += w;
            last_positive = i;
            if u < cumulative {
                return i;
            }
        }
    }
    last_positive
}

/// Draws `e ~ N(μ_j, σ²_j)` for a fixed component `j`.
pub fn sample_from_component<R: Rng + ?Sized>(
    gmm: &DiagGmm,
    component: usize,
    rng: &mut R,
) -> Embedding {
    gmm.mean(component)
        .iter()
        .zip(gmm.variance(component))
        .map(|(mu, var)| {
            let z: f64 = StandardNormal.sample(rng);
            mu + var.sqrt() * z
        })
        .collect()
}

/// Draws a component `j ~ Categorical(w)` and then `e ~ N(μ_j, σ²_j)`.
pub fn sample<R: Rng + ?Sized>(gmm: &DiagGmm, rng: &mut R) -> (Embedding, usize) {
    let j = sample_component(&gmm.weights, rng);
    (sample_from_component(gmm, j, rng), j)
}

/// Negative log-likelihood of `e` under `activate(raw)` and its gradient with
/// respect to the raw parameters.
///
/// With responsibilities `γ_i` and activated parameters `w, μ, σ²`:
///
/// ```text
/// ∂L/∂α_i     = w_i - γ_i
/// ∂L/∂m_{i,d} = γ_i (m_{i,d} - e_d) / σ²_{i,d}
/// ∂L/∂v_{i,d} = ½ γ_i (1 - (e_d - m_{i,d})² / σ²_{i,d})
/// ```
///
/// The log-variance gradient is zero where the clamp in [`activate`] is
/// active.
pub fn nll_and_grad(raw: &RawGmmParams, e: &[f64]) -> Result<(f64, RawGmmParams)> {
    nll_and_grad_clamped(raw, e, LOG_VAR_CLAMP)
}

/// [`nll_and_grad`] with an explicit log-variance clamp range.
pub fn nll_and_grad_clamped(
    raw: &RawGmmParams,
    e: &[f64],
    clamp: (f64, f64),
) -> Result<(f64, RawGmmParams)> {
    let gmm = activate_clamped(raw, clamp)?;
    let log_joint = gmm.component_log_joint(e)?;
    let log_p = log_sum_exp(&log_joint);
    if !log_p.is_finite() {
        return Err(Error::Numerical {
            what: "mixture log-density",
            index: argmax(&log_joint),
            detail: format!("log-density {log_p}"),
        });
    }
    let gamma = normalise_log(&log_joint);
    let dim = gmm.dim;
    let (lo, hi) = clamp;
    let mut grad = RawGmmParams::zeros(gmm.components(), dim);
    for i in 0..gmm.components() {
        grad.alpha[i] = gmm.weights[i] - gamma[i];
        for d in 0..dim {
            let idx = i * dim + d;
            let var = gmm.variances[idx];
            let diff = raw.means[idx] - e[d];
            grad.means[idx] = gamma[i] * diff / var;
            let v = raw.log_vars[idx];
            grad.log_vars[idx] = if (lo..=hi).contains(&v) {
                0.5 * gamma[i] * (1.0 - diff * diff / var)
            } else {
                0.0
            };
            if !(grad.means[idx].is_finite() && grad.log_vars[idx].is_finite()) {
                return Err(Error::Numerical {
                    what: "mixture gradient",
                    index: idx,
                    detail: format!("component {i}, dimension {d}"),
                });
            }
        }
    }
    Ok((-log_p, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(mu: f64, var: f64) -> DiagGmm {
        DiagGmm::new(vec![1.0], vec![mu], vec![var]).unwrap()
    }

    #[test]
    fn activate_symmetric_logits() {
        let raw = RawGmmParams::new(vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]).unwrap();
        let gmm = activate(&raw).unwrap();
        for w in gmm.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(gmm.variances().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn activate_log_logits() {
        let alpha = vec![1f64.ln(), 2f64.ln(), 3f64.ln()];
        let raw = RawGmmParams::new(alpha, vec![0.0; 3], vec![0.0; 3]).unwrap();
        let gmm = activate(&raw).unwrap();
        let expected = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (w, e) in gmm.weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
    }

    #[test]
    fn activate_rejects_non_finite() {
        let raw = RawGmmParams::new(vec![0.0, f64::NAN], vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(matches!(activate(&raw), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn activate_clamps_log_variance() {
        let raw = RawGmmParams::new(vec![0.0], vec![0.0, 0.0], vec![-50.0, 800.0]).unwrap();
        let gmm = activate(&raw).unwrap();
        assert_eq!(gmm.variances()[0], (-10f64).exp());
        assert_eq!(gmm.variances()[1], 10f64.exp());
    }

    #[test]
    fn raw_shape_errors() {
        assert!(RawGmmParams::new(vec![], vec![], vec![]).is_err());
        assert!(RawGmmParams::new(vec![0.0; 2], vec![0.0; 3], vec![0.0; 3]).is_err());
        assert!(RawGmmParams::new(vec![0.0; 2], vec![0.0; 4], vec![0.0; 2]).is_err());
    }

    #[test]
    fn standard_normal_at_mode() {
        let lp = log_density(&single(0.0, 1.0), &[0.0]).unwrap();
        assert!((lp - (-0.918_938_533_204_672_8)).abs() < 1e-12);
    }

    #[test]
    fn identical_components_collapse() {
        let one = DiagGmm::new(vec![1.0], vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        let two = DiagGmm::new(
            vec![0.5, 0.5],
            vec![0.3, -1.0, 0.3, -1.0],
            vec![0.5, 2.0, 0.5, 2.0],
        )
        .unwrap();
        let e = [1.1, 0.4];
        let a = log_density(&one, &e).unwrap();
        let b = log_density(&two, &e).unwrap();
        assert!((a - b).abs() < 1e-14);
        let gamma = posterior(&two, &e).unwrap();
        assert!((gamma[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let gmm = single(0.0, 1.0);
        assert!(matches!(log_density(&gmm, &[0.0, 1.0]), Err(Error::Shape(_))));
        assert!(matches!(posterior(&gmm, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn dominant_component_posterior() {
        let gmm = DiagGmm::new(vec![0.5, 0.5], vec![0.0, 20.0], vec![1.0, 1.0]).unwrap();
        let gamma = posterior(&gmm, &[0.0]).unwrap();
        assert!(gamma[0] > 1.0 - 1e-6);
    }

    #[test]
    fn posterior_survives_extreme_distance() {
        // both component densities underflow in linear space
        let gmm = DiagGmm::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1e-4, 1e-4]).unwrap();
        let gamma = posterior(&gmm, &[1e6]).unwrap();
        assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(map_component(&gmm, &[1e6]).unwrap(), 1);
    }

    #[test]
    fn map_component_zero_weight_and_ties() {
        let gmm = DiagGmm::new(vec![1.0, 0.0], vec![0.0, 5.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(map_component(&gmm, &[5.0]).unwrap(), 0);
        let tie = DiagGmm::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(map_component(&tie, &[0.0]).unwrap(), 0);
    }

    #[test]
    fn map_with_equal_weights_uses_component_density() {
        let gmm = DiagGmm::new(
            vec![1.0 / 3.0; 3],
            vec![0.0, 2.0, 4.0],
            vec![1.0, 0.25, 4.0],
        )
        .unwrap();
        for x in [-1.0, 1.2, 1.9, 3.0, 7.0] {
            let scores: Vec<f64> = (0..3).map(|i| gmm.component_log_pdf(i, &[x])).collect();
            assert_eq!(map_component(&gmm, &[x]).unwrap(), argmax(&scores));
        }
    }

    #[test]
    fn degenerate_categorical() {
        let gmm = DiagGmm::new(vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample(&gmm, &mut rng).1, 0);
        }
    }

    #[test]
    fn vanishing_variance_returns_mean() {
        let gmm = DiagGmm::new(vec![0.4, 0.6], vec![1.0, -2.0, 3.0, 0.5], vec![1e-20; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (e, j) = sample(&gmm, &mut rng);
            for (x, mu) in e.iter().zip(gmm.mean(j)) {
                assert!((x - mu).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let gmm = DiagGmm::new(vec![0.3, 0.7], vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample(&gmm, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn empirical_mean_matches_mixture_mean() {
        let gmm = DiagGmm::new(
            vec![0.2, 0.5, 0.3],
            vec![-3.0, 1.0, 0.0, 2.0, 4.0, -1.0],
            vec![1.0, 0.5, 2.0, 1.0, 0.3, 0.7],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for _ in 0..n {
            let (e, _) = sample(&gmm, &mut rng);
            for d in 0..2 {
                sum[d] += e[d];
                sum_sq[d] += e[d] * e[d];
            }
        }
        let target = gmm.overall_mean();
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let var = sum_sq[d] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - target[d]).abs() < 4.0 * se, "dim {d}: {mean} vs {}", target[d]);
        }
    }

    #[test]
    fn single_gaussian_mean_gradient() {
        let raw = RawGmmParams::new(vec![0.3], vec![1.0, -2.0], vec![0.5, -0.2]).unwrap();
        let e = [0.2, 0.7];
        let (_, g) = nll_and_grad(&raw, &e).unwrap();
        for d in 0..2 {
            let var = raw.log_vars[d].exp();
            assert!((g.means[d] - (raw.means[d] - e[d]) / var).abs() < 1e-15);
        }
        assert_eq!(g.alpha[0], 0.0);
    }

    #[test]
    fn at_mode_log_variance_gradient() {
        let raw = RawGmmParams::new(vec![0.0], vec![1.5, -0.5, 2.0], vec![0.1, 1.0, -1.0]).unwrap();
        let (_, g) = nll_and_grad(&raw, &[1.5, -0.5, 2.0]).unwrap();
        assert!(g.log_vars.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn clamped_log_variance_has_zero_gradient() {
        let raw = RawGmmParams::new(vec![0.0], vec![0.0], vec![12.0]).unwrap();
        let (_, g) = nll_and_grad(&raw, &[3.0]).unwrap();
        assert_eq!(g.log_vars[0], 0.0);
    }
}
