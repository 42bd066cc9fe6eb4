//! Product parameter laws and the quadrature rules that drive the weighted POD.
//!
//! Four constructions are provided: Monte Carlo sampling, tensorized Gauss rules
//! orthogonal with respect to each component density, a Halton sequence pushed
//! through the inverse CDF, and tensorized Clenshaw–Curtis rules.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("rule size must be at least {min} (got {got})")]
    TooFewNodes { min: usize, got: usize },
    #[error("expected {expected} per-dimension node counts, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite recurrence coefficient at degree {0}")]
    NonFiniteMoments(usize),
    #[error("inverse CDF bisection did not converge for p = {0}")]
    InverseCdf(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One-dimensional law with compact support `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution1D {
    Uniform { lo: f64, hi: f64 },
    /// Beta(a, b) affinely mapped from `[0, 1]` to `[lo, hi]`.
    Beta { a: f64, b: f64, lo: f64, hi: f64 },
    /// Density proportional to `1/x` on `[lo, hi]`, `lo > 0`.
    Loguniform { lo: f64, hi: f64 },
}

impl Distribution1D {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self, QuadratureError> {
        let d = Distribution1D::Uniform { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn beta(a: f64, b: f64, lo: f64, hi: f64) -> Result<Self, QuadratureError> {
        let d = Distribution1D::Beta { a, b, lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn loguniform(lo: f64, hi: f64) -> Result<Self, QuadratureError> {
        let d = Distribution1D::Loguniform { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), QuadratureError> {
        let (lo, hi) = self.support();
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(QuadratureError::InvalidDistribution(format!(
                "support [{lo}, {hi}] is empty"
            )));
        }
        match *self {
            Distribution1D::Beta { a, b, .. } if !(a > 0.0 && b > 0.0) => Err(
                QuadratureError::InvalidDistribution(format!("Beta shape ({a}, {b}) must be positive")),
            ),
            Distribution1D::Loguniform { lo, .. } if lo <= 0.0 => Err(
                QuadratureError::InvalidDistribution(format!("loguniform needs lo > 0 (got {lo})")),
            ),
            _ => Ok(()),
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            Distribution1D::Uniform { lo, hi }
            | Distribution1D::Beta { lo, hi, .. }
            | Distribution1D::Loguniform { lo, hi } => (lo, hi),
        }
    }

    /// Same family moved to the support `[lo, hi]`.
    pub fn with_support(&self, lo: f64, hi: f64) -> Result<Self, QuadratureError> {
        let d = match *self {
            Distribution1D::Uniform { .. } => Distribution1D::Uniform { lo, hi },
            Distribution1D::Beta { a, b, .. } => Distribution1D::Beta { a, b, lo, hi },
            Distribution1D::Loguniform { .. } => Distribution1D::Loguniform { lo, hi },
        };
        d.validate()?;
        Ok(d)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo || x > hi {
            return 0.0;
        }
        match *self {
            Distribution1D::Uniform { .. } => 1.0 / (hi - lo),
            Distribution1D::Beta { a, b, .. } => {
                let t = (x - lo) / (hi - lo);
                let ln = (a - 1.0) * t.ln() + (b - 1.0) * (1.0 - t).ln() - ln_beta(a, b);
                // t^0 at the endpoints: ln(0) * 0 is NaN, handle it explicitly.
                let v = if (t == 0.0 && a == 1.0) || (t == 1.0 && b == 1.0) {
                    let other = if t == 0.0 { (b - 1.0) * (1.0 - t).ln() } else { (a - 1.0) * t.ln() };
                    (other - ln_beta(a, b)).exp()
                } else {
                    ln.exp()
                };
                v / (hi - lo)
            }
            Distribution1D::Loguniform { .. } => 1.0 / (x * (hi / lo).ln()),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        match *self {
            Distribution1D::Uniform { .. } => (x - lo) / (hi - lo),
            Distribution1D::Beta { a, b, .. } => beta_reg(a, b, (x - lo) / (hi - lo)),
            Distribution1D::Loguniform { .. } => (x / lo).ln() / (hi / lo).ln(),
        }
    }

    /// Inverse CDF; closed form for uniform and loguniform, bisection to `1e-12`
    /// in probability for Beta.
    pub fn inverse_cdf(&self, p: f64) -> Result<f64, QuadratureError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(QuadratureError::InverseCdf(p));
        }
        let (lo, hi) = self.support();
        match *self {
            Distribution1D::Uniform { .. } => Ok(lo + (hi - lo) * p),
            Distribution1D::Loguniform { .. } => Ok((lo * (hi / lo).powf(p)).clamp(lo, hi)),
            Distribution1D::Beta { .. } => {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    let fm = self.cdf(m);
                    if (fm - p).abs() <= 1e-12 || b - a <= f64::EPSILON * hi.abs().max(lo.abs()) {
                        return Ok(m);
                    }
                    if fm < p {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                Err(QuadratureError::InverseCdf(p))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.support();
        match *self {
            Distribution1D::Uniform { .. } => lo + (hi - lo) * rng.random::<f64>(),
            Distribution1D::Beta { a, b, .. } => {
                let t = rand_distr::Beta::new(a, b)
                    .expect("validated shape parameters")
                    .sample(rng);
                lo + (hi - lo) * t
            }
            Distribution1D::Loguniform { .. } => lo * (hi / lo).powf(rng.random::<f64>()),
        }
    }

    /// Monic three-term recurrence `(a_k, b_k)` of the orthogonal polynomials of this law,
    /// `p_{k+1}(x) = (x − a_k) p_k(x) − b_k p_{k−1}(x)`, for `k < n`. `b_0 = 1`.
    pub fn recurrence(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
        let (lo, hi) = self.support();
        let (mut alpha, mut beta) = match *self {
            Distribution1D::Uniform { .. } => jacobi_recurrence(n, 0.0, 0.0),
            // Beta(a, b) on [0, 1] is the Jacobi weight (1−t)^{b−1}(1+t)^{a−1} on [−1, 1].
            Distribution1D::Beta { a, b, .. } => jacobi_recurrence(n, b - 1.0, a - 1.0),
            Distribution1D::Loguniform { .. } => return loguniform_recurrence(lo, hi, n),
        };
        // Map from [−1, 1] to [lo, hi]: x = c + s t.
        let (c, s) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for a in alpha.iter_mut() {
            *a = c + s * *a;
        }
        for b in beta.iter_mut().skip(1) {
            *b *= s * s;
        }
        for (k, (a, b)) in alpha.iter().zip(&beta).enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(QuadratureError::NonFiniteMoments(k));
            }
        }
        Ok((alpha, beta))
    }
}

impl fmt::Display for Distribution1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Distribution1D::Uniform { lo, hi } => write!(f, "uniform[{lo}, {hi}]"),
            Distribution1D::Beta { a, b, lo, hi } => write!(f, "beta({a}, {b})[{lo}, {hi}]"),
            Distribution1D::Loguniform { lo, hi } => write!(f, "loguniform[{lo}, {hi}]"),
        }
    }
}

/// Monic Jacobi recurrence for the weight `(1−t)^α (1+t)^β`, normalized to a probability measure.
fn jacobi_recurrence(n: usize, alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let ab = alpha + beta;
    for k in 0..n {
        let kf = k as f64;
        let ak = if k == 0 {
            (beta - alpha) / (ab + 2.0)
        } else {
            let s = 2.0 * kf + ab;
            (beta * beta - alpha * alpha) / (s * (s + 2.0))
        };
        let bk = match k {
            0 => 1.0,
            1 => 4.0 * (1.0 + alpha) * (1.0 + beta) / ((ab + 2.0).powi(2) * (ab + 3.0)),
            _ => {
                let s = 2.0 * kf + ab;
                4.0 * kf * (kf + alpha) * (kf + beta) * (kf + ab) / (s * s * (s + 1.0) * (s - 1.0))
            }
        };
        a.push(ak);
        b.push(bk);
    }
    (a, b)
}

/// Discretized Stieltjes procedure; the loguniform law is uniform in `s = ln x`, so a
/// fine Gauss–Legendre rule in `s` resolves all moments needed here to machine precision.
fn loguniform_recurrence(lo: f64, hi: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    let (t, w) = gauss_legendre(256);
    let (slo, shi) = (lo.ln(), hi.ln());
    let x: Vec<f64> = t.iter().map(|&t| (0.5 * (slo + shi) + 0.5 * (shi - slo) * t).exp()).collect();
    let w: Vec<f64> = w.iter().map(|w| 0.5 * w).collect();
    stieltjes(&x, &w, n)
}

fn stieltjes(x: &[f64], w: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut p_prev = vec![0.0; x.len()];
    let mut p = vec![1.0; x.len()];
    let mut norm_prev = 1.0;
    for k in 0..n {
        let norm: f64 = p.iter().zip(w).map(|(p, w)| w * p * p).sum();
        let ak = p.iter().zip(w).zip(x).map(|((p, w), x)| w * x * p * p).sum::<f64>() / norm;
        let bk = if k == 0 { norm } else { norm / norm_prev };
        if !ak.is_finite() || !bk.is_finite() || norm <= 0.0 {
            return Err(QuadratureError::NonFiniteMoments(k));
        }
        a.push(ak);
        b.push(bk);
        let next: Vec<f64> = (0..x.len())
            .map(|i| (x[i] - ak) * p[i] - if k == 0 { 0.0 } else { bk * p_prev[i] })
            .collect();
        p_prev = std::mem::replace(&mut p, next);
        norm_prev = norm;
    }
    Ok((a, b))
}

/// Golub–Welsch: nodes are eigenvalues of the Jacobi matrix, weights the squared
/// first eigenvector components (times the total mass `b_0`).
fn golub_welsch(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    let mut j = DMatrix::zeros(n, n);
    for k in 0..n {
        j[(k, k)] = a[k];
        if k + 1 < n {
            let off = b[k + 1].sqrt();
            j[(k, k + 1)] = off;
            j[(k + 1, k)] = off;
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], b[0] * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    pairs.into_iter().unzip()
}

/// Gauss–Legendre nodes and weights on `[−1, 1]` (weights sum to 2), Newton on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (z * pn - pn1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// One-dimensional Gauss rule for `dist`: exact for polynomials of degree `≤ 2n − 1`.
pub fn gauss_rule_1d(dist: &Distribution1D, n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::TooFewNodes { min: 1, got: 0 });
    }
    let (a, b) = dist.recurrence(n)?;
    let (x, w) = golub_welsch(&a, &b);
    let (lo, hi) = dist.support();
    Ok((x.into_iter().map(|x| x.clamp(lo, hi)).collect(), w))
}

/// Clenshaw–Curtis nodes `cos(jπ/(n−1))` (ascending) and weights on `[−1, 1]` (sum 2).
pub fn clenshaw_curtis_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    if n < 2 {
        return Err(QuadratureError::TooFewNodes { min: 2, got: n });
    }
    let m = n - 1;
    let mf = m as f64;
    let pi = std::f64::consts::PI;
    let mut x = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for j in 0..=m {
        let theta = pi * j as f64 / mf;
        x.push(-theta.cos());
        let cj = if j == 0 || j == m { 1.0 } else { 2.0 };
        let mut s = 0.0;
        for k in 1..=m / 2 {
            let bk = if 2 * k == m { 1.0 } else { 2.0 };
            s += bk / (4.0 * (k * k) as f64 - 1.0) * (2.0 * k as f64 * theta).cos();
        }
        w.push(cj / mf * (1.0 - s));
    }
    // Exact symmetry and an exact zero at the midpoint.
    for j in 0..n / 2 {
        let v = 0.5 * (x[n - 1 - j] - x[j]);
        x[j] = -v;
        x[n - 1 - j] = v;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    Ok((x, w))
}

/// Low-discrepancy radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

/// Leading Halton points dropped by the pseudo-random rule; the unshifted start is biased toward 0.
pub const HALTON_SKIP: u64 = 1000;

const PRIMES: [u64; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

/// Point `index` (starting at 1) of the Halton sequence in `dim` dimensions.
pub fn halton_point(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "Halton sequence supports up to {} dimensions", PRIMES.len());
    PRIMES[..dim].iter().map(|&b| radical_inverse(index, b)).collect()
}

/// Independent product of one-dimensional laws; the parameter box is the product of supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductDistribution(pub Vec<Distribution1D>);

impl ProductDistribution {
    pub fn new(components: Vec<Distribution1D>) -> Result<Self, QuadratureError> {
        for c in &components {
            c.validate()?;
        }
        Ok(Self(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[Distribution1D] {
        &self.0
    }

    pub fn pdf(&self, mu: &[f64]) -> f64 {
        self.0.iter().zip(mu).map(|(d, &x)| d.pdf(x)).product()
    }

    pub fn contains(&self, mu: &[f64]) -> bool {
        self.0.iter().zip(mu).all(|(d, &x)| {
            let (lo, hi) = d.support();
            x >= lo && x <= hi
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.0.iter().map(|d| d.sample(rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    MonteCarlo,
    Gauss,
    PseudoRandom,
    ClenshawCurtis,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleKind::MonteCarlo => "mc",
            RuleKind::Gauss => "gauss",
            RuleKind::PseudoRandom => "pseudo",
            RuleKind::ClenshawCurtis => "cc",
        })
    }
}

impl std::str::FromStr for RuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mc" => Ok(RuleKind::MonteCarlo),
            "gauss" => Ok(RuleKind::Gauss),
            "pseudo" => Ok(RuleKind::PseudoRandom),
            "cc" => Ok(RuleKind::ClenshawCurtis),
            other => Err(format!("unknown rule `{other}` (mc|gauss|pseudo|cc)")),
        }
    }
}

/// How Clenshaw–Curtis rules are adapted to a non-uniform density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcWeighting {
    /// Nodes mapped affinely to `[lo, hi]`, weight multiplied by `pdf(node) (hi − lo)/2`.
    #[default]
    PdfFactor,
    /// Loguniform components get nodes in `ln x` (where the law is uniform); others as `PdfFactor`.
    LogSpace,
}

/// Nodes in the parameter box with nonzero weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub kind: RuleKind,
    /// Free-form provenance (e.g. whether weights were renormalized or nodes dropped).
    pub note: String,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes.first().map_or(0, Vec::len)
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }

    /// One row per node: coordinates followed by the weight.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), QuadratureError> {
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("mu{i}")).collect();
        writeln!(out, "{},weight", header.join(","))?;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let coords: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{},{w:.17e}", coords.join(","))?;
        }
        Ok(())
    }
}

fn tensorize(per_dim: &[(Vec<f64>, Vec<f64>)]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut nodes = vec![Vec::new()];
    let mut weights = vec![1.0];
    for (x, w) in per_dim {
        let mut nn = Vec::with_capacity(nodes.len() * x.len());
        let mut nw = Vec::with_capacity(nodes.len() * x.len());
        for (node, &wt) in nodes.iter().zip(&weights) {
            for (xi, wi) in x.iter().zip(w) {
                let mut p = node.clone();
                p.push(*xi);
                nn.push(p);
                nw.push(wt * wi);
            }
        }
        nodes = nn;
        weights = nw;
    }
    (nodes, weights)
}

fn check_counts(dist: &ProductDistribution, counts: &[usize]) -> Result<(), QuadratureError> {
    if counts.len() != dist.dim() {
        return Err(QuadratureError::DimensionMismatch {
            expected: dist.dim(),
            got: counts.len(),
        });
    }
    Ok(())
}

/// `m` iid draws, every weight `1/m`, reproducible per seed.
pub fn monte_carlo_rule(dist: &ProductDistribution, m: usize, seed: u64) -> Result<QuadratureRule, QuadratureError> {
    if m == 0 {
        return Err(QuadratureError::TooFewNodes { min: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..m).map(|_| dist.sample(&mut rng)).collect();
    Ok(QuadratureRule {
        nodes,
        weights: vec![1.0 / m as f64; m],
        kind: RuleKind::MonteCarlo,
        note: format!("seed={seed}"),
    })
}

/// Tensor product of density-adapted Gauss rules.
pub fn gauss_tensor_rule(dist: &ProductDistribution, nodes_per_dim: &[usize]) -> Result<QuadratureRule, QuadratureError> {
    check_counts(dist, nodes_per_dim)?;
    let per_dim = dist
        .components()
        .iter()
        .zip(nodes_per_dim)
        .map(|(d, &n)| gauss_rule_1d(d, n))
        .collect::<Result<Vec<_>, _>>()?;
    let (nodes, weights) = tensorize(&per_dim);
    Ok(QuadratureRule {
        nodes,
        weights,
        kind: RuleKind::Gauss,
        note: "density-adapted Golub-Welsch".into(),
    })
}

/// First `m` Halton points (indices `1..=m`) mapped through each component's inverse CDF.
pub fn pseudo_random_rule(dist: &ProductDistribution, m: usize) -> Result<QuadratureRule, QuadratureError> {
    if m == 0 {
        return Err(QuadratureError::TooFewNodes { min: 1, got: 0 });
    }
    let nodes = (HALTON_SKIP + 1..=HALTON_SKIP + m as u64)
        .map(|i| {
            halton_point(i, dist.dim())
                .into_iter()
                .zip(dist.components())
                .map(|(u, d)| d.inverse_cdf(u))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QuadratureRule {
        nodes,
        weights: vec![1.0 / m as f64; m],
        kind: RuleKind::PseudoRandom,
        note: format!("halton (skip {HALTON_SKIP}) + inverse CDF"),
    })
}

/// Tensor product of Clenshaw–Curtis rules adapted to each component (not renormalized).
/// Nodes whose weight is exactly zero (density vanishing at an endpoint) are dropped.
pub fn clenshaw_curtis_tensor_rule(
    dist: &ProductDistribution,
    nodes_per_dim: &[usize],
    weighting: CcWeighting,
) -> Result<QuadratureRule, QuadratureError> {
    check_counts(dist, nodes_per_dim)?;
    let mut dropped = 0;
    let per_dim = dist
        .components()
        .iter()
        .zip(nodes_per_dim)
        .map(|(d, &n)| {
            let (t, w) = clenshaw_curtis_1d(n)?;
            let (lo, hi) = d.support();
            let pairs: Vec<(f64, f64)> = match (d, weighting) {
                (Distribution1D::Loguniform { .. }, CcWeighting::LogSpace) => {
                    let (slo, shi) = (lo.ln(), hi.ln());
                    t.iter()
                        .zip(&w)
                        .map(|(&t, &w)| {
                            let x = (0.5 * (slo + shi) + 0.5 * (shi - slo) * t).exp().clamp(lo, hi);
                            (x, 0.5 * w)
                        })
                        .collect()
                }
                _ => t
                    .iter()
                    .zip(&w)
                    .map(|(&t, &w)| {
                        let x = (0.5 * (lo + hi) + 0.5 * (hi - lo) * t).clamp(lo, hi);
                        (x, w * d.pdf(x) * 0.5 * (hi - lo))
                    })
                    .collect(),
            };
            let kept: Vec<(f64, f64)> = pairs.into_iter().filter(|&(_, w)| w != 0.0).collect();
            dropped += n - kept.len();
            Ok(kept.into_iter().unzip())
        })
        .collect::<Result<Vec<(Vec<f64>, Vec<f64>)>, QuadratureError>>()?;
    let (nodes, weights) = tensorize(&per_dim);
    let sum: f64 = weights.iter().sum();
    Ok(QuadratureRule {
        nodes,
        weights,
        kind: RuleKind::ClenshawCurtis,
        note: format!(
            "weighting={weighting:?}; not renormalized (sum={sum:.15}); zero-weight 1D nodes dropped: {dropped}"
        ),
    })
}

/// Dispatch by kind. `size` is the node count for sampled rules and the per-dimension
/// count for tensor rules.
pub fn build_rule(
    kind: RuleKind,
    dist: &ProductDistribution,
    size: usize,
    seed: u64,
    cc: CcWeighting,
) -> Result<QuadratureRule, QuadratureError> {
    let per_dim = vec![size; dist.dim()];
    match kind {
        RuleKind::MonteCarlo => monte_carlo_rule(dist, size, seed),
        RuleKind::PseudoRandom => pseudo_random_rule(dist, size),
        RuleKind::Gauss => gauss_tensor_rule(dist, &per_dim),
        RuleKind::ClenshawCurtis => clenshaw_curtis_tensor_rule(dist, &per_dim, cc),
    }
}
