//! Exact algebra for products of categorical distributions and their
//! mixtures: sampling, log-probability, entropy, cross-entropy, KL, and
//! mixture log-probability.
//!
//! All probability arithmetic is carried in log space; `log 0 := -inf` and
//! `0 * log 0 := 0` throughout.

use ndarray::Array2;
use thiserror::Error;

use crate::seeding::sample_index;

#[derive(Debug, Error)]
pub enum MultiCatError {
    #[error("row {row} sums to {sum}, not 1 within 1e-9")]
    Unnormalized { row: usize, sum: f64 },
    #[error("empty distribution: K1 and K2 must be >= 1")]
    Empty,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("mixture weights sum to {0}, not 1 within 1e-9")]
    BadWeights(f64),
    #[error("mixture has no components")]
    NoComponents,
}

/// Log-sum-exp of a slice; `-inf` for an all`-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// A product of `K1` categorical distributions over `K2` categories,
/// held as row-normalized log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCat {
    log_probs: Array2<f64>,
}

/// A joint one-hot assignment: one selected category per factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotAssignment {
    selected: Vec<usize>,
    k2: usize,
}

impl OneHotAssignment {
    pub fn new(selected: Vec<usize>, k2: usize) -> Self {
        assert!(selected.iter().all(|&s| s < k2), "category out of range");
        Self { selected, k2 }
    }

    pub fn k1(&self) -> usize {
        self.selected.len()
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Dense `[K1, K2]` binary matrix with exactly one 1 per row.
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.selected.len(), self.k2));
        for (r, &c) in self.selected.iter().enumerate() {
            m[(r, c)] = 1.0;
        }
        m
    }

    /// Flattened `[1, K1*K2]` row, the network-facing layout.
    pub fn to_flat_row(&self) -> Array2<f64> {
        let k1 = self.selected.len();
        let mut m = Array2::zeros((1, k1 * self.k2));
        for (r, &c) in self.selected.iter().enumerate() {
            m[(0, r * self.k2 + c)] = 1.0;
        }
        m
    }

    /// Recover the assignment from a flattened one-hot row.
    pub fn from_flat_row(row: &Array2<f64>, k1: usize, k2: usize) -> Self {
        assert_eq!(row.dim(), (1, k1 * k2));
        let selected = (0..k1)
            .map(|r| {
                (0..k2)
                    .max_by(|&a, &b| row[(0, r * k2 + a)].total_cmp(&row[(0, r * k2 + b)]))
                    .unwrap()
            })
            .collect();
        Self { selected, k2 }
    }
}

impl MultiCat {
    /// Canonical construction: row-wise log-softmax of raw logits.
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let (k1, k2) = logits.dim();
        assert!(k1 >= 1 && k2 >= 1, "K1 and K2 must be >= 1");
        let mut lp = logits.clone();
        for mut row in lp.rows_mut() {
            let lse = log_sum_exp(row.as_slice().unwrap());
            row.mapv_inplace(|x| x - lse);
        }
        Self { log_probs: lp }
    }

    /// Construction from explicit probabilities; rows must sum to 1 within 1e-9.
    pub fn from_probs(probs: &Array2<f64>) -> Result<Self, MultiCatError> {
        let (k1, k2) = probs.dim();
        if k1 < 1 || k2 < 1 {
            return Err(MultiCatError::Empty);
        }
        for (row, r) in probs.rows().into_iter().zip(0..) {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MultiCatError::Unnormalized { row: r, sum });
            }
        }
        Ok(Self {
            log_probs: probs.mapv(f64::ln),
        })
    }

    pub fn uniform(k1: usize, k2: usize) -> Self {
        Self::from_logits(&Array2::zeros((k1, k2)))
    }

    pub fn k1(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn k2(&self) -> usize {
        self.log_probs.ncols()
    }

    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    /// Probabilities, materialized on demand.
    pub fn probs(&self) -> Array2<f64> {
        self.log_probs.mapv(f64::exp)
    }

    /// `sum_k1 log p[k1, z_k1]`; `-inf` if a zero-probability category is
    /// selected.
    pub fn log_prob(&self, z: &OneHotAssignment) -> f64 {
        assert_eq!(
            (z.k1(), z.k2()),
            self.log_probs.dim(),
            "log_prob: shape mismatch {:?} vs {:?}",
            (z.k1(), z.k2()),
            self.log_probs.dim()
        );
        z.selected
            .iter()
            .enumerate()
            .map(|(r, &c)| self.log_probs[(r, c)])
            .sum()
    }

    /// Exact Shannon entropy in nats, summed over factors.
    pub fn entropy(&self) -> f64 {
        self.log_probs
            .iter()
            .map(|&lp| {
                if lp == f64::NEG_INFINITY {
                    0.0
                } else {
                    -lp.exp() * lp
                }
            })
            .sum()
    }

    /// Exact `KL(self || q)` in nats; `+inf` where `q` lacks mass that
    /// `self` has.
    pub fn kl(&self, q: &MultiCat) -> f64 {
        assert_eq!(
            self.log_probs.dim(),
            q.log_probs.dim(),
            "kl: shape mismatch {:?} vs {:?}",
            self.log_probs.dim(),
            q.log_probs.dim()
        );
        self.log_probs
            .iter()
            .zip(q.log_probs.iter())
            .map(|(&lp, &lq)| {
                if lp == f64::NEG_INFINITY {
                    0.0
                } else {
                    lp.exp() * (lp - lq)
                }
            })
            .sum()
    }

    /// Exact cross-entropy `H(self, q)` in nats.
    pub fn cross_entropy(&self, q: &MultiCat) -> f64 {
        self.entropy() + self.kl(q)
    }

    /// One exact categorical sample per factor.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> OneHotAssignment {
        let k2 = self.k2();
        let selected = self
            .log_probs
            .rows()
            .into_iter()
            .map(|row| {
                let probs: Vec<f64> = row.iter().map(|&lp| lp.exp()).collect();
                sample_index(rng, &probs)
            })
            .collect();
        OneHotAssignment::new(selected, k2)
    }

    /// Enumerate all `K2^K1` assignments (test-scale sizes only).
    pub fn enumerate_assignments(k1: usize, k2: usize) -> Vec<OneHotAssignment> {
        let total = k2.pow(k1 as u32);
        (0..total)
            .map(|mut idx| {
                let mut sel = vec![0; k1];
                for s in sel.iter_mut().rev() {
                    *s = idx % k2;
                    idx /= k2;
                }
                OneHotAssignment::new(sel, k2)
            })
            .collect()
    }
}

/// A finite mixture of shape-compatible [`MultiCat`] components.
#[derive(Debug, Clone)]
pub struct MixtureOfMultiCat {
    components: Vec<MultiCat>,
    log_weights: Vec<f64>,
}

impl MixtureOfMultiCat {
    pub fn new(components: Vec<MultiCat>, weights: &[f64]) -> Result<Self, MultiCatError> {
        if components.is_empty() {
            return Err(MultiCatError::NoComponents);
        }
        assert_eq!(components.len(), weights.len());
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MultiCatError::BadWeights(sum));
        }
        let dim = components[0].log_probs.dim();
        for c in &components[1..] {
            if c.log_probs.dim() != dim {
                return Err(MultiCatError::Shape(dim, c.log_probs.dim()));
            }
        }
        Ok(Self {
            components,
            log_weights: weights.iter().map(|&w| w.ln()).collect(),
        })
    }

    /// Single-component wrapper.
    pub fn single(component: MultiCat) -> Self {
        Self {
            components: vec![component],
            log_weights: vec![0.0],
        }
    }

    /// Uniform mixture over components.
    pub fn uniform_mixture(components: Vec<MultiCat>) -> Result<Self, MultiCatError> {
        if components.is_empty() {
            return Err(MultiCatError::NoComponents);
        }
        let n = components.len();
        let lw = -(n as f64).ln();
        Ok(Self {
            components,
            log_weights: vec![lw; n],
        })
    }

    pub fn components(&self) -> &[MultiCat] {
        &self.components
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|&lw| lw.exp()).collect()
    }

    pub fn k1(&self) -> usize {
        self.components[0].k1()
    }

    pub fn k2(&self) -> usize {
        self.components[0].k2()
    }

    /// `log sum_i w_i exp(log_prob_i(z))` via log-sum-exp.
    pub fn log_prob(&self, z: &OneHotAssignment) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, &lw)| lw + c.log_prob(z))
            .collect();
        log_sum_exp(&terms)
    }

    /// Sample a component by weight, then an assignment from it.
    /// Returns the component index alongside the sample.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> (usize, OneHotAssignment) {
        let probs = self.weights();
        let i = sample_index(rng, &probs);
        let z = self.components[i].sample(rng);
        (i, z)
    }
}
