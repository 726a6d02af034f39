//! Intrinsic rewards: the within-episode latent-visitation model, the
//! niche-expansion/creation/certainty/infogain family, the NCI sum, and
//! the surprise-minimization baseline over raw observations.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::multicat::{log_sum_exp, MixtureOfMultiCat, MultiCat, OneHotAssignment};

/// Log-probabilities are clamped here before use as policy reward;
/// unbounded negatives destabilize advantage normalization.
pub const LOG_FLOOR: f64 = -50.0;

fn floor(x: f64) -> f64 {
    if x.is_nan() {
        LOG_FLOOR
    } else {
        x.max(LOG_FLOOR)
    }
}

/// Uniform mixture over the episode's belief snapshots q_0..q_t,
/// estimating the latent visitation d^π(z). Reset at episode start.
#[derive(Debug, Clone, Default)]
pub struct LatentVisitation {
    components: Vec<MixtureOfMultiCat>,
}

impl LatentVisitation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, belief: MixtureOfMultiCat) {
        self.components.push(belief);
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[MixtureOfMultiCat] {
        &self.components
    }

    /// log q̄(z) with uniform component weights 1/(t+1).
    pub fn log_prob(&self, z: &OneHotAssignment) -> f64 {
        assert!(!self.components.is_empty(), "visitation must be nonempty");
        let lps: Vec<f64> = self.components.iter().map(|c| c.log_prob(z)).collect();
        log_sum_exp(&lps) - (self.components.len() as f64).ln()
    }
}

/// Every reward signal for one step, in nats, all finite.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RewardVector {
    pub ne: f64,
    pub nc: f64,
    pub c: f64,
    pub i: f64,
    pub nci: f64,
    pub e: f64,
    pub smirl: f64,
}

/// Single-sample estimates of the reward family at z ~ q_t: sample a
/// particle by weight, then z from it. The visitation must already
/// contain q_t as its latest component; `prior` is the same-step temporal
/// prior mixture. Exploration and SMiRL slots are left at 0 for the
/// caller to fill. Returns the sampled particle index and z alongside.
pub fn step_rewards<R: Rng>(
    belief: &MixtureOfMultiCat,
    prior: &MixtureOfMultiCat,
    visitation: &LatentVisitation,
    rng: &mut R,
) -> (RewardVector, usize, OneHotAssignment) {
    let (particle, z) = belief.sample(rng);
    let s = floor(belief.log_prob(&z));
    let nc = floor(visitation.log_prob(&z));
    let i = s - floor(prior.log_prob(&z));
    let r = RewardVector {
        ne: nc - s,
        nc,
        c: s,
        i,
        nci: nc + i,
        e: 0.0,
        smirl: 0.0,
    };
    (r, particle, z)
}

/// Exact certainty reward for a single-component belief: −H(q_t).
pub fn r_certainty_exact(q: &MultiCat) -> f64 {
    -q.entropy()
}

/// Exact infogain reward for a single-component belief: KL(q_t ‖ prior).
pub fn r_infogain_exact(q: &MultiCat, prior: &MultiCat) -> f64 {
    q.kl(prior)
}

/// Exact niche-creation reward by exhaustive enumeration:
/// E_{q}[log q̄(z)] = −H(q, q̄).
pub fn r_niche_creation_exact(q: &MultiCat, v: &LatentVisitation) -> f64 {
    MultiCat::enumerate_assignments(q.k1(), q.k2())
        .iter()
        .map(|z| {
            let p = q.log_prob(z).exp();
            if p > 0.0 {
                p * v.log_prob(z)
            } else {
                0.0
            }
        })
        .sum()
}

/// Exact niche-expansion reward by exhaustive enumeration:
/// −KL(q ‖ q̄) = E_q[log q̄(z) − log q(z)].
pub fn r_niche_expansion_exact(q: &MultiCat, v: &LatentVisitation) -> f64 {
    MultiCat::enumerate_assignments(q.k1(), q.k2())
        .iter()
        .map(|z| {
            let lq = q.log_prob(z);
            let p = lq.exp();
            if p > 0.0 {
                p * (v.log_prob(z) - lq)
            } else {
                0.0
            }
        })
        .sum()
}

/// Running diagonal-Gaussian density over raw observations within one
/// episode, for the surprise-minimization baseline.
#[derive(Debug, Clone, Default)]
pub struct ObsVisitationModel {
    mean: Vec<f64>,
    m2: Vec<f64>,
    n: usize,
}

pub const SMIRL_VAR_FLOOR: f64 = 1e-4;

impl ObsVisitationModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// log p̂(o) under the running model, or 0 before any observation has
    /// been absorbed. Call before [`Self::absorb`].
    pub fn score(&self, o: &[f64]) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let n = self.n as f64;
        o.iter()
            .enumerate()
            .map(|(i, &x)| {
                let var = (self.m2[i] / n).max(SMIRL_VAR_FLOOR);
                let d = x - self.mean[i];
                -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
            })
            .sum()
    }

    /// Welford update of the per-pixel mean and (population) variance.
    pub fn absorb(&mut self, o: &[f64]) {
        if self.n == 0 {
            self.mean = o.to_vec();
            self.m2 = vec![0.0; o.len()];
            self.n = 1;
            return;
        }
        self.n += 1;
        let n = self.n as f64;
        for (i, &x) in o.iter().enumerate() {
            let d = x - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x - self.mean[i]);
        }
    }
}

/// Flatten an observation for the SMiRL model.
pub fn flatten_obs(o: &Array3<f64>) -> Vec<f64> {
    o.iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;
    use ndarray::{array, Array2};

    fn random_multicat<R: Rng>(rng: &mut R, k1: usize, k2: usize) -> MultiCat {
        let l = Array2::from_shape_fn((k1, k2), |_| rng.random_range(-2.0..2.0));
        MultiCat::from_logits(&l)
    }

    fn random_mixture<R: Rng>(rng: &mut R, n: usize, k1: usize, k2: usize) -> MixtureOfMultiCat {
        let comps = (0..n).map(|_| random_multicat(rng, k1, k2)).collect();
        MixtureOfMultiCat::uniform_mixture(comps).unwrap()
    }

    #[test]
    fn visitation_grows_one_component_per_push() {
        let mut rng = stream(1, &[]);
        let mut v = LatentVisitation::new();
        assert!(v.is_empty());
        for t in 1..=100 {
            v.push(random_mixture(&mut rng, 2, 2, 3));
            assert_eq!(v.len(), t);
        }
        // Uniform weights 1/100: a z impossible under 99 components but
        // certain under one scores ln(1/100).
        let onehot = MultiCat::from_probs(&array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let mut v = LatentVisitation::new();
        v.push(MixtureOfMultiCat::single(onehot.clone()));
        for _ in 0..99 {
            let other =
                MultiCat::from_probs(&array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
            v.push(MixtureOfMultiCat::single(other));
        }
        let z = OneHotAssignment::new(vec![0, 0], 3);
        assert!((v.log_prob(&z) - (0.01f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn first_step_niche_expansion_is_zero() {
        let mut rng = stream(2, &[]);
        for _ in 0..20 {
            let q = random_mixture(&mut rng, 3, 2, 3);
            let mut v = LatentVisitation::new();
            v.push(q.clone());
            let prior = random_mixture(&mut rng, 3, 2, 3);
            let (r, _, _) = step_rewards(&q, &prior, &v, &mut rng);
            assert!(r.ne.abs() < 1e-12);
        }
    }

    #[test]
    fn identical_beliefs_give_zero_niche_expansion_every_sample() {
        let mut rng = stream(3, &[]);
        let q = random_mixture(&mut rng, 2, 2, 3);
        let prior = random_mixture(&mut rng, 2, 2, 3);
        let mut v = LatentVisitation::new();
        for _ in 0..50 {
            v.push(q.clone());
        }
        for _ in 0..100 {
            let (r, _, _) = step_rewards(&q, &prior, &v, &mut rng);
            assert!(r.ne.abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_visitation_gives_constant_niche_creation() {
        let mut rng = stream(4, &[]);
        let mut v = LatentVisitation::new();
        v.push(MixtureOfMultiCat::single(MultiCat::uniform(2, 3)));
        let q = random_mixture(&mut rng, 2, 2, 3);
        let prior = random_mixture(&mut rng, 2, 2, 3);
        for _ in 0..50 {
            let (r, _, _) = step_rewards(&q, &prior, &v, &mut rng);
            assert!((r.nc - (-2.0 * (3f64).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_onehots_give_zero_niche_creation() {
        let onehot = MultiCat::from_probs(&array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let mut v = LatentVisitation::new();
        v.push(MixtureOfMultiCat::single(onehot.clone()));
        let z = OneHotAssignment::new(vec![1, 2], 3);
        assert_eq!(v.log_prob(&z), 0.0);
        assert_eq!(r_niche_creation_exact(&onehot, &v), 0.0);
    }

    #[test]
    fn certainty_exact_matches_limits() {
        let onehot = MultiCat::from_probs(&array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(r_certainty_exact(&onehot), 0.0);
        let u = MultiCat::uniform(2, 3);
        assert!((r_certainty_exact(&u) - (-2.0 * (3f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn infogain_exact_matches_limits() {
        let u = MultiCat::uniform(2, 3);
        assert_eq!(r_infogain_exact(&u, &u), 0.0);
        let onehot = MultiCat::from_probs(&array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert!((r_infogain_exact(&onehot, &u) - 2.0 * (3f64).ln()).abs() < 1e-12);
    }

    /// Sample-mean of each single-sample estimator vs its exhaustive
    /// brute-force value, within 3 standard errors at 10^4 samples.
    #[test]
    fn sample_estimates_match_brute_force_within_three_se() {
        let mut rng = stream(5, &[]);
        let n = 10_000;
        for trial in 0..5u64 {
            let mut rng_t = stream(5, &[trial]);
            let q = random_multicat(&mut rng_t, 2, 3);
            let prior = random_multicat(&mut rng_t, 2, 3);
            let mut v = LatentVisitation::new();
            for _ in 0..4 {
                v.push(random_mixture(&mut rng_t, 2, 2, 3));
            }
            v.push(MixtureOfMultiCat::single(q.clone()));

            let exact_ne = r_niche_expansion_exact(&q, &v);
            let exact_nc = r_niche_creation_exact(&q, &v);
            let exact_c = r_certainty_exact(&q);
            let exact_i = r_infogain_exact(&q, &prior);

            let belief = MixtureOfMultiCat::single(q.clone());
            let prior_mix = MixtureOfMultiCat::single(prior.clone());
            let mut sums = [0.0f64; 4];
            let mut sq = [0.0f64; 4];
            for _ in 0..n {
                let (r, _, _) = step_rewards(&belief, &prior_mix, &v, &mut rng);
                for (k, x) in [r.ne, r.nc, r.c, r.i].into_iter().enumerate() {
                    sums[k] += x;
                    sq[k] += x * x;
                }
            }
            for (k, exact) in [exact_ne, exact_nc, exact_c, exact_i].into_iter().enumerate() {
                let mean = sums[k] / n as f64;
                let var = (sq[k] / n as f64 - mean * mean).max(0.0);
                let se = (var / n as f64).sqrt().max(1e-12);
                assert!(
                    (mean - exact).abs() <= 3.0 * se,
                    "trial {trial} reward {k}: mean {mean} vs exact {exact} (se {se})"
                );
            }
        }
    }

    #[test]
    fn identities_hold_exactly_per_sample() {
        let mut rng = stream(6, &[]);
        for _ in 0..200 {
            let q = random_mixture(&mut rng, 3, 2, 3);
            let prior = random_mixture(&mut rng, 3, 2, 3);
            let mut v = LatentVisitation::new();
            v.push(random_mixture(&mut rng, 2, 2, 3));
            v.push(q.clone());
            let (r, _, z) = step_rewards(&q, &prior, &v, &mut rng);
            assert_eq!(r.nci, r.nc + r.i);
            let s = q.log_prob(&z).max(LOG_FLOOR);
            assert_eq!(r.ne, r.nc - s);
            assert_eq!(r.c, s);
        }
    }

    #[test]
    fn exact_kl_rewards_are_nonnegative() {
        let mut rng = stream(7, &[]);
        for _ in 0..100 {
            let q = random_multicat(&mut rng, 2, 3);
            let prior = random_multicat(&mut rng, 2, 3);
            let mut v = LatentVisitation::new();
            v.push(MixtureOfMultiCat::single(random_multicat(&mut rng, 2, 3)));
            v.push(MixtureOfMultiCat::single(q.clone()));
            assert!(-r_niche_expansion_exact(&q, &v) >= -1e-12);
            assert!(r_infogain_exact(&q, &prior) >= -1e-12);
        }
    }

    #[test]
    fn impossible_samples_hit_the_floor() {
        // A visitation that assigns zero mass to the sampled z clamps at
        // the floor instead of propagating −∞.
        let onehot = MultiCat::from_probs(&array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let other = MultiCat::from_probs(&array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let mut v = LatentVisitation::new();
        v.push(MixtureOfMultiCat::single(other));
        let belief = MixtureOfMultiCat::single(onehot);
        let mut rng = stream(8, &[]);
        let (r, _, _) = step_rewards(&belief, &belief, &v, &mut rng);
        assert_eq!(r.nc, LOG_FLOOR);
        assert!(r.ne.is_finite() && r.nci.is_finite());
    }

    #[test]
    fn smirl_constant_observations_are_nondecreasing() {
        let mut m = ObsVisitationModel::new();
        let o = vec![0.3; 8];
        let mut last = f64::NEG_INFINITY;
        m.absorb(&o);
        for _ in 0..20 {
            let r = m.score(&o);
            assert!(r >= last);
            last = r;
            m.absorb(&o);
        }
    }

    #[test]
    fn smirl_prefers_observations_at_the_mean() {
        let mut m = ObsVisitationModel::new();
        m.absorb(&[0.0, 0.0]);
        m.absorb(&[1.0, 1.0]);
        let near = m.score(&[0.5, 0.5]);
        let far = m.score(&[3.0, 3.0]);
        assert!(near > far);
    }

    #[test]
    fn smirl_matches_closed_form_gaussian() {
        let mut m = ObsVisitationModel::new();
        m.absorb(&[0.0]);
        m.absorb(&[2.0]);
        // mean 1, population variance 1.
        let o = 1.5;
        let want = -0.5 * ((2.0 * std::f64::consts::PI).ln() + 0.25);
        assert!((m.score(&[o]) - want).abs() < 1e-12);
        // Variance floor: two identical samples give var 1e-4.
        let mut m2 = ObsVisitationModel::new();
        m2.absorb(&[0.5]);
        m2.absorb(&[0.5]);
        let want2 = -0.5 * (2.0 * std::f64::consts::PI * SMIRL_VAR_FLOOR).ln();
        assert!((m2.score(&[0.5]) - want2).abs() < 1e-12);
    }

    #[test]
    fn smirl_scores_zero_before_first_observation() {
        let m = ObsVisitationModel::new();
        assert_eq!(m.score(&[1.0, 2.0]), 0.0);
    }

    /// Behavioral check with exact beliefs: the lock-everything oracle
    /// collects strictly more cumulative certainty reward than standing
    /// still, because locking collapses belief entropy.
    #[test]
    fn oracle_beats_noop_on_cumulative_certainty() {
        use crate::exact_belief::ExactFilter;
        use crate::worlds::{oracle_policy, Action, TwoRoomConfig, TwoRoomEnv};

        let run = |seed: u64, use_oracle: bool| -> f64 {
            let (mut env, _) = TwoRoomEnv::reset(TwoRoomConfig::normal(), seed).unwrap();
            let geo = env.geo.clone();
            let mut filter = ExactFilter::new(&geo, env.privileged_state().particles.len());
            filter.observe_initial(&env).unwrap();
            let mut total = 0.0;
            for _ in 0..60 {
                let a = if use_oracle {
                    oracle_policy(&env)
                } else {
                    Action::NoOp
                };
                env.step(a).unwrap();
                filter.step(&env, a == Action::Tag).unwrap();
                total += r_certainty_exact(&filter.to_multicat());
            }
            total
        };
        let mut wins = 0;
        for seed in 0..20 {
            if run(seed, true) > run(seed, false) {
                wins += 1;
            }
        }
        assert_eq!(wins, 20);
    }
}
