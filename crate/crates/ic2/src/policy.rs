//! PPO with generalized advantage estimation. One actor-critic pair per
//! policy (control and exploration), with decoupled policy/value weights
//! inside a shared parameter store.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{Activation, Mlp};
use crate::params::{Graph, ParamStore};
use crate::seeding::sample_index;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    /// Approximate-KL early-stop threshold.
    pub kl_stop: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.90,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 1.0e-4,
            kl_stop: 0.15,
        }
    }
}

/// Policy and value networks: two hidden layers of 128 tanh units each,
/// decoupled weights, categorical action head / scalar value head.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    policy: Mlp,
    value: Mlp,
    pub input_dim: usize,
    pub n_actions: usize,
}

impl ActorCritic {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        input_dim: usize,
        n_actions: usize,
    ) -> Self {
        Self {
            policy: Mlp::new(
                store,
                rng,
                "pi",
                &[input_dim, 128, 128, n_actions],
                Activation::Tanh,
            ),
            value: Mlp::new(store, rng, "vf", &[input_dim, 128, 128, 1], Activation::Tanh),
            input_dim,
            n_actions,
        }
    }

    /// Re-bind to a checkpointed store created by [`ActorCritic::new`]
    /// with the same dimensions.
    pub fn attach(
        store: &ParamStore,
        input_dim: usize,
        n_actions: usize,
    ) -> Result<Self, crate::params::ParamError> {
        Ok(Self {
            policy: Mlp::attach(store, "pi", 3, Activation::Tanh)?,
            value: Mlp::attach(store, "vf", 3, Activation::Tanh)?,
            input_dim,
            n_actions,
        })
    }

    /// Action probabilities for one input row.
    pub fn action_probs(&self, store: &ParamStore, input: &[f64]) -> Vec<f64> {
        let mut g = Graph::new(store);
        let x = g.tape.leaf(row(input));
        let logits = self.policy.forward(&mut g, x);
        let p = g.tape.softmax_groups(logits, self.n_actions);
        g.tape.value(p).iter().cloned().collect()
    }

    /// Sample an action and record its log-probability.
    pub fn act<R: Rng>(&self, store: &ParamStore, input: &[f64], rng: &mut R) -> (usize, f64) {
        let probs = self.action_probs(store, input);
        let a = sample_index(rng, &probs);
        (a, probs[a].ln())
    }

    pub fn value_of(&self, store: &ParamStore, input: &[f64]) -> f64 {
        let mut g = Graph::new(store);
        let x = g.tape.leaf(row(input));
        let v = self.value.forward(&mut g, x);
        g.tape.scalar(v)
    }
}

fn row(xs: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, xs.len()), xs.to_vec()).expect("row")
}

/// One collected step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub input: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
}

/// Collected rollouts, grouped by episode so advantages never cross
/// episode boundaries.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub episodes: Vec<Vec<Transition>>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// GAE recursion per episode with terminal bootstrap value 0; returns
/// flat (advantages, returns) in episode order.
pub fn gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut advantages = Vec::with_capacity(batch.len());
    let mut returns = Vec::with_capacity(batch.len());
    for ep in &batch.episodes {
        let t = ep.len();
        let mut adv = vec![0.0; t];
        let mut acc = 0.0;
        for i in (0..t).rev() {
            let v_next = if i + 1 < t { ep[i + 1].value } else { 0.0 };
            let delta = ep[i].reward + gamma * v_next - ep[i].value;
            acc = delta + gamma * lambda * acc;
            adv[i] = acc;
        }
        for (i, a) in adv.into_iter().enumerate() {
            advantages.push(a);
            returns.push(a + ep[i].value);
        }
    }
    (advantages, returns)
}

/// Zero-mean unit-variance normalization; a zero-variance batch is left
/// centered only.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 {
        adv.iter().map(|a| (a - mean) / sd).collect()
    } else {
        adv.iter().map(|a| a - mean).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub kl_drift: f64,
    pub epochs_run: usize,
}

/// Clipped-surrogate PPO update over shuffled minibatches; stops early
/// when the approximate KL to the collection policy exceeds `kl_stop`.
pub fn ppo_update<R: Rng>(
    ac: &ActorCritic,
    store: &mut ParamStore,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> PpoStats {
    let flat: Vec<&Transition> = batch.episodes.iter().flatten().collect();
    let n = flat.len();
    assert!(n > 0, "ppo_update: empty batch");
    let (adv_raw, returns) = gae(batch, cfg.gamma, cfg.lambda);
    let adv = normalize_advantages(&adv_raw);

    let mut stats = PpoStats::default();
    let mut mb_count = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let m = chunk.len();
            let mut x = Array2::zeros((m, ac.input_dim));
            let mut onehot = Array2::zeros((m, ac.n_actions));
            let mut lp_old = Array2::zeros((m, 1));
            let mut adv_col = Array2::zeros((m, 1));
            let mut ret_col = Array2::zeros((m, 1));
            for (r, &i) in chunk.iter().enumerate() {
                for (c, &v) in flat[i].input.iter().enumerate() {
                    x[(r, c)] = v;
                }
                onehot[(r, flat[i].action)] = 1.0;
                lp_old[(r, 0)] = flat[i].log_prob;
                adv_col[(r, 0)] = adv[i];
                ret_col[(r, 0)] = returns[i];
            }
            store.zero_grads();
            let (grads, mb) = {
                let mut g = Graph::new(store);
                let xi = g.tape.leaf(x);
                let oh = g.tape.leaf(onehot);
                let lpo = g.tape.leaf(lp_old);
                let ad = g.tape.leaf(adv_col);
                let rt = g.tape.leaf(ret_col);

                let logits = ac.policy.forward(&mut g, xi);
                let lp_all = g.tape.log_softmax_groups(logits, ac.n_actions);
                let p_all = g.tape.softmax_groups(logits, ac.n_actions);
                let sel = g.tape.mul(lp_all, oh);
                let lp = g.tape.row_sum(sel);
                let dlp = g.tape.sub(lp, lpo);
                let ratio = g.tape.exp(dlp);
                let clipped = g.tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
                let s1 = g.tape.mul(ratio, ad);
                let s2 = g.tape.mul(clipped, ad);
                let surr = g.tape.min_elem(s1, s2);
                let msurr = g.tape.mean(surr);
                let policy_loss = g.tape.neg(msurr);

                let plp = g.tape.mul(p_all, lp_all);
                let ent_rows = g.tape.row_sum(plp);
                let ment = g.tape.mean(ent_rows);
                let entropy = g.tape.neg(ment);

                let v = ac.value.forward(&mut g, xi);
                let dv = g.tape.sub(v, rt);
                let sq = g.tape.mul(dv, dv);
                let value_loss = g.tape.mean(sq);

                let vscaled = g.tape.scale(value_loss, cfg.value_coef);
                let escaled = g.tape.scale(entropy, -cfg.entropy_coef);
                let pv = g.tape.add(policy_loss, vscaled);
                let total = g.tape.add(pv, escaled);

                let ratio_v = g.tape.value(ratio).clone();
                let clipped_frac = ratio_v
                    .iter()
                    .filter(|&&r| (r - 1.0).abs() > cfg.clip)
                    .count() as f64
                    / m as f64;
                let mb = (
                    g.tape.scalar(policy_loss),
                    g.tape.scalar(value_loss),
                    g.tape.scalar(entropy),
                    clipped_frac,
                );
                (g.take_grads(total), mb)
            };
            for (idx, grad) in grads {
                store.accumulate_grad(idx, &grad);
            }
            store.clip_grads(10.0);
            store.radam_step(cfg.lr);

            stats.policy_loss += mb.0;
            stats.value_loss += mb.1;
            stats.entropy += mb.2;
            stats.clip_fraction += mb.3;
            mb_count += 1;
        }
        stats.epochs_run += 1;
        stats.kl_drift = approx_kl(ac, store, &flat);
        if stats.kl_drift > cfg.kl_stop {
            break;
        }
    }
    let d = mb_count.max(1) as f64;
    stats.policy_loss /= d;
    stats.value_loss /= d;
    stats.entropy /= d;
    stats.clip_fraction /= d;
    stats
}

/// Mean(log_prob_old − log_prob_new) over the whole batch.
fn approx_kl(ac: &ActorCritic, store: &ParamStore, flat: &[&Transition]) -> f64 {
    let mut total = 0.0;
    for t in flat {
        let probs = ac.action_probs(store, &t.input);
        total += t.log_prob - probs[t.action].ln();
    }
    total / flat.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;

    fn zero_policy(store: &mut ParamStore) {
        for i in 0..store.len() {
            if store.name(i).starts_with("pi") {
                store.value_mut(i).fill(0.0);
            }
        }
    }

    #[test]
    fn equal_logits_sample_uniformly() {
        let mut rng = stream(1, &[]);
        let mut store = ParamStore::new();
        let ac = ActorCritic::new(&mut store, &mut rng, 3, 4);
        zero_policy(&mut store);
        let input = [0.3, -0.1, 0.7];
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (a, lp) = ac.act(&store, &input, &mut rng);
            counts[a] += 1;
            assert!((lp - (0.25f64).ln()).abs() < 1e-12);
        }
        // Chi-squared against uniform, 3 dof, alpha = 0.001.
        let expect = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        assert!(chi2 < 16.266, "chi2 {chi2}");
    }

    #[test]
    fn dominant_logit_takes_nearly_all_mass() {
        let mut rng = stream(2, &[]);
        let mut store = ParamStore::new();
        let ac = ActorCritic::new(&mut store, &mut rng, 3, 4);
        zero_policy(&mut store);
        let b = store.idx("pi.2.b").unwrap();
        store.value_mut(b)[(0, 2)] = 20.0;
        let probs = ac.action_probs(&store, &[0.0, 0.0, 0.0]);
        assert!(probs[2] > 0.999);
    }

    #[test]
    fn same_seed_and_input_give_same_action() {
        let mut init = stream(3, &[]);
        let mut store = ParamStore::new();
        let ac = ActorCritic::new(&mut store, &mut init, 3, 4);
        let input = [0.1, 0.2, 0.3];
        let a1 = ac.act(&store, &input, &mut stream(3, &[1])).0;
        let a2 = ac.act(&store, &input, &mut stream(3, &[1])).0;
        assert_eq!(a1, a2);
    }

    fn episode(rv: &[(f64, f64)]) -> Vec<Transition> {
        rv.iter()
            .map(|&(reward, value)| Transition {
                input: vec![0.0],
                action: 0,
                log_prob: 0.0,
                reward,
                value,
            })
            .collect()
    }

    #[test]
    fn gae_with_unit_discounts_is_return_minus_value() {
        let batch = RolloutBatch {
            episodes: vec![episode(&[(1.0, 0.3), (2.0, 0.1), (3.0, 0.7)])],
        };
        let (adv, ret) = gae(&batch, 1.0, 1.0);
        let totals = [6.0, 5.0, 3.0];
        for i in 0..3 {
            assert!((adv[i] - (totals[i] - batch.episodes[0][i].value)).abs() < 1e-12);
            assert!((ret[i] - totals[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_single_step_hand_case() {
        let batch = RolloutBatch {
            episodes: vec![episode(&[(1.0, 0.0)])],
        };
        let (adv, _) = gae(&batch, 0.99, 0.9);
        assert!((adv[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gae_three_step_matches_hand_unrolled_recursion() {
        // r=(1,0,1), V=0.5 everywhere, gamma=0.99, lambda=0.9.
        let g = 0.99;
        let l = 0.9;
        let batch = RolloutBatch {
            episodes: vec![episode(&[(1.0, 0.5), (0.0, 0.5), (1.0, 0.5)])],
        };
        let d2 = 1.0 - 0.5;
        let d1 = 0.0 + g * 0.5 - 0.5;
        let d0 = 1.0 + g * 0.5 - 0.5;
        let a2 = d2;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        let (adv, ret) = gae(&batch, g, l);
        for (got, want) in adv.iter().zip([a0, a1, a2]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((ret[0] - (a0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gae_respects_episode_boundaries() {
        let batch = RolloutBatch {
            episodes: vec![episode(&[(1.0, 0.0)]), episode(&[(1.0, 0.0)])],
        };
        let (adv, _) = gae(&batch, 0.99, 0.9);
        // No bootstrap across the boundary: both advantages are 1.
        assert_eq!(adv, vec![1.0, 1.0]);
    }

    #[test]
    fn normalization_preserves_advantage_argmax() {
        let adv = [0.3, -2.0, 5.0, 1.1];
        let norm = normalize_advantages(&adv);
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(&adv), argmax(&norm));
        let mean: f64 = norm.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    fn collected_batch(
        ac: &ActorCritic,
        store: &ParamStore,
        rng: &mut impl Rng,
        rewards: &[f64],
    ) -> RolloutBatch {
        let eps = rewards
            .iter()
            .map(|&r| {
                let input = vec![rng.random::<f64>(), rng.random::<f64>()];
                let (a, lp) = ac.act(store, &input, rng);
                vec![Transition {
                    value: ac.value_of(store, &input),
                    input,
                    action: a,
                    log_prob: lp,
                    reward: r,
                }]
            })
            .collect();
        RolloutBatch { episodes: eps }
    }

    #[test]
    fn fresh_batch_has_zero_clip_fraction() {
        // Ratios are exactly 1 on the first minibatch, so with a single
        // minibatch and epoch nothing is clipped and the clipped surrogate
        // equals the unclipped one.
        let mut rng = stream(5, &[]);
        let mut store = ParamStore::new();
        let ac = ActorCritic::new(&mut store, &mut rng, 2, 3);
        let batch = collected_batch(&ac, &store, &mut rng, &[1.0, -1.0, 0.5, 0.2]);
        let cfg = PpoConfig {
            epochs: 1,
            minibatch: 64,
            ..PpoConfig::default()
        };
        let stats = ppo_update(&ac, &mut store, &batch, &cfg, &mut rng);
        assert_eq!(stats.clip_fraction, 0.0);
        assert_eq!(stats.epochs_run, 1);
    }

    #[test]
    fn zero_advantages_leave_policy_untouched_without_entropy_bonus() {
        let mut rng = stream(6, &[]);
        let mut store = ParamStore::new();
        let ac = ActorCritic::new(&mut store, &mut rng, 2, 3);
        // Zero the value head so collected values are exactly 0; with all
        // rewards zero every advantage is then exactly zero.
        for i in 0..store.len() {
            if store.name(i).starts_with("vf") {
                store.value_mut(i).fill(0.0);
            }
        }
        let batch = collected_batch(&ac, &store, &mut rng, &[0.0, 0.0, 0.0]);
        let before: Vec<_> = (0..store.len())
            .filter(|&i| store.name(i).starts_with("pi"))
            .map(|i| (i, store.value(i).clone()))
            .collect();
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            epochs: 2,
            ..PpoConfig::default()
        };
        ppo_update(&ac, &mut store, &batch, &cfg, &mut rng);
        for (i, v) in before {
            assert_eq!(store.value(i), &v, "param {} moved", store.name(i));
        }
    }

    #[test]
    fn positive_advantage_action_probability_increases() {
        let mut rng = stream(7, &[]);
        let mut store = ParamStore::new();
        let ac = ActorCritic::new(&mut store, &mut rng, 2, 3);
        // Same input, different actions: the positive-advantage action's
        // probability must rise, reinforced from both sides.
        let input = vec![0.2, -0.4];
        let probs = ac.action_probs(&store, &input);
        let episodes = [(0usize, 1.0), (1usize, -1.0)]
            .iter()
            .map(|&(a, reward)| {
                vec![Transition {
                    input: input.clone(),
                    action: a,
                    log_prob: probs[a].ln(),
                    reward,
                    value: 0.0,
                }]
            })
            .collect();
        let batch = RolloutBatch { episodes };
        let before = probs[0];
        let cfg = PpoConfig {
            lr: 1e-3,
            epochs: 1,
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        ppo_update(&ac, &mut store, &batch, &cfg, &mut rng);
        let after = ac.action_probs(&store, &input)[0];
        assert!(after > before, "{after} !> {before}");
    }

    #[test]
    fn single_step_batch_does_not_decrease_its_action_probability() {
        let mut rng = stream(8, &[]);
        let mut store = ParamStore::new();
        let ac = ActorCritic::new(&mut store, &mut rng, 2, 3);
        let batch = collected_batch(&ac, &store, &mut rng, &[1.0]);
        let t = &batch.episodes[0][0];
        let before = ac.action_probs(&store, &t.input)[t.action];
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            epochs: 1,
            ..PpoConfig::default()
        };
        ppo_update(&ac, &mut store, &batch, &cfg, &mut rng);
        let after = ac.action_probs(&store, &t.input)[t.action];
        assert!(after >= before);
    }

    #[test]
    fn value_regresses_to_constant_returns() {
        let mut rng = stream(9, &[]);
        let mut store = ParamStore::new();
        let ac = ActorCritic::new(&mut store, &mut rng, 2, 3);
        let c = 0.7;
        // gamma=lambda=1 with a 1-step episode makes returns = reward = c.
        let inputs: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let cfg = PpoConfig {
            gamma: 1.0,
            lambda: 1.0,
            lr: 1e-2,
            epochs: 1,
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        for _ in 0..500 {
            let episodes = inputs
                .iter()
                .map(|input| {
                    let (a, lp) = ac.act(&store, input, &mut rng);
                    vec![Transition {
                        input: input.clone(),
                        action: a,
                        log_prob: lp,
                        reward: c,
                        value: ac.value_of(&store, input),
                    }]
                })
                .collect();
            ppo_update(&ac, &mut store, &RolloutBatch { episodes }, &cfg, &mut rng);
        }
        let mse: f64 = inputs
            .iter()
            .map(|i| (ac.value_of(&store, i) - c).powi(2))
            .sum::<f64>()
            / inputs.len() as f64;
        assert!(mse < 1e-3, "value mse {mse}");
    }
}
