//! Latent state-space model: recurrent prior, measurement-update
//! posterior, observation decoder, particle-weighted belief, ELBO
//! training, and the snapshot ensemble behind the exploration reward.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::layers::{Activation, Affine, GruCell, Mlp};
use crate::multicat::{MixtureOfMultiCat, MultiCat, OneHotAssignment};
use crate::params::{Graph, ParamStore};
use crate::tape::Id;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum LssmError {
    #[error("non-finite ELBO loss at minibatch {minibatch}")]
    NonFiniteLoss { minibatch: usize },
    #[error("batch shape mismatch: {0}")]
    BadBatch(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LssmConfig {
    /// Number of independent categorical factors.
    pub k1: usize,
    /// Categories per factor.
    pub k2: usize,
    /// Belief particles.
    pub particles: usize,
    /// Training sequence horizon.
    pub horizon: usize,
    /// Encoder/decoder hidden width.
    pub hidden: usize,
    /// Flattened observation length.
    pub obs_dim: usize,
    pub n_actions: usize,
    /// Dynamics-ensemble size.
    pub ensemble: usize,
    /// Truncated-backprop horizon: recurrent/latent state is detached
    /// every `trunc` steps.
    pub trunc: usize,
}

impl LssmConfig {
    /// Full-scale settings: 16x16 latent, 5 particles, horizon 50.
    pub fn full(obs_dim: usize, n_actions: usize) -> Self {
        Self {
            k1: 16,
            k2: 16,
            particles: 5,
            horizon: 50,
            hidden: 256,
            obs_dim,
            n_actions,
            ensemble: 7,
            trunc: 50,
        }
    }

    /// Desk-scale preset: 8x8 latent, otherwise full settings.
    pub fn desk(obs_dim: usize, n_actions: usize) -> Self {
        Self {
            k1: 8,
            k2: 8,
            ..Self::full(obs_dim, n_actions)
        }
    }

    pub fn latent(&self) -> usize {
        self.k1 * self.k2
    }
}

/// One-hot action row `[1, n]`; `None` encodes "before the first action"
/// as the zero vector.
pub fn action_onehot(n_actions: usize, a: Option<usize>) -> Array2<f64> {
    let mut v = Array2::zeros((1, n_actions));
    if let Some(a) = a {
        v[(0, a)] = 1.0;
    }
    v
}

/// The model: prior p_θ(z'|z,a,g), posterior q_φ(z|o,a,prior), and
/// decoder p_θ(o|z). Parameter handles index into one [`ParamStore`];
/// prior parameters live under the `prior.` name prefix so they can be
/// snapshotted for the ensemble.
#[derive(Debug, Clone)]
pub struct Lssm {
    pub cfg: LssmConfig,
    a_embed: Affine,
    gru: GruCell,
    prior_head: Affine,
    encoder: Mlp,
    post_head: Affine,
    decoder: Mlp,
}

pub const PRIOR_PREFIX: &str = "prior.";

impl Lssm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: LssmConfig) -> Self {
        let d = cfg.latent();
        Self {
            a_embed: Affine::new(store, rng, "prior.a_embed", cfg.n_actions, d),
            gru: GruCell::new(store, rng, "prior.gru", 2 * d, d),
            prior_head: Affine::new(store, rng, "prior.head", d, d),
            encoder: Mlp::new(
                store,
                rng,
                "post.enc",
                &[cfg.obs_dim, cfg.hidden, cfg.hidden],
                Activation::Elu,
            ),
            post_head: Affine::new(store, rng, "post.head", cfg.hidden + cfg.n_actions, d),
            decoder: Mlp::new(
                store,
                rng,
                "dec",
                &[d, cfg.hidden, cfg.hidden, cfg.obs_dim],
                Activation::Elu,
            ),
            cfg,
        }
    }

    /// Re-bind to a checkpointed store that was created by [`Lssm::new`]
    /// with the same config.
    pub fn attach(store: &ParamStore, cfg: LssmConfig) -> Result<Self, crate::params::ParamError> {
        Ok(Self {
            a_embed: Affine::attach(store, "prior.a_embed")?,
            gru: GruCell::attach(store, "prior.gru")?,
            prior_head: Affine::attach(store, "prior.head")?,
            encoder: Mlp::attach(store, "post.enc", 2, Activation::Elu)?,
            post_head: Affine::attach(store, "post.head")?,
            decoder: Mlp::attach(store, "dec", 3, Activation::Elu)?,
            cfg,
        })
    }

    /// Advance the recurrent prior: returns `(l_prior, g_next)`, batched
    /// over rows.
    pub fn prior_step(&self, g: &mut Graph, z_flat: Id, a_onehot: Id, state: Id) -> (Id, Id) {
        let emb = self.a_embed.forward(g, a_onehot);
        let x = g.tape.concat_cols(z_flat, emb);
        let g_next = self.gru.forward(g, x, state);
        (self.prior_head.forward(g, g_next), g_next)
    }

    /// Measurement update: encode the observation, produce residual
    /// logits, and add them to the prior logits.
    pub fn posterior_logits(&self, g: &mut Graph, o: Id, a_onehot: Id, l_prior: Id) -> Id {
        let enc = self.encoder.forward(g, o);
        let enc = g.tape.elu(enc);
        let x = g.tape.concat_cols(enc, a_onehot);
        let res = self.post_head.forward(g, x);
        g.tape.add(res, l_prior)
    }

    /// Decoder mean μ_o for flattened one-hot latents, batched over rows.
    pub fn decode(&self, g: &mut Graph, z_flat: Id) -> Id {
        self.decoder.forward(g, z_flat)
    }

    /// Per-row Gaussian negative log-likelihood `[B, 1]` with unit
    /// variance: D/2·ln(2π) + ½‖o − μ‖².
    pub fn recon_nll(&self, g: &mut Graph, mu: Id, o: Id) -> Id {
        let diff = g.tape.sub(o, mu);
        let sq = g.tape.mul(diff, diff);
        let rs = g.tape.row_sum(sq);
        let half = g.tape.scale(rs, 0.5);
        let c = g
            .tape
            .leaf(Array2::from_elem((1, 1), self.cfg.obs_dim as f64 * 0.5 * LN_2PI));
        g.tape.add_row(half, c)
    }

    /// Exact per-row KL(posterior ‖ prior) `[B, 1]` from logits.
    pub fn kl_rows(&self, g: &mut Graph, l_post: Id, l_prior: Id) -> Id {
        let p = g.tape.softmax_groups(l_post, self.cfg.k2);
        let lp = g.tape.log_softmax_groups(l_post, self.cfg.k2);
        let lq = g.tape.log_softmax_groups(l_prior, self.cfg.k2);
        let d = g.tape.sub(lp, lq);
        let m = g.tape.mul(p, d);
        g.tape.row_sum(m)
    }

    /// Uniform one-hot latent rows, used for z_0.
    pub fn uniform_onehot_rows<R: Rng>(&self, rng: &mut R, rows: usize) -> Array2<f64> {
        let mut v = Array2::zeros((rows, self.cfg.latent()));
        for r in 0..rows {
            for f in 0..self.cfg.k1 {
                let k = rng.random_range(0..self.cfg.k2);
                v[(r, f * self.cfg.k2 + k)] = 1.0;
            }
        }
        v
    }

    /// Negated ELBO (Eq. 1) over a batch of sequences: mean over batch and
    /// time of reconstruction NLL + β·KL, with β = 1 and straight-through
    /// posterior samples. Returns the loss node and its value breakdown.
    pub fn elbo<R: Rng>(
        &self,
        g: &mut Graph,
        batch: &SeqBatch,
        rng: &mut R,
    ) -> Result<(Id, ElboValues), LssmError> {
        let h = batch.obs.len();
        if h == 0 || batch.actions.len() != h {
            return Err(LssmError::BadBatch(format!(
                "got {} obs and {} action steps",
                h,
                batch.actions.len()
            )));
        }
        let b = batch.obs[0].nrows();
        let d = self.cfg.latent();
        let z0 = self.uniform_onehot_rows(rng, b);
        let mut z_prev = g.tape.leaf(z0);
        let mut state = g.tape.leaf(Array2::zeros((b, d)));
        let mut recon_total = g.tape.leaf(Array2::zeros((1, 1)));
        let mut kl_total = g.tape.leaf(Array2::zeros((1, 1)));
        for t in 0..h {
            let o = g.tape.leaf(batch.obs[t].clone());
            let a = g.tape.leaf(batch.actions[t].clone());
            let (l_prior, g_next) = self.prior_step(g, z_prev, a, state);
            let l_post = self.posterior_logits(g, o, a, l_prior);
            let probs = g.tape.softmax_groups(l_post, self.cfg.k2);
            let mut z = g.tape.st_sample(probs, self.cfg.k2, rng);
            let mu = self.decode(g, z);
            let nll = self.recon_nll(g, mu, o);
            let nll_sum = g.tape.sum(nll);
            recon_total = g.tape.add(recon_total, nll_sum);
            let kl = self.kl_rows(g, l_post, l_prior);
            let kl_sum = g.tape.sum(kl);
            kl_total = g.tape.add(kl_total, kl_sum);
            let mut g_carry = g_next;
            if (t + 1) % self.cfg.trunc == 0 {
                z = g.tape.detach(z);
                g_carry = g.tape.detach(g_carry);
            }
            z_prev = z;
            state = g_carry;
        }
        let total = g.tape.add(recon_total, kl_total);
        let loss = g.tape.scale(total, 1.0 / (b * h) as f64);
        let values = ElboValues {
            loss: g.tape.scalar(loss),
            recon: g.tape.scalar(recon_total) / (b * h) as f64,
            kl: g.tape.scalar(kl_total) / (b * h) as f64,
        };
        Ok((loss, values))
    }

    /// One optimizer step on the negated ELBO: zero grads, backward, clip
    /// at global norm 10, RAdam step. `minibatch` only labels errors.
    pub fn elbo_step<R: Rng>(
        &self,
        store: &mut ParamStore,
        batch: &SeqBatch,
        rng: &mut R,
        lr: f64,
        minibatch: usize,
    ) -> Result<ElboValues, LssmError> {
        store.zero_grads();
        let (grads, values) = {
            let mut g = Graph::new(store);
            let (loss, values) = self.elbo(&mut g, batch, rng)?;
            if !values.loss.is_finite() {
                return Err(LssmError::NonFiniteLoss { minibatch });
            }
            (g.take_grads(loss), values)
        };
        for (idx, grad) in grads {
            store.accumulate_grad(idx, &grad);
        }
        store.clip_grads(10.0);
        store.radam_step(lr);
        Ok(values)
    }

    /// Value-only prior evaluation for a single row; used by the belief
    /// filter and the ensemble.
    pub fn prior_values(
        &self,
        store: &ParamStore,
        z_prev: &OneHotAssignment,
        a_onehot: &Array2<f64>,
        state: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut g = Graph::new(store);
        let z = g.tape.leaf(z_prev.to_flat_row());
        let a = g.tape.leaf(a_onehot.clone());
        let s = g.tape.leaf(state.clone());
        let (l_prior, g_next) = self.prior_step(&mut g, z, a, s);
        (
            g.tape.value(l_prior).clone(),
            g.tape.value(g_next).clone(),
        )
    }

    /// Particle-filter belief update: advance every particle's prior,
    /// apply the measurement update, sample z from the posterior, and
    /// reweight by prior·likelihood/proposal. Resamples systematically
    /// when the effective sample size drops below P/2.
    pub fn belief_update<R: Rng>(
        &self,
        store: &ParamStore,
        prev: &BeliefState,
        o: &Array2<f64>,
        a_onehot: &Array2<f64>,
        rng: &mut R,
    ) -> BeliefState {
        let p = prev.particles.len();
        let d = self.cfg.latent();
        let mut g = Graph::new(store);
        // Batch all particles as rows of one graph.
        let mut z_rows = Array2::zeros((p, d));
        let mut g_rows = Array2::zeros((p, d));
        for (r, part) in prev.particles.iter().enumerate() {
            z_rows.row_mut(r).assign(&part.z.to_flat_row().row(0));
            g_rows.row_mut(r).assign(&part.g.row(0));
        }
        let mut a_rows = Array2::zeros((p, self.cfg.n_actions));
        let mut o_rows = Array2::zeros((p, self.cfg.obs_dim));
        for r in 0..p {
            a_rows.row_mut(r).assign(&a_onehot.row(0));
            o_rows.row_mut(r).assign(&o.row(0));
        }
        let zi = g.tape.leaf(z_rows);
        let gi = g.tape.leaf(g_rows);
        let ai = g.tape.leaf(a_rows);
        let oi = g.tape.leaf(o_rows);
        let (l_prior, g_next) = self.prior_step(&mut g, zi, ai, gi);
        let l_post = self.posterior_logits(&mut g, oi, ai, l_prior);

        let row_cat = |vals: &Array2<f64>, r: usize| {
            let m = Array2::from_shape_fn((self.cfg.k1, self.cfg.k2), |(i, j)| {
                vals[(r, i * self.cfg.k2 + j)]
            });
            MultiCat::from_logits(&m)
        };
        let l_prior_v = g.tape.value(l_prior).clone();
        let l_post_v = g.tape.value(l_post).clone();
        let g_next_v = g.tape.value(g_next).clone();

        let mut particles = Vec::with_capacity(p);
        let mut z_sample_rows = Array2::zeros((p, d));
        for r in 0..p {
            let prior = row_cat(&l_prior_v, r);
            let posterior = row_cat(&l_post_v, r);
            let z = posterior.sample(rng);
            z_sample_rows.row_mut(r).assign(&z.to_flat_row().row(0));
            let mut gn = Array2::zeros((1, d));
            gn.row_mut(0).assign(&g_next_v.row(r));
            particles.push(Particle {
                z_prev: prev.particles[r].z.clone(),
                g_prev: prev.particles[r].g.clone(),
                z,
                g: gn,
                prior,
                posterior,
            });
        }
        // Decoder likelihood of the shared observation under each sample.
        let zs = g.tape.leaf(z_sample_rows);
        let mu = self.decode(&mut g, zs);
        let nll = self.recon_nll(&mut g, mu, oi);
        let nll_v = g.tape.value(nll).clone();

        let mut log_w: Vec<f64> = (0..p)
            .map(|r| {
                prev.log_weights[r] + particles[r].prior.log_prob(&particles[r].z)
                    - nll_v[(r, 0)]
                    - particles[r].posterior.log_prob(&particles[r].z)
            })
            .collect();
        let mut degenerate_resets = prev.degenerate_resets;
        let lse = crate::multicat::log_sum_exp(&log_w);
        if lse.is_finite() {
            for w in &mut log_w {
                *w -= lse;
            }
        } else {
            degenerate_resets += 1;
            log_w = vec![-(p as f64).ln(); p];
        }
        let weights: Vec<f64> = log_w.iter().map(|w| w.exp()).collect();
        if effective_sample_size(&weights) < p as f64 / 2.0 {
            let picks = systematic_indices(&weights, p, rng);
            let resampled = picks.iter().map(|&i| particles[i].clone()).collect();
            return BeliefState {
                particles: resampled,
                log_weights: vec![-(p as f64).ln(); p],
                degenerate_resets,
            };
        }
        BeliefState {
            particles,
            log_weights: log_w,
            degenerate_resets,
        }
    }
}

/// A minibatch of sequences: `obs[t]` and `actions[t]` are `[B, dim]`
/// rows, `actions[t]` being the action that preceded `obs[t]` (zero row
/// for the first step of an episode).
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub obs: Vec<Array2<f64>>,
    pub actions: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ElboValues {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// One belief particle: latent sample, recurrent state, and the
/// distributions that produced it (plus the transition inputs, kept for
/// the exploration reward).
#[derive(Debug, Clone)]
pub struct Particle {
    pub z: OneHotAssignment,
    pub g: Array2<f64>,
    pub prior: MultiCat,
    pub posterior: MultiCat,
    pub z_prev: OneHotAssignment,
    pub g_prev: Array2<f64>,
}

/// Weighted particle mixture representing q_φ(z_t | o_≤t, a_<t).
#[derive(Debug, Clone)]
pub struct BeliefState {
    pub particles: Vec<Particle>,
    /// Normalized log-weights.
    pub log_weights: Vec<f64>,
    /// Count of all-(−∞) weight resets.
    pub degenerate_resets: u64,
}

impl BeliefState {
    pub fn init<R: Rng>(cfg: &LssmConfig, rng: &mut R) -> Self {
        let uniform = MultiCat::uniform(cfg.k1, cfg.k2);
        let particles = (0..cfg.particles)
            .map(|_| {
                let z = uniform.sample(rng);
                Particle {
                    z_prev: z.clone(),
                    g_prev: Array2::zeros((1, cfg.latent())),
                    z,
                    g: Array2::zeros((1, cfg.latent())),
                    prior: uniform.clone(),
                    posterior: uniform.clone(),
                }
            })
            .collect();
        Self {
            particles,
            log_weights: vec![-(cfg.particles as f64).ln(); cfg.particles],
            degenerate_resets: 0,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// The belief as a mixture of per-particle posteriors.
    pub fn mixture(&self) -> MixtureOfMultiCat {
        let comps = self.particles.iter().map(|p| p.posterior.clone()).collect();
        MixtureOfMultiCat::new(comps, &self.weights()).expect("normalized belief weights")
    }

    /// The prior mixture matching [`Self::mixture`] component-for-component.
    pub fn prior_mixture(&self) -> MixtureOfMultiCat {
        let comps = self.particles.iter().map(|p| p.prior.clone()).collect();
        MixtureOfMultiCat::new(comps, &self.weights()).expect("normalized belief weights")
    }

    /// Policy input: weight-averaged posterior parameters, flattened.
    pub fn policy_input(&self) -> Vec<f64> {
        let ws = self.weights();
        let k1 = self.particles[0].posterior.k1();
        let k2 = self.particles[0].posterior.k2();
        let mut out = vec![0.0; k1 * k2];
        for (p, &w) in self.particles.iter().zip(&ws) {
            let probs = p.posterior.probs();
            for i in 0..k1 {
                for j in 0..k2 {
                    out[i * k2 + j] += w * probs[(i, j)];
                }
            }
        }
        out
    }
}

/// ESS = 1 / Σ w².
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: n evenly-spaced points with one shared uniform
/// offset, mapped through the cumulative weights.
pub fn systematic_indices<R: Rng>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let offset: f64 = rng.random();
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut i = 0;
    for k in 0..n {
        let u = (k as f64 + offset) / n as f64;
        while cum + weights[i] < u && i + 1 < weights.len() {
            cum += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

/// Population variance (divisor n).
pub fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Value-only copy of the prior network. Lets the ensemble score
/// transitions read-only on rollout workers, without touching the live
/// parameter store.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PriorParams {
    arrays: Vec<(String, Array2<f64>)>,
}

impl PriorParams {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            arrays: store.snapshot_prefix(PRIOR_PREFIX),
        }
    }

    fn get(&self, name: &str) -> &Array2<f64> {
        &self
            .arrays
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing prior parameter {name}"))
            .1
    }

    fn affine(&self, name: &str, x: &Array2<f64>) -> Array2<f64> {
        x.dot(self.get(&format!("{name}.w"))) + self.get(&format!("{name}.b"))
    }

    /// Same computation as [`Lssm::prior_step`], pure ndarray.
    pub fn logits(
        &self,
        z_flat: &Array2<f64>,
        a_onehot: &Array2<f64>,
        g_prev: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let emb = self.affine("prior.a_embed", a_onehot);
        let mut x = Array2::zeros((1, z_flat.ncols() + emb.ncols()));
        x.slice_mut(ndarray::s![.., ..z_flat.ncols()]).assign(z_flat);
        x.slice_mut(ndarray::s![.., z_flat.ncols()..]).assign(&emb);
        let sigmoid = |m: Array2<f64>| m.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let z = sigmoid(self.affine("prior.gru.wz", &x) + self.affine("prior.gru.uz", g_prev));
        let r = sigmoid(self.affine("prior.gru.wr", &x) + self.affine("prior.gru.ur", g_prev));
        let rh = &r * g_prev;
        let c = (self.affine("prior.gru.wc", &x) + self.affine("prior.gru.uc", &rh))
            .mapv(f64::tanh);
        let g_next = &z * g_prev + (1.0 - &z) * &c;
        let l = self.affine("prior.head", &g_next);
        (l, g_next)
    }

    /// log p_θ(z | z_prev, a, g_prev) under these parameters.
    pub fn log_prob(
        &self,
        cfg: &LssmConfig,
        z_prev: &OneHotAssignment,
        a_onehot: &Array2<f64>,
        g_prev: &Array2<f64>,
        z: &OneHotAssignment,
    ) -> f64 {
        let (l, _) = self.logits(&z_prev.to_flat_row(), a_onehot, g_prev);
        let m = Array2::from_shape_fn((cfg.k1, cfg.k2), |(i, j)| l[(0, i * cfg.k2 + j)]);
        MultiCat::from_logits(&m).log_prob(z)
    }
}

/// Ring buffer of prior-parameter snapshots; the variance of member
/// log-probabilities is the exploration reward r_e.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct DynamicsEnsemble {
    snapshots: VecDeque<PriorParams>,
    k: usize,
}

impl DynamicsEnsemble {
    pub fn new(k: usize) -> Self {
        Self {
            snapshots: VecDeque::new(),
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn members(&self) -> impl Iterator<Item = &PriorParams> {
        self.snapshots.iter()
    }

    /// Capture the current prior parameters; evicts the oldest snapshot
    /// once K are held.
    pub fn capture(&mut self, store: &ParamStore) {
        if self.snapshots.len() == self.k {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(PriorParams::from_store(store));
    }

    /// Var over the K members of log p_θ(z | z_prev, a, g_prev); missing
    /// members count as copies of `current`.
    pub fn disagreement(
        &self,
        cfg: &LssmConfig,
        current: &PriorParams,
        z_prev: &OneHotAssignment,
        a_onehot: &Array2<f64>,
        g_prev: &Array2<f64>,
        z: &OneHotAssignment,
    ) -> f64 {
        let mut lps: Vec<f64> = self
            .snapshots
            .iter()
            .map(|m| m.log_prob(cfg, z_prev, a_onehot, g_prev, z))
            .collect();
        if lps.len() < self.k {
            let cur = current.log_prob(cfg, z_prev, a_onehot, g_prev, z);
            while lps.len() < self.k {
                lps.push(cur);
            }
        }
        population_variance(&lps)
    }
}
