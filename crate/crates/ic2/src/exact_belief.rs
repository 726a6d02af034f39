//! Exact per-particle hidden-Markov filtering over (cell, locked) for the
//! TwoRoom environments.
//!
//! Each particle has a distinct color and independent dynamics, so the
//! joint belief factorizes exactly. The filter doubles as a correctness
//! oracle for the probabilistic machinery and as the "exact-belief agent"
//! mode that feeds ground-truth beliefs to the reward module.

use ndarray::Array2;
use thiserror::Error;

use crate::multicat::MultiCat;
use crate::worlds::{Cell, Geometry, TwoRoomEnv};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("impossible evidence: particle seen at {cell:?} (locked={locked}) with zero prior mass")]
    ImpossibleEvidence { cell: Cell, locked: bool },
    #[error("negative evidence annihilated all mass")]
    MassVanished,
}

/// Belief over one particle's (cell, locked) state. `mass[cell][0]` is
/// unlocked, `mass[cell][1]` locked, indexed by busy-cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBelief {
    pub mass: Vec<[f64; 2]>,
}

impl ParticleBelief {
    pub fn uniform_unlocked(n_cells: usize) -> Self {
        Self {
            mass: vec![[1.0 / n_cells as f64, 0.0]; n_cells],
        }
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().map(|m| m[0] + m[1]).sum()
    }

    pub fn entropy(&self) -> f64 {
        self.mass
            .iter()
            .flat_map(|m| m.iter())
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum()
    }

    /// Flatten to a probability row `[1, 2*n_cells]` (unlocked block then
    /// locked block).
    pub fn to_row(&self) -> Vec<f64> {
        let n = self.mass.len();
        let mut row = vec![0.0; 2 * n];
        for (i, m) in self.mass.iter().enumerate() {
            row[i] = m[0];
            row[n + i] = m[1];
        }
        row
    }
}

/// Exact filter for the whole environment: one belief per particle plus
/// the (deterministic) agent position.
#[derive(Debug, Clone)]
pub struct ExactFilter {
    pub beliefs: Vec<ParticleBelief>,
    /// Precomputed transition kernel: for each busy cell, (target, prob).
    kernel: Vec<Vec<(usize, f64)>>,
    n_cells: usize,
}

/// Observation evidence for one particle at one step.
#[derive(Debug, Clone, Copy)]
pub enum Evidence {
    /// Particle seen at a cell with a lock flag.
    Seen(Cell, bool),
    /// Not seen anywhere in the observed window cells.
    NotSeen,
}

impl ExactFilter {
    pub fn new(geo: &Geometry, n_particles: usize) -> Self {
        let n_cells = geo.busy_cells.len();
        let kernel = geo
            .busy_cells
            .iter()
            .map(|&c| {
                geo.particle_kernel(c)
                    .into_iter()
                    .map(|(t, p)| (geo.busy_index(t).expect("kernel target in busy room"), p))
                    .collect()
            })
            .collect();
        Self {
            beliefs: vec![ParticleBelief::uniform_unlocked(n_cells); n_particles],
            kernel,
            n_cells,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Prediction step for one belief: optional tag (in-window unlocked mass
    /// becomes locked), then unlocked mass diffuses by the kernel; locked
    /// mass never moves.
    pub fn predict(&self, b: &ParticleBelief, tagged_cells: Option<&[usize]>) -> ParticleBelief {
        let mut pre = b.clone();
        if let Some(cells) = tagged_cells {
            for &i in cells {
                pre.mass[i][1] += pre.mass[i][0];
                pre.mass[i][0] = 0.0;
            }
        }
        let mut out = ParticleBelief {
            mass: vec![[0.0, 0.0]; self.n_cells],
        };
        for (i, m) in pre.mass.iter().enumerate() {
            out.mass[i][1] += m[1];
            if m[0] > 0.0 {
                for &(j, p) in &self.kernel[i] {
                    out.mass[j][0] += m[0] * p;
                }
            }
        }
        out
    }

    /// Measurement update for one belief. `neg_cells` are busy-cell indices
    /// that were observed empty of this particle; `Seen` collapses to a
    /// delta.
    pub fn update(
        &self,
        b: &ParticleBelief,
        neg_cells: &[usize],
        evidence: Evidence,
        geo: &Geometry,
    ) -> Result<ParticleBelief, FilterError> {
        match evidence {
            Evidence::Seen(cell, locked) => {
                let idx = geo.busy_index(cell).ok_or(FilterError::ImpossibleEvidence {
                    cell,
                    locked,
                })?;
                if b.mass[idx][locked as usize] <= 0.0 {
                    return Err(FilterError::ImpossibleEvidence { cell, locked });
                }
                let mut out = ParticleBelief {
                    mass: vec![[0.0, 0.0]; self.n_cells],
                };
                out.mass[idx][locked as usize] = 1.0;
                Ok(out)
            }
            Evidence::NotSeen => {
                let mut out = b.clone();
                for &i in neg_cells {
                    out.mass[i] = [0.0, 0.0];
                }
                let total = out.total();
                if total <= 0.0 {
                    return Err(FilterError::MassVanished);
                }
                for m in &mut out.mass {
                    m[0] /= total;
                    m[1] /= total;
                }
                Ok(out)
            }
        }
    }

    /// Sum of per-particle Shannon entropies, in nats.
    pub fn belief_entropy(&self) -> f64 {
        self.beliefs.iter().map(|b| b.entropy()).sum()
    }

    /// Prediction for every particle: tag (if the executed action was a
    /// tag) then kernel diffusion. This is the step's temporal prior.
    pub fn predicted(&self, env: &TwoRoomEnv, tagged: bool) -> Vec<ParticleBelief> {
        let geo = &env.geo;
        let tag_cells: Option<Vec<usize>> = if tagged {
            Some(
                env.window_cells()
                    .iter()
                    .filter_map(|&c| geo.busy_index(c))
                    .collect(),
            )
        } else {
            None
        };
        self.beliefs
            .iter()
            .map(|b| self.predict(b, tag_cells.as_deref()))
            .collect()
    }

    /// Measurement update of previously predicted beliefs against the
    /// current window.
    pub fn apply(
        &mut self,
        env: &TwoRoomEnv,
        predicted: Vec<ParticleBelief>,
    ) -> Result<(), FilterError> {
        self.observe(env, predicted)
    }

    /// One full filter step driven by the environment after `env.step`:
    /// tag prediction (if the executed action was a tag), kernel diffusion,
    /// then the measurement update from what the new window shows.
    pub fn step(&mut self, env: &TwoRoomEnv, tagged: bool) -> Result<(), FilterError> {
        let predicted = self.predicted(env, tagged);
        self.observe(env, predicted)
    }

    /// Joint product-of-categoricals over an arbitrary belief list (e.g.
    /// the predicted beliefs), same layout as [`Self::to_multicat`].
    pub fn multicat_of(&self, beliefs: &[ParticleBelief]) -> MultiCat {
        let k2 = 2 * self.n_cells;
        let mut probs = Array2::zeros((beliefs.len(), k2));
        for (r, b) in beliefs.iter().enumerate() {
            for (i, v) in b.to_row().into_iter().enumerate() {
                probs[(r, i)] = v;
            }
        }
        MultiCat::from_probs(&probs).expect("filter beliefs are normalized")
    }

    /// Measurement update only (used right after reset).
    pub fn observe_initial(&mut self, env: &TwoRoomEnv) -> Result<(), FilterError> {
        let beliefs = self.beliefs.clone();
        self.observe(env, beliefs)
    }

    fn observe(
        &mut self,
        env: &TwoRoomEnv,
        predicted: Vec<ParticleBelief>,
    ) -> Result<(), FilterError> {
        let geo = &env.geo;
        let neg_cells: Vec<usize> = env
            .observed_cells()
            .iter()
            .filter_map(|&c| geo.busy_index(c))
            .collect();
        let visible = env.visible_particles();
        let mut next = Vec::with_capacity(predicted.len());
        for (pid, b) in predicted.iter().enumerate() {
            let evidence = visible
                .iter()
                .find(|(id, _, _)| *id == pid)
                .map(|&(_, cell, locked)| Evidence::Seen(cell, locked))
                .unwrap_or(Evidence::NotSeen);
            next.push(self.update(b, &neg_cells, evidence, geo)?);
        }
        self.beliefs = next;
        Ok(())
    }

    /// The joint belief as a product of categoricals: one factor per
    /// particle over 2*n_cells categories (unlocked block, locked block).
    pub fn to_multicat(&self) -> MultiCat {
        let k2 = 2 * self.n_cells;
        let mut probs = Array2::zeros((self.beliefs.len(), k2));
        for (r, b) in self.beliefs.iter().enumerate() {
            for (i, v) in b.to_row().into_iter().enumerate() {
                probs[(r, i)] = v;
            }
        }
        MultiCat::from_probs(&probs).expect("filter beliefs are normalized")
    }

    /// Policy input: concatenated per-particle mass arrays.
    pub fn to_policy_input(&self) -> Vec<f64> {
        self.beliefs.iter().flat_map(|b| b.to_row()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;
    use crate::worlds::{Action, TwoRoomConfig, TwoRoomEnv};

    /// 7x3 grid: wall at x=3, busy room is the 3x3 block x in 4..=6.
    pub(crate) fn mini_cfg() -> TwoRoomConfig {
        TwoRoomConfig {
            grid_w: 7,
            grid_h: 3,
            window: 3,
            n_particles: 1,
            episode_len: 1000,
            particle_colors: vec![[0.0, 0.0, 1.0]],
            cell_pixels: 1,
        }
    }

    #[test]
    fn fully_locked_belief_is_unchanged_by_predict() {
        let cfg = mini_cfg();
        let geo = Geometry::new(&cfg);
        let f = ExactFilter::new(&geo, 1);
        let mut b = ParticleBelief::uniform_unlocked(f.n_cells());
        for m in &mut b.mass {
            m[1] = m[0];
            m[0] = 0.0;
        }
        let out = f.predict(&b, None);
        assert_eq!(out, b);
    }

    #[test]
    fn delta_at_interior_cell_spreads_one_fifth() {
        let cfg = TwoRoomConfig::large();
        let geo = Geometry::new(&cfg);
        let f = ExactFilter::new(&geo, 1);
        let mut b = ParticleBelief {
            mass: vec![[0.0, 0.0]; f.n_cells()],
        };
        let interior = geo.busy_index((10, 7)).unwrap();
        b.mass[interior][0] = 1.0;
        let out = f.predict(&b, None);
        let nonzero: Vec<f64> = out
            .mass
            .iter()
            .map(|m| m[0])
            .filter(|&p| p > 0.0)
            .collect();
        assert_eq!(nonzero.len(), 5);
        for p in nonzero {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_preserves_normalization() {
        let cfg = mini_cfg();
        let geo = Geometry::new(&cfg);
        let f = ExactFilter::new(&geo, 1);
        let b = ParticleBelief::uniform_unlocked(f.n_cells());
        let out = f.predict(&b, None);
        assert!((out.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn seen_collapses_to_delta_with_zero_entropy() {
        let cfg = mini_cfg();
        let geo = Geometry::new(&cfg);
        let f = ExactFilter::new(&geo, 1);
        let b = ParticleBelief::uniform_unlocked(f.n_cells());
        let out = f
            .update(&b, &[], Evidence::Seen((4, 0), false), &geo)
            .unwrap();
        assert_eq!(out.entropy(), 0.0);
        assert_eq!(out.mass[geo.busy_index((4, 0)).unwrap()][0], 1.0);
    }

    #[test]
    fn negative_evidence_rescales_remaining_mass() {
        // 5-cell hand example: 40% of mass in the window is zeroed, the
        // remainder rescales by 1/0.6.
        let cfg = mini_cfg();
        let geo = Geometry::new(&cfg);
        let f = ExactFilter::new(&geo, 1);
        let mut b = ParticleBelief {
            mass: vec![[0.0, 0.0]; f.n_cells()],
        };
        for (i, p) in [(0usize, 0.25), (1, 0.15), (2, 0.2), (3, 0.2), (4, 0.2)] {
            b.mass[i][0] = p;
        }
        let out = f.update(&b, &[0, 1], Evidence::NotSeen, &geo).unwrap();
        assert!((out.mass[2][0] - 0.2 / 0.6).abs() < 1e-12);
        assert!((out.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seen_locked_is_absorbing_under_predict() {
        let cfg = mini_cfg();
        let geo = Geometry::new(&cfg);
        let f = ExactFilter::new(&geo, 1);
        let mut seen = ParticleBelief {
            mass: vec![[0.0, 0.0]; f.n_cells()],
        };
        seen.mass[geo.busy_index((5, 1)).unwrap()][1] = 1.0;
        let mut cur = seen.clone();
        for _ in 0..5 {
            cur = f.predict(&cur, None);
        }
        assert_eq!(cur, seen);
    }

    #[test]
    fn impossible_evidence_is_an_error() {
        let cfg = mini_cfg();
        let geo = Geometry::new(&cfg);
        let f = ExactFilter::new(&geo, 1);
        let b = ParticleBelief::uniform_unlocked(f.n_cells());
        // Locked mass is zero everywhere at init.
        assert!(matches!(
            f.update(&b, &[], Evidence::Seen((4, 0), true), &geo),
            Err(FilterError::ImpossibleEvidence { .. })
        ));
    }

    #[test]
    fn entropy_of_uniform_unlocked_is_ln_cells() {
        let cfg = mini_cfg();
        let geo = Geometry::new(&cfg);
        let f = ExactFilter::new(&geo, 1);
        assert!((f.belief_entropy() - (9f64).ln()).abs() < 1e-12);
    }

    /// Brute-force trajectory enumeration for the mini environment: walk the
    /// same env, keep every particle trajectory consistent with the
    /// evidence, and compare marginals at every step.
    #[test]
    fn filter_matches_exhaustive_trajectory_enumeration() {
        let horizon = 5;
        let mut mismatches = 0usize;
        for run in 0..200u64 {
            let mut rng = stream(4242, &[run]);
            let cfg = mini_cfg();
            let (mut env, _) = TwoRoomEnv::reset(cfg, run).unwrap();
            let geo = env.geo.clone();
            let mut filter = ExactFilter::new(&geo, 1);
            filter.observe_initial(&env).unwrap();

            // Oracle state: joint distribution over (cell, locked) built by
            // explicit trajectory enumeration (flat vector over 2n states),
            // evolved step by step with explicit conditioning.
            let n = filter.n_cells();
            let mut oracle = vec![0.0f64; 2 * n];
            for v in oracle.iter_mut().take(n) {
                *v = 1.0 / n as f64;
            }
            condition(&mut oracle, &env, n);

            for _ in 0..horizon {
                let a = random_action(&mut rng);
                env.step(a).unwrap();
                filter.step(&env, a == Action::Tag).unwrap();

                // Enumerate one transition of every surviving trajectory.
                let tag_cells: Vec<usize> = if a == Action::Tag {
                    env.window_cells()
                        .iter()
                        .filter_map(|&c| geo.busy_index(c))
                        .collect()
                } else {
                    vec![]
                };
                let mut next = vec![0.0f64; 2 * n];
                for i in 0..n {
                    // Unlocked mass: maybe tagged, then moves.
                    let mut unlocked = oracle[i];
                    let mut locked = oracle[n + i];
                    if tag_cells.contains(&i) {
                        locked += unlocked;
                        unlocked = 0.0;
                    }
                    next[n + i] += locked;
                    if unlocked > 0.0 {
                        for (t, p) in geo.particle_kernel(geo.busy_cells[i]) {
                            next[geo.busy_index(t).unwrap()] += unlocked * p;
                        }
                    }
                }
                oracle = next;
                condition(&mut oracle, &env, n);

                let row = filter.beliefs[0].to_row();
                for s in 0..2 * n {
                    if (row[s] - oracle[s]).abs() > 1e-12 {
                        mismatches += 1;
                    }
                }
            }
        }
        assert_eq!(mismatches, 0);
    }

    fn random_action<R: rand::Rng>(rng: &mut R) -> Action {
        Action::from_index(rng.random_range(0..Action::COUNT))
    }

    /// Exact conditioning of a flat (cell, locked) distribution on the
    /// current window evidence.
    fn condition(dist: &mut [f64], env: &TwoRoomEnv, n: usize) {
        let geo = &env.geo;
        let visible = env.visible_particles();
        if let Some(&(_, cell, locked)) = visible.first() {
            let idx = geo.busy_index(cell).unwrap() + if locked { n } else { 0 };
            for (i, v) in dist.iter_mut().enumerate() {
                *v = if i == idx { 1.0 } else { 0.0 };
            }
        } else {
            for &c in &env.observed_cells() {
                if let Some(i) = geo.busy_index(c) {
                    dist[i] = 0.0;
                    dist[n + i] = 0.0;
                }
            }
            let total: f64 = dist.iter().sum();
            assert!(total > 0.0);
            for v in dist.iter_mut() {
                *v /= total;
            }
        }
    }

    #[test]
    fn filter_is_calibrated() {
        // Over many episodes, the predicted probability of the particle's
        // true (cell, locked) state matches its empirical frequency.
        let episodes = 10_000;
        let horizon = 10;
        let bins = 10;
        let mut bin_pred = vec![0.0f64; bins];
        let mut bin_hit = vec![0.0f64; bins];
        let mut bin_n = vec![0.0f64; bins];
        for ep in 0..episodes as u64 {
            let mut rng = stream(99, &[ep]);
            let (mut env, _) = TwoRoomEnv::reset(mini_cfg(), ep).unwrap();
            let geo = env.geo.clone();
            let mut filter = ExactFilter::new(&geo, 1);
            filter.observe_initial(&env).unwrap();
            for _ in 0..horizon {
                let a = random_action(&mut rng);
                env.step(a).unwrap();
                filter.step(&env, a == Action::Tag).unwrap();
            }
            let p = &env.privileged_state().particles[0];
            let idx = geo.busy_index(p.pos).unwrap();
            let row = filter.beliefs[0].to_row();
            let n = filter.n_cells();
            let truth = idx + if p.locked { n } else { 0 };
            for (s, &pr) in row.iter().enumerate() {
                if pr <= 0.0 {
                    continue;
                }
                let b = ((pr * bins as f64) as usize).min(bins - 1);
                bin_pred[b] += pr;
                bin_hit[b] += (s == truth) as u64 as f64;
                bin_n[b] += 1.0;
            }
        }
        let mut err_weighted = 0.0;
        let mut weight = 0.0;
        for b in 0..bins {
            if bin_n[b] < 100.0 {
                continue;
            }
            let gap = (bin_pred[b] - bin_hit[b]).abs() / bin_n[b];
            err_weighted += gap * bin_n[b];
            weight += bin_n[b];
        }
        let calib = err_weighted / weight;
        assert!(calib < 0.02, "calibration error {calib}");
    }
}
