//! Episode collection: runs one policy for one episode, producing PPO
//! transitions, an episode log, and a compact dataset entry for model
//! training. Works for learned, random, and oracle policies, with either
//! the learned LSSM belief or the exact filter.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Objective;
use super::logs::{EpisodeLog, LogHeader, ParticlePriv, PrivState, StepRecord};
use crate::exact_belief::ExactFilter;
use crate::lssm::{action_onehot, BeliefState, DynamicsEnsemble, Lssm, PriorParams};
use crate::motivation::{
    flatten_obs, step_rewards, LatentVisitation, ObsVisitationModel, RewardVector,
};
use crate::multicat::MixtureOfMultiCat;
use crate::params::ParamStore;
use crate::policy::{ActorCritic, Transition};
use crate::worlds::{oracle_policy, Action, Observation, TwoRoomConfig, TwoRoomEnv};

/// How actions are chosen during collection.
pub enum PolicyKind<'a> {
    Random,
    Oracle,
    Learned {
        ac: &'a ActorCritic,
        store: &'a ParamStore,
    },
}

impl PolicyKind<'_> {
    /// `(action, log_prob, value)` for the current step.
    fn act(&self, env: &TwoRoomEnv, input: &[f64], rng: &mut ChaCha8Rng) -> (Action, f64, f64) {
        match self {
            PolicyKind::Random => {
                let a = rng.random_range(0..Action::COUNT);
                (Action::from_index(a), -(Action::COUNT as f64).ln(), 0.0)
            }
            PolicyKind::Oracle => (oracle_policy(env), 0.0, 0.0),
            PolicyKind::Learned { ac, store } => {
                let (a, lp) = ac.act(store, input, rng);
                let v = ac.value_of(store, input);
                (Action::from_index(a), lp, v)
            }
        }
    }
}

/// Which scalar becomes the PPO reward.
#[derive(Debug, Clone, Copy)]
pub enum RewardChoice {
    Control(Objective),
    Explore,
}

impl RewardChoice {
    fn pick(&self, r: &RewardVector) -> f64 {
        match self {
            RewardChoice::Control(obj) => obj.reward_of(r),
            RewardChoice::Explore => r.e,
        }
    }
}

/// Compact dataset entry: window codes per step (including the reset
/// observation) plus the action sequence. Observations are re-rendered
/// from codes when a model minibatch needs pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeData {
    pub episode_seed: u64,
    pub actions: Vec<u8>,
    pub codes: Vec<Vec<u8>>,
}

pub struct EpisodeOutcome {
    pub transitions: Vec<Transition>,
    pub log: EpisodeLog,
    pub data: EpisodeData,
    /// Sum of each reward component over the episode.
    pub reward_totals: RewardVector,
}

/// Exact-mode policy input: the belief over the full state is the filter's
/// particle beliefs plus a delta at the agent's (self-observed) position.
fn exact_policy_input(env: &TwoRoomEnv, filter: &ExactFilter) -> Vec<f64> {
    let (w, h) = (env.geo.grid_w, env.geo.grid_h);
    let (ax, ay) = env.privileged_state().agent_pos;
    let mut input = vec![0.0; (w * h) as usize];
    input[(ay * w + ax) as usize] = 1.0;
    input.extend(filter.to_policy_input());
    input
}

fn obs_row(o: &Observation) -> Array2<f64> {
    let flat = flatten_obs(o);
    Array2::from_shape_vec((1, flat.len()), flat).expect("obs row")
}

fn priv_state(env: &TwoRoomEnv) -> PrivState {
    let s = env.privileged_state();
    let visible = env.visible_particles();
    PrivState {
        agent: [s.agent_pos.0, s.agent_pos.1],
        particles: s
            .particles
            .iter()
            .map(|p| ParticlePriv {
                pos: [p.pos.0, p.pos.1],
                locked: p.locked,
                visible: visible.iter().any(|&(id, _, _)| id == p.color_id),
            })
            .collect(),
    }
}

fn add_totals(acc: &mut RewardVector, r: &RewardVector) {
    acc.ne += r.ne;
    acc.nc += r.nc;
    acc.c += r.c;
    acc.i += r.i;
    acc.nci += r.nci;
    acc.e += r.e;
    acc.smirl += r.smirl;
}

/// Shared state for LSSM-belief collection: the frozen model and ensemble
/// the episode runs against.
pub struct LssmContext<'a> {
    pub lssm: &'a Lssm,
    pub store: &'a ParamStore,
    pub ensemble: &'a DynamicsEnsemble,
    pub current_prior: &'a PriorParams,
}

/// Collect one episode with the learned belief.
pub fn collect_lssm_episode(
    env_cfg: &TwoRoomConfig,
    ctx: &LssmContext,
    policy: &PolicyKind,
    reward: RewardChoice,
    header: LogHeader,
    rng: &mut ChaCha8Rng,
) -> EpisodeOutcome {
    let episode_seed = header.episode_seed;
    let (mut env, obs0) = TwoRoomEnv::reset(env_cfg.clone(), episode_seed).expect("valid env");
    let mut belief = BeliefState::init(&ctx.lssm.cfg, rng);
    let zero_a = action_onehot(ctx.lssm.cfg.n_actions, None);
    belief = ctx
        .lssm
        .belief_update(ctx.store, &belief, &obs_row(&obs0), &zero_a, rng);

    let mut visitation = LatentVisitation::new();
    visitation.push(belief.mixture());
    let mut obs_model = ObsVisitationModel::new();
    obs_model.absorb(&flatten_obs(&obs0));

    let mut transitions = Vec::new();
    let mut steps = Vec::new();
    let mut data = EpisodeData {
        episode_seed,
        actions: Vec::new(),
        codes: vec![env.window_codes()],
    };
    let mut totals = RewardVector::default();
    let mut t = 0;
    while !env.episode_ended() {
        t += 1;
        let input = belief.policy_input();
        let (a, log_prob, value) = policy.act(&env, &input, rng);
        let obs = env.step(a).expect("episode not ended");
        let a_onehot = action_onehot(ctx.lssm.cfg.n_actions, Some(a.index()));
        let next = ctx
            .lssm
            .belief_update(ctx.store, &belief, &obs_row(&obs), &a_onehot, rng);
        visitation.push(next.mixture());
        let (mut rv, particle, z) =
            step_rewards(&next.mixture(), &next.prior_mixture(), &visitation, rng);
        let p = &next.particles[particle];
        rv.e = ctx.ensemble.disagreement(
            &ctx.lssm.cfg,
            ctx.current_prior,
            &p.z_prev,
            &a_onehot,
            &p.g_prev,
            &z,
        );
        let flat = flatten_obs(&obs);
        rv.smirl = obs_model.score(&flat);
        obs_model.absorb(&flat);
        add_totals(&mut totals, &rv);

        transitions.push(Transition {
            input,
            action: a.index(),
            log_prob,
            reward: reward.pick(&rv),
            value,
        });
        steps.push(StepRecord {
            step: t,
            action: a.index(),
            rewards: rv,
            priv_state: priv_state(&env),
        });
        data.actions.push(a.index() as u8);
        data.codes.push(env.window_codes());
        belief = next;
    }
    EpisodeOutcome {
        transitions,
        log: EpisodeLog { header, steps },
        data,
        reward_totals: totals,
    }
}

/// Collect one episode with the exact-belief filter. The exploration
/// reward has no learned model to disagree about and stays 0.
pub fn collect_exact_episode(
    env_cfg: &TwoRoomConfig,
    policy: &PolicyKind,
    reward: RewardChoice,
    header: LogHeader,
    rng: &mut ChaCha8Rng,
) -> EpisodeOutcome {
    let episode_seed = header.episode_seed;
    let (mut env, obs0) = TwoRoomEnv::reset(env_cfg.clone(), episode_seed).expect("valid env");
    let mut filter = ExactFilter::new(&env.geo, env_cfg.n_particles);
    filter
        .observe_initial(&env)
        .expect("exact filter accepts the reset observation");

    let mut visitation = LatentVisitation::new();
    visitation.push(MixtureOfMultiCat::single(filter.to_multicat()));
    let mut obs_model = ObsVisitationModel::new();
    obs_model.absorb(&flatten_obs(&obs0));

    let mut transitions = Vec::new();
    let mut steps = Vec::new();
    let mut data = EpisodeData {
        episode_seed,
        actions: Vec::new(),
        codes: vec![env.window_codes()],
    };
    let mut totals = RewardVector::default();
    let mut t = 0;
    while !env.episode_ended() {
        t += 1;
        let input = exact_policy_input(&env, &filter);
        let (a, log_prob, value) = policy.act(&env, &input, rng);
        let obs = env.step(a).expect("episode not ended");
        let predicted = filter.predicted(&env, a == Action::Tag);
        let prior = MixtureOfMultiCat::single(filter.multicat_of(&predicted));
        filter
            .apply(&env, predicted)
            .expect("exact filter is consistent with the true state");
        let belief = MixtureOfMultiCat::single(filter.to_multicat());
        visitation.push(belief.clone());
        let (mut rv, _, _) = step_rewards(&belief, &prior, &visitation, rng);
        let flat = flatten_obs(&obs);
        rv.smirl = obs_model.score(&flat);
        obs_model.absorb(&flat);
        add_totals(&mut totals, &rv);

        transitions.push(Transition {
            input,
            action: a.index(),
            log_prob,
            reward: reward.pick(&rv),
            value,
        });
        steps.push(StepRecord {
            step: t,
            action: a.index(),
            rewards: rv,
            priv_state: priv_state(&env),
        });
        data.actions.push(a.index() as u8);
        data.codes.push(env.window_codes());
    }
    EpisodeOutcome {
        transitions,
        log: EpisodeLog { header, steps },
        data,
        reward_totals: totals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;

    fn header(seed: u64) -> LogHeader {
        LogHeader {
            format_version: super::super::logs::LOG_FORMAT_VERSION,
            config_hash: "t".into(),
            env: "normal".into(),
            objective: "exact_ic2".into(),
            policy: "control".into(),
            round: 0,
            episode_seed: seed,
        }
    }

    #[test]
    fn exact_episode_has_full_length_and_finite_rewards() {
        let cfg = TwoRoomConfig::normal();
        let mut rng = stream(1, &[]);
        let out = collect_exact_episode(
            &cfg,
            &PolicyKind::Random,
            RewardChoice::Control(Objective::ExactIc2),
            header(5),
            &mut rng,
        );
        assert_eq!(out.transitions.len(), cfg.episode_len);
        assert_eq!(out.data.codes.len(), cfg.episode_len + 1);
        assert_eq!(out.data.actions.len(), cfg.episode_len);
        for s in &out.log.steps {
            for r in [
                s.rewards.ne,
                s.rewards.nc,
                s.rewards.c,
                s.rewards.i,
                s.rewards.nci,
                s.rewards.e,
                s.rewards.smirl,
            ] {
                assert!(r.is_finite());
            }
            assert_eq!(s.rewards.nci, s.rewards.nc + s.rewards.i);
        }
    }

    #[test]
    fn exact_collection_is_deterministic() {
        let cfg = TwoRoomConfig::normal();
        let run = || {
            let mut rng = stream(2, &[7]);
            collect_exact_episode(
                &cfg,
                &PolicyKind::Random,
                RewardChoice::Control(Objective::ExactCertainty),
                header(9),
                &mut rng,
            )
        };
        let (a, b) = (run(), run());
        let key = |o: &EpisodeOutcome| {
            o.log
                .steps
                .iter()
                .map(|s| (s.action, s.rewards.c.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn oracle_policy_locks_everything_in_the_log() {
        let cfg = TwoRoomConfig::normal();
        let mut rng = stream(3, &[]);
        let out = collect_exact_episode(
            &cfg,
            &PolicyKind::Oracle,
            RewardChoice::Control(Objective::Oracle),
            header(11),
            &mut rng,
        );
        let last = out.log.steps.last().unwrap();
        assert!(last.priv_state.particles.iter().all(|p| p.locked));
    }

    #[test]
    fn lssm_episode_runs_with_a_tiny_model() {
        let cfg = TwoRoomConfig::normal();
        let mut init = stream(4, &[]);
        let mut store = ParamStore::new();
        let mut lcfg = crate::lssm::LssmConfig::desk(
            cfg.observation_len(),
            Action::COUNT,
        );
        lcfg.k1 = 4;
        lcfg.k2 = 4;
        lcfg.hidden = 16;
        lcfg.particles = 2;
        let lssm = Lssm::new(&mut store, &mut init, lcfg);
        let mut ens = DynamicsEnsemble::new(2);
        ens.capture(&store);
        let current = PriorParams::from_store(&store);
        let ctx = LssmContext {
            lssm: &lssm,
            store: &store,
            ensemble: &ens,
            current_prior: &current,
        };
        let mut rng = stream(4, &[1]);
        let out = collect_lssm_episode(
            &cfg,
            &ctx,
            &PolicyKind::Random,
            RewardChoice::Explore,
            header(13),
            &mut rng,
        );
        assert_eq!(out.transitions.len(), cfg.episode_len);
        assert!(out.transitions.iter().all(|t| t.reward.is_finite()));
        assert!(out.log.steps.iter().all(|s| s.rewards.e >= 0.0));
        assert_eq!(out.transitions[0].input.len(), 16);
    }
}
