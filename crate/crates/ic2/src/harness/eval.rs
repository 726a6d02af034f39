//! Evaluation: roll out a trained checkpoint or a scripted baseline and
//! summarize behaviour from the privileged traces in the episode logs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::Rng;
use serde::Serialize;

use super::config::{EnvPreset, ExperimentConfig, Objective};
use super::logs::{EpisodeLog, LogHeader, LOG_FORMAT_VERSION};
use super::rollout::{
    collect_exact_episode, collect_lssm_episode, EpisodeOutcome, LssmContext, PolicyKind,
    RewardChoice,
};
use super::train::{exact_input_dim, lssm_config, TrainerState};
use crate::lssm::{DynamicsEnsemble, Lssm, PriorParams};
use crate::parallel::map_indexed;
use crate::params::ParamStore;
use crate::policy::ActorCritic;
use crate::seeding::stream;
use crate::worlds::Action;

/// Mean and standard error across evaluation seeds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub se: f64,
}

impl MetricSummary {
    fn of(per_seed: &[f64]) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let se = if per_seed.len() > 1 {
            let var = per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, se }
    }
}

/// Behavioural metrics computed from privileged episode traces. Each is
/// averaged within a seed, then summarized across seeds.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// Fraction of particles locked, averaged over all steps.
    pub lock_fraction_time_avg: MetricSummary,
    /// Fraction of particles locked at the final step.
    pub lock_fraction_final: MetricSummary,
    /// Fraction of particles visible in the window, averaged over steps.
    pub visibility_fraction: MetricSummary,
    /// Sum over particles of the entropy (nats) of each particle's
    /// empirical position distribution over the episode.
    pub state_visitation_entropy: MetricSummary,
}

fn episode_metrics(log: &EpisodeLog) -> [f64; 4] {
    let steps = &log.steps;
    let t = steps.len() as f64;
    let n_particles = steps[0].priv_state.particles.len() as f64;
    let mut locked_avg = 0.0;
    let mut visible_avg = 0.0;
    for s in steps {
        let locked = s.priv_state.particles.iter().filter(|p| p.locked).count() as f64;
        let visible = s.priv_state.particles.iter().filter(|p| p.visible).count() as f64;
        locked_avg += locked / n_particles / t;
        visible_avg += visible / n_particles / t;
    }
    let final_locked = steps
        .last()
        .unwrap()
        .priv_state
        .particles
        .iter()
        .filter(|p| p.locked)
        .count() as f64
        / n_particles;

    let mut entropy = 0.0;
    for k in 0..steps[0].priv_state.particles.len() {
        let mut counts: std::collections::HashMap<[i32; 2], usize> = Default::default();
        for s in steps {
            *counts.entry(s.priv_state.particles[k].pos).or_insert(0) += 1;
        }
        for &c in counts.values() {
            let p = c as f64 / t;
            entropy -= p * p.ln();
        }
    }
    [locked_avg, final_locked, visible_avg, entropy]
}

/// Summarize logs grouped by evaluation seed.
pub fn metric_report(per_seed_logs: &[Vec<EpisodeLog>]) -> MetricReport {
    let mut per_seed = [const { Vec::new() }; 4];
    for logs in per_seed_logs {
        let mut acc = [0.0; 4];
        for log in logs {
            let m = episode_metrics(log);
            for i in 0..4 {
                acc[i] += m[i] / logs.len() as f64;
            }
        }
        for i in 0..4 {
            per_seed[i].push(acc[i]);
        }
    }
    MetricReport {
        lock_fraction_time_avg: MetricSummary::of(&per_seed[0]),
        lock_fraction_final: MetricSummary::of(&per_seed[1]),
        visibility_fraction: MetricSummary::of(&per_seed[2]),
        state_visitation_entropy: MetricSummary::of(&per_seed[3]),
    }
}

/// What to evaluate: a scripted baseline on a given environment, or the
/// control policy stored in a training run directory.
pub enum EvalTarget {
    Random(EnvPreset),
    Oracle(EnvPreset),
    Checkpoint(PathBuf),
}

pub struct EvalOutcome {
    pub report: MetricReport,
    /// Logs grouped by seed, `rollouts` episodes each.
    pub per_seed_logs: Vec<Vec<EpisodeLog>>,
}

fn eval_header(env: EnvPreset, objective: &str, policy: &str, episode_seed: u64) -> LogHeader {
    LogHeader {
        format_version: LOG_FORMAT_VERSION,
        config_hash: "eval".to_string(),
        env: env.to_string(),
        objective: objective.to_string(),
        policy: policy.to_string(),
        round: 0,
        episode_seed,
    }
}

/// Loaded pieces of a training run needed to roll out its control policy.
struct LoadedRun {
    cfg: ExperimentConfig,
    control_store: ParamStore,
    control_ac: ActorCritic,
    model: Option<(ParamStore, Lssm, DynamicsEnsemble)>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg = ExperimentConfig::parse(
        &std::fs::read_to_string(dir.join("config.cfg"))
            .with_context(|| format!("no config.cfg in {}", dir.display()))?,
    )?;
    let env_cfg = cfg.env.two_room();
    let input_dim = match cfg.belief {
        super::config::BeliefSource::Exact => exact_input_dim(&env_cfg),
        super::config::BeliefSource::Lssm => {
            let l = lssm_config(&cfg, &env_cfg);
            l.k1 * l.k2
        }
    };
    let (control_store, _) = ParamStore::load(&dir.join("control.ckpt"))?;
    let control_ac = ActorCritic::attach(&control_store, input_dim, Action::COUNT)?;
    let model = match cfg.belief {
        super::config::BeliefSource::Exact => None,
        super::config::BeliefSource::Lssm => {
            let (store, _) = ParamStore::load(&dir.join("model.ckpt"))?;
            let lssm = Lssm::attach(&store, lssm_config(&cfg, &env_cfg))?;
            let ensemble = match std::fs::read_to_string(dir.join("trainer.json")) {
                Ok(text) => serde_json::from_str::<TrainerState>(&text)?.ensemble,
                Err(_) => DynamicsEnsemble::new(cfg.ensemble),
            };
            Some((store, lssm, ensemble))
        }
    };
    Ok(LoadedRun {
        cfg,
        control_store,
        control_ac,
        model,
    })
}

/// Roll out `rollouts` fresh episodes per seed and summarize. Collection
/// is deterministic in (`target`, `seeds`, rollout index).
pub fn evaluate(target: &EvalTarget, rollouts: usize, seeds: &[u64]) -> Result<EvalOutcome> {
    let run = match target {
        EvalTarget::Checkpoint(dir) => Some(load_run(dir)?),
        _ => None,
    };
    let mut per_seed_logs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let outs: Vec<EpisodeOutcome> = match target {
            EvalTarget::Random(env) | EvalTarget::Oracle(env) => {
                let (kind, name, objective) = match target {
                    EvalTarget::Random(_) => (PolicyKind::Random, "random", Objective::Random),
                    _ => (PolicyKind::Oracle, "oracle", Objective::Oracle),
                };
                let env_cfg = env.two_room();
                map_indexed(rollouts, |i| {
                    let mut rng = stream(seed, &[0xE7A1, i as u64]);
                    let ep_seed: u64 = rng.random();
                    collect_exact_episode(
                        &env_cfg,
                        &kind,
                        RewardChoice::Control(objective),
                        eval_header(*env, &objective.to_string(), name, ep_seed),
                        &mut rng,
                    )
                })
            }
            EvalTarget::Checkpoint(_) => {
                let run = run.as_ref().unwrap();
                let cfg = &run.cfg;
                let env_cfg = cfg.env.two_room();
                let kind = PolicyKind::Learned {
                    ac: &run.control_ac,
                    store: &run.control_store,
                };
                match &run.model {
                    None => map_indexed(rollouts, |i| {
                        let mut rng = stream(seed, &[0xE7A1, i as u64]);
                        let ep_seed: u64 = rng.random();
                        collect_exact_episode(
                            &env_cfg,
                            &kind,
                            RewardChoice::Control(cfg.objective),
                            eval_header(cfg.env, &cfg.objective.to_string(), "control", ep_seed),
                            &mut rng,
                        )
                    }),
                    Some((store, lssm, ensemble)) => {
                        let current = PriorParams::from_store(store);
                        let ctx = LssmContext {
                            lssm,
                            store,
                            ensemble,
                            current_prior: &current,
                        };
                        map_indexed(rollouts, |i| {
                            let mut rng = stream(seed, &[0xE7A1, i as u64]);
                            let ep_seed: u64 = rng.random();
                            collect_lssm_episode(
                                &env_cfg,
                                &ctx,
                                &kind,
                                RewardChoice::Control(cfg.objective),
                                eval_header(
                                    cfg.env,
                                    &cfg.objective.to_string(),
                                    "control",
                                    ep_seed,
                                ),
                                &mut rng,
                            )
                        })
                    }
                }
            }
        };
        per_seed_logs.push(outs.into_iter().map(|o| o.log).collect());
    }
    Ok(EvalOutcome {
        report: metric_report(&per_seed_logs),
        per_seed_logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_locks_everything_and_visits_least() {
        let oracle = evaluate(&EvalTarget::Oracle(EnvPreset::Normal), 5, &[1, 2]).unwrap();
        let random = evaluate(&EvalTarget::Random(EnvPreset::Normal), 5, &[1, 2]).unwrap();
        assert!(oracle.report.lock_fraction_final.mean > random.report.lock_fraction_final.mean);
        assert!(
            oracle.report.state_visitation_entropy.mean
                < random.report.state_visitation_entropy.mean
        );
    }

    #[test]
    fn metric_report_on_a_frozen_world_is_exact() {
        use super::super::logs::{ParticlePriv, PrivState, StepRecord};
        use crate::motivation::RewardVector;
        // One particle locked from the start and never moving: lock
        // fractions 1, visibility 0, position entropy 0.
        let steps: Vec<StepRecord> = (1..=4)
            .map(|t| StepRecord {
                step: t,
                action: 0,
                rewards: RewardVector::default(),
                priv_state: PrivState {
                    agent: [0, 0],
                    particles: vec![ParticlePriv {
                        pos: [3, 1],
                        locked: true,
                        visible: false,
                    }],
                },
            })
            .collect();
        let log = EpisodeLog {
            header: eval_header(EnvPreset::Normal, "oracle", "t", 0),
            steps,
        };
        let r = metric_report(&[vec![log]]);
        assert_eq!(r.lock_fraction_time_avg.mean, 1.0);
        assert_eq!(r.lock_fraction_final.mean, 1.0);
        assert_eq!(r.visibility_fraction.mean, 0.0);
        assert_eq!(r.state_visitation_entropy.mean, 0.0);
        assert_eq!(r.lock_fraction_final.se, 0.0);
    }
}
