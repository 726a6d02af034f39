//! The training loop: alternating rounds of episode collection, model
//! fitting, and PPO updates, with checkpointing after every round so an
//! interrupted run resumes at the last round boundary with byte-identical
//! results.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BeliefSource, ExperimentConfig, LssmScale};
use super::logs::{write_episodes, EpisodeLog, LogHeader, LOG_FORMAT_VERSION};
use super::rollout::{
    collect_exact_episode, collect_lssm_episode, EpisodeData, EpisodeOutcome, LssmContext,
    PolicyKind, RewardChoice,
};
use crate::lssm::{action_onehot, DynamicsEnsemble, Lssm, LssmConfig, PriorParams, SeqBatch};
use crate::motivation::{flatten_obs, RewardVector};
use crate::parallel::map_indexed;
use crate::params::ParamStore;
use crate::policy::{ppo_update, ActorCritic, PpoConfig, RolloutBatch};
use crate::seeding::stream;
use crate::worlds::{render_codes, Action, Geometry, TwoRoomConfig};

/// One row of metrics.csv: per-episode means for one policy in one round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub policy: String,
    /// Mean episode return under the reward the policy is trained on.
    pub mean_return: f64,
    /// Mean per-episode totals of every reward component.
    pub rewards: RewardVector,
    pub model_loss: Option<f64>,
    pub model_recon: Option<f64>,
    pub model_kl: Option<f64>,
}

/// Everything needed to resume at a round boundary that is not already in
/// a parameter checkpoint.
#[derive(Serialize, Deserialize)]
pub struct TrainerState {
    pub rounds_done: usize,
    pub ensemble: DynamicsEnsemble,
    pub dataset: Vec<EpisodeData>,
    pub metrics: Vec<MetricRow>,
}

/// Policy-input width for the exact-belief filter: a one-hot agent
/// position plus, per particle, an unlocked and a locked mass for every
/// busy-room cell.
pub fn exact_input_dim(env_cfg: &TwoRoomConfig) -> usize {
    let geo = Geometry::new(env_cfg);
    (env_cfg.grid_w * env_cfg.grid_h) as usize + env_cfg.n_particles * 2 * geo.busy_cells.len()
}

pub fn lssm_config(cfg: &ExperimentConfig, env_cfg: &TwoRoomConfig) -> LssmConfig {
    let (obs, acts) = (env_cfg.observation_len(), Action::COUNT);
    match cfg.lssm_scale {
        LssmScale::Desk => LssmConfig::desk(obs, acts),
        LssmScale::Full => LssmConfig::full(obs, acts),
    }
}

fn ppo_config(cfg: &ExperimentConfig) -> PpoConfig {
    PpoConfig {
        lr: cfg.ppo_lr,
        ..PpoConfig::default()
    }
}

fn header(cfg: &ExperimentConfig, policy: &str, round: usize, episode_seed: u64) -> LogHeader {
    LogHeader {
        format_version: LOG_FORMAT_VERSION,
        config_hash: cfg.hash(),
        env: cfg.env.to_string(),
        objective: cfg.objective.to_string(),
        policy: policy.to_string(),
        round,
        episode_seed,
    }
}

fn write_round_logs(out: &Path, round: usize, policy: &str, logs: &[EpisodeLog]) -> Result<()> {
    let path = out
        .join("logs")
        .join(format!("round_{round:04}_{policy}.jsonl"));
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    write_episodes(&mut w, logs)?;
    w.flush()?;
    Ok(())
}

fn write_metrics_csv(out: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut s = String::from(
        "round,policy,mean_return,ne,nc,c,i,nci,e,smirl,model_loss,model_recon,model_kl\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            r.policy,
            r.mean_return,
            r.rewards.ne,
            r.rewards.nc,
            r.rewards.c,
            r.rewards.i,
            r.rewards.nci,
            r.rewards.e,
            r.rewards.smirl,
            opt(r.model_loss),
            opt(r.model_recon),
            opt(r.model_kl),
        ));
    }
    fs::write(out.join("metrics.csv"), s)?;
    Ok(())
}

fn save_store(
    store: &ParamStore,
    cfg: &ExperimentConfig,
    round: usize,
    kind: &str,
    path: &Path,
) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert("round".to_string(), round.to_string());
    extra.insert("config_hash".to_string(), cfg.hash());
    extra.insert("kind".to_string(), kind.to_string());
    store.save(path, &extra)?;
    Ok(())
}

/// Split collected outcomes into the pieces each consumer wants, and
/// compute the per-episode means for metrics.
struct RoundBatch {
    batch: RolloutBatch,
    logs: Vec<EpisodeLog>,
    data: Vec<EpisodeData>,
    mean_return: f64,
    rewards: RewardVector,
}

fn split_outcomes(outs: Vec<EpisodeOutcome>) -> RoundBatch {
    let n = outs.len() as f64;
    let mut episodes = Vec::with_capacity(outs.len());
    let mut logs = Vec::with_capacity(outs.len());
    let mut data = Vec::with_capacity(outs.len());
    let mut mean_return = 0.0;
    let mut rewards = RewardVector::default();
    for o in outs {
        mean_return += o.transitions.iter().map(|t| t.reward).sum::<f64>() / n;
        rewards.ne += o.reward_totals.ne / n;
        rewards.nc += o.reward_totals.nc / n;
        rewards.c += o.reward_totals.c / n;
        rewards.i += o.reward_totals.i / n;
        rewards.nci += o.reward_totals.nci / n;
        rewards.e += o.reward_totals.e / n;
        rewards.smirl += o.reward_totals.smirl / n;
        episodes.push(o.transitions);
        logs.push(o.log);
        data.push(o.data);
    }
    RoundBatch {
        batch: RolloutBatch { episodes },
        logs,
        data,
        mean_return,
        rewards,
    }
}

/// Sample a minibatch of length-`horizon` observation windows from the
/// dataset, re-rendering pixels from the stored cell codes. The action
/// row at window position 0 is the true preceding action (zero only at
/// an episode start).
fn sample_seq_batch(
    env_cfg: &TwoRoomConfig,
    dataset: &[EpisodeData],
    batch: usize,
    horizon: usize,
    n_actions: usize,
    rng: &mut ChaCha8Rng,
) -> SeqBatch {
    let obs_dim = env_cfg.observation_len();
    let mut obs: Vec<Array2<f64>> = (0..horizon)
        .map(|_| Array2::zeros((batch, obs_dim)))
        .collect();
    let mut actions: Vec<Array2<f64>> = (0..horizon)
        .map(|_| Array2::zeros((batch, n_actions)))
        .collect();
    for b in 0..batch {
        let ep = &dataset[rng.random_range(0..dataset.len())];
        let max_start = ep.codes.len().saturating_sub(horizon);
        let start = rng.random_range(0..=max_start);
        for t in 0..horizon {
            let m = (start + t).min(ep.codes.len() - 1);
            let pix = flatten_obs(&render_codes(env_cfg, &ep.codes[m]));
            for (j, &x) in pix.iter().enumerate() {
                obs[t][(b, j)] = x;
            }
            let a = if m == 0 {
                action_onehot(n_actions, None)
            } else {
                action_onehot(n_actions, Some(ep.actions[m - 1] as usize))
            };
            for j in 0..n_actions {
                actions[t][(b, j)] = a[(0, j)];
            }
        }
    }
    SeqBatch { obs, actions }
}

fn load_or_init_state(out: &Path, k: usize) -> Result<Option<TrainerState>> {
    let path = out.join("trainer.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let mut state: TrainerState =
        serde_json::from_str(&text).context("trainer.json is corrupt")?;
    ensure!(
        state.ensemble.capacity() == k || state.ensemble.is_empty(),
        "trainer.json ensemble size does not match the config"
    );
    state.metrics.sort_by_key(|r| r.round);
    Ok(Some(state))
}

fn persist_round(
    out: &Path,
    cfg: &ExperimentConfig,
    state: &TrainerState,
    stores: &[(&ParamStore, &str, &str)],
) -> Result<()> {
    for (store, kind, file) in stores {
        save_store(store, cfg, state.rounds_done, kind, &out.join(file))?;
    }
    write_metrics_csv(out, &state.metrics)?;
    let tmp = out.join("trainer.json.tmp");
    fs::write(&tmp, serde_json::to_vec(state)?)?;
    fs::rename(&tmp, out.join("trainer.json"))?;
    Ok(())
}

/// Run (or resume) a full training run in `out`. Returns the final
/// trainer state, whose metric rows summarize every round.
pub fn run_training(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainerState> {
    run_training_rounds(cfg, seed, out, cfg.rounds())
}

/// Like [`run_training`] but stops after `until_round` completed rounds;
/// a later call with a higher bound resumes where this one stopped.
pub fn run_training_rounds(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    until_round: usize,
) -> Result<TrainerState> {
    cfg.validate()?;
    fs::create_dir_all(out.join("logs"))?;
    let canon = cfg.canonical();
    let cfg_path = out.join("config.cfg");
    if cfg_path.exists() {
        let prev = fs::read_to_string(&cfg_path)?;
        ensure!(
            prev == canon,
            "existing run at {} was made with a different config",
            out.display()
        );
    } else {
        fs::write(&cfg_path, &canon)?;
    }
    let last = until_round.min(cfg.rounds());
    match cfg.belief {
        BeliefSource::Exact => train_exact(cfg, seed, out, last),
        BeliefSource::Lssm => train_lssm(cfg, seed, out, last),
    }
}

/// Exact-belief training: no model to learn, so the exploration slot is
/// filled by a random data collector (budget-accounted but untrained) and
/// only the control policy is optimized.
fn train_exact(cfg: &ExperimentConfig, seed: u64, out: &Path, last: usize) -> Result<TrainerState> {
    let env_cfg = cfg.env.two_room();
    let input_dim = exact_input_dim(&env_cfg);
    let scripted = cfg.objective.is_scripted();
    let mut control_store = ParamStore::new();
    let control_ac = ActorCritic::new(
        &mut control_store,
        &mut stream(seed, &[0xA11, 0]),
        input_dim,
        Action::COUNT,
    );
    let mut state = match load_or_init_state(out, cfg.ensemble)? {
        Some(s) => {
            let (loaded, _) = ParamStore::load(&out.join("control.ckpt"))?;
            control_store = loaded;
            s
        }
        None => TrainerState {
            rounds_done: 0,
            ensemble: DynamicsEnsemble::new(cfg.ensemble),
            dataset: Vec::new(),
            metrics: Vec::new(),
        },
    };
    let n = cfg.episodes_per_policy;
    let ppo_cfg = ppo_config(cfg);

    for round in state.rounds_done..last {
        let collect = |policy: &PolicyKind, name: &str, reward: RewardChoice| {
            map_indexed(n, |i| {
                let mut rng = stream(seed, &[1, round as u64, policy_tag(name), i as u64]);
                let ep_seed: u64 = rng.random();
                collect_exact_episode(
                    &env_cfg,
                    policy,
                    reward,
                    header(cfg, name, round, ep_seed),
                    &mut rng,
                )
            })
        };
        let explore = split_outcomes(collect(&PolicyKind::Random, "explore", RewardChoice::Explore));
        let control_kind = control_policy_kind(cfg, &control_ac, &control_store);
        let control = split_outcomes(collect(
            &control_kind,
            "control",
            RewardChoice::Control(cfg.objective),
        ));

        if !scripted {
            let mut rng = stream(seed, &[3, round as u64]);
            ppo_update(&control_ac, &mut control_store, &control.batch, &ppo_cfg, &mut rng);
        }

        write_round_logs(out, round, "explore", &explore.logs)?;
        write_round_logs(out, round, "control", &control.logs)?;
        push_metrics(&mut state.metrics, round, &explore, &control, None);
        state.rounds_done = round + 1;
        persist_round(out, cfg, &state, &[(&control_store, "control", "control.ckpt")])?;
    }
    Ok(state)
}

/// Learned-belief training: each round collects explore and control
/// episodes under the current model, extends the dataset, fits the model,
/// refreshes the ensemble, and updates both policies.
fn train_lssm(cfg: &ExperimentConfig, seed: u64, out: &Path, last: usize) -> Result<TrainerState> {
    let env_cfg = cfg.env.two_room();
    let lcfg = lssm_config(cfg, &env_cfg);
    let input_dim = lcfg.k1 * lcfg.k2;
    let scripted = cfg.objective.is_scripted();

    let mut model_store = ParamStore::new();
    let lssm = Lssm::new(&mut model_store, &mut stream(seed, &[0xA11, 2]), lcfg.clone());
    let mut control_store = ParamStore::new();
    let control_ac = ActorCritic::new(
        &mut control_store,
        &mut stream(seed, &[0xA11, 0]),
        input_dim,
        Action::COUNT,
    );
    let mut explore_store = ParamStore::new();
    let explore_ac = ActorCritic::new(
        &mut explore_store,
        &mut stream(seed, &[0xA11, 1]),
        input_dim,
        Action::COUNT,
    );

    let mut state = match load_or_init_state(out, cfg.ensemble)? {
        Some(s) => {
            model_store = ParamStore::load(&out.join("model.ckpt"))?.0;
            control_store = ParamStore::load(&out.join("control.ckpt"))?.0;
            explore_store = ParamStore::load(&out.join("explore.ckpt"))?.0;
            s
        }
        None => TrainerState {
            rounds_done: 0,
            ensemble: DynamicsEnsemble::new(cfg.ensemble),
            dataset: Vec::new(),
            metrics: Vec::new(),
        },
    };
    let n = cfg.episodes_per_policy;
    let ppo_cfg = ppo_config(cfg);

    for round in state.rounds_done..last {
        let current_prior = PriorParams::from_store(&model_store);
        let ctx = LssmContext {
            lssm: &lssm,
            store: &model_store,
            ensemble: &state.ensemble,
            current_prior: &current_prior,
        };
        let collect = |policy: &PolicyKind, name: &str, reward: RewardChoice| {
            map_indexed(n, |i| {
                let mut rng = stream(seed, &[1, round as u64, policy_tag(name), i as u64]);
                let ep_seed: u64 = rng.random();
                collect_lssm_episode(
                    &env_cfg,
                    &ctx,
                    policy,
                    reward,
                    header(cfg, name, round, ep_seed),
                    &mut rng,
                )
            })
        };
        let explore_kind = PolicyKind::Learned {
            ac: &explore_ac,
            store: &explore_store,
        };
        let explore = split_outcomes(collect(&explore_kind, "explore", RewardChoice::Explore));
        let control_kind = control_policy_kind(cfg, &control_ac, &control_store);
        let control = split_outcomes(collect(
            &control_kind,
            "control",
            RewardChoice::Control(cfg.objective),
        ));
        state.dataset.extend(explore.data.iter().cloned());
        state.dataset.extend(control.data.iter().cloned());

        let batches = cfg.model_batches(state.dataset.len());
        let capture_every = (batches / cfg.ensemble).max(1);
        let mut model_rng = stream(seed, &[2, round as u64]);
        let mut elbo = (0.0, 0.0, 0.0);
        for b in 0..batches {
            let sb = sample_seq_batch(
                &env_cfg,
                &state.dataset,
                cfg.minibatch,
                lcfg.horizon,
                lcfg.n_actions,
                &mut model_rng,
            );
            let v = lssm
                .elbo_step(&mut model_store, &sb, &mut model_rng, cfg.model_lr, b)
                .with_context(|| format!("model training diverged in round {round}"))?;
            elbo.0 += v.loss / batches as f64;
            elbo.1 += v.recon / batches as f64;
            elbo.2 += v.kl / batches as f64;
            if (b + 1) % capture_every == 0 {
                state.ensemble.capture(&model_store);
            }
        }

        let mut explore_rng = stream(seed, &[4, round as u64]);
        ppo_update(&explore_ac, &mut explore_store, &explore.batch, &ppo_cfg, &mut explore_rng);
        if !scripted {
            let mut rng = stream(seed, &[3, round as u64]);
            ppo_update(&control_ac, &mut control_store, &control.batch, &ppo_cfg, &mut rng);
        }

        write_round_logs(out, round, "explore", &explore.logs)?;
        write_round_logs(out, round, "control", &control.logs)?;
        push_metrics(&mut state.metrics, round, &explore, &control, Some(elbo));
        state.rounds_done = round + 1;
        persist_round(
            out,
            cfg,
            &state,
            &[
                (&model_store, "model", "model.ckpt"),
                (&control_store, "control", "control.ckpt"),
                (&explore_store, "explore", "explore.ckpt"),
            ],
        )?;
    }
    Ok(state)
}

fn policy_tag(name: &str) -> u64 {
    match name {
        "explore" => 0,
        _ => 1,
    }
}

fn control_policy_kind<'a>(
    cfg: &ExperimentConfig,
    ac: &'a ActorCritic,
    store: &'a ParamStore,
) -> PolicyKind<'a> {
    use super::config::Objective;
    match cfg.objective {
        Objective::Random => PolicyKind::Random,
        Objective::Oracle => PolicyKind::Oracle,
        _ => PolicyKind::Learned { ac, store },
    }
}

fn push_metrics(
    rows: &mut Vec<MetricRow>,
    round: usize,
    explore: &RoundBatch,
    control: &RoundBatch,
    elbo: Option<(f64, f64, f64)>,
) {
    rows.push(MetricRow {
        round,
        policy: "explore".to_string(),
        mean_return: explore.mean_return,
        rewards: explore.rewards,
        model_loss: elbo.map(|e| e.0),
        model_recon: elbo.map(|e| e.1),
        model_kl: elbo.map(|e| e.2),
    });
    rows.push(MetricRow {
        round,
        policy: "control".to_string(),
        mean_return: control.mean_return,
        rewards: control.rewards,
        model_loss: None,
        model_recon: None,
        model_kl: None,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Objective;
    use tempfile::TempDir;

    fn mini_cfg() -> ExperimentConfig {
        ExperimentConfig {
            objective: Objective::ExactCertainty,
            belief: BeliefSource::Exact,
            episodes_per_policy: 2,
            // two rounds: 2 * 2 policies * 2 episodes * 100 steps = 800/round
            budget: 800,
            ..Default::default()
        }
    }

    #[test]
    fn exact_training_writes_expected_outputs() {
        let dir = TempDir::new().unwrap();
        let cfg = mini_cfg();
        let state = run_training(&cfg, 7, dir.path()).unwrap();
        assert_eq!(state.rounds_done, cfg.rounds());
        assert_eq!(state.rounds_done, 2);
        for f in [
            "config.cfg",
            "control.ckpt",
            "trainer.json",
            "metrics.csv",
            "logs/round_0000_control.jsonl",
            "logs/round_0001_explore.jsonl",
        ] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        assert_eq!(state.metrics.len(), 4);
    }

    #[test]
    fn resumed_run_matches_an_uninterrupted_one() {
        let mut cfg = mini_cfg();
        cfg.budget = 1600; // four rounds
        let full = TempDir::new().unwrap();
        run_training(&cfg, 11, full.path()).unwrap();

        let split = TempDir::new().unwrap();
        run_training_rounds(&cfg, 11, split.path(), 2).unwrap();
        run_training(&cfg, 11, split.path()).unwrap();

        for f in ["control.ckpt", "metrics.csv", "logs/round_0003_control.jsonl"] {
            let a = std::fs::read(full.path().join(f)).unwrap();
            let b = std::fs::read(split.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs after resume");
        }
    }

    #[test]
    fn mismatched_config_is_rejected_on_resume() {
        let dir = TempDir::new().unwrap();
        let cfg = mini_cfg();
        run_training(&cfg, 3, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.objective = Objective::ExactNc;
        assert!(run_training(&other, 3, dir.path()).is_err());
    }
}
