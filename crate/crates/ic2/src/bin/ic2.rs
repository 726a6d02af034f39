//! Command-line entry point: training runs, checkpoint evaluation,
//! episode replay to image frames, plot-ready CSV export, and a quick
//! self-test of the numerical core.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ic2::harness::config::{EnvPreset, ExperimentConfig};
use ic2::harness::eval::{evaluate, EvalTarget};
use ic2::harness::logs::read_episodes;
use ic2::harness::train::run_training;
use ic2::worlds::{render_cells, write_ppm, Action, TwoRoomEnv};

#[derive(Parser)]
#[command(name = "ic2", about = "Intrinsic-control experiments in TwoRoom worlds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run (or resume) a training run.
    Train {
        /// Path to a `key = value` experiment config file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory; reused to resume an interrupted run.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the control policy of a finished run, or a baseline.
    Eval {
        /// Run directory (from `train --out`), or `random` / `oracle`.
        #[arg(long)]
        checkpoint: String,
        /// Episodes per evaluation seed.
        #[arg(long, default_value_t = 50)]
        rollouts: usize,
        /// Number of evaluation seeds.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Environment preset for baseline policies (ignored for runs).
        #[arg(long, default_value = "normal")]
        env: EnvPreset,
    },
    /// Re-render a logged episode as full-grid PPM frames.
    Replay {
        /// Episode log (JSONL); the first episode in the file is used.
        #[arg(long)]
        episode: PathBuf,
        /// Directory for `step_0000.ppm`, `step_0001.ppm`, ...
        #[arg(long)]
        frames: PathBuf,
    },
    /// Export per-run metric and reward-trace CSVs for plotting.
    PlotData {
        /// One or more run directories.
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fast end-to-end checks of the numerical core.
    Selftest,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, seed, out } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::parse(&text)?;
            cfg.validate()?;
            let state = run_training(&cfg, seed, &out)?;
            println!(
                "trained {} rounds into {} (config {})",
                state.rounds_done,
                out.display(),
                cfg.hash()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            rollouts,
            seeds,
            env,
        } => {
            let target = match checkpoint.as_str() {
                "random" => EvalTarget::Random(env),
                "oracle" => EvalTarget::Oracle(env),
                dir => EvalTarget::Checkpoint(PathBuf::from(dir)),
            };
            let seed_list: Vec<u64> = (0..seeds).collect();
            let outcome = evaluate(&target, rollouts, &seed_list)?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
            Ok(())
        }
        Cmd::Replay { episode, frames } => replay(&episode, &frames),
        Cmd::PlotData { runs, out } => plot_data(&runs, &out),
        Cmd::Selftest => selftest(),
    }
}

/// Rebuild the environment from the log header and replay the logged
/// actions, writing one full-grid frame per step (frame 0 is the reset).
fn replay(episode: &Path, frames: &Path) -> Result<()> {
    let episodes = read_episodes(episode)?;
    let Some(log) = episodes.first() else {
        bail!("{} contains no episodes", episode.display());
    };
    fs::create_dir_all(frames)?;
    let env_cfg: EnvPreset = log
        .header
        .env
        .parse()
        .map_err(|e: String| anyhow::anyhow!(e))?;
    let cfg = env_cfg.two_room();
    let (mut env, _) = TwoRoomEnv::reset(cfg.clone(), log.header.episode_seed)?;
    let (w, h) = (env.geo.grid_w as usize, env.geo.grid_h as usize);
    let frame = |env: &TwoRoomEnv, i: usize| -> Result<()> {
        let img = render_cells(&cfg, &env.grid_codes(), w, h);
        write_ppm(&img, &frames.join(format!("step_{i:04}.ppm")))?;
        Ok(())
    };
    frame(&env, 0)?;
    for (i, s) in log.steps.iter().enumerate() {
        env.step(Action::from_index(s.action))?;
        frame(&env, i + 1)?;
    }
    println!(
        "wrote {} frames to {}",
        log.steps.len() + 1,
        frames.display()
    );
    Ok(())
}

/// Final-round control-log metrics for every run (one CSV row each) plus
/// a per-run reward-trace CSV: per-step means of the intrinsic rewards,
/// each trace min-max normalized to [0, 1].
fn plot_data(runs: &[PathBuf], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut metrics = String::from(
        "run,objective,lock_time_avg,lock_time_se,lock_final,lock_final_se,\
         visibility,visibility_se,visit_entropy,visit_entropy_se\n",
    );
    for run in runs {
        let name = run
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        let logs_dir = run.join("logs");
        let mut control_logs: Vec<PathBuf> = fs::read_dir(&logs_dir)
            .with_context(|| format!("no logs/ in {}", run.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with("_control.jsonl"))
            })
            .collect();
        control_logs.sort();
        let Some(last) = control_logs.last() else {
            bail!("{} has no control logs", run.display());
        };
        let episodes = read_episodes(last)?;
        let report = ic2::harness::eval::metric_report(std::slice::from_ref(&episodes));
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            name,
            episodes
                .first()
                .map(|e| e.header.objective.clone())
                .unwrap_or_default(),
            report.lock_fraction_time_avg.mean,
            report.lock_fraction_time_avg.se,
            report.lock_fraction_final.mean,
            report.lock_fraction_final.se,
            report.visibility_fraction.mean,
            report.visibility_fraction.se,
            report.state_visitation_entropy.mean,
            report.state_visitation_entropy.se,
        ));

        let t = episodes.iter().map(|e| e.steps.len()).max().unwrap_or(0);
        let mut traces = vec![[0.0f64; 4]; t];
        let mut counts = vec![0usize; t];
        for e in &episodes {
            for (i, s) in e.steps.iter().enumerate() {
                traces[i][0] += s.rewards.ne;
                traces[i][1] += s.rewards.nc;
                traces[i][2] += s.rewards.c;
                traces[i][3] += s.rewards.i;
                counts[i] += 1;
            }
        }
        for (row, &c) in traces.iter_mut().zip(&counts) {
            for v in row.iter_mut() {
                *v /= c.max(1) as f64;
            }
        }
        for k in 0..4 {
            let lo = traces.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            let hi = traces
                .iter()
                .map(|r| r[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            for row in traces.iter_mut() {
                row[k] = if span > 0.0 { (row[k] - lo) / span } else { 0.0 };
            }
        }
        let mut csv = String::from("step,ne,nc,c,i\n");
        for (i, r) in traces.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{},{}\n", i + 1, r[0], r[1], r[2], r[3]));
        }
        fs::write(out.join(format!("{name}_traces.csv")), csv)?;
    }
    fs::write(out.join("metrics.csv"), metrics)?;
    println!("wrote plot data for {} runs to {}", runs.len(), out.display());
    Ok(())
}

fn selftest() -> Result<()> {
    use ic2::exact_belief::ExactFilter;
    use ic2::multicat::MultiCat;
    use ic2::seeding::stream;
    use ic2::worlds::{oracle_policy, TwoRoomConfig};
    use ndarray::Array2;
    use rand::Rng;

    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // Gradient of sum(tanh(x)) matches central differences.
    {
        let mut store = ic2::params::ParamStore::new();
        let x0 = Array2::from_shape_fn((2, 3), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64 + 0.1);
        let idx = store.add("x", x0.clone()).unwrap();
        let grad = {
            let mut g = ic2::params::Graph::new(&store);
            let x = g.param(idx);
            let y = g.tape.tanh(x);
            let loss = g.tape.sum(y);
            g.take_grads(loss)
                .into_iter()
                .find(|(i, _)| *i == idx)
                .unwrap()
                .1
        };
        let mut max_err = 0.0f64;
        for i in 0..2 {
            for j in 0..3 {
                let eps = 1e-6;
                let f = |v: f64| {
                    let mut x = x0.clone();
                    x[(i, j)] = v;
                    x.mapv(f64::tanh).sum()
                };
                let fd = (f(x0[(i, j)] + eps) - f(x0[(i, j)] - eps)) / (2.0 * eps);
                max_err = max_err.max((grad[(i, j)] - fd).abs());
            }
        }
        check("tanh gradient matches central differences", max_err < 1e-7);
    }

    // Factorized categorical: entropy of a uniform 2x3 latent is ln 9.
    {
        let q = MultiCat::uniform(2, 3);
        check(
            "uniform multicat entropy equals ln(K2^K1)",
            (q.entropy() - (9f64).ln()).abs() < 1e-12,
        );
    }

    // Exact filter stays a probability distribution along a random run.
    {
        let cfg = TwoRoomConfig::normal();
        let (mut env, _) = TwoRoomEnv::reset(cfg.clone(), 12)?;
        let mut filter = ExactFilter::new(&env.geo, cfg.n_particles);
        filter.observe_initial(&env)?;
        let mut rng = stream(12, &[1]);
        let mut ok = true;
        for _ in 0..50 {
            let a = Action::from_index(rng.random_range(0..Action::COUNT));
            env.step(a)?;
            filter.step(&env, a == Action::Tag)?;
            for mass in filter.to_policy_input().chunks(filter.n_cells() * 2) {
                ok &= (mass.iter().sum::<f64>() - 1.0).abs() < 1e-9;
            }
        }
        check("exact filter mass stays normalized over 50 steps", ok);
    }

    // Environment resets are deterministic in the seed.
    {
        let cfg = TwoRoomConfig::normal();
        let (mut a, oa) = TwoRoomEnv::reset(cfg.clone(), 5)?;
        let (mut b, ob) = TwoRoomEnv::reset(cfg, 5)?;
        let mut same = oa == ob;
        for i in 0..20 {
            let act = Action::from_index(i % Action::COUNT);
            same &= a.step(act)? == b.step(act)?;
        }
        check("environment is deterministic in the seed", same);
    }

    // The scripted oracle locks every particle in a normal episode.
    {
        let cfg = TwoRoomConfig::normal();
        let (mut env, _) = TwoRoomEnv::reset(cfg, 3)?;
        while !env.episode_ended() {
            let a = oracle_policy(&env);
            env.step(a)?;
        }
        let all = env.privileged_state().particles.iter().all(|p| p.locked);
        check("oracle locks all particles within one episode", all);
    }

    if failures > 0 {
        bail!("{failures} selftest check(s) failed");
    }
    Ok(())
}
