//! Episode logs: one JSON object per line, a header line per episode
//! followed by its step records. Privileged fields are for metrics and
//! replay only — learners never read these files.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motivation::RewardVector;

pub const LOG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad log line {line}: {err}")]
    Parse {
        line: usize,
        err: serde_json::Error,
    },
    #[error("log starts with a step record instead of a header")]
    MissingHeader,
    #[error("episode index {0} out of range ({1} episodes)")]
    NoSuchEpisode(usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub env: String,
    pub objective: String,
    pub policy: String,
    pub round: usize,
    pub episode_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticlePriv {
    pub pos: [i32; 2],
    pub locked: bool,
    pub visible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivState {
    pub agent: [i32; 2],
    pub particles: Vec<ParticlePriv>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: usize,
    pub rewards: RewardVector,
    #[serde(rename = "priv")]
    pub priv_state: PrivState,
}

#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
}

/// Append episodes to a JSONL writer.
pub fn write_episodes<W: Write>(w: &mut W, episodes: &[EpisodeLog]) -> Result<(), LogError> {
    for ep in episodes {
        serde_json::to_writer(&mut *w, &ep.header).map_err(io_err)?;
        w.write_all(b"\n")?;
        for s in &ep.steps {
            serde_json::to_writer(&mut *w, s).map_err(io_err)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn io_err(e: serde_json::Error) -> LogError {
    LogError::Io(e.into())
}

/// Read every episode from a JSONL log file.
pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeLog>, LogError> {
    let f = BufReader::new(File::open(path)?);
    let mut out: Vec<EpisodeLog> = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // Headers and steps are disjoint shapes; try the header first.
        if let Ok(h) = serde_json::from_str::<LogHeader>(&line) {
            out.push(EpisodeLog {
                header: h,
                steps: Vec::new(),
            });
            continue;
        }
        let step: StepRecord =
            serde_json::from_str(&line).map_err(|err| LogError::Parse { line: i + 1, err })?;
        out.last_mut().ok_or(LogError::MissingHeader)?.steps.push(step);
    }
    Ok(out)
}
