//! Demonstration storage, macro extraction, splitting, and normalization.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::env::{EnvState, PrimitiveAction, Source, Trajectory, ACTION_DIM, STATE_DIM};
use crate::textio::{self, Lines};
use crate::{seeded_rng, MaqError, Result};

/// A state paired with the `H` actions taken from it.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroSample {
    pub state: [f64; STATE_DIM],
    /// `ACTION_DIM * H` values, action-major.
    pub macro_actions: Vec<f64>,
    pub source_trajectory: usize,
    pub start_step: usize,
}

impl MacroSample {
    pub fn horizon(&self) -> usize {
        self.macro_actions.len() / ACTION_DIM
    }
}

/// Stride-1 windows of `horizon` actions; empty when the trajectory is shorter.
pub fn extract_macros(trajectory: &Trajectory, horizon: usize) -> Vec<MacroSample> {
    if horizon == 0 || horizon > trajectory.len() {
        return Vec::new();
    }
    (0..=trajectory.len() - horizon)
        .map(|t| MacroSample {
            state: trajectory.states[t].features(),
            macro_actions: trajectory.actions[t..t + horizon]
                .iter()
                .flat_map(|a| a.to_array())
                .collect(),
            source_trajectory: 0,
            start_step: t,
        })
        .collect()
}

/// Windows from every trajectory, tagged with the trajectory index.
pub fn extract_all(trajectories: &[Trajectory], horizon: usize) -> Vec<MacroSample> {
    trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            extract_macros(t, horizon).into_iter().map(move |mut s| {
                s.source_trajectory = i;
                s
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub split_seed: u64,
}

/// Seeded shuffle, then `floor(0.9 N)` trajectories for training.
pub fn split(demos: &[Trajectory], seed: u64) -> Result<DataSplit> {
    if demos.len() < 2 {
        return Err(MaqError::Usage(format!(
            "need at least two trajectories to split, got {}",
            demos.len()
        )));
    }
    let mut order: Vec<usize> = (0..demos.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let n_train = demos.len() * 9 / 10;
    let (train_idx, test_idx) = order.split_at(n_train);
    Ok(DataSplit {
        train: train_idx.iter().map(|&i| demos[i].clone()).collect(),
        test: test_idx.iter().map(|&i| demos[i].clone()).collect(),
        train_indices: train_idx.to_vec(),
        test_indices: test_idx.to_vec(),
        split_seed: seed,
    })
}

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension z-score statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub state_mean: [f64; STATE_DIM],
    pub state_std: [f64; STATE_DIM],
    pub action_mean: [f64; ACTION_DIM],
    pub action_std: [f64; ACTION_DIM],
}

fn mean_std<const D: usize>(rows: impl Iterator<Item = [f64; D]> + Clone) -> ([f64; D], [f64; D]) {
    let mut mean = [0.0; D];
    let mut n = 0usize;
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        n += 1;
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = [0.0; D];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.map(|s| (s / n as f64).sqrt().max(STD_FLOOR));
    (mean, std)
}

impl NormStats {
    pub fn compute(train: &[Trajectory]) -> Result<Self> {
        if train.is_empty() || train.iter().all(|t| t.is_empty()) {
            return Err(MaqError::Usage("normalization needs at least one non-empty trajectory".into()));
        }
        let (state_mean, state_std) = mean_std(train.iter().flat_map(|t| t.states.iter().map(EnvState::features)));
        let (action_mean, action_std) =
            mean_std(train.iter().flat_map(|t| t.actions.iter().map(|a| a.to_array())));
        Ok(Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
        })
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect()
    }

    /// Normalizes a flattened sequence of actions.
    pub fn normalize_actions(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, v)| (v - self.action_mean[i % ACTION_DIM]) / self.action_std[i % ACTION_DIM])
            .collect()
    }

    pub fn denormalize_actions(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, v)| v * self.action_std[i % ACTION_DIM] + self.action_mean[i % ACTION_DIM])
            .collect()
    }

    pub fn write_records(&self, out: &mut String) {
        let _ = writeln!(out, "norm state_mean {}", textio::join_reals(&self.state_mean));
        let _ = writeln!(out, "norm state_std {}", textio::join_reals(&self.state_std));
        let _ = writeln!(out, "norm action_mean {}", textio::join_reals(&self.action_mean));
        let _ = writeln!(out, "norm action_std {}", textio::join_reals(&self.action_std));
    }

    pub fn read_records(lines: &mut Lines<'_>) -> Result<Self> {
        fn field<const D: usize>(lines: &mut Lines<'_>, name: &str) -> Result<[f64; D]> {
            let (line, tokens) = lines.record("norm", name)?;
            if tokens.first() != Some(&name) {
                return Err(MaqError::parse(line, format!("expected norm field '{name}'")));
            }
            let v = textio::parse_reals(&tokens[1..], D, line, name)?;
            Ok(v.try_into().expect("length checked"))
        }
        Ok(Self {
            state_mean: field(lines, "state_mean")?,
            state_std: field(lines, "state_std")?,
            action_mean: field(lines, "action_mean")?,
            action_std: field(lines, "action_std")?,
        })
    }
}

pub const DATASET_FORMAT: &str = "MAQTRAJ";
pub const DATASET_VERSION: u32 = 1;

/// Serializes trajectories in the `MAQTRAJ 1` text format.
///
/// ```text
/// MAQTRAJ 1 state_dim=4 action_dim=3 count=N
/// traj length=L seed=S source=demo
/// step <4 state> <3 action> <reward> <done 0|1>     (L records)
/// final <4 state>
/// ```
pub fn encode_dataset(demos: &[Trajectory]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{DATASET_FORMAT} {DATASET_VERSION} state_dim={STATE_DIM} action_dim={ACTION_DIM} count={}",
        demos.len()
    );
    for t in demos {
        let _ = writeln!(out, "traj length={} seed={} source={}", t.len(), t.seed, t.source.tag());
        for i in 0..t.len() {
            let done = t.states[i + 1].is_done();
            let _ = writeln!(
                out,
                "step {} {} {} {}",
                textio::join_reals(&t.states[i].features()),
                textio::join_reals(&t.actions[i].to_array()),
                textio::fmt_real(t.rewards[i]),
                u8::from(done)
            );
        }
        let _ = writeln!(out, "final {}", textio::join_reals(&t.last_state().features()));
    }
    out
}

pub fn decode_dataset(text: &str) -> Result<Vec<Trajectory>> {
    let mut lines = Lines::new(text);
    let (line, tokens) = textio::read_header(&mut lines, DATASET_FORMAT, DATASET_VERSION)?;
    let kv = textio::key_values(&tokens, line)?;
    let state_dim = textio::parse_usize(textio::require(&kv, "state_dim", line)?, line, "state_dim")?;
    let action_dim = textio::parse_usize(textio::require(&kv, "action_dim", line)?, line, "action_dim")?;
    if (state_dim, action_dim) != (STATE_DIM, ACTION_DIM) {
        return Err(MaqError::Mismatch(format!(
            "dataset dims {state_dim}/{action_dim}, expected {STATE_DIM}/{ACTION_DIM}"
        )));
    }
    let count = textio::parse_usize(textio::require(&kv, "count", line)?, line, "count")?;
    let mut out = Vec::with_capacity(count);
    for ti in 0..count {
        let what = format!("trajectory {ti}");
        let (line, tokens) = lines.record("traj", &what)?;
        let kv = textio::key_values(&tokens, line)?;
        let length = textio::parse_usize(textio::require(&kv, "length", line)?, line, &what)?;
        let seed: u64 = textio::require(&kv, "seed", line)?
            .parse()
            .map_err(|_| MaqError::parse(line, format!("{what}: bad seed")))?;
        let source = Source::from_tag(textio::require(&kv, "source", line)?)
            .ok_or_else(|| MaqError::parse(line, format!("{what}: unknown source tag")))?;
        let mut states = Vec::with_capacity(length + 1);
        let mut actions = Vec::with_capacity(length);
        let mut rewards = Vec::with_capacity(length);
        for step in 0..length {
            let what = format!("trajectory {ti} step {step}");
            let (line, tokens) = lines.record("step", &what)?;
            let v = textio::parse_reals(&tokens, STATE_DIM + ACTION_DIM + 2, line, &what)?;
            states.push(EnvState::from_features(v[..STATE_DIM].try_into().unwrap(), step));
            actions.push(PrimitiveAction::from_slice(&v[STATE_DIM..STATE_DIM + ACTION_DIM]));
            rewards.push(v[STATE_DIM + ACTION_DIM]);
            let done = v[STATE_DIM + ACTION_DIM + 1];
            if done != 0.0 && done != 1.0 {
                return Err(MaqError::parse(line, format!("{what}: done flag must be 0 or 1")));
            }
        }
        let what = format!("trajectory {ti} final state");
        let (line, tokens) = lines.record("final", &what)?;
        let v = textio::parse_reals(&tokens, STATE_DIM, line, &what)?;
        let last = EnvState::from_features(v.try_into().unwrap(), length);
        states.push(last);
        out.push(Trajectory {
            success: last.is_success(),
            states,
            actions,
            rewards,
            source,
            seed,
        });
    }
    lines.finish()?;
    Ok(out)
}

pub fn save_dataset(demos: &[Trajectory], path: &Path) -> Result<()> {
    textio::write_atomic(path, encode_dataset(demos).as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    decode_dataset(&std::fs::read_to_string(path)?)
}
