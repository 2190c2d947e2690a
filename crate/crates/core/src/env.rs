//! `LatchDoor`: a small deterministic reach-grasp-pull task.
//!
//! A hand moves in the unit square, must close its grip while within reach
//! of a latch, and opens a door while grasping. The door slowly swings shut
//! whenever it is not held.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::{derive_seed, seeded_rng, MaqError, Result, Rng};

pub const HORIZON: usize = 60;
pub const MOVE_SPEED: f64 = 0.05;
pub const GRIP_SPEED: f64 = 0.1;
pub const LATCH: [f64; 2] = [0.8, 0.5];
pub const GRASP_RADIUS: f64 = 0.08;
pub const GRIP_THRESHOLD: f64 = 0.6;
pub const OPEN_RATE: f64 = 0.06;
pub const RELAX_RATE: f64 = 0.01;
pub const DOOR_GOAL: f64 = 1.0;
pub const DOOR_MAX: f64 = 1.5;
/// Hands start uniformly in `[0, START_MAX]^2`.
pub const START_MAX: f64 = 0.2;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub hand_x: f64,
    pub hand_y: f64,
    pub grip: f64,
    pub door_angle: f64,
    pub step_index: usize,
}

impl EnvState {
    pub fn features(&self) -> [f64; STATE_DIM] {
        [self.hand_x, self.hand_y, self.grip, self.door_angle]
    }

    pub fn from_features(f: [f64; STATE_DIM], step_index: usize) -> Self {
        Self {
            hand_x: f[0],
            hand_y: f[1],
            grip: f[2],
            door_angle: f[3],
            step_index,
        }
    }

    pub fn latch_distance(&self) -> f64 {
        (self.hand_x - LATCH[0]).hypot(self.hand_y - LATCH[1])
    }

    pub fn is_success(&self) -> bool {
        self.door_angle >= DOOR_GOAL
    }

    pub fn is_done(&self) -> bool {
        self.is_success() || self.step_index >= HORIZON
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrimitiveAction {
    pub ax: f64,
    pub ay: f64,
    pub ag: f64,
}

impl PrimitiveAction {
    pub const ZERO: PrimitiveAction = PrimitiveAction { ax: 0.0, ay: 0.0, ag: 0.0 };

    pub fn new(ax: f64, ay: f64, ag: f64) -> Self {
        Self { ax, ay, ag }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.ax, self.ay, self.ag]
    }

    pub fn clipped(self) -> Self {
        Self::new(
            self.ax.clamp(-1.0, 1.0),
            self.ay.clamp(-1.0, 1.0),
            self.ag.clamp(-1.0, 1.0),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Initial state with the hand drawn from `rng`.
pub fn reset_with(rng: &mut Rng) -> EnvState {
    EnvState {
        hand_x: rng.random_range(0.0..=START_MAX),
        hand_y: rng.random_range(0.0..=START_MAX),
        grip: 0.0,
        door_angle: 0.0,
        step_index: 0,
    }
}

pub fn reset(seed: u64) -> EnvState {
    reset_with(&mut seeded_rng(seed))
}

/// Advances the task by one primitive action.
///
/// The reward is the door angle after the step. On the step that opens the
/// door, the episode ends and the reward also credits the door being held at
/// that angle for the rest of the horizon, so finishing early never pays less
/// than stalling just short of the goal.
pub fn step(state: &EnvState, action: &PrimitiveAction) -> Result<StepOutcome> {
    if state.is_done() {
        return Err(MaqError::Usage(format!(
            "step called on a finished episode (step {}, door {:.3})",
            state.step_index, state.door_angle
        )));
    }
    let a = action.clipped();
    let hand_x = (state.hand_x + MOVE_SPEED * a.ax).clamp(0.0, 1.0);
    let hand_y = (state.hand_y + MOVE_SPEED * a.ay).clamp(0.0, 1.0);
    let grip = (state.grip + GRIP_SPEED * a.ag).clamp(0.0, 1.0);
    let near = (hand_x - LATCH[0]).hypot(hand_y - LATCH[1]) <= GRASP_RADIUS;
    let grasping = near && grip >= GRIP_THRESHOLD;
    let door_angle = if grasping {
        (state.door_angle + OPEN_RATE).min(DOOR_MAX)
    } else {
        (state.door_angle - RELAX_RATE).max(0.0)
    };
    let step_index = state.step_index + 1;
    let success = door_angle >= DOOR_GOAL;
    let done = success || step_index == HORIZON;
    let reward = if success {
        door_angle * (HORIZON - state.step_index) as f64
    } else {
        door_angle
    };
    Ok(StepOutcome {
        next: EnvState {
            hand_x,
            hand_y,
            grip,
            door_angle,
            step_index,
        },
        reward,
        done,
        success,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Demo,
    Agent,
    Random,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Demo => "demo",
            Source::Agent => "agent",
            Source::Random => "random",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "demo" => Some(Source::Demo),
            "agent" => Some(Source::Agent),
            "random" => Some(Source::Random),
            _ => None,
        }
    }
}

/// One episode: `states.len() == actions.len() + 1 == rewards.len() + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<PrimitiveAction>,
    pub rewards: Vec<f64>,
    pub success: bool,
    pub source: Source,
    pub seed: u64,
}

impl Trajectory {
    pub fn start(initial: EnvState, source: Source, seed: u64) -> Self {
        Self {
            states: vec![initial],
            actions: Vec::new(),
            rewards: Vec::new(),
            success: false,
            source,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn last_state(&self) -> &EnvState {
        self.states.last().expect("trajectory has an initial state")
    }

    pub fn is_finished(&self) -> bool {
        self.last_state().is_done()
    }

    /// Steps the environment from the last state and records the transition.
    pub fn advance(&mut self, action: PrimitiveAction) -> Result<StepOutcome> {
        let outcome = step(self.last_state(), &action)?;
        self.actions.push(action.clipped());
        self.rewards.push(outcome.reward);
        self.states.push(outcome.next);
        self.success = outcome.next.is_success();
        Ok(outcome)
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn state_features(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.features().to_vec()).collect()
    }

    pub fn action_features(&self) -> Vec<Vec<f64>> {
        self.actions.iter().map(|a| a.to_array().to_vec()).collect()
    }

    /// Checks the structural invariants and that the recorded rewards and
    /// states are what the dynamics produce from the initial state.
    pub fn verify_replay(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 || self.rewards.len() != self.actions.len() {
            return Err(MaqError::Usage("trajectory lengths are inconsistent".into()));
        }
        let mut state = self.states[0];
        for (t, action) in self.actions.iter().enumerate() {
            let out = step(&state, action)?;
            if out.next != self.states[t + 1] || out.reward != self.rewards[t] {
                return Err(MaqError::Usage(format!("replay diverges at step {t}")));
            }
            state = out.next;
        }
        if self.success != state.is_success() {
            return Err(MaqError::Usage("success flag disagrees with final door angle".into()));
        }
        Ok(())
    }

    /// Mean norm of consecutive action differences; a simple jerk proxy.
    pub fn mean_action_change(&self) -> f64 {
        if self.actions.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .actions
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].to_array(), w[1].to_array());
                a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
            .sum();
        total / (self.actions.len() - 1) as f64
    }
}

const DEMO_JITTER: f64 = 0.02;
const DEMO_ATTEMPTS: u64 = 10;
const REACH_STEPS_MIN: usize = 16;
const REACH_STEPS_MAX: usize = 24;
const GRIP_RAMP_STEPS: usize = 5;

fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

fn toward(from: f64, to: f64) -> f64 {
    ((to - from) / MOVE_SPEED).clamp(-1.0, 1.0)
}

fn scripted_attempt(seed: u64, attempt_seed: u64) -> Result<Trajectory> {
    let mut rng = seeded_rng(attempt_seed);
    let start = reset_with(&mut rng);
    let reach_steps = rng.random_range(REACH_STEPS_MIN..=REACH_STEPS_MAX);
    let jitter = Normal::new(0.0, DEMO_JITTER).expect("valid jitter scale");
    let mut traj = Trajectory::start(start, Source::Demo, seed);
    let mut t = 0usize;
    while !traj.is_finished() {
        let s = *traj.last_state();
        let (ax, ay, ag) = if t < reach_steps {
            // Track a minimum-jerk reference from the start to the latch.
            let progress = min_jerk((t + 1) as f64 / reach_steps as f64);
            let rx = start.hand_x + (LATCH[0] - start.hand_x) * progress;
            let ry = start.hand_y + (LATCH[1] - start.hand_y) * progress;
            (toward(s.hand_x, rx), toward(s.hand_y, ry), 0.0)
        } else {
            let k = t - reach_steps;
            let ag = if k < GRIP_RAMP_STEPS {
                min_jerk((k + 1) as f64 / GRIP_RAMP_STEPS as f64)
            } else {
                1.0
            };
            (toward(s.hand_x, LATCH[0]), toward(s.hand_y, LATCH[1]), ag)
        };
        let action = PrimitiveAction::new(
            ax + jitter.sample(&mut rng),
            ay + jitter.sample(&mut rng),
            ag + jitter.sample(&mut rng),
        );
        traj.advance(action)?;
        t += 1;
    }
    Ok(traj)
}

/// Smooth reach-grasp-pull demonstration.
///
/// A seed whose jitter spoils the attempt is retried with derived sub-seeds;
/// the returned trajectory always records the caller's seed.
pub fn scripted_demo(seed: u64) -> Result<Trajectory> {
    for attempt in 0..DEMO_ATTEMPTS {
        let attempt_seed = if attempt == 0 { seed } else { derive_seed(seed, attempt) };
        let traj = scripted_attempt(seed, attempt_seed)?;
        if traj.success {
            return Ok(traj);
        }
    }
    Err(MaqError::Generator(format!(
        "scripted demo for seed {seed} failed after {DEMO_ATTEMPTS} attempts"
    )))
}

/// Uniformly random actions until the episode ends.
pub fn random_rollout(seed: u64) -> Trajectory {
    let mut rng = seeded_rng(seed);
    let mut traj = Trajectory::start(reset_with(&mut rng), Source::Random, seed);
    while !traj.is_finished() {
        let action = PrimitiveAction::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        traj.advance(action).expect("episode not finished");
    }
    traj
}
