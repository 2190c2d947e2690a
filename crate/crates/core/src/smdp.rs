//! Macro-level decision process: execute a whole decoded segment per
//! decision, convert demonstrations into macro transitions, and store
//! transitions for replay.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::dataset::extract_macros;
use crate::env::{EnvState, PrimitiveAction, Source, Trajectory, ACTION_DIM, STATE_DIM};
use crate::vqvae::CodebookModel;
use crate::{seeded_rng, MaqError, Result, Rng};

/// A discrete action set whose members expand to primitive action segments.
pub trait MacroActions {
    fn action_count(&self) -> usize;
    fn horizon(&self) -> usize;
    /// The primitive segment for action `index` taken in `state`.
    fn expand(&self, state: &EnvState, index: usize) -> Result<Vec<PrimitiveAction>>;
}

impl MacroActions for CodebookModel {
    fn action_count(&self) -> usize {
        self.codes()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn expand(&self, state: &EnvState, index: usize) -> Result<Vec<PrimitiveAction>> {
        let flat = self.decode_index(&state.features(), index)?;
        Ok(flat.chunks(ACTION_DIM).map(PrimitiveAction::from_slice).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Online,
    Offline,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroTransition {
    pub state: [f64; STATE_DIM],
    pub code_index: usize,
    /// `sum_i gamma^i r_i` over the executed steps.
    pub macro_reward: f64,
    pub next_state: [f64; STATE_DIM],
    pub done: bool,
    pub steps_elapsed: usize,
    pub origin: Origin,
}

/// Executes `segment` from the end of `trajectory`, stopping early when the
/// episode ends, and returns the resulting transition.
pub fn execute_segment(
    trajectory: &mut Trajectory,
    code_index: usize,
    segment: &[PrimitiveAction],
    gamma: f64,
) -> Result<MacroTransition> {
    if segment.is_empty() {
        return Err(MaqError::Usage("macro segment is empty".into()));
    }
    let state = trajectory.last_state().features();
    let mut macro_reward = 0.0;
    let mut discount = 1.0;
    let mut steps_elapsed = 0;
    let mut done = false;
    for action in segment {
        let outcome = trajectory.advance(*action)?;
        macro_reward += discount * outcome.reward;
        discount *= gamma;
        steps_elapsed += 1;
        if outcome.done {
            done = true;
            break;
        }
    }
    Ok(MacroTransition {
        state,
        code_index,
        macro_reward,
        next_state: trajectory.last_state().features(),
        done,
        steps_elapsed,
        origin: Origin::Online,
    })
}

/// One macro decision from `state`. The fragment holds the executed
/// primitive steps, starting at `state`.
pub fn macro_step<M: MacroActions + ?Sized>(
    state: &EnvState,
    code_index: usize,
    actions: &M,
    gamma: f64,
) -> Result<(MacroTransition, Trajectory)> {
    if state.is_done() {
        return Err(MaqError::Usage("macro_step called on a finished episode".into()));
    }
    if code_index >= actions.action_count() {
        return Err(MaqError::Usage(format!(
            "action index {code_index} out of range 0..{}",
            actions.action_count()
        )));
    }
    let segment = actions.expand(state, code_index)?;
    let mut fragment = Trajectory::start(*state, Source::Agent, 0);
    let transition = execute_segment(&mut fragment, code_index, &segment, gamma)?;
    Ok((transition, fragment))
}

/// Non-overlapping windows of `demo`, each labelled with the code its
/// encoder output quantizes to.
pub fn demo_to_macro_transitions(demo: &Trajectory, model: &CodebookModel, gamma: f64) -> Result<Vec<MacroTransition>> {
    let h = model.horizon;
    if demo.len() < h {
        return Err(MaqError::Usage(format!(
            "demonstration of {} steps is shorter than H = {h}",
            demo.len()
        )));
    }
    let windows = extract_macros(demo, h);
    let mut out = Vec::with_capacity(demo.len() / h);
    for t in (0..=demo.len() - h).step_by(h) {
        let sample = &windows[t];
        let (code_index, _) = model.quantize(&model.encode(&sample.state, &sample.macro_actions)?)?;
        let mut macro_reward = 0.0;
        let mut discount = 1.0;
        for r in &demo.rewards[t..t + h] {
            macro_reward += discount * r;
            discount *= gamma;
        }
        let next = &demo.states[t + h];
        out.push(MacroTransition {
            state: sample.state,
            code_index,
            macro_reward,
            next_state: next.features(),
            done: next.is_done(),
            steps_elapsed: h,
            origin: Origin::Offline,
        });
    }
    Ok(out)
}

/// Bounded ring of transitions with its own sampling stream.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<MacroTransition>,
    capacity: usize,
    inserted: u64,
    seed: u64,
    rng: Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(MaqError::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            inserted: 0,
            seed,
            rng: seeded_rng(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn items(&self) -> &[MacroTransition] {
        &self.items
    }

    pub fn push(&mut self, transition: MacroTransition) {
        if self.items.len() < self.capacity {
            self.items.push(transition);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.items[slot] = transition;
        }
        self.inserted += 1;
    }

    /// `n` draws, uniform with replacement.
    pub fn sample(&mut self, n: usize) -> Result<Vec<MacroTransition>> {
        if self.items.is_empty() {
            return Err(MaqError::Usage("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| self.items[self.rng.random_range(0..self.items.len())]).collect())
    }

    /// `round(ratio * n)` draws from `offline`, the rest from the buffer,
    /// shuffled together.
    pub fn symmetric_sample(&mut self, offline: &[MacroTransition], n: usize, ratio: f64) -> Result<Vec<MacroTransition>> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(MaqError::Usage(format!("offline ratio {ratio} outside [0, 1]")));
        }
        let n_offline = (ratio * n as f64).round() as usize;
        if n_offline > 0 && offline.is_empty() {
            return Err(MaqError::Usage("offline ratio is positive but there are no offline transitions".into()));
        }
        let mut batch = if n_offline < n { self.sample(n - n_offline)? } else { Vec::with_capacity(n) };
        batch.extend((0..n_offline).map(|_| offline[self.rng.random_range(0..offline.len())]));
        batch.shuffle(&mut self.rng);
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, scripted_demo, step};

    /// Fixed segments regardless of state.
    struct Table(Vec<Vec<PrimitiveAction>>);

    impl MacroActions for Table {
        fn action_count(&self) -> usize {
            self.0.len()
        }
        fn horizon(&self) -> usize {
            self.0[0].len()
        }
        fn expand(&self, _: &EnvState, index: usize) -> Result<Vec<PrimitiveAction>> {
            Ok(self.0[index].clone())
        }
    }

    fn transition(code_index: usize) -> MacroTransition {
        MacroTransition {
            state: [0.0; 4],
            code_index,
            macro_reward: 0.0,
            next_state: [0.0; 4],
            done: false,
            steps_elapsed: 1,
            origin: Origin::Online,
        }
    }

    #[test]
    fn discounted_macro_reward() {
        // grasping at the latch with the door part-way keeps reward near 1
        let mut start = reset(1);
        start.hand_x = 0.8;
        start.hand_y = 0.5;
        start.grip = 1.0;
        start.door_angle = 0.3;
        let hold = PrimitiveAction::new(0.0, 0.0, 1.0);
        let table = Table(vec![vec![hold; 3]]);
        let (t, frag) = macro_step(&start, 0, &table, 0.99).unwrap();
        let expected: f64 = frag.rewards.iter().enumerate().map(|(i, r)| 0.99f64.powi(i as i32) * r).sum();
        assert_eq!(t.macro_reward, expected);
        assert_eq!(t.steps_elapsed, 3);
        // the arithmetic of the discount itself
        let mut acc = 0.0f64;
        let mut d = 1.0;
        for r in [1.0, 1.0, 1.0] {
            acc += d * r;
            d *= 0.99;
        }
        assert!((acc - 2.9701).abs() < 1e-12);
    }

    #[test]
    fn single_step_macro_reward_ignores_gamma() {
        let s = reset(4);
        let a = PrimitiveAction::new(1.0, 1.0, 1.0);
        let table = Table(vec![vec![a]]);
        let direct = step(&s, &a).unwrap().reward;
        for gamma in [0.0, 0.5, 0.99] {
            assert_eq!(macro_step(&s, 0, &table, gamma).unwrap().0.macro_reward, direct);
        }
    }

    #[test]
    fn early_termination_truncates() {
        let mut s = reset(2);
        s.step_index = 58;
        let table = Table(vec![vec![PrimitiveAction::ZERO; 8]]);
        let (t, frag) = macro_step(&s, 0, &table, 0.99).unwrap();
        assert_eq!((t.steps_elapsed, t.done), (2, true));
        assert_eq!(frag.len(), 2);
        assert!(macro_step(&frag.last_state().clone(), 0, &table, 0.99).is_err());
        assert!(macro_step(&reset(2), 1, &table, 0.99).is_err());
    }

    #[test]
    fn stride_windows_from_demos() {
        let demos: Vec<Trajectory> = (1..=3).map(|s| scripted_demo(s).unwrap()).collect();
        let cfg = crate::vqvae::VqConfig {
            horizon: 4,
            codes: 4,
            latent_dim: 3,
            hidden: 8,
            epochs: 1,
            ..Default::default()
        };
        let (model, _) = crate::vqvae::train_vqvae(&demos, &cfg).unwrap();
        let out = demo_to_macro_transitions(&demos[0], &model, 0.99).unwrap();
        assert_eq!(out.len(), demos[0].len() / 4);
        assert!(out.iter().all(|t| t.code_index < 4 && t.origin == Origin::Offline && t.steps_elapsed == 4));
        assert_eq!(out[1].state, demos[0].states[4].features());
        assert_eq!(out[1].next_state, demos[0].states[8].features());
        let r = &demos[0].rewards;
        let expect = r[4] + 0.99 * r[5] + 0.99 * 0.99 * r[6] + 0.99 * 0.99 * 0.99 * r[7];
        assert!((out[1].macro_reward - expect).abs() < 1e-12);
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::new(3, 0).unwrap();
        for i in 0..4 {
            b.push(transition(i));
        }
        let mut codes: Vec<usize> = b.items().iter().map(|t| t.code_index).collect();
        codes.sort();
        assert_eq!(codes, vec![1, 2, 3]);
        assert_eq!(b.len(), 3);
        assert_eq!(b.inserted(), 4);
        assert_eq!(b.sample(10).unwrap().len(), 10);
        assert!(ReplayBuffer::new(3, 0).unwrap().sample(1).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let fill = |seed| {
            let mut b = ReplayBuffer::new(50, seed).unwrap();
            (0..20).for_each(|i| b.push(transition(i)));
            b
        };
        let (mut a, mut b) = (fill(9), fill(9));
        assert_eq!(a.sample(32).unwrap(), b.sample(32).unwrap());
    }

    #[test]
    fn symmetric_split() {
        let mut b = ReplayBuffer::new(10, 3).unwrap();
        (0..5).for_each(|i| b.push(transition(i)));
        let offline: Vec<MacroTransition> = (100..105)
            .map(|i| MacroTransition {
                origin: Origin::Offline,
                ..transition(i)
            })
            .collect();
        let batch = b.symmetric_sample(&offline, 128, 0.5).unwrap();
        assert_eq!(batch.len(), 128);
        assert_eq!(batch.iter().filter(|t| t.origin == Origin::Offline).count(), 64);
        assert!(b.symmetric_sample(&offline, 16, 0.0).unwrap().iter().all(|t| t.origin == Origin::Online));
        assert!(b.symmetric_sample(&offline, 16, 1.0).unwrap().iter().all(|t| t.origin == Origin::Offline));
        assert!(b.symmetric_sample(&[], 16, 0.5).is_err());
        assert!(b.symmetric_sample(&offline, 16, 1.5).is_err());
        let mut empty = ReplayBuffer::new(4, 0).unwrap();
        assert!(empty.symmetric_sample(&offline, 16, 0.5).is_err());
        assert_eq!(empty.symmetric_sample(&offline, 16, 1.0).unwrap().len(), 16);
    }
}
