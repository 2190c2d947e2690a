//! Reward-driven agents over discrete macro actions, a primitive-action grid
//! baseline, behavior cloning, and greedy evaluation.
//!
//! All discrete agents share one soft actor-critic learner with twin
//! critics, exact expectations over the action set and automatic entropy
//! temperature. Bellman backups discount by `gamma^steps_elapsed`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::dataset::NormStats;
use crate::env::{random_rollout, reset, EnvState, PrimitiveAction, Source, Trajectory, ACTION_DIM, GRASP_RADIUS, LATCH, STATE_DIM};
use crate::nn::{argmax, log_softmax, sample_categorical, AdamState, DenseNet, Gradients, HiddenActivation, Matrix, OutputActivation};
use crate::smdp::{execute_segment, MacroActions, MacroTransition, ReplayBuffer};
use crate::textio::{self, Lines};
use crate::{derive_seed, seeded_rng, MaqError, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    MaqDsac,
    MaqSymmetric,
    GridDsac,
    Bc,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::MaqDsac, AgentKind::MaqSymmetric, AgentKind::GridDsac, AgentKind::Bc];

    pub fn tag(self) -> &'static str {
        match self {
            AgentKind::MaqDsac => "maq_dsac",
            AgentKind::MaqSymmetric => "maq_symmetric",
            AgentKind::GridDsac => "grid_dsac",
            AgentKind::Bc => "bc",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn uses_codebook(self) -> bool {
        matches!(self, AgentKind::MaqDsac | AgentKind::MaqSymmetric)
    }
}

pub const GRID_SIZE: usize = 27;

/// The 27 primitive actions `{-1, 0, 1}^3` in row-major order over
/// `(ax, ay, ag)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GridActions;

pub fn grid_action(index: usize) -> Result<PrimitiveAction> {
    if index >= GRID_SIZE {
        return Err(MaqError::Usage(format!("grid index {index} out of range 0..{GRID_SIZE}")));
    }
    let level = |d: usize| d as f64 - 1.0;
    Ok(PrimitiveAction::new(level(index / 9), level(index / 3 % 3), level(index % 3)))
}

impl MacroActions for GridActions {
    fn action_count(&self) -> usize {
        GRID_SIZE
    }

    fn horizon(&self) -> usize {
        1
    }

    fn expand(&self, _: &EnvState, index: usize) -> Result<Vec<PrimitiveAction>> {
        Ok(vec![grid_action(index)?])
    }
}

fn state_matrix<'a>(states: impl Iterator<Item = &'a [f64; STATE_DIM]>) -> Matrix {
    let data: Vec<f64> = states.flat_map(|s| s.iter().copied()).collect();
    let rows = data.len() / STATE_DIM;
    Matrix::from_vec(rows, STATE_DIM, data).expect("state rows")
}

/// State to `K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePolicy {
    pub network: DenseNet,
}

impl DiscretePolicy {
    pub fn new(actions: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            network: DenseNet::new(
                &[STATE_DIM, hidden, hidden, actions],
                HiddenActivation::Relu,
                OutputActivation::Identity,
                rng,
            )?,
        })
    }

    pub fn action_count(&self) -> usize {
        self.network.output_dim()
    }

    pub fn logits(&self, state: &[f64; STATE_DIM]) -> Result<Vec<f64>> {
        self.network.predict_one(state)
    }

    pub fn greedy(&self, state: &[f64; STATE_DIM]) -> Result<usize> {
        Ok(argmax(&self.logits(state)?))
    }

    pub fn sample(&self, state: &[f64; STATE_DIM], rng: &mut Rng) -> Result<usize> {
        Ok(sample_categorical(&self.logits(state)?, rng)?.0)
    }
}

/// Twin Q-networks with Polyak-averaged targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinCritic {
    pub q1: DenseNet,
    pub q2: DenseNet,
    pub q1_target: DenseNet,
    pub q2_target: DenseNet,
    pub tau: f64,
}

impl TwinCritic {
    pub fn new(actions: usize, hidden: usize, tau: f64, rng: &mut Rng) -> Result<Self> {
        let make = |rng: &mut Rng| {
            DenseNet::new(
                &[STATE_DIM, hidden, hidden, actions],
                HiddenActivation::Relu,
                OutputActivation::Identity,
                rng,
            )
        };
        let q1 = make(rng)?;
        let q2 = make(rng)?;
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            tau,
        })
    }

    pub fn soft_update(&mut self) -> Result<()> {
        self.q1_target.soft_update_from(&self.q1, self.tau)?;
        self.q2_target.soft_update_from(&self.q2, self.tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub initial_alpha: f64,
    pub tau: f64,
    pub hidden: usize,
    pub warmup: usize,
    pub total_decisions: usize,
    pub buffer_capacity: usize,
    /// Target entropy as a fraction of `ln K`.
    pub target_entropy_fraction: f64,
    /// Offline share of each batch; 0 disables symmetric sampling.
    pub symmetric_ratio: f64,
    /// Weight of the potential-based shaping term in the critic target.
    pub shaping_scale: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 64,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            initial_alpha: 0.1,
            tau: 0.005,
            hidden: 128,
            warmup: 1000,
            total_decisions: 20_000,
            buffer_capacity: 200_000,
            target_entropy_fraction: 0.5,
            symmetric_ratio: 0.0,
            shaping_scale: 1.0,
            eval_interval: 500,
            eval_episodes: 20,
            seed: 1,
        }
    }
}

impl SacConfig {
    /// Desk-scale grid baseline: one primitive action per decision.
    pub fn grid() -> Self {
        Self {
            total_decisions: 100_000,
            eval_interval: 2_500,
            ..Self::default()
        }
    }

    pub fn symmetric() -> Self {
        Self {
            symmetric_ratio: 0.5,
            ..Self::default()
        }
    }

    /// Published large-scale settings.
    pub fn paper() -> Self {
        Self {
            batch_size: 256,
            warmup: 8_000,
            total_decisions: 1_000_000,
            buffer_capacity: 1_000_000,
            eval_interval: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MaqError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.hidden == 0 || self.buffer_capacity == 0 {
            return bad("batch size, hidden width and buffer capacity must be positive");
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("evaluation interval and episode count must be positive");
        }
        if !(0.0..=1.0).contains(&self.symmetric_ratio) {
            return bad("symmetric ratio must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        for (name, lr) in [("actor", self.actor_lr), ("critic", self.critic_lr), ("temperature", self.alpha_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(MaqError::Config(format!("{name} learning rate must be positive")));
            }
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha.is_finite()) {
            return bad("initial temperature must be positive");
        }
        if !self.shaping_scale.is_finite() || !self.target_entropy_fraction.is_finite() {
            return bad("shaping scale and entropy fraction must be finite");
        }
        Ok(())
    }

    pub fn target_entropy(&self, actions: usize) -> f64 {
        self.target_entropy_fraction * (actions as f64).ln()
    }
}

/// Shaping potential: minus the distance to the latch, minus half the
/// missing grip once the hand is inside the grasp radius.
pub fn potential(state: &[f64; STATE_DIM]) -> f64 {
    let dist = (state[0] - LATCH[0]).hypot(state[1] - LATCH[1]);
    let grip_gap = if dist <= GRASP_RADIUS { 1.0 - state[2] } else { 1.0 };
    -(dist + 0.5 * grip_gap)
}

/// Learnable log-temperature.
#[derive(Clone, Debug)]
pub struct Temperature {
    pub log_alpha: f64,
    pub target_entropy: f64,
    optimizer: AdamState,
}

impl Temperature {
    pub fn new(initial_alpha: f64, target_entropy: f64, learning_rate: f64) -> Self {
        Self {
            log_alpha: initial_alpha.ln(),
            target_entropy,
            optimizer: AdamState::new(1, learning_rate),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }
}

/// Shannon entropy of the softmax of `logits`.
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().map(|lp| -lp.exp() * lp).sum()
}

/// Soft Bellman targets for a batch.
pub fn critic_targets(
    batch: &[MacroTransition],
    policy: &DiscretePolicy,
    critics: &TwinCritic,
    alpha: f64,
    gamma: f64,
    shaping_scale: f64,
) -> Result<Vec<f64>> {
    let next = state_matrix(batch.iter().map(|t| &t.next_state));
    let logits = policy.network.predict(&next)?;
    let q1 = critics.q1_target.predict(&next)?;
    let q2 = critics.q2_target.predict(&next)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(b, t)| {
            let continue_factor = if t.done { 0.0 } else { gamma.powi(t.steps_elapsed as i32) };
            let mut y = t.macro_reward;
            if shaping_scale != 0.0 {
                let next_phi = if t.done { 0.0 } else { potential(&t.next_state) };
                y += shaping_scale * (gamma.powi(t.steps_elapsed as i32) * next_phi - potential(&t.state));
            }
            if continue_factor != 0.0 {
                let lp = log_softmax(logits.row(b));
                let soft_value: f64 = lp
                    .iter()
                    .enumerate()
                    .map(|(k, l)| l.exp() * (q1.get(b, k).min(q2.get(b, k)) - alpha * l))
                    .sum();
                y += continue_factor * soft_value;
            }
            y
        })
        .collect())
}

/// Mean squared error of `Q(s, a)` against `targets`, with parameter gradients.
/// Also returns the full `Q(s, .)` rows.
pub fn critic_loss_and_grads(
    critic: &DenseNet,
    states: &Matrix,
    actions: &[usize],
    targets: &[f64],
) -> Result<(f64, Gradients, Matrix)> {
    let (q, cache) = critic.forward(states)?;
    let b = states.rows();
    let mut grad = Matrix::zeros(b, q.cols());
    let mut loss = 0.0;
    for r in 0..b {
        let diff = q.get(r, actions[r]) - targets[r];
        loss += diff * diff;
        grad.set(r, actions[r], 2.0 * diff / b as f64);
    }
    let (grads, _) = critic.backward(&cache, &grad)?;
    Ok((loss / b as f64, grads, q))
}

/// Mean over states of `sum_k pi(k|s) (alpha log pi(k|s) - q_min(s, k))`.
/// Returns the loss, gradients, and the mean policy entropy.
pub fn actor_loss_and_grads(actor: &DenseNet, states: &Matrix, q_min: &Matrix, alpha: f64) -> Result<(f64, Gradients, f64)> {
    let (logits, cache) = actor.forward(states)?;
    let b = states.rows();
    let k = logits.cols();
    let mut grad = Matrix::zeros(b, k);
    let (mut loss, mut ent) = (0.0, 0.0);
    for r in 0..b {
        let lp = log_softmax(logits.row(r));
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let f: Vec<f64> = (0..k).map(|j| alpha * lp[j] - q_min.get(r, j)).collect();
        let mean_f: f64 = p.iter().zip(&f).map(|(p, f)| p * f).sum();
        loss += mean_f;
        ent -= p.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
        for j in 0..k {
            grad.set(r, j, p[j] * (f[j] - mean_f) / b as f64);
        }
    }
    let (grads, _) = actor.backward(&cache, &grad)?;
    Ok((loss / b as f64, grads, ent / b as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct UpdateSummary {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    pub alpha: f64,
}

/// Optimizer state for one learner.
#[derive(Clone, Debug)]
pub struct SacLearner {
    pub policy: DiscretePolicy,
    pub critics: TwinCritic,
    pub temperature: Temperature,
    actor_opt: AdamState,
    q1_opt: AdamState,
    q2_opt: AdamState,
}

impl SacLearner {
    pub fn new(actions: usize, config: &SacConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let policy = DiscretePolicy::new(actions, config.hidden, rng)?;
        let critics = TwinCritic::new(actions, config.hidden, config.tau, rng)?;
        Ok(Self {
            actor_opt: AdamState::for_net(&policy.network, config.actor_lr),
            q1_opt: AdamState::for_net(&critics.q1, config.critic_lr),
            q2_opt: AdamState::for_net(&critics.q2, config.critic_lr),
            temperature: Temperature::new(config.initial_alpha, config.target_entropy(actions), config.alpha_lr),
            policy,
            critics,
        })
    }

    /// One gradient step on critics, actor, and temperature, then a Polyak
    /// update of the target critics.
    pub fn update(&mut self, batch: &[MacroTransition], config: &SacConfig) -> Result<UpdateSummary> {
        if batch.is_empty() {
            return Err(MaqError::Usage("update needs a non-empty batch".into()));
        }
        let k = self.policy.action_count();
        if let Some(t) = batch.iter().find(|t| t.code_index >= k) {
            return Err(MaqError::Usage(format!("transition action {} out of range 0..{k}", t.code_index)));
        }
        let alpha = self.temperature.alpha();
        let targets = critic_targets(batch, &self.policy, &self.critics, alpha, config.gamma, config.shaping_scale)?;
        let states = state_matrix(batch.iter().map(|t| &t.state));
        let actions: Vec<usize> = batch.iter().map(|t| t.code_index).collect();
        let (l1, g1, q1) = critic_loss_and_grads(&self.critics.q1, &states, &actions, &targets)?;
        let (l2, g2, q2) = critic_loss_and_grads(&self.critics.q2, &states, &actions, &targets)?;
        let q_min = Matrix::from_fn(q1.rows(), q1.cols(), |r, c| q1.get(r, c).min(q2.get(r, c)));
        let (actor_loss, ga, mean_entropy) = actor_loss_and_grads(&self.policy.network, &states, &q_min, alpha)?;

        let critic_loss = 0.5 * (l1 + l2);
        if !critic_loss.is_finite() || !actor_loss.is_finite() || !g1.is_finite() || !g2.is_finite() || !ga.is_finite() {
            let max_target = targets.iter().fold(0.0f64, |m, y| m.max(y.abs()));
            return Err(MaqError::Training(format!(
                "non-finite update: critic loss {critic_loss}, actor loss {actor_loss}, alpha {alpha}, \
                 batch of {} with max |target| {max_target}",
                batch.len()
            )));
        }
        self.critics.q1.adam_step(&g1, &mut self.q1_opt)?;
        self.critics.q2.adam_step(&g2, &mut self.q2_opt)?;
        self.policy.network.adam_step(&ga, &mut self.actor_opt)?;
        let alpha_grad = mean_entropy - self.temperature.target_entropy;
        let mut log_alpha = [self.temperature.log_alpha];
        crate::nn::adam_step(&mut log_alpha, &[alpha_grad], &mut self.temperature.optimizer)?;
        self.temperature.log_alpha = log_alpha[0];
        self.critics.soft_update()?;
        Ok(UpdateSummary {
            critic_loss,
            actor_loss,
            entropy: mean_entropy,
            alpha,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub macro_decisions: usize,
    pub env_steps: usize,
    pub eval_success: f64,
    pub mean_return: f64,
    pub alpha: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

pub const CURVE_CSV_HEADER: &str = "macro_decisions,env_steps,eval_success,mean_return,alpha,actor_loss,critic_loss";

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = format!("{CURVE_CSV_HEADER}\n");
    for p in curve {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.macro_decisions, p.env_steps, p.eval_success, p.mean_return, p.alpha, p.actor_loss, p.critic_loss
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Policy at the best periodic evaluation (success rate, then mean return).
    pub policy: DiscretePolicy,
    pub final_policy: DiscretePolicy,
    pub curve: Vec<CurvePoint>,
    pub best_decisions: usize,
}

/// Generic discrete soft actor-critic loop over `actions`.
pub fn train_dsac<M: MacroActions + ?Sized>(
    actions: &M,
    offline: &[MacroTransition],
    config: &SacConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.symmetric_ratio > 0.0 && offline.is_empty() {
        return Err(MaqError::Usage("symmetric sampling needs offline transitions".into()));
    }
    let k = actions.action_count();
    let mut init_rng = seeded_rng(config.seed);
    let mut learner = SacLearner::new(k, config, &mut init_rng)?;
    let mut act_rng = seeded_rng(derive_seed(config.seed, 1));
    let mut reset_rng = seeded_rng(derive_seed(config.seed, 2));
    let eval_seed = derive_seed(config.seed, 3);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, derive_seed(config.seed, 4))?;

    let new_episode = |rng: &mut Rng| Trajectory::start(crate::env::reset_with(rng), Source::Agent, 0);
    let mut episode = new_episode(&mut reset_rng);
    let mut env_steps = 0;
    let mut curve = Vec::new();
    let mut best: Option<(f64, f64, usize, DiscretePolicy)> = None;
    let mut window = (0.0, 0.0, 0usize);
    let mut last_alpha = learner.temperature.alpha();

    for decision in 1..=config.total_decisions {
        let state = episode.last_state().features();
        let index = if decision <= config.warmup {
            rand::Rng::random_range(&mut act_rng, 0..k)
        } else {
            learner.policy.sample(&state, &mut act_rng)?
        };
        let segment = actions.expand(episode.last_state(), index)?;
        let transition = execute_segment(&mut episode, index, &segment, config.gamma)?;
        env_steps += transition.steps_elapsed;
        buffer.push(transition);
        if transition.done {
            episode = new_episode(&mut reset_rng);
        }

        if decision > config.warmup {
            let batch = if config.symmetric_ratio > 0.0 {
                buffer.symmetric_sample(offline, config.batch_size, config.symmetric_ratio)?
            } else {
                buffer.sample(config.batch_size)?
            };
            let summary = learner.update(&batch, config)?;
            window.0 += summary.actor_loss;
            window.1 += summary.critic_loss;
            window.2 += 1;
            last_alpha = summary.alpha;
        }

        if decision % config.eval_interval == 0 {
            let report = evaluate_discrete(&learner.policy, actions, config.eval_episodes, eval_seed, false)?;
            let n = window.2.max(1) as f64;
            curve.push(CurvePoint {
                macro_decisions: decision,
                env_steps,
                eval_success: report.success_rate,
                mean_return: report.mean_return,
                alpha: last_alpha,
                actor_loss: window.0 / n,
                critic_loss: window.1 / n,
            });
            window = (0.0, 0.0, 0);
            let better = match &best {
                None => true,
                Some((s, r, _, _)) => report.success_rate > *s || (report.success_rate == *s && report.mean_return > *r),
            };
            if better {
                best = Some((report.success_rate, report.mean_return, decision, learner.policy.clone()));
            }
        }
    }
    let final_policy = learner.policy.clone();
    let (policy, best_decisions) = match best {
        Some((_, _, d, p)) => (p, d),
        None => (final_policy.clone(), config.total_decisions),
    };
    Ok(TrainOutcome {
        policy,
        final_policy,
        curve,
        best_decisions,
    })
}

/// Soft actor-critic over the codes of a trained codebook model.
pub fn train_maq_agent(
    model: &crate::vqvae::CodebookModel,
    offline: &[MacroTransition],
    config: &SacConfig,
) -> Result<TrainOutcome> {
    train_dsac(model, offline, config)
}

/// The same learner over the 27 primitive grid actions, without demonstrations.
pub fn train_grid_baseline(config: &SacConfig) -> Result<TrainOutcome> {
    train_dsac(&GridActions, &[], config)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BcConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 200,
            seed: 1,
        }
    }
}

/// Normalized state to a primitive action in `[-1, 1]^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct BcPolicy {
    pub network: DenseNet,
    pub norm: NormStats,
}

impl BcPolicy {
    pub fn act(&self, state: &[f64; STATE_DIM]) -> Result<PrimitiveAction> {
        Ok(PrimitiveAction::from_slice(&self.network.predict_one(&self.norm.normalize_state(state))?))
    }
}

/// Regresses demonstrated actions on states. Returns per-epoch mean losses.
pub fn train_bc(train: &[Trajectory], config: &BcConfig) -> Result<(BcPolicy, Vec<f64>)> {
    if train.iter().all(Trajectory::is_empty) {
        return Err(MaqError::Usage("behavior cloning needs a non-empty training split".into()));
    }
    if config.batch_size == 0 || config.hidden == 0 || config.epochs == 0 {
        return Err(MaqError::Config("BC batch size, width and epochs must be positive".into()));
    }
    let norm = NormStats::compute(train)?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in train {
        for (s, a) in t.states.iter().zip(&t.actions) {
            inputs.push(norm.normalize_state(&s.features()));
            targets.push(a.to_array());
        }
    }
    let mut rng = seeded_rng(config.seed);
    let mut network = DenseNet::new(
        &[STATE_DIM, config.hidden, config.hidden, ACTION_DIM],
        HiddenActivation::Relu,
        OutputActivation::Tanh,
        &mut rng,
    )?;
    let mut opt = AdamState::for_net(&network, config.learning_rate);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = Matrix::from_rows(&chunk.iter().map(|&i| &inputs[i][..]).collect::<Vec<_>>())?;
            let (y, cache) = network.forward(&x)?;
            let b = chunk.len();
            let mut grad = Matrix::zeros(b, ACTION_DIM);
            for (r, &i) in chunk.iter().enumerate() {
                for c in 0..ACTION_DIM {
                    let diff = y.get(r, c) - targets[i][c];
                    total += diff * diff;
                    grad.set(r, c, 2.0 * diff / (b * ACTION_DIM) as f64);
                }
            }
            let (grads, _) = network.backward(&cache, &grad)?;
            network.adam_step(&grads, &mut opt)?;
        }
        let loss = total / (inputs.len() * ACTION_DIM) as f64;
        if !loss.is_finite() {
            return Err(MaqError::Training(format!("non-finite BC loss at epoch {}", epoch + 1)));
        }
        losses.push(loss);
    }
    Ok((BcPolicy { network, norm }, losses))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub success_rate: f64,
    pub mean_return: f64,
    pub trajectories: Vec<Trajectory>,
    pub episodes: usize,
    pub seed: u64,
}

impl EvalReport {
    fn from_trajectories(trajectories: Vec<Trajectory>, seed: u64) -> Self {
        let n = trajectories.len() as f64;
        Self {
            success_rate: trajectories.iter().filter(|t| t.success).count() as f64 / n,
            mean_return: trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / n,
            episodes: trajectories.len(),
            trajectories,
            seed,
        }
    }
}

/// Seed of the initial state of evaluation episode `episode`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, episode as u64)
}

fn check_episodes(episodes: usize) -> Result<()> {
    if episodes == 0 {
        return Err(MaqError::Usage("evaluation needs at least one episode".into()));
    }
    Ok(())
}

fn evaluate_discrete<M: MacroActions + ?Sized>(
    policy: &DiscretePolicy,
    actions: &M,
    episodes: usize,
    seed: u64,
    keep: bool,
) -> Result<EvalReport> {
    check_episodes(episodes)?;
    if policy.action_count() != actions.action_count() {
        return Err(MaqError::Mismatch(format!(
            "policy has {} outputs but the action set has {}",
            policy.action_count(),
            actions.action_count()
        )));
    }
    let mut trajectories = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut traj = Trajectory::start(reset(episode_seed(seed, e)), Source::Agent, episode_seed(seed, e));
        while !traj.is_finished() {
            let index = policy.greedy(&traj.last_state().features())?;
            let segment = actions.expand(traj.last_state(), index)?;
            execute_segment(&mut traj, index, &segment, 1.0)?;
        }
        trajectories.push(if keep { traj } else { strip(traj) });
    }
    Ok(EvalReport::from_trajectories(trajectories, seed))
}

// keeps the fields the summary statistics need
fn strip(mut t: Trajectory) -> Trajectory {
    t.states.truncate(1);
    t.actions.clear();
    t
}

/// What to roll out in [`evaluate`].
pub enum Controller<'a> {
    Discrete {
        policy: &'a DiscretePolicy,
        actions: &'a dyn MacroActions,
    },
    Bc(&'a BcPolicy),
    Random,
}

/// Greedy rollouts from seeded initial states.
pub fn evaluate(controller: &Controller<'_>, episodes: usize, seed: u64) -> Result<EvalReport> {
    check_episodes(episodes)?;
    match controller {
        Controller::Discrete { policy, actions } => evaluate_discrete(*policy, *actions, episodes, seed, true),
        Controller::Bc(bc) => {
            let mut trajectories = Vec::with_capacity(episodes);
            for e in 0..episodes {
                let mut traj = Trajectory::start(reset(episode_seed(seed, e)), Source::Agent, episode_seed(seed, e));
                while !traj.is_finished() {
                    let a = bc.act(&traj.last_state().features())?;
                    traj.advance(a)?;
                }
                trajectories.push(traj);
            }
            Ok(EvalReport::from_trajectories(trajectories, seed))
        }
        Controller::Random => Ok(EvalReport::from_trajectories(
            (0..episodes).map(|e| random_rollout(episode_seed(seed, e))).collect(),
            seed,
        )),
    }
}

pub const POLICY_FORMAT: &str = "MAQPOL";
pub const POLICY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyNet {
    Discrete(DiscretePolicy),
    Bc(BcPolicy),
}

/// A trained policy with what is needed to run it again.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub kind: AgentKind,
    pub horizon: usize,
    pub seed: u64,
    /// Digest of the codebook checkpoint the policy acts through.
    pub codebook_digest: Option<String>,
    pub policy: PolicyNet,
}

pub fn encode_policy(ckpt: &PolicyCheckpoint) -> String {
    let mut out = format!("{POLICY_FORMAT} {POLICY_VERSION}\n");
    let _ = writeln!(
        out,
        "meta kind={} horizon={} seed={} codebook={}",
        ckpt.kind.tag(),
        ckpt.horizon,
        ckpt.seed,
        ckpt.codebook_digest.as_deref().unwrap_or("none")
    );
    match &ckpt.policy {
        PolicyNet::Discrete(p) => textio::write_net(&mut out, "policy", &p.network),
        PolicyNet::Bc(p) => {
            p.norm.write_records(&mut out);
            textio::write_net(&mut out, "policy", &p.network);
        }
    }
    out
}

pub fn decode_policy(text: &str) -> Result<PolicyCheckpoint> {
    let mut lines = Lines::new(text);
    textio::read_header(&mut lines, POLICY_FORMAT, POLICY_VERSION)?;
    let (line, tokens) = lines.record("meta", "metadata")?;
    let kv = textio::key_values(&tokens, line)?;
    let kind_tag = textio::require(&kv, "kind", line)?;
    let kind = AgentKind::from_tag(kind_tag).ok_or_else(|| MaqError::parse(line, format!("unknown agent kind '{kind_tag}'")))?;
    let horizon = textio::parse_usize(textio::require(&kv, "horizon", line)?, line, "horizon")?;
    let seed: u64 = textio::require(&kv, "seed", line)?
        .parse()
        .map_err(|_| MaqError::parse(line, "bad seed"))?;
    let codebook_digest = match textio::require(&kv, "codebook", line)? {
        "none" => None,
        d => Some(d.to_string()),
    };
    let policy = if kind == AgentKind::Bc {
        let norm = NormStats::read_records(&mut lines)?;
        PolicyNet::Bc(BcPolicy {
            network: textio::read_net(&mut lines, "policy")?,
            norm,
        })
    } else {
        PolicyNet::Discrete(DiscretePolicy {
            network: textio::read_net(&mut lines, "policy")?,
        })
    };
    lines.finish()?;
    Ok(PolicyCheckpoint {
        kind,
        horizon,
        seed,
        codebook_digest,
        policy,
    })
}

pub fn save_policy(ckpt: &PolicyCheckpoint, path: &Path) -> Result<()> {
    textio::write_atomic(path, encode_policy(ckpt).as_bytes())
}

pub fn load_policy(path: &Path) -> Result<PolicyCheckpoint> {
    decode_policy(&std::fs::read_to_string(path)?)
}
