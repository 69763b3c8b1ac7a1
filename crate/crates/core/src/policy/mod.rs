//! Learned model selection: a Double DQN over logged traces.
//!
//! Every trace frame logs the IoU of every tier, so the reward of any action
//! is known offline. One episode is one sequence. At frame `t` the state is
//! observed through the active tier (the one chosen at `t - 1`, `nano` at the
//! start), the chosen action `a_t` serves frame `t` and becomes the active
//! tier for `t + 1`.

pub mod net;

use std::path::Path;

use log::info;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ActionSet, SimulationResult, Trace, TraceFrame};

pub use net::{Adam, Dense, Gradients, LayerWeights, Mlp};

pub const STATE_DIM: usize = 9;

pub type PolicyState = [f64; STATE_DIM];

/// What the controller sees at one frame through one tier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub y_hat: f64,
    pub sigma_alea: f64,
    pub sigma_epis: f64,
    pub bbox: [f64; 4],
    pub frame_size: [f64; 2],
    pub model_index: usize,
    pub n_models: usize,
}

impl TraceStep {
    pub fn observe(frame: &TraceFrame, actions: &ActionSet, model_index: usize) -> Result<Self> {
        let label = &actions.labels[model_index];
        let out = frame.per_model.get(label).ok_or_else(|| {
            Error::Trace(format!(
                "frame {}:{} has no output for model `{label}`",
                frame.sequence, frame.frame
            ))
        })?;
        Ok(TraceStep {
            y_hat: out.y_hat,
            sigma_alea: frame.sigma_alea,
            sigma_epis: frame.sigma_epis,
            bbox: frame.bbox,
            frame_size: frame.frame_size,
            model_index,
            n_models: actions.len(),
        })
    }
}

/// `[y_hat, s_a, s_e, d_y_hat, d_s_a, d_s_e, box_size, edge_dist, model_id]`
pub fn build_state(step: &TraceStep, prev: Option<&TraceStep>) -> Result<PolicyState> {
    let [fw, fh] = step.frame_size;
    if !(fw > 0.0 && fh > 0.0) {
        return Err(Error::Policy("state needs a positive frame size".into()));
    }
    let [x, y, w, h] = step.bbox;
    let box_size = (w * h / (fw * fh)).clamp(0.0, 1.0);
    let edge = x.min(y).min(fw - x - w).min(fh - y - h);
    let edge_dist = (edge / (fw.min(fh) / 2.0)).clamp(0.0, 1.0);
    let (dy, da, de) = match prev {
        Some(p) => (
            step.y_hat - p.y_hat,
            step.sigma_alea - p.sigma_alea,
            step.sigma_epis - p.sigma_epis,
        ),
        None => (0.0, 0.0, 0.0),
    };
    let model_id = if step.n_models > 1 {
        step.model_index as f64 / (step.n_models - 1) as f64
    } else {
        0.0
    };
    let s = [
        step.y_hat,
        step.sigma_alea,
        step.sigma_epis,
        dy,
        da,
        de,
        box_size,
        edge_dist,
        model_id,
    ];
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Policy("state has a non-finite entry".into()));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda_epis: f64,
    pub lambda_alea: f64,
    pub tau_epis: f64,
    pub tau_alea: f64,
    pub cost_scale: f64,
    /// Pay the epistemic bonus only for the two largest tiers.
    pub gated_bonus: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_epis: 0.2,
            lambda_alea: 0.2,
            tau_epis: crate::controller::DEFAULT_TAU_EPIS,
            tau_alea: crate::controller::DEFAULT_TAU_ALEA,
            cost_scale: 0.2,
            gated_bonus: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda_epis) && ok(self.lambda_alea) && ok(self.cost_scale)) {
            return Err(Error::Config("reward weights must be finite and non-negative".into()));
        }
        if !((0.0..=1.0).contains(&self.tau_epis) && (0.0..=1.0).contains(&self.tau_alea)) {
            return Err(Error::Config("reward thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn cost(&self, actions: &ActionSet, a: usize) -> f64 {
        self.cost_scale * actions.relative_capacity(a)
    }
}

/// `IoU - c(a) + l_e 1{s_e > t_e} - l_a 1{s_a > t_a}`
pub fn reward(
    iou: f64,
    action: usize,
    sigma_alea: f64,
    sigma_epis: f64,
    cfg: &RewardConfig,
    actions: &ActionSet,
) -> f64 {
    let mut bonus = if sigma_epis > cfg.tau_epis { cfg.lambda_epis } else { 0.0 };
    if cfg.gated_bonus && action + 2 < actions.len() {
        bonus = 0.0;
    }
    let penalty = if sigma_alea > cfg.tau_alea { cfg.lambda_alea } else { 0.0 };
    iou - cfg.cost(actions, action) + bonus - penalty
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// `r` for terminal transitions, else `r + gamma Q_target(s', argmax_a Q_online(s', a))`.
pub fn double_dqn_target(
    online: &Mlp,
    target: &Mlp,
    reward: f64,
    next_state: &[f64],
    terminal: bool,
    gamma: f64,
) -> f64 {
    if terminal || gamma == 0.0 {
        return reward;
    }
    let a = argmax(&online.forward(next_state));
    reward + gamma * target.forward(next_state)[a]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: PolicyState,
    pub action: usize,
    pub reward: f64,
    pub next_state: PolicyState,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sample<'a>(&'a self, rng: &mut impl Rng, n: usize) -> Vec<&'a Transition> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub gamma: f64,
    pub target_sync: usize,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    /// Environment steps; one gradient update per step once the buffer holds a batch.
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub initial_model: String,
    /// Treat the end of a sequence as a terminal state. When false the clip
    /// end is a truncation: the final frame has no observed successor and its
    /// transition is not stored.
    pub terminal_at_sequence_end: bool,
    /// At each step store the transitions of every (active tier, action) pair
    /// of the current frame, not only the one visited. Traces log every
    /// tier's IoU, so these rewards and successor states are exact.
    pub counterfactual_replay: bool,
    /// Start the output biases at the discounted mean reward of the trace,
    /// `mean_r / (1 - gamma)`, so the hidden layers only fit deviations.
    pub value_init: bool,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 64,
            gamma: 0.99,
            target_sync: 100,
            replay_capacity: 50_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            steps: 30_000,
            hidden: vec![128, 128],
            initial_model: "nano".into(),
            terminal_at_sequence_end: false,
            counterfactual_replay: true,
            value_init: true,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.target_sync == 0 || self.replay_capacity == 0 || self.log_every == 0 {
            return bad("batch, target_sync, replay_capacity and log_every must be positive");
        }
        if !((0.0..=1.0).contains(&self.epsilon_start) && (0.0..=1.0).contains(&self.epsilon_end)) {
            return bad("epsilon schedule must lie in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let f = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + f * (self.epsilon_end - self.epsilon_start)
    }

    fn layer_sizes(&self, n_actions: usize) -> Vec<usize> {
        let mut s = vec![STATE_DIM];
        s.extend(&self.hidden);
        s.push(n_actions);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    /// Mean loss over the updates since the previous row; empty before learning starts.
    pub loss: Option<f64>,
    /// Mean `max_a Q(s, a)` over the latest batch, after its update.
    pub mean_q: Option<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub online: Mlp,
    pub target: Mlp,
    pub log: Vec<TrainLogRow>,
    /// Loss of every gradient update, in order.
    pub losses: Vec<f64>,
}

struct Env<'a> {
    trace: &'a Trace,
    actions: &'a ActionSet,
    initial: usize,
    episode: usize,
    t: usize,
    active: usize,
    prev: Option<TraceStep>,
}

impl<'a> Env<'a> {
    fn frame(&self) -> &'a TraceFrame {
        let r = &self.trace.episode_ranges()[self.episode];
        &self.trace.frames()[r.start + self.t]
    }

    fn observe(&self) -> Result<(TraceStep, PolicyState)> {
        let step = TraceStep::observe(self.frame(), self.actions, self.active)?;
        let s = build_state(&step, self.prev.as_ref())?;
        Ok((step, s))
    }

    fn episode_len(&self) -> usize {
        self.trace.episode_ranges()[self.episode].len()
    }

    /// Apply `a` at the current frame; returns whether the episode ended.
    fn advance(&mut self, step: TraceStep, a: usize) -> bool {
        if self.t + 1 == self.episode_len() {
            self.episode = (self.episode + 1) % self.trace.episode_ranges().len();
            self.t = 0;
            self.active = self.initial;
            self.prev = None;
            true
        } else {
            self.t += 1;
            self.active = a;
            self.prev = Some(step);
            false
        }
    }
}

fn state_matrix<'a>(states: impl Iterator<Item = &'a PolicyState>, n: usize) -> DMatrix<f64> {
    let mut data = Vec::with_capacity(n * STATE_DIM);
    for s in states {
        data.extend_from_slice(s);
    }
    DMatrix::from_column_slice(STATE_DIM, n, &data)
}

/// Mean reward over every frame and action of `trace`.
fn mean_reward(trace: &Trace, actions: &ActionSet, cfg: &RewardConfig) -> f64 {
    let mut sum = 0.0;
    for f in trace.frames() {
        for (b, label) in actions.labels.iter().enumerate() {
            sum += reward(f.per_model[label].iou, b, f.sigma_alea, f.sigma_epis, cfg, actions);
        }
    }
    sum / (trace.len() * actions.len()) as f64
}

/// Push the transition of action `b` taken in state `s` at `frame`; `env`
/// has already advanced past the frame.
#[allow(clippy::too_many_arguments)]
fn store_transition(
    buffer: &mut ReplayBuffer,
    env: &Env<'_>,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    frame: &TraceFrame,
    here: &TraceStep,
    s: PolicyState,
    b: usize,
    terminal: bool,
) -> Result<()> {
    let actions = env.actions;
    let iou = frame.per_model[&actions.labels[b]].iou;
    let r = reward(iou, b, frame.sigma_alea, frame.sigma_epis, reward_cfg, actions);
    if !terminal {
        let next = TraceStep::observe(env.frame(), actions, b)?;
        buffer.push(Transition {
            state: s,
            action: b,
            reward: r,
            next_state: build_state(&next, Some(here))?,
            terminal: false,
        });
    } else if cfg.terminal_at_sequence_end {
        buffer.push(Transition {
            state: s,
            action: b,
            reward: r,
            next_state: s,
            terminal: true,
        });
    }
    Ok(())
}

/// Offline Double DQN on `trace`. Deterministic given `cfg.seed`.
pub fn train_policy(
    trace: &Trace,
    actions: &ActionSet,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
) -> Result<Trained> {
    cfg.validate()?;
    reward_cfg.validate()?;
    actions.validate()?;
    trace.require_models(&actions.labels)?;
    let initial = actions.resolve(&cfg.initial_model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut online = Mlp::new(&cfg.layer_sizes(actions.len()), &mut rng);
    if cfg.value_init && cfg.gamma < 1.0 {
        let v = mean_reward(trace, actions, reward_cfg) / (1.0 - cfg.gamma);
        online.layers.last_mut().unwrap().bias.fill(v);
    }
    let mut target = online.clone();
    let mut adam = Adam::new(&online, cfg.lr);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut env = Env {
        trace,
        actions,
        initial,
        episode: 0,
        t: 0,
        active: initial,
        prev: None,
    };
    let mut log = Vec::new();
    let mut losses = Vec::new();
    let mut since_log = (0.0, 0usize);
    let mut last_states: Option<DMatrix<f64>> = None;
    for step in 0..cfg.steps {
        let (obs, s) = env.observe()?;
        let eps = cfg.epsilon(step);
        let a = if rng.random::<f64>() < eps {
            rng.random_range(0..actions.len())
        } else {
            argmax(&online.forward(&s))
        };
        let frame = env.frame();
        let prev = env.prev;
        let terminal = env.advance(obs, a);
        if cfg.counterfactual_replay {
            // every (active tier, action) pair at this frame
            for c in 0..actions.len() {
                let here = TraceStep::observe(frame, actions, c)?;
                let sc = build_state(&here, prev.as_ref())?;
                for b in 0..actions.len() {
                    store_transition(&mut buffer, &env, cfg, reward_cfg, frame, &here, sc, b, terminal)?;
                }
            }
        } else {
            store_transition(&mut buffer, &env, cfg, reward_cfg, frame, &obs, s, a, terminal)?;
        }

        if buffer.len() >= cfg.batch {
            let batch = buffer.sample(&mut rng, cfg.batch);
            let states = state_matrix(batch.iter().map(|t| &t.state), cfg.batch);
            let next = state_matrix(batch.iter().map(|t| &t.next_state), cfg.batch);
            let q_online_next = online.forward_batch(&next);
            let q_target_next = target.forward_batch(&next);
            let targets: Vec<f64> = batch
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if t.terminal || cfg.gamma == 0.0 {
                        t.reward
                    } else {
                        let col: Vec<f64> = q_online_next.column(j).iter().copied().collect();
                        t.reward + cfg.gamma * q_target_next[(argmax(&col), j)]
                    }
                })
                .collect();
            let acts: Vec<usize> = batch.iter().map(|t| t.action).collect();
            let (loss, grads) = online.loss_and_gradients(&states, &acts, &targets)?;
            adam.step(&mut online, &grads);
            losses.push(loss);
            since_log.0 += loss;
            since_log.1 += 1;
            last_states = Some(states);
        }
        if (step + 1) % cfg.target_sync == 0 {
            target = online.clone();
        }
        if (step + 1) % cfg.log_every == 0 {
            let mean_q = last_states.as_ref().map(|states| {
                let q = online.forward_batch(states);
                q.column_iter()
                    .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .sum::<f64>()
                    / states.ncols() as f64
            });
            let row = TrainLogRow {
                step: step + 1,
                loss: (since_log.1 > 0).then(|| since_log.0 / since_log.1 as f64),
                mean_q,
                epsilon: eps,
            };
            if (step + 1) % (cfg.log_every * 10) == 0 {
                info!(
                    "step {} loss {:?} mean_q {:?} epsilon {:.3}",
                    row.step, row.loss, row.mean_q, row.epsilon
                );
            }
            log.push(row);
            since_log = (0.0, 0);
        }
    }
    Ok(Trained {
        online,
        target,
        log,
        losses,
    })
}

pub fn write_train_log(path: impl AsRef<Path>, log: &[TrainLogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub greedy: bool,
    /// Exploration rate when not greedy.
    pub epsilon: f64,
    pub seed: u64,
    pub initial_model: String,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            greedy: true,
            epsilon: 0.05,
            seed: 0,
            initial_model: "nano".into(),
        }
    }
}

/// Chosen tier index for every frame of `trace` under `net`.
pub fn policy_choices(
    net: &Mlp,
    trace: &Trace,
    actions: &ActionSet,
    opts: &RunOptions,
) -> Result<Vec<usize>> {
    trace.require_models(&actions.labels)?;
    let initial = actions.resolve(&opts.initial_model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut choices = Vec::with_capacity(trace.len());
    for episode in trace.episodes() {
        let mut active = initial;
        let mut prev: Option<TraceStep> = None;
        for frame in episode {
            let step = TraceStep::observe(frame, actions, active)?;
            let s = build_state(&step, prev.as_ref())?;
            let a = if !opts.greedy && rng.random::<f64>() < opts.epsilon {
                rng.random_range(0..actions.len())
            } else {
                argmax(&net.forward(&s))
            };
            choices.push(a);
            active = a;
            prev = Some(step);
        }
    }
    Ok(choices)
}

pub fn run_policy(net: &Mlp, trace: &Trace, actions: &ActionSet, opts: &RunOptions) -> Result<SimulationResult> {
    let choices = policy_choices(net, trace, actions, opts)?;
    SimulationResult::from_choices(trace, actions, &choices)
}

/// Saved policy: network layers plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub layers: Vec<LayerWeights>,
    pub actions: ActionSet,
    pub train_config: TrainConfig,
    pub reward_config: RewardConfig,
}

impl PolicyCheckpoint {
    pub fn new(net: &Mlp, actions: &ActionSet, train: &TrainConfig, reward: &RewardConfig) -> Self {
        PolicyCheckpoint {
            layers: net.into(),
            actions: actions.clone(),
            train_config: train.clone(),
            reward_config: reward.clone(),
        }
    }

    pub fn net(&self) -> Result<Mlp> {
        let net = Mlp::try_from(self.layers.as_slice())?;
        let sizes = net.sizes();
        if sizes[0] != STATE_DIM || *sizes.last().unwrap() != self.actions.len() {
            return Err(Error::Policy(format!(
                "checkpoint network maps {} -> {}, expected {STATE_DIM} -> {}",
                sizes[0],
                sizes.last().unwrap(),
                self.actions.len()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Policy(format!("{}: {e}", path.display())))
    }
}
