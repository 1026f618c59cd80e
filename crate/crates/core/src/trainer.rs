//! Constrained REINFORCE training.
//!
//! An episode covers frames `t..=t+M`. Frame `t` is a forced key. Before
//! every later decision the episode-local KAR, `keys so far / (M + 1)`, is
//! compared against the limit `eta`; once it is exceeded the trial stops
//! immediately. Rewards are zero for non-key actions and the quality gain of
//! the key over propagation otherwise.
//!
//! Each minibatch draws `B` episodes, runs `K` trials per episode on a
//! frozen parameter snapshot and ascends
//!
//! ```text
//! 1/(B K) sum_trials sum_steps [ grad log pi(a|s) (G - b) + lambda1 grad H(pi(.|s)) ]
//! ```
//!
//! with `G` the reward-to-go (or the full trial return) and `b` the mean
//! trial return of the episode.

use alloc::string::String;
use alloc::vec::Vec;

use crate::env::Trace;
use crate::policy::{self, Action, Gradient, PolicyParams, RmsProp, SchedulerState};
use crate::rng::SplitMix64;
use crate::{Error, Result};

const STREAM_EPISODE: u64 = 0x4550_4953;
const STREAM_TRIAL: u64 = 0x5452_4941;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// Quality gain of the key over propagation.
    GroundTruth,
    /// One minus the agreement between propagated and key output.
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Mean total return over the trials of the episode.
    MeanReturn,
    /// Mean reward-to-go at the same step over the trials that reached it.
    PerStep,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnMode {
    RewardToGo,
    Total,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// KAR limit.
    pub eta: f64,
    /// Episode length `M`; an episode spans `M + 1` frames.
    pub episode_len: usize,
    /// Trials per episode `K`.
    pub trials: usize,
    /// Episodes per minibatch `B`.
    pub batch_episodes: usize,
    pub total_episodes: usize,
    pub gamma: f64,
    /// Entropy bonus weight.
    pub lambda1: f64,
    /// Epsilon-greedy threshold.
    pub epsilon: f64,
    pub reward_mode: RewardMode,
    /// Multiplier applied to every reward during rollouts. The default of
    /// 100 expresses rewards in quality percentage points.
    pub reward_scale: f64,
    pub baseline_mode: BaselineMode,
    pub return_mode: ReturnMode,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.04,
            episode_len: 270,
            trials: 32,
            batch_episodes: 8,
            total_episodes: 2400,
            gamma: 1.0,
            lambda1: 0.14,
            epsilon: 0.98,
            reward_mode: RewardMode::GroundTruth,
            reward_scale: 100.0,
            baseline_mode: BaselineMode::PerStep,
            return_mode: ReturnMode::RewardToGo,
            learning_rate: 0.001,
            rms_decay: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("eta", "must lie in (0, 1]"));
        }
        if self.episode_len < 1 {
            return Err(Error::config("episode_len", "must be at least 1"));
        }
        if self.trials < 1 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.batch_episodes < 1 {
            return Err(Error::config("batch_episodes", "must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(Error::config("lambda1", "must be nonnegative"));
        }
        if !(self.epsilon > 0.5 && self.epsilon <= 1.0) {
            return Err(Error::config("epsilon", "must lie in (0.5, 1]"));
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return Err(Error::config("reward_scale", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.rms_decay >= 0.0 && self.rms_decay < 1.0) {
            return Err(Error::config("rms_decay", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Episode-local KAR after `keys` key decisions.
    pub fn episode_kar(&self, keys: usize) -> f64 {
        keys as f64 / (self.episode_len + 1) as f64
    }
}

/// Eq.-1 style reward: quality gained by keying frame `i` instead of
/// propagating from `k`.
pub fn reward_groundtruth(trace: &Trace, i: usize, k: usize, action: Action) -> Result<f64> {
    let prop = trace.prop_quality(i, k)?;
    Ok(match action {
        Action::NonKey => 0.0,
        Action::Key => trace.key_quality()[i] - prop,
    })
}

/// Reward when only the key output is available as pseudo ground truth.
pub fn reward_pseudo(trace: &Trace, i: usize, k: usize, action: Action) -> Result<f64> {
    let agreement = trace.agreement(i, k)?;
    Ok(match action {
        Action::NonKey => 0.0,
        Action::Key => 1.0 - agreement,
    })
}

pub fn reward(mode: RewardMode, trace: &Trace, i: usize, k: usize, action: Action) -> Result<f64> {
    match mode {
        RewardMode::GroundTruth => reward_groundtruth(trace, i, k, action),
        RewardMode::Pseudo => reward_pseudo(trace, i, k, action),
    }
}

/// One acted step of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub frame: usize,
    pub state: SchedulerState,
    pub action: Action,
    /// Policy key probability at this state (before epsilon clamping).
    pub p_key: f64,
    pub reward: f64,
}

/// One constrained trial over an episode window.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub start: usize,
    pub episode_len: usize,
    pub steps: Vec<Step>,
    /// Key decisions including the forced initial key.
    pub keys: usize,
    /// True when the KAR limit ended the trial before step `M`.
    pub constraint_stop: bool,
    /// Episode-local KAR at the final check (the violating value on a
    /// constraint stop).
    pub kar_at_stop: f64,
    /// Fingerprint of the parameters the trial was sampled with.
    pub params_fingerprint: u64,
}

impl EpisodeRecord {
    /// Number of acted steps `p_v`.
    pub fn stop_step(&self) -> usize {
        self.steps.len()
    }

    /// Discounted return `sum_u gamma^(u - t) r_u`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps
            .iter()
            .map(|s| libm::pow(gamma, (s.frame - self.start) as f64) * s.reward)
            .sum()
    }

    /// Reward-to-go for every step.
    pub fn rewards_to_go(&self, gamma: f64) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.steps.len()];
        let mut acc = 0.0;
        let mut next_frame = None;
        for (j, s) in self.steps.iter().enumerate().rev() {
            if let Some(nf) = next_frame {
                acc *= libm::pow(gamma, (nf - s.frame) as f64);
            }
            acc += s.reward;
            out[j] = acc;
            next_frame = Some(s.frame);
        }
        out
    }

    /// Fraction of visited frames that were keys.
    pub fn realized_kar(&self) -> f64 {
        self.keys as f64 / (self.steps.len() + 1) as f64
    }
}

/// Runs one constrained trial starting at frame `t`.
pub fn rollout_constrained(
    params: &PolicyParams,
    trace: &Trace,
    t: usize,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<EpisodeRecord> {
    let m = cfg.episode_len;
    let n = trace.n_frames();
    if t.checked_add(m).is_none_or(|end| end >= n) {
        return Err(Error::Bounds { index: t.saturating_add(m), len: n });
    }
    let mut steps = Vec::with_capacity(m);
    let mut keys = 1;
    let mut last_key = t;
    let mut kar = cfg.episode_kar(keys);
    let mut constraint_stop = false;
    for s in 1..=m {
        kar = cfg.episode_kar(keys);
        if kar > cfg.eta {
            constraint_stop = true;
            break;
        }
        let frame = t + s;
        let state = SchedulerState {
            deviation: trace.deviation_feature(frame, last_key)?,
            kar,
            lkd: (frame - last_key) as u32,
        };
        let dist = policy::forward(params, &state)?;
        let action = policy::sample_action(&dist, cfg.epsilon, rng);
        let r = cfg.reward_scale * reward(cfg.reward_mode, trace, frame, last_key, action)?;
        steps.push(Step { frame, state, action, p_key: dist.p_key, reward: r });
        if action.is_key() {
            keys += 1;
            last_key = frame;
        }
    }
    Ok(EpisodeRecord {
        start: t,
        episode_len: m,
        steps,
        keys,
        constraint_stop,
        kar_at_stop: kar,
        params_fingerprint: params.fingerprint(),
    })
}

/// Mean discounted return over the trials of one episode.
pub fn episode_return(records: &[EpisodeRecord], gamma: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Argument(String::from("no episode records")));
    }
    let start = records[0].start;
    if records.iter().any(|r| r.start != start) {
        return Err(Error::Argument(String::from("records do not share a start frame")));
    }
    Ok(records.iter().map(|r| r.discounted_return(gamma)).sum::<f64>() / records.len() as f64)
}

/// Per-step weights `(G - b)` of every record in one episode group.
fn advantages(group: &[EpisodeRecord], cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let returns: Vec<Vec<f64>> = group
        .iter()
        .map(|r| match cfg.return_mode {
            ReturnMode::RewardToGo => r.rewards_to_go(cfg.gamma),
            ReturnMode::Total => alloc::vec![r.discounted_return(cfg.gamma); r.steps.len()],
        })
        .collect();
    match cfg.baseline_mode {
        BaselineMode::None => returns,
        BaselineMode::MeanReturn => {
            let b = group.iter().map(|r| r.discounted_return(cfg.gamma)).sum::<f64>() / group.len() as f64;
            returns.into_iter().map(|g| g.into_iter().map(|x| x - b).collect()).collect()
        }
        BaselineMode::PerStep => {
            let longest = returns.iter().map(Vec::len).max().unwrap_or(0);
            let mut sum = alloc::vec![0.0; longest];
            let mut count = alloc::vec![0usize; longest];
            for g in &returns {
                for (s, x) in g.iter().enumerate() {
                    sum[s] += x;
                    count[s] += 1;
                }
            }
            returns
                .into_iter()
                .map(|g| g.into_iter().enumerate().map(|(s, x)| x - sum[s] / count[s] as f64).collect())
                .collect()
        }
    }
}

fn check_batch(groups: &[Vec<EpisodeRecord>], params: &PolicyParams) -> Result<usize> {
    let fp = params.fingerprint();
    let mut total = 0;
    for g in groups {
        if g.is_empty() {
            return Err(Error::Argument(String::from("empty episode group")));
        }
        if g.iter().any(|r| r.params_fingerprint != fp) {
            return Err(Error::State("records were sampled with different parameters"));
        }
        total += g.len();
    }
    if total == 0 {
        return Err(Error::Argument(String::from("empty batch")));
    }
    Ok(total)
}

/// Gradient contribution of a single record, already divided by the batch
/// trial count. Summing these in record order gives [`policy_gradient`].
pub fn record_gradient(
    record: &EpisodeRecord,
    advantages: &[f64],
    params: &PolicyParams,
    lambda1: f64,
    norm: f64,
) -> Result<Gradient> {
    let mut grad = Gradient::zeros_like(params);
    for (step, adv) in record.steps.iter().zip(advantages) {
        let dist = policy::forward(params, &step.state)?;
        let gl = dist.logprob_logit_grad(step.action);
        let ge = dist.entropy_logit_grad();
        let dlogits = [gl[0] * adv + lambda1 * ge[0], gl[1] * adv + lambda1 * ge[1]];
        policy::backward(params, &dist, dlogits, 1.0 / norm, &mut grad);
    }
    Ok(grad)
}

/// Work item for computing one record's gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradientJob<'a> {
    pub record: &'a EpisodeRecord,
    pub advantages: &'a [f64],
}

/// Flattens the batch into per-record gradient jobs together with the
/// normalizer `B * K`.
pub fn gradient_jobs<'a>(
    groups: &'a [Vec<EpisodeRecord>],
    advantages: &'a [Vec<Vec<f64>>],
) -> Vec<GradientJob<'a>> {
    groups
        .iter()
        .zip(advantages)
        .flat_map(|(g, a)| g.iter().zip(a).map(|(record, adv)| GradientJob { record, advantages: adv }))
        .collect()
}

/// Policy-gradient estimate over `B` episode groups of `K` trials each.
pub fn policy_gradient(
    groups: &[Vec<EpisodeRecord>],
    params: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<Gradient> {
    policy_gradient_with(groups, params, cfg, &Sequential)
}

pub fn policy_gradient_with<E: Executor>(
    groups: &[Vec<EpisodeRecord>],
    params: &PolicyParams,
    cfg: &TrainConfig,
    exec: &E,
) -> Result<Gradient> {
    let total = check_batch(groups, params)?;
    let adv: Vec<Vec<Vec<f64>>> = groups.iter().map(|g| advantages(g, cfg)).collect();
    let jobs = gradient_jobs(groups, &adv);
    let parts = exec.map(jobs.len(), |j| {
        record_gradient(jobs[j].record, jobs[j].advantages, params, cfg.lambda1, total as f64)
    });
    let mut grad = Gradient::zeros_like(params);
    for part in parts {
        grad.add_scaled(&part?, 1.0);
    }
    Ok(grad)
}

/// The objective whose gradient [`policy_gradient`] returns, with the batch
/// (states, actions and returns) held fixed.
pub fn surrogate_objective(
    groups: &[Vec<EpisodeRecord>],
    params: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    let total = groups.iter().map(Vec::len).sum::<usize>();
    if total == 0 {
        return Err(Error::Argument(String::from("empty batch")));
    }
    let mut acc = 0.0;
    for g in groups {
        for (r, adv) in g.iter().zip(advantages(g, cfg)) {
            for (s, a) in r.steps.iter().zip(adv) {
                let dist = policy::forward(params, &s.state)?;
                acc += dist.log_prob(s.action) * a + cfg.lambda1 * dist.entropy();
            }
        }
    }
    Ok(acc / total as f64)
}

/// Runs independent, indexed jobs and returns their results in index
/// order. Implementations may run jobs concurrently; results must not
/// depend on the degree of parallelism.
pub trait Executor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// One row of the training log, one per episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub episode: usize,
    pub mean_return: f64,
    pub mean_entropy: f64,
    pub realized_kar: f64,
    pub wallclock_ms: u64,
}

/// Incremental trainer; one call to [`Trainer::step_batch`] performs one
/// minibatch update.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    traces: &'a [Trace],
    /// `(trace index, number of valid start frames)`.
    viable: Vec<(usize, usize)>,
    total_starts: u64,
    cfg: TrainConfig,
    params: PolicyParams,
    opt: RmsProp,
    episodes_done: usize,
    log: Vec<TrainLogRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(traces: &'a [Trace], cfg: TrainConfig, params: PolicyParams) -> Result<Self> {
        let opt = RmsProp::new(&params, cfg.learning_rate);
        Self::resume(traces, cfg, params, opt, 0)
    }

    /// Continues training from saved parameters, optimizer state and
    /// episode counter.
    pub fn resume(
        traces: &'a [Trace],
        cfg: TrainConfig,
        params: PolicyParams,
        mut opt: RmsProp,
        episodes_done: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let viable: Vec<(usize, usize)> = traces
            .iter()
            .enumerate()
            .filter(|(_, t)| t.n_frames() > cfg.episode_len)
            .map(|(i, t)| (i, t.n_frames() - cfg.episode_len))
            .collect();
        if viable.is_empty() {
            return Err(Error::config("traces", "no trace is longer than the episode length"));
        }
        if let Some((i, _)) = viable.iter().find(|(i, _)| traces[*i].feature_dim() != params.arch().input_dim) {
            return Err(Error::Shape { expected: params.arch().input_dim, got: traces[*i].feature_dim() });
        }
        opt.lr = cfg.learning_rate;
        opt.rho = cfg.rms_decay;
        let total_starts = viable.iter().map(|&(_, s)| s as u64).sum();
        Ok(Self { traces, viable, total_starts, cfg, params, opt, episodes_done, log: Vec::new() })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn optimizer(&self) -> &RmsProp {
        &self.opt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    pub fn is_finished(&self) -> bool {
        self.episodes_done >= self.cfg.total_episodes
    }

    pub fn log(&self) -> &[TrainLogRow] {
        &self.log
    }

    pub fn into_parts(self) -> (PolicyParams, RmsProp, Vec<TrainLogRow>) {
        (self.params, self.opt, self.log)
    }

    /// `(trace index, start frame)` of episode `e`, drawn uniformly over all
    /// valid pairs.
    pub fn episode_window(&self, episode: usize) -> (usize, usize) {
        let mut rng = SplitMix64::keyed(self.cfg.seed, &[STREAM_EPISODE, episode as u64]);
        let mut pick = rng.below(self.total_starts);
        for &(idx, starts) in &self.viable {
            if pick < starts as u64 {
                return (idx, pick as usize);
            }
            pick -= starts as u64;
        }
        unreachable!("pick is below the total number of starts")
    }

    /// Runs one minibatch: rollouts, gradient and an RMSProp ascent step.
    /// Returns the number of episodes processed (0 once finished).
    pub fn step_batch<E: Executor>(&mut self, exec: &E) -> Result<usize> {
        let remaining = self.cfg.total_episodes.saturating_sub(self.episodes_done);
        let nb = remaining.min(self.cfg.batch_episodes);
        if nb == 0 {
            return Ok(0);
        }
        let k = self.cfg.trials;
        let windows: Vec<(usize, usize)> =
            (0..nb).map(|j| self.episode_window(self.episodes_done + j)).collect();
        let first = self.episodes_done;
        let (params, traces, cfg) = (&self.params, self.traces, &self.cfg);
        let results = exec.map(nb * k, |job| {
            let (j, trial) = (job / k, job % k);
            let (ti, start) = windows[j];
            let mut rng =
                SplitMix64::keyed(cfg.seed, &[STREAM_TRIAL, (first + j) as u64, trial as u64]);
            rollout_constrained(params, &traces[ti], start, cfg, &mut rng)
        });
        let mut groups: Vec<Vec<EpisodeRecord>> = Vec::with_capacity(nb);
        let mut iter = results.into_iter();
        for _ in 0..nb {
            let group = iter.by_ref().take(k).collect::<Result<Vec<_>>>()?;
            groups.push(group);
        }

        for (j, g) in groups.iter().enumerate() {
            let steps: usize = g.iter().map(|r| r.steps.len()).sum();
            let entropy_sum: f64 = g
                .iter()
                .flat_map(|r| &r.steps)
                .map(|s| policy::entropy(1.0 - s.p_key, s.p_key))
                .sum();
            self.log.push(TrainLogRow {
                episode: first + j,
                mean_return: episode_return(g, self.cfg.gamma)?,
                mean_entropy: if steps == 0 { 0.0 } else { entropy_sum / steps as f64 },
                realized_kar: g.iter().map(EpisodeRecord::realized_kar).sum::<f64>() / g.len() as f64,
                wallclock_ms: 0,
            });
        }

        let grad = policy_gradient_with(&groups, &self.params, &self.cfg, exec)?;
        self.opt.step(&mut self.params, &grad)?;
        self.episodes_done += nb;
        Ok(nb)
    }

    /// Trains until `total_episodes` have been processed.
    pub fn run<E: Executor>(&mut self, exec: &E) -> Result<()> {
        while self.step_batch(exec)? > 0 {}
        Ok(())
    }
}

/// Trains from `initial` and returns the final parameters with the log.
pub fn train<E: Executor>(
    traces: &[Trace],
    cfg: &TrainConfig,
    initial: PolicyParams,
    exec: &E,
) -> Result<(PolicyParams, Vec<TrainLogRow>)> {
    let mut trainer = Trainer::new(traces, cfg.clone(), initial)?;
    trainer.run(exec)?;
    let (params, _, log) = trainer.into_parts();
    Ok((params, log))
}
