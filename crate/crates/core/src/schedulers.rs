//! Key schedulers and the evaluation-time decision loop.
//!
//! [`run`] forces the first frame of a window to be a key, then asks a
//! [`Scheduler`] for every following frame. Schedulers only see a
//! [`SchedulerContext`]: the trace, the current frame, the last key frame and
//! the KAR/LKD expert values derived from a sliding window of past
//! decisions.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use crate::env::Trace;
use crate::linalg;
use crate::policy::{self, Action, PolicyParams, SchedulerState};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Number of past decisions KAR is computed over at evaluation time.
pub const DEFAULT_HISTORY_WINDOW: usize = 90;

/// Sliding window of the most recent key/non-key decisions.
#[derive(Debug, Clone)]
pub struct DecisionHistory {
    window: usize,
    decisions: VecDeque<bool>,
    keys: usize,
}

impl DecisionHistory {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), decisions: VecDeque::with_capacity(window), keys: 0 }
    }

    pub fn push(&mut self, key: bool) {
        if self.decisions.len() == self.window {
            if let Some(true) = self.decisions.pop_front() {
                self.keys -= 1;
            }
        }
        self.decisions.push_back(key);
        self.keys += key as usize;
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    /// Key All Ratio over the retained decisions, 0 when empty.
    pub fn kar(&self) -> f64 {
        if self.decisions.is_empty() {
            0.0
        } else {
            self.keys as f64 / self.decisions.len() as f64
        }
    }
}

/// Everything a scheduler may look at when deciding on `frame`.
#[derive(Debug, Clone, Copy)]
pub struct SchedulerContext<'a> {
    pub trace: &'a Trace,
    pub frame: usize,
    pub last_key: usize,
    pub kar: f64,
}

impl SchedulerContext<'_> {
    /// Last Key Distance.
    pub fn lkd(&self) -> usize {
        self.frame - self.last_key
    }

    pub fn deviation(&self) -> Result<Vec<f64>> {
        self.trace.deviation_feature(self.frame, self.last_key)
    }

    pub fn accumulated_motion(&self) -> Result<f64> {
        self.trace.accumulated_motion(self.last_key, self.frame)
    }

    pub fn state(&self) -> Result<SchedulerState> {
        Ok(SchedulerState { deviation: self.deviation()?, kar: self.kar, lkd: self.lkd() as u32 })
    }
}

/// A scheduler's answer for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// Key probability, for schedulers that have one.
    pub p_key: Option<f64>,
}

impl From<Action> for Decision {
    fn from(action: Action) -> Self {
        Self { action, p_key: None }
    }
}

pub trait Scheduler {
    /// Short label used in result tables.
    fn name(&self) -> &'static str;

    /// Called once before every run so that stochastic schedulers can key
    /// their randomness on the run instead of on call order.
    fn reset(&mut self, _trace: &Trace, _start: usize) {}

    fn decide(&mut self, ctx: &SchedulerContext<'_>) -> Result<Decision>;
}

impl<S: Scheduler + ?Sized> Scheduler for Box<S> {
    fn name(&self) -> &'static str {
        (**self).name()
    }

    fn reset(&mut self, trace: &Trace, start: usize) {
        (**self).reset(trace, start)
    }

    fn decide(&mut self, ctx: &SchedulerContext<'_>) -> Result<Decision> {
        (**self).decide(ctx)
    }
}

fn key_if(cond: bool) -> Action {
    if cond {
        Action::Key
    } else {
        Action::NonKey
    }
}

/// Fixed interval: key iff LKD has reached `interval`.
pub fn decide_fixed(interval: usize, ctx: &SchedulerContext<'_>) -> Result<Action> {
    if interval < 1 {
        return Err(Error::config("interval", "must be at least 1"));
    }
    Ok(key_if(ctx.lkd() >= interval))
}

/// Key iff the motion accumulated since the last key reaches `threshold`.
pub fn decide_magnitude(threshold: f64, ctx: &SchedulerContext<'_>) -> Result<Action> {
    if !(threshold > 0.0) {
        return Err(Error::config("threshold", "must be positive"));
    }
    Ok(key_if(ctx.accumulated_motion()? >= threshold))
}

/// Key with probability `p_key`, independently per frame.
pub fn decide_random(p_key: f64, rng: &mut SplitMix64) -> Result<Action> {
    if !(p_key > 0.0 && p_key <= 1.0) {
        return Err(Error::config("p_key", "must lie in (0, 1]"));
    }
    Ok(key_if(rng.chance(p_key)))
}

/// Key iff the policy's key probability strictly exceeds `tau`.
pub fn decide_policy(params: &PolicyParams, tau: f64, ctx: &SchedulerContext<'_>) -> Result<Decision> {
    check_tau(tau)?;
    let dist = policy::forward(params, &ctx.state()?)?;
    Ok(Decision { action: key_if(dist.p_key > tau), p_key: Some(dist.p_key) })
}

/// Key iff the regressor predicts an agreement below `threshold`.
pub fn decide_deviation(
    threshold: f64,
    ctx: &SchedulerContext<'_>,
    regressor: &AgreementRegressor,
) -> Result<Action> {
    Ok(key_if(regressor.predict(&ctx.deviation()?)? < threshold))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::config("tau", "must lie in (0, 1)"))
    }
}

#[derive(Debug, Clone)]
pub struct FixedInterval {
    interval: usize,
}

impl FixedInterval {
    pub fn new(interval: usize) -> Result<Self> {
        if interval < 1 {
            return Err(Error::config("interval", "must be at least 1"));
        }
        Ok(Self { interval })
    }
}

impl Scheduler for FixedInterval {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn decide(&mut self, ctx: &SchedulerContext<'_>) -> Result<Decision> {
        decide_fixed(self.interval, ctx).map(Into::into)
    }
}

#[derive(Debug, Clone)]
pub struct RandomKeys {
    p_key: f64,
    seed: u64,
    rng: SplitMix64,
}

impl RandomKeys {
    pub fn new(p_key: f64, seed: u64) -> Result<Self> {
        if !(p_key > 0.0 && p_key <= 1.0) {
            return Err(Error::config("p_key", "must lie in (0, 1]"));
        }
        Ok(Self { p_key, seed, rng: SplitMix64::new(seed) })
    }
}

impl Scheduler for RandomKeys {
    fn name(&self) -> &'static str {
        "random"
    }

    fn reset(&mut self, trace: &Trace, start: usize) {
        self.rng = SplitMix64::keyed(self.seed, &[trace.seed(), start as u64]);
    }

    fn decide(&mut self, _ctx: &SchedulerContext<'_>) -> Result<Decision> {
        decide_random(self.p_key, &mut self.rng).map(Into::into)
    }
}

/// Flow-magnitude style adaptive scheduler.
#[derive(Debug, Clone)]
pub struct MotionThreshold {
    threshold: f64,
}

impl MotionThreshold {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::config("threshold", "must be positive"));
        }
        Ok(Self { threshold })
    }
}

impl Scheduler for MotionThreshold {
    fn name(&self) -> &'static str {
        "magnitude"
    }

    fn decide(&mut self, ctx: &SchedulerContext<'_>) -> Result<Decision> {
        decide_magnitude(self.threshold, ctx).map(Into::into)
    }
}

/// Linear model from deviation features to predicted agreement, fitted by
/// least squares through the normal equations.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementRegressor {
    weights: Vec<f64>,
    bias: f64,
}

impl AgreementRegressor {
    pub fn from_parts(weights: Vec<f64>, bias: f64) -> Self {
        Self { weights, bias }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Fits on `(feature, agreement)` samples.
    pub fn fit<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], f64)>,
    {
        let mut dim = None;
        let mut xtx = Vec::new();
        let mut xty = Vec::new();
        let mut n = 0usize;
        let mut row = Vec::new();
        for (x, y) in samples {
            let d = *dim.get_or_insert_with(|| {
                xtx = alloc::vec![0.0; (x.len() + 1) * (x.len() + 1)];
                xty = alloc::vec![0.0; x.len() + 1];
                x.len()
            });
            if x.len() != d {
                return Err(Error::Shape { expected: d, got: x.len() });
            }
            row.clear();
            row.extend_from_slice(x);
            row.push(1.0);
            for (r, a) in row.iter().enumerate() {
                xty[r] += a * y;
                for (c, b) in row.iter().enumerate() {
                    xtx[r * (d + 1) + c] += a * b;
                }
            }
            n += 1;
        }
        let Some(d) = dim else {
            return Err(Error::Argument(String::from("no training samples")));
        };
        let scale = (0..=d).map(|r| xtx[r * (d + 1) + r]).fold(0.0, f64::max);
        let coef = linalg::solve(xtx, xty, d + 1, 1e-12 * scale.max(1.0) + 1e-300);
        debug_assert!(n > 0);
        Ok(Self { bias: coef[d], weights: coef[..d].to_vec() })
    }

    /// Fits on every `(i, k)` pair with `0 <= i - k <= max_gap` of every
    /// trace, with the true agreement as target.
    pub fn fit_traces(traces: &[Trace], max_gap: usize) -> Result<Self> {
        let mut samples: Vec<(Vec<f64>, f64)> = Vec::new();
        for t in traces {
            for k in 0..t.n_frames() {
                for i in k..t.n_frames().min(k + max_gap + 1) {
                    samples.push((t.deviation_feature(i, k)?, t.agreement(i, k)?));
                }
            }
        }
        Self::fit(samples.iter().map(|(x, y)| (x.as_slice(), *y)))
    }

    pub fn predict(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.weights.len() {
            return Err(Error::Shape { expected: self.weights.len(), got: feature.len() });
        }
        Ok(self.bias + self.weights.iter().zip(feature).map(|(w, x)| w * x).sum::<f64>())
    }
}

/// DVSNet-style scheduler: key when predicted agreement is low.
#[derive(Debug, Clone)]
pub struct DeviationThreshold {
    threshold: f64,
    regressor: Option<AgreementRegressor>,
}

impl DeviationThreshold {
    pub fn new(threshold: f64, regressor: Option<AgreementRegressor>) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::config("threshold", "must be finite"));
        }
        Ok(Self { threshold, regressor })
    }
}

impl Scheduler for DeviationThreshold {
    fn name(&self) -> &'static str {
        "deviation"
    }

    fn decide(&mut self, ctx: &SchedulerContext<'_>) -> Result<Decision> {
        let regressor = self.regressor.as_ref().ok_or(Error::State("agreement regressor is not trained"))?;
        decide_deviation(self.threshold, ctx, regressor).map(Into::into)
    }
}

/// Trained policy evaluated deterministically with threshold `tau`.
#[derive(Debug, Clone)]
pub struct PolicyThreshold<'p> {
    params: &'p PolicyParams,
    tau: f64,
}

impl<'p> PolicyThreshold<'p> {
    pub fn new(params: &'p PolicyParams, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self { params, tau })
    }
}

impl Scheduler for PolicyThreshold<'_> {
    fn name(&self) -> &'static str {
        "policy"
    }

    fn decide(&mut self, ctx: &SchedulerContext<'_>) -> Result<Decision> {
        decide_policy(self.params, self.tau, ctx)
    }
}

/// One processed frame of a [`Rollout`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutEntry {
    pub frame: usize,
    pub action: Action,
    pub quality: f64,
    /// LKD and KAR as seen when the decision was made.
    pub lkd: usize,
    pub kar: f64,
    pub p_key: Option<f64>,
    /// False for the forced key at the start of the window.
    pub scheduled: bool,
}

/// Outcome of running a scheduler over a window of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub start: usize,
    pub entries: Vec<RolloutEntry>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.action.is_key()).map(|e| e.frame).collect()
    }

    pub fn n_keys(&self) -> usize {
        self.entries.iter().filter(|e| e.action.is_key()).count()
    }

    pub fn total_quality(&self) -> f64 {
        self.entries.iter().map(|e| e.quality).sum()
    }

    pub fn mean_quality(&self) -> f64 {
        self.total_quality() / self.entries.len() as f64
    }

    /// Gaps between consecutive key frames.
    pub fn cki(&self) -> Vec<usize> {
        self.keys().windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Runs `scheduler` over frames `start..start + length` with the default
/// 90-decision history window.
pub fn run<S: Scheduler + ?Sized>(
    scheduler: &mut S,
    trace: &Trace,
    start: usize,
    length: usize,
) -> Result<Rollout> {
    run_with_window(scheduler, trace, start, length, DEFAULT_HISTORY_WINDOW)
}

pub fn run_with_window<S: Scheduler + ?Sized>(
    scheduler: &mut S,
    trace: &Trace,
    start: usize,
    length: usize,
    window: usize,
) -> Result<Rollout> {
    let n = trace.n_frames();
    if length == 0 {
        return Err(Error::Argument(String::from("rollout length must be positive")));
    }
    let end = start.checked_add(length).filter(|&e| e <= n).ok_or(Error::Bounds {
        index: start.saturating_add(length).saturating_sub(1),
        len: n,
    })?;
    scheduler.reset(trace, start);
    let kq = trace.key_quality();
    let mut history = DecisionHistory::new(window);
    let mut entries = Vec::with_capacity(length);
    entries.push(RolloutEntry {
        frame: start,
        action: Action::Key,
        quality: kq[start],
        lkd: 0,
        kar: history.kar(),
        p_key: None,
        scheduled: false,
    });
    history.push(true);
    let mut last_key = start;
    for frame in start + 1..end {
        let ctx = SchedulerContext { trace, frame, last_key, kar: history.kar() };
        let decision = scheduler.decide(&ctx)?;
        let quality = if decision.action.is_key() {
            kq[frame]
        } else {
            trace.prop_quality_unchecked(frame, last_key)
        };
        entries.push(RolloutEntry {
            frame,
            action: decision.action,
            quality,
            lkd: ctx.lkd(),
            kar: ctx.kar,
            p_key: decision.p_key,
            scheduled: true,
        });
        history.push(decision.action.is_key());
        if decision.action.is_key() {
            last_key = frame;
        }
    }
    Ok(Rollout { start, entries })
}
