//! Synthetic video traces.
//!
//! A [`Trace`] stands in for a real video. For each frame it stores the
//! quality a full segmentation pass would reach (`key_quality`) and the
//! frame-to-frame motion. Quality of a propagated (non-key) frame decays with
//! the motion accumulated since its key frame:
//!
//! ```text
//! prop_quality(i, k) = max(floor, key_quality[i] - alpha * m - beta * m^2),  m = sum(motion[k+1..=i])
//! ```
//!
//! Deviation features and their noise are a pure function of
//! `(trace.seed, i, k)`; nothing is cached and traces are immutable, so all
//! queries may run concurrently.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Number of informative channels at the front of every deviation feature.
pub const INFORMATIVE_CHANNELS: usize = 3;

const STREAM_SCENES: u64 = 0x5343_454e_4553;
const STREAM_MOTION: u64 = 0x4d4f_5449_4f4e;
const STREAM_QUALITY: u64 = 0x5155_414c;
const STREAM_FEATURE: u64 = 0x4645_4154;

/// AR(1) coefficient of the log-motion regime process.
/// AR(1) coefficient of key-quality mean reversion.
const QUALITY_PERSISTENCE: f64 = 0.98;
/// Spread of the fresh key quality drawn at a scene change, in units of
/// `base_quality_jitter`.
const SCENE_QUALITY_SPREAD: f64 = 5.0;

/// Scalar parameters shared by every frame of a trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceParams {
    pub alpha: f64,
    pub beta: f64,
    pub quality_floor: f64,
    pub feature_dim: usize,
    pub feature_noise_sigma: f64,
    pub agreement_kappa: f64,
    pub seed: u64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 0.001,
            quality_floor: 0.3,
            feature_dim: 8,
            feature_noise_sigma: 0.05,
            agreement_kappa: 1.0,
            seed: 0,
        }
    }
}

impl TraceParams {
    fn validate(&self) -> Result<()> {
        check_nonneg("alpha", self.alpha)?;
        check_nonneg("beta", self.beta)?;
        if !(self.quality_floor.is_finite() && (0.0..1.0).contains(&self.quality_floor)) {
            return Err(Error::config("quality_floor", "must lie in [0, 1)"));
        }
        if self.feature_dim < INFORMATIVE_CHANNELS {
            return Err(Error::config("feature_dim", "must be at least 3"));
        }
        check_nonneg("feature_noise_sigma", self.feature_noise_sigma)?;
        if !(self.agreement_kappa.is_finite() && self.agreement_kappa > 0.0) {
            return Err(Error::config("agreement_kappa", "must be positive"));
        }
        Ok(())
    }
}

/// Parameters of the synthetic trace generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_frames: usize,
    /// Long-run mean of the key-quality random walk.
    pub base_quality_mean: f64,
    /// Per-frame innovation std of the key-quality random walk.
    pub base_quality_jitter: f64,
    /// Mean per-frame motion outside scene changes.
    pub motion_mean: f64,
    /// Log-scale std of the slowly varying motion regime.
    pub motion_jitter: f64,
    /// AR(1) coefficient of the log motion regime, in `[0, 1)`.
    pub motion_persistence: f64,
    /// Expected scene changes per 100 frames.
    pub scene_change_rate: f64,
    /// Motion multiplier applied at a scene change.
    pub scene_change_motion_spike: f64,
    pub alpha: f64,
    pub beta: f64,
    pub quality_floor: f64,
    pub feature_dim: usize,
    pub feature_noise_sigma: f64,
    pub agreement_kappa: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let p = TraceParams::default();
        Self {
            n_frames: 600,
            base_quality_mean: 0.85,
            base_quality_jitter: 0.01,
            motion_mean: 0.2,
            motion_jitter: 2.0,
            motion_persistence: 0.99,
            scene_change_rate: 1.0,
            scene_change_motion_spike: 100.0,
            alpha: p.alpha,
            beta: p.beta,
            quality_floor: p.quality_floor,
            feature_dim: p.feature_dim,
            feature_noise_sigma: p.feature_noise_sigma,
            agreement_kappa: p.agreement_kappa,
        }
    }
}

impl SynthConfig {
    fn params(&self, seed: u64) -> TraceParams {
        TraceParams {
            alpha: self.alpha,
            beta: self.beta,
            quality_floor: self.quality_floor,
            feature_dim: self.feature_dim,
            feature_noise_sigma: self.feature_noise_sigma,
            agreement_kappa: self.agreement_kappa,
            seed,
        }
    }

    /// Lowest key quality the generator will emit.
    fn quality_low(&self) -> f64 {
        self.quality_floor + 0.05 * (1.0 - self.quality_floor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::config("n_frames", "must be at least 2"));
        }
        self.params(0).validate()?;
        let low = self.quality_low();
        if !(self.base_quality_mean.is_finite()
            && self.base_quality_mean > low
            && self.base_quality_mean <= 1.0)
        {
            return Err(Error::config(
                "base_quality_mean",
                alloc::format!("must lie in ({low}, 1]"),
            ));
        }
        check_nonneg("base_quality_jitter", self.base_quality_jitter)?;
        check_nonneg("motion_mean", self.motion_mean)?;
        check_nonneg("motion_jitter", self.motion_jitter)?;
        if !(self.motion_persistence >= 0.0 && self.motion_persistence < 1.0) {
            return Err(Error::config("motion_persistence", "must lie in [0, 1)"));
        }
        check_nonneg("scene_change_rate", self.scene_change_rate)?;
        if !(self.scene_change_motion_spike.is_finite() && self.scene_change_motion_spike >= 5.0) {
            return Err(Error::config("scene_change_motion_spike", "must be at least 5"));
        }
        Ok(())
    }
}

fn check_nonneg(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be finite and nonnegative"))
    }
}

/// An immutable video abstraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    params: TraceParams,
    key_quality: Vec<f64>,
    motion: Vec<f64>,
    scene_changes: Vec<usize>,
    /// `cum_motion[i] = motion[1] + ... + motion[i]`
    cum_motion: Vec<f64>,
}

impl Trace {
    /// Builds a trace from explicit per-frame values, checking all invariants.
    pub fn new(
        params: TraceParams,
        key_quality: Vec<f64>,
        motion: Vec<f64>,
        scene_changes: Vec<usize>,
    ) -> Result<Self> {
        params.validate()?;
        let n = key_quality.len();
        if n == 0 {
            return Err(Error::config("n_frames", "must be positive"));
        }
        if motion.len() != n {
            return Err(Error::Shape { expected: n, got: motion.len() });
        }
        if key_quality.iter().any(|q| !(q.is_finite() && (0.0..=1.0).contains(q))) {
            return Err(Error::config("key_quality", "every value must lie in [0, 1]"));
        }
        if motion.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::config("motion", "every value must be finite and nonnegative"));
        }
        if motion[0] != 0.0 {
            return Err(Error::config("motion", "motion of frame 0 must be 0"));
        }
        let min_q = key_quality.iter().copied().fold(f64::INFINITY, f64::min);
        if params.quality_floor >= min_q {
            return Err(Error::config("quality_floor", "must be below every key quality"));
        }
        if scene_changes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("scene_changes", "must be strictly increasing"));
        }
        if let Some(&last) = scene_changes.last() {
            if last >= n {
                return Err(Error::Bounds { index: last, len: n });
            }
        }
        let mut cum_motion = Vec::with_capacity(n);
        let mut acc = 0.0;
        cum_motion.push(0.0);
        for &m in &motion[1..] {
            acc += m;
            cum_motion.push(acc);
        }
        Ok(Self { params, key_quality, motion, scene_changes, cum_motion })
    }

    pub fn params(&self) -> &TraceParams {
        &self.params
    }

    pub fn n_frames(&self) -> usize {
        self.key_quality.len()
    }

    pub fn key_quality(&self) -> &[f64] {
        &self.key_quality
    }

    pub fn motion(&self) -> &[f64] {
        &self.motion
    }

    pub fn scene_changes(&self) -> &[usize] {
        &self.scene_changes
    }

    pub fn seed(&self) -> u64 {
        self.params.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.params.feature_dim
    }

    fn check_pair(&self, i: usize, k: usize) -> Result<()> {
        let n = self.n_frames();
        if i >= n {
            return Err(Error::Bounds { index: i, len: n });
        }
        if k > i {
            return Err(Error::Ordering { key: k, frame: i });
        }
        Ok(())
    }

    /// Motion accumulated over frames `k+1..=i`.
    pub fn accumulated_motion(&self, k: usize, i: usize) -> Result<f64> {
        self.check_pair(i, k)?;
        Ok(self.cum_motion[i] - self.cum_motion[k])
    }

    /// Quality of frame `i` when its features are propagated from key `k`.
    pub fn prop_quality(&self, i: usize, k: usize) -> Result<f64> {
        self.check_pair(i, k)?;
        Ok(self.prop_quality_unchecked(i, k))
    }

    #[inline]
    pub(crate) fn prop_quality_unchecked(&self, i: usize, k: usize) -> f64 {
        let m = self.cum_motion[i] - self.cum_motion[k];
        let p = &self.params;
        let q = self.key_quality[i] - p.alpha * m - p.beta * m * m;
        if q > p.quality_floor {
            q
        } else {
            p.quality_floor
        }
    }

    /// Agreement between the propagated and the key segmentation of frame
    /// `i`, the accuracy score used by the pseudo-groundtruth reward.
    pub fn agreement(&self, i: usize, k: usize) -> Result<f64> {
        let prop = self.prop_quality(i, k)?;
        let a = 1.0 - self.params.agreement_kappa * (self.key_quality[i] - prop);
        Ok(a.clamp(0.0, 1.0))
    }

    /// Deviation feature describing how frame `i` differs from key `k`.
    pub fn deviation_feature(&self, i: usize, k: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.params.feature_dim];
        self.deviation_feature_into(i, k, &mut out)?;
        Ok(out)
    }

    /// Writes the deviation feature into `out`, which must have length
    /// `feature_dim`.
    pub fn deviation_feature_into(&self, i: usize, k: usize, out: &mut [f64]) -> Result<()> {
        self.check_pair(i, k)?;
        let d = self.params.feature_dim;
        if out.len() != d {
            return Err(Error::Shape { expected: d, got: out.len() });
        }
        let m = self.cum_motion[i] - self.cum_motion[k];
        let mean = if i == k { 0.0 } else { m / (i - k) as f64 };
        out[0] = m;
        out[1] = m * m;
        out[2] = mean;
        out[INFORMATIVE_CHANNELS..].fill(0.0);
        let sigma = self.params.feature_noise_sigma;
        if sigma > 0.0 {
            let mut rng = SplitMix64::keyed(self.params.seed, &[STREAM_FEATURE, i as u64, k as u64]);
            for v in out.iter_mut() {
                *v += sigma * rng.gaussian();
            }
        }
        Ok(())
    }
}

/// Generates a synthetic trace. Deterministic in `(cfg, seed)`.
///
/// Three independent keyed streams drive generation:
///
/// * scenes: `K ~ Poisson(scene_change_rate * n_frames / 100)` (capped at
///   `n_frames - 1`), then `K` distinct frames drawn uniformly from
///   `1..n_frames` by rejection, sorted;
/// * motion: a stationary AR(1) log-regime `z` with coefficient `motion_persistence` and
///   `motion[i] = motion_mean * exp(motion_jitter * z_i - motion_jitter^2 / 2)`,
///   multiplied by the spike factor at scene changes, `motion[0] = 0`;
/// * quality: a mean-reverting AR(1) walk around `base_quality_mean` that
///   is re-drawn at every scene change, clamped into `(floor, 1]`.
pub fn gen_trace(cfg: &SynthConfig, seed: u64) -> Result<Trace> {
    cfg.validate()?;
    let n = cfg.n_frames;

    let mut scenes_rng = SplitMix64::keyed(seed, &[STREAM_SCENES]);
    let count = scenes_rng
        .poisson(cfg.scene_change_rate * n as f64 / 100.0)
        .min(n as u64 - 1) as usize;
    let mut is_scene_change = vec![false; n];
    let mut placed = 0;
    while placed < count {
        let f = 1 + scenes_rng.below(n as u64 - 1) as usize;
        if !is_scene_change[f] {
            is_scene_change[f] = true;
            placed += 1;
        }
    }
    let scene_changes: Vec<usize> = (0..n).filter(|&f| is_scene_change[f]).collect();

    let mut motion_rng = SplitMix64::keyed(seed, &[STREAM_MOTION]);
    let innovation = libm::sqrt(1.0 - cfg.motion_persistence * cfg.motion_persistence);
    let jitter = cfg.motion_jitter;
    let mut z = motion_rng.gaussian();
    let mut motion = Vec::with_capacity(n);
    motion.push(0.0);
    for f in 1..n {
        z = cfg.motion_persistence * z + innovation * motion_rng.gaussian();
        let mut m = cfg.motion_mean * libm::exp(jitter * z - 0.5 * jitter * jitter);
        if is_scene_change[f] {
            m *= cfg.scene_change_motion_spike;
        }
        motion.push(m);
    }

    let mut quality_rng = SplitMix64::keyed(seed, &[STREAM_QUALITY]);
    let (low, mean, step) = (cfg.quality_low(), cfg.base_quality_mean, cfg.base_quality_jitter);
    let mut q = mean;
    let mut key_quality = Vec::with_capacity(n);
    for f in 0..n {
        let g = quality_rng.gaussian();
        if f > 0 {
            q = if is_scene_change[f] {
                mean + SCENE_QUALITY_SPREAD * step * g
            } else {
                mean + QUALITY_PERSISTENCE * (q - mean) + step * g
            };
        }
        q = q.clamp(low, 1.0);
        key_quality.push(q);
    }

    Trace::new(cfg.params(seed), key_quality, motion, scene_changes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_trace(motion: Vec<f64>, key_quality: Vec<f64>, params: TraceParams) -> Trace {
        Trace::new(params, key_quality, motion, Vec::new()).unwrap()
    }

    #[test]
    fn zero_motion_config() {
        let cfg = SynthConfig { n_frames: 2, motion_mean: 0.0, ..Default::default() };
        let t = gen_trace(&cfg, 3).unwrap();
        assert_eq!(t.motion(), &[0.0, 0.0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(gen_trace(&cfg, 11).unwrap(), gen_trace(&cfg, 11).unwrap());
        assert_ne!(gen_trace(&cfg, 11).unwrap(), gen_trace(&cfg, 12).unwrap());
    }

    #[test]
    fn generated_invariants_hold() {
        let cfg = SynthConfig { scene_change_rate: 3.0, ..Default::default() };
        for seed in 0..20 {
            let t = gen_trace(&cfg, seed).unwrap();
            assert_eq!(t.motion()[0], 0.0);
            assert!(t.key_quality().iter().all(|q| (0.0..=1.0).contains(q)));
            let min_q = t.key_quality().iter().copied().fold(1.0, f64::min);
            assert!(t.params().quality_floor < min_q);
            // spikes are exactly at the listed frames
            for &s in t.scene_changes().iter().filter(|&&s| s > 1 && !t.scene_changes().contains(&(s - 1))) {
                assert!(t.motion()[s] > 10.0 * t.motion()[s - 1], "seed {seed} frame {s}");
            }
            for f in 2..t.n_frames() {
                if !t.scene_changes().contains(&f) && !t.scene_changes().contains(&(f - 1)) {
                    assert!(t.motion()[f] < 3.0 * t.motion()[f - 1], "seed {seed} frame {f}");
                }
            }
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = SynthConfig { n_frames: 1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "n_frames", .. })));
        let bad = SynthConfig { scene_change_motion_spike: 2.0, ..Default::default() };
        assert!(matches!(
            gen_trace(&bad, 0),
            Err(Error::Config { field: "scene_change_motion_spike", .. })
        ));
        let bad = SynthConfig { feature_dim: 2, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "feature_dim", .. })));
        let bad = SynthConfig { motion_jitter: -1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "motion_jitter", .. })));
    }

    #[test]
    fn accumulated_motion_examples() {
        let t = small_trace(vec![0.0, 0.2, 0.3], vec![0.9; 3], TraceParams::default());
        assert_eq!(t.accumulated_motion(0, 2).unwrap(), 0.5);
        for i in 0..3 {
            assert_eq!(t.accumulated_motion(i, i).unwrap(), 0.0);
        }
        assert!(matches!(t.accumulated_motion(0, 3), Err(Error::Bounds { .. })));
        assert!(matches!(t.accumulated_motion(2, 1), Err(Error::Ordering { .. })));
    }

    #[test]
    fn prop_quality_examples() {
        let params = TraceParams { alpha: 0.1, beta: 0.0, quality_floor: 0.3, ..Default::default() };
        let t = small_trace(vec![0.0, 1.0, 1.0, 100.0], vec![0.9; 4], params);
        assert_eq!(t.prop_quality(1, 1).unwrap(), 0.9);
        assert!((t.prop_quality(2, 0).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(t.prop_quality(3, 0).unwrap(), 0.3);
        assert!(matches!(t.prop_quality(0, 1), Err(Error::Ordering { .. })));
    }

    #[test]
    fn deviation_feature_examples() {
        let params = TraceParams { feature_noise_sigma: 0.0, ..Default::default() };
        let t = small_trace(vec![0.0, 0.5], vec![0.9; 2], params);
        assert_eq!(&t.deviation_feature(0, 0).unwrap()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&t.deviation_feature(1, 0).unwrap()[..3], &[0.5, 0.25, 0.5]);
        assert!(t.deviation_feature(1, 0).unwrap()[3..].iter().all(|&v| v == 0.0));

        let noisy = gen_trace(&SynthConfig::default(), 4).unwrap();
        let a = noisy.deviation_feature(40, 31).unwrap();
        let _ = noisy.deviation_feature(41, 31).unwrap();
        assert_eq!(a, noisy.deviation_feature(40, 31).unwrap());
        assert_eq!(a.len(), 8);
        assert!(matches!(noisy.deviation_feature(3, 4), Err(Error::Ordering { .. })));
    }

    #[test]
    fn agreement_examples() {
        let params = TraceParams { alpha: 0.1, beta: 0.0, agreement_kappa: 1.0, ..Default::default() };
        let t = small_trace(vec![0.0, 1.0, 1.0], vec![0.9; 3], params);
        assert_eq!(t.agreement(2, 2).unwrap(), 1.0);
        assert!((t.agreement(2, 0).unwrap() - 0.8).abs() < 1e-12);
        let params = TraceParams { agreement_kappa: 10.0, ..params };
        let t = small_trace(vec![0.0, 1.0, 1.0], vec![0.9; 3], params);
        assert_eq!(t.agreement(2, 0).unwrap(), 0.0);
    }

    #[test]
    fn trace_rejects_invalid_values() {
        let p = TraceParams::default();
        assert!(Trace::new(p, vec![0.9, 0.9], vec![0.1, 0.0], vec![]).is_err());
        assert!(Trace::new(p, vec![0.9, 1.1], vec![0.0, 0.0], vec![]).is_err());
        assert!(Trace::new(p, vec![0.9, 0.2], vec![0.0, 0.0], vec![]).is_err());
        assert!(Trace::new(p, vec![0.9, 0.9], vec![0.0, -0.1], vec![]).is_err());
        assert!(Trace::new(p, vec![0.9, 0.9], vec![0.0, 0.1], vec![2]).is_err());
        assert!(Trace::new(p, vec![0.9], vec![0.0, 0.1], vec![]).is_err());
    }

    #[test]
    fn scene_count_matches_knuth_reference() {
        let cfg = SynthConfig::default();
        let lambda = cfg.scene_change_rate * cfg.n_frames as f64 / 100.0;
        let mut total = 0usize;
        for seed in 0..400 {
            let t = gen_trace(&cfg, seed).unwrap();
            let mut rng = SplitMix64::keyed(seed, &[STREAM_SCENES]);
            let limit = libm::exp(-lambda);
            let (mut k, mut prod) = (0usize, rng.next_f64());
            while prod > limit {
                k += 1;
                prod *= rng.next_f64();
            }
            assert_eq!(t.scene_changes().len(), k, "seed {seed}");
            total += k;
        }
        // Poisson(6) mean over 400 draws: standard error sqrt(6 / 400)
        let mean = total as f64 / 400.0;
        assert!((mean - lambda).abs() < 3.0 * libm::sqrt(lambda / 400.0), "{mean}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn accumulated_motion_is_additive(seed in 0u64..1000, a in 0usize..300, b in 0usize..300, c in 0usize..300) {
            let t = gen_trace(&SynthConfig { n_frames: 300, ..Default::default() }, seed).unwrap();
            let mut v = [a, b, c];
            v.sort_unstable();
            let [k, j, i] = v;
            let whole = t.accumulated_motion(k, i).unwrap();
            let parts = t.accumulated_motion(k, j).unwrap() + t.accumulated_motion(j, i).unwrap();
            proptest::prop_assert!((whole - parts).abs() <= 1e-9 * (1.0 + whole));
            proptest::prop_assert!(whole >= 0.0);
        }

        #[test]
        fn prop_quality_non_increasing_in_distance(seed in 0u64..1000, i in 0usize..300) {
            let t = gen_trace(&SynthConfig { n_frames: 300, ..Default::default() }, seed).unwrap();
            let mut prev = t.prop_quality(i, i).unwrap();
            prop_assert_eq_f(prev, t.key_quality()[i])?;
            for k in (0..i).rev() {
                let q = t.prop_quality(i, k).unwrap();
                proptest::prop_assert!(q <= prev && q >= t.params().quality_floor);
                prev = q;
            }
        }

        #[test]
        fn deviation_feature_ignores_query_order(seed in 0u64..1000, pairs in proptest::collection::vec((0usize..200, 0usize..200), 1..20)) {
            let t = gen_trace(&SynthConfig { n_frames: 200, ..Default::default() }, seed).unwrap();
            let pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(x, y)| (x.max(y), x.min(y))).collect();
            let forward: Vec<Vec<f64>> = pairs.iter().map(|&(i, k)| t.deviation_feature(i, k).unwrap()).collect();
            let mut backward: Vec<Vec<f64>> = pairs.iter().rev().map(|&(i, k)| t.deviation_feature(i, k).unwrap()).collect();
            backward.reverse();
            proptest::prop_assert_eq!(forward, backward);
        }
    }

    fn prop_assert_eq_f(a: f64, b: f64) -> core::result::Result<(), proptest::test_runner::TestCaseError> {
        proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
        Ok(())
    }
}
