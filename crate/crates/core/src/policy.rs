//! Feed-forward policy network with hand-derived gradients.
//!
//! Topology: the deviation feature (divided channel-wise by
//! [`PolicyArch::deviation_scale`]) passes through ReLU hidden layers; the
//! output of the last hidden layer is concatenated with the two expert
//! channels `[kar, lkd / lkd_scale]` and mapped linearly to two logits,
//! `[non-key, key]`, followed by a softmax.
//!
//! All parameters live in one flat vector. Per layer the layout is the
//! weight matrix (`out x in`, row-major) followed by the bias vector, and a
//! [`Gradient`] uses the same layout so optimizers can work element-wise.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{derive_key, SplitMix64};
use crate::{Error, Result};

/// Number of expert channels concatenated before the output layer.
pub const EXPERT_DIM: usize = 2;

const LOG_GUARD: f64 = 1e-300;

/// Binary key-scheduling action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    NonKey = 0,
    Key = 1,
}

impl Action {
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn is_key(self) -> bool {
        self == Action::Key
    }

    fn from_index(i: usize) -> Self {
        if i == 1 {
            Action::Key
        } else {
            Action::NonKey
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyArch {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Divisor applied to LKD before it enters the network.
    pub lkd_scale: f64,
    /// Per-channel divisor applied to the deviation feature.
    pub deviation_scale: Vec<f64>,
}

impl PolicyArch {
    /// Default `[64, 64, 16]` architecture for a `d`-dimensional feature.
    ///
    /// Motion-derived channels are brought to unit order: accumulated motion
    /// is divided by 10 and its square by 100.
    pub fn new(input_dim: usize) -> Self {
        let mut deviation_scale = vec![1.0; input_dim];
        if input_dim >= 2 {
            deviation_scale[0] = 10.0;
            deviation_scale[1] = 100.0;
        }
        Self { input_dim, hidden_sizes: vec![64, 64, 16], lkd_scale: 100.0, deviation_scale }
    }

    pub fn with_hidden(mut self, hidden_sizes: Vec<usize>) -> Self {
        self.hidden_sizes = hidden_sizes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::config("hidden_sizes", "must be a non-empty list of positive sizes"));
        }
        if !(self.lkd_scale.is_finite() && self.lkd_scale > 0.0) {
            return Err(Error::config("lkd_scale", "must be positive"));
        }
        if self.deviation_scale.len() != self.input_dim {
            return Err(Error::Shape { expected: self.input_dim, got: self.deviation_scale.len() });
        }
        if self.deviation_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("deviation_scale", "every entry must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_sizes {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in + EXPERT_DIM, 2));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Location of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

fn layer_spans(arch: &PolicyArch) -> Vec<LayerSpan> {
    let mut offset = 0;
    arch.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let span = LayerSpan { fan_in, fan_out, weights: offset, bias: offset + fan_in * fan_out };
            offset += (fan_in + 1) * fan_out;
            span
        })
        .collect()
}

/// Network weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: PolicyArch,
    spans: Vec<LayerSpan>,
    data: Vec<f64>,
}

impl PolicyParams {
    /// All-zero parameters: every state maps to `p_key = p_nonkey = 0.5`.
    pub fn zeros(arch: PolicyArch) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        Ok(Self { spans: layer_spans(&arch), arch, data: vec![0.0; n] })
    }

    /// Builds parameters from a flat vector in the documented layout.
    pub fn from_flat(arch: PolicyArch, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        if data.len() != n {
            return Err(Error::Shape { expected: n, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("policy parameters"));
        }
        Ok(Self { spans: layer_spans(&arch), arch, data })
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_layers(&self) -> usize {
        self.spans.len()
    }

    /// `(weights, biases, fan_in, fan_out)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64], usize, usize) {
        let s = self.spans[l];
        (
            &self.data[s.weights..s.bias],
            &self.data[s.bias..s.bias + s.fan_out],
            s.fan_in,
            s.fan_out,
        )
    }

    /// Hash of the exact parameter bits, used to detect mutation between
    /// rollout collection and gradient computation.
    pub fn fingerprint(&self) -> u64 {
        let bits: Vec<u64> = self.data.iter().map(|v| v.to_bits()).collect();
        derive_key(self.data.len() as u64, &bits)
    }
}

/// Glorot-uniform weights and zero biases, deterministic in `(arch, seed)`.
pub fn init_params(arch: &PolicyArch, seed: u64) -> Result<PolicyParams> {
    let mut params = PolicyParams::zeros(arch.clone())?;
    for (l, span) in params.spans.clone().into_iter().enumerate() {
        let bound = libm::sqrt(6.0 / (span.fan_in + span.fan_out) as f64);
        let mut rng = SplitMix64::keyed(seed, &[0x494e_4954, l as u64]);
        for w in &mut params.data[span.weights..span.bias] {
            *w = bound * (2.0 * rng.next_f64() - 1.0);
        }
    }
    Ok(params)
}

/// Policy input `s_i = {deviation, KAR, LKD}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub deviation: Vec<f64>,
    pub kar: f64,
    pub lkd: u32,
}

impl SchedulerState {
    pub fn lkd_norm(&self, arch: &PolicyArch) -> f64 {
        self.lkd as f64 / arch.lkd_scale
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
struct ForwardCache {
    /// Input to each layer; the last entry is the concatenated vector fed to
    /// the output layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

/// Output distribution of one forward pass, with the cache needed to
/// backpropagate through it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDist {
    pub p_nonkey: f64,
    pub p_key: f64,
    pub logits: [f64; 2],
    cache: ForwardCache,
}

impl ActionDist {
    pub fn prob(&self, action: Action) -> f64 {
        match action {
            Action::NonKey => self.p_nonkey,
            Action::Key => self.p_key,
        }
    }

    pub fn log_prob(&self, action: Action) -> f64 {
        let [z0, z1] = self.logits;
        let m = z0.max(z1);
        let lse = m + libm::log(libm::exp(z0 - m) + libm::exp(z1 - m));
        self.logits[action.index()] - lse
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy(self.p_nonkey, self.p_key)
    }

    /// `d log pi(action) / d logits`.
    pub fn logprob_logit_grad(&self, action: Action) -> [f64; 2] {
        let mut g = [-self.p_nonkey, -self.p_key];
        g[action.index()] += 1.0;
        g
    }

    /// `d H / d logits`, i.e. `-p_j (log p_j + H)`.
    pub fn entropy_logit_grad(&self) -> [f64; 2] {
        let h = self.entropy();
        let p = [self.p_nonkey, self.p_key];
        [0, 1].map(|j| -p[j] * (libm::log(p[j].max(LOG_GUARD)) + h))
    }
}

/// Entropy of a two-point distribution.
pub fn entropy(p_nonkey: f64, p_key: f64) -> f64 {
    -(p_nonkey * libm::log(p_nonkey.max(LOG_GUARD)) + p_key * libm::log(p_key.max(LOG_GUARD)))
}

/// Runs the network on `state`.
pub fn forward(params: &PolicyParams, state: &SchedulerState) -> Result<ActionDist> {
    let arch = &params.arch;
    if state.deviation.len() != arch.input_dim {
        return Err(Error::Shape { expected: arch.input_dim, got: state.deviation.len() });
    }
    if state.deviation.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("deviation feature"));
    }
    if !state.kar.is_finite() {
        return Err(Error::NumericInput("kar"));
    }

    let hidden = params.spans.len() - 1;
    let mut inputs = Vec::with_capacity(hidden + 1);
    let mut pre = Vec::with_capacity(hidden);
    let mut x: Vec<f64> =
        state.deviation.iter().zip(&arch.deviation_scale).map(|(v, s)| v / s).collect();
    for span in &params.spans[..hidden] {
        let z = affine(&params.data, span, &x);
        let a = z.iter().map(|v| v.max(0.0)).collect();
        inputs.push(core::mem::replace(&mut x, a));
        pre.push(z);
    }
    x.push(state.kar);
    x.push(state.lkd_norm(arch));
    let out = affine(&params.data, &params.spans[hidden], &x);
    inputs.push(x);

    let logits = [out[0], out[1]];
    let m = logits[0].max(logits[1]);
    let e0 = libm::exp(logits[0] - m);
    let e1 = libm::exp(logits[1] - m);
    let s = e0 + e1;
    Ok(ActionDist {
        p_nonkey: e0 / s,
        p_key: e1 / s,
        logits,
        cache: ForwardCache { inputs, pre },
    })
}

fn affine(data: &[f64], span: &LayerSpan, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), span.fan_in);
    let w = &data[span.weights..span.bias];
    let b = &data[span.bias..span.bias + span.fan_out];
    w.chunks_exact(span.fan_in)
        .zip(b)
        .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Gradient with the same flat layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    data: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self { data: vec![0.0; params.data.len()] }
    }

    pub fn from_flat(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }
}

/// Accumulates `scale * d(w . logits)/d params` into `grad`, where
/// `dlogits` is the upstream gradient with respect to the two logits.
pub fn backward(
    params: &PolicyParams,
    dist: &ActionDist,
    dlogits: [f64; 2],
    scale: f64,
    grad: &mut Gradient,
) {
    let spans = &params.spans;
    let cache = &dist.cache;
    let hidden = spans.len() - 1;
    let mut upstream: Vec<f64> = dlogits.iter().map(|g| g * scale).collect();
    for l in (0..=hidden).rev() {
        let span = &spans[l];
        let input = &cache.inputs[l];
        for (o, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = span.weights + o * span.fan_in;
            for (dw, x) in grad.data[row..row + span.fan_in].iter_mut().zip(input) {
                *dw += g * x;
            }
            grad.data[span.bias + o] += g;
        }
        if l == 0 {
            break;
        }
        // Back through the previous ReLU; expert channels of the output
        // layer input receive no gradient since they are not parameters.
        let prev_pre = &cache.pre[l - 1];
        let mut down = vec![0.0; prev_pre.len()];
        for (o, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &params.data[span.weights + o * span.fan_in..][..prev_pre.len()];
            for (d, w) in down.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        for (d, z) in down.iter_mut().zip(prev_pre) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        upstream = down;
    }
}

/// Exact gradient of `log pi(action | state)`.
pub fn grad_logprob(params: &PolicyParams, state: &SchedulerState, action: Action) -> Result<Gradient> {
    let dist = forward(params, state)?;
    let mut grad = Gradient::zeros_like(params);
    backward(params, &dist, dist.logprob_logit_grad(action), 1.0, &mut grad);
    Ok(grad)
}

/// Exact gradient of the entropy of `pi(. | state)`.
pub fn grad_entropy(params: &PolicyParams, state: &SchedulerState) -> Result<Gradient> {
    let dist = forward(params, state)?;
    let mut grad = Gradient::zeros_like(params);
    backward(params, &dist, dist.entropy_logit_grad(), 1.0, &mut grad);
    Ok(grad)
}

/// Epsilon-greedy sampling: when the most likely action exceeds
/// `epsilon`, it is taken with probability `epsilon` instead of its own
/// probability. Otherwise the distribution is sampled directly.
pub fn sample_action(dist: &ActionDist, epsilon: f64, rng: &mut SplitMix64) -> Action {
    let p_key = if dist.p_key > epsilon {
        epsilon
    } else if dist.p_nonkey > epsilon {
        1.0 - epsilon
    } else {
        dist.p_key
    };
    Action::from_index(rng.chance(p_key) as usize)
}

/// RMSProp state. Updates perform gradient *ascent*.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    acc: Vec<f64>,
}

impl RmsProp {
    pub fn new(params: &PolicyParams, lr: f64) -> Self {
        Self { lr, rho: 0.9, eps: 1e-8, acc: vec![0.0; params.data.len()] }
    }

    /// Restores an optimizer from saved accumulators.
    pub fn from_parts(lr: f64, rho: f64, eps: f64, acc: Vec<f64>) -> Result<Self> {
        if acc.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::NumericInput("optimizer accumulators"));
        }
        Ok(Self { lr, rho, eps, acc })
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.acc
    }

    /// `acc = rho * acc + (1 - rho) * g^2`, `param += lr * g / (sqrt(acc) + eps)`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &Gradient) -> Result<()> {
        let n = params.data.len();
        if grad.data.len() != n {
            return Err(Error::Shape { expected: n, got: grad.data.len() });
        }
        if self.acc.len() != n {
            return Err(Error::Shape { expected: n, got: self.acc.len() });
        }
        for ((p, a), g) in params.data.iter_mut().zip(&mut self.acc).zip(&grad.data) {
            *a = self.rho * *a + (1.0 - self.rho) * g * g;
            *p += self.lr * g / (libm::sqrt(*a) + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> PolicyArch {
        PolicyArch::new(8)
    }

    fn state(seed: u64) -> SchedulerState {
        let mut rng = SplitMix64::new(seed);
        SchedulerState {
            deviation: (0..8).map(|_| 3.0 * rng.gaussian()).collect(),
            kar: rng.next_f64(),
            lkd: rng.below(120) as u32,
        }
    }

    #[test]
    fn init_zero_biases_and_bounded_weights() {
        let p = init_params(&arch(), 1).unwrap();
        for l in 0..p.num_layers() {
            let (w, b, fan_in, fan_out) = p.layer(l);
            assert!(b.iter().all(|&v| v == 0.0));
            let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            assert!(w.iter().all(|v| v.abs() <= bound));
            assert!(w.iter().any(|&v| v != 0.0));
        }
        let (w, _, 8, 64) = p.layer(0) else { panic!("layer 0 shape") };
        assert!(w.iter().all(|v| v.abs() <= 0.2887));
        assert_eq!(p, init_params(&arch(), 1).unwrap());
        assert_ne!(p, init_params(&arch(), 2).unwrap());
    }

    #[test]
    fn zero_params_are_symmetric() {
        let p = PolicyParams::zeros(arch()).unwrap();
        let d = forward(&p, &state(3)).unwrap();
        assert_eq!(d.p_key, 0.5);
        assert_eq!(d.p_nonkey, 0.5);
        assert!((d.entropy() - core::f64::consts::LN_2).abs() < 1e-15);
        let g = grad_entropy(&p, &state(3)).unwrap();
        assert!(g.as_flat().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn zero_params_output_bias_gradient() {
        let p = PolicyParams::zeros(arch()).unwrap();
        let n = p.as_flat().len();
        for (action, want) in [(Action::Key, [-0.5, 0.5]), (Action::NonKey, [0.5, -0.5])] {
            let g = grad_logprob(&p, &state(4), action).unwrap();
            assert_eq!(&g.as_flat()[n - 2..], &want);
        }
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(0.5, 0.5) - 0.6931471805599453).abs() < 1e-15);
        let h = entropy(0.9, 0.1);
        assert!((h - 0.3250829733914482).abs() < 1e-12, "{h}");
        assert_eq!(entropy(1.0, 0.0), 0.0);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = PolicyParams::zeros(arch()).unwrap();
        let mut s = state(1);
        s.deviation[2] = f64::NAN;
        assert_eq!(forward(&p, &s), Err(Error::NumericInput("deviation feature")));
        s.deviation.pop();
        assert!(matches!(forward(&p, &s), Err(Error::Shape { .. })));
        assert!(PolicyParams::zeros(arch().with_hidden(Vec::new())).is_err());
    }

    #[test]
    fn epsilon_greedy_clamps_confident_actions() {
        let p = PolicyParams::zeros(arch()).unwrap();
        let mut d = forward(&p, &state(1)).unwrap();
        d.p_key = 0.999;
        d.p_nonkey = 0.001;
        let mut rng = SplitMix64::new(17);
        let n = 100_000;
        let keys = (0..n).filter(|_| sample_action(&d, 0.98, &mut rng).is_key()).count();
        let sd = libm::sqrt(0.98 * 0.02 / n as f64);
        assert!((keys as f64 / n as f64 - 0.98).abs() < 3.0 * sd);

        d.p_key = 0.6;
        d.p_nonkey = 0.4;
        let keys = (0..n).filter(|_| sample_action(&d, 0.98, &mut rng).is_key()).count();
        let sd = libm::sqrt(0.6 * 0.4 / n as f64);
        assert!((keys as f64 / n as f64 - 0.6).abs() < 3.0 * sd);

        d.p_key = 0.001;
        d.p_nonkey = 0.999;
        let keys = (0..n).filter(|_| sample_action(&d, 0.98, &mut rng).is_key()).count();
        assert!((keys as f64 / n as f64 - 0.02).abs() < 3.0 * libm::sqrt(0.0196 / n as f64));
    }

    #[test]
    fn rmsprop_scalar_and_two_steps() {
        let a = PolicyArch { input_dim: 1, hidden_sizes: vec![1], lkd_scale: 1.0, deviation_scale: vec![1.0] };
        let mut p = PolicyParams::zeros(a).unwrap();
        let n = p.as_flat().len();
        let mut opt = RmsProp::new(&p, 0.001);

        let zero = Gradient::zeros_like(&p);
        opt.step(&mut p, &zero).unwrap();
        assert!(p.as_flat().iter().all(|&v| v == 0.0));

        let mut g = vec![0.0; n];
        g[0] = 1.0;
        opt.step(&mut p, &Gradient::from_flat(g.clone())).unwrap();
        assert!((opt.accumulators()[0] - 0.1).abs() < 1e-15);
        let step1 = 0.001 / (libm::sqrt(0.1) + 1e-8);
        assert!((p.as_flat()[0] - 0.0031623).abs() < 1e-7);
        assert!((p.as_flat()[0] - step1).abs() < 1e-15);

        g[0] = -2.0;
        opt.step(&mut p, &Gradient::from_flat(g)).unwrap();
        let acc2 = 0.9 * 0.1 + 0.1 * 4.0;
        let want = step1 + 0.001 * -2.0 / (libm::sqrt(acc2) + 1e-8);
        assert!((p.as_flat()[0] - want).abs() < 1e-18);

        let err = opt.step(&mut p, &Gradient::from_flat(vec![0.0; n + 1]));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn distribution_is_normalised_and_scores_cancel(
            seed in 0u64..10_000,
            dev in proptest::collection::vec(-50.0f64..50.0, 8),
            kar in 0.0f64..=1.0,
            lkd in 0u32..10_000,
            spread in 0.0f64..3.0,
        ) {
            let mut p = init_params(&arch(), seed).unwrap();
            let mut rng = SplitMix64::new(seed);
            for v in p.as_flat_mut() {
                *v += spread * rng.gaussian();
            }
            let s = SchedulerState { deviation: dev, kar, lkd };
            let d = forward(&p, &s).unwrap();
            proptest::prop_assert!((d.p_key + d.p_nonkey - 1.0).abs() <= 1e-12);
            let h = d.entropy();
            proptest::prop_assert!((0.0..=core::f64::consts::LN_2 + 1e-15).contains(&h));

            let mut score = Gradient::zeros_like(&p);
            for a in [Action::NonKey, Action::Key] {
                score.add_scaled(&grad_logprob(&p, &s, a).unwrap(), d.prob(a));
            }
            let worst = score.as_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            proptest::prop_assert!(worst <= 1e-10, "{}", worst);
        }
    }
}
