//! Flat `key = value` run configuration shared by every subcommand.
//!
//! Precedence, lowest first: built-in defaults, `KEYSCHED_SEED` (seed only),
//! the config file, command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use keysched_core::env::SynthConfig;
use keysched_core::eval::CostModel;
use keysched_core::policy::PolicyArch;
use keysched_core::trainer::{BaselineMode, ReturnMode, RewardMode, TrainConfig};

use crate::error::{CliError, Result};

/// A type that can appear on the right-hand side of a config line.
pub trait ConfigValue: Sized {
    /// Boolean keys become value-less command-line switches.
    const IS_SWITCH: bool = false;
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(f64, usize, u64);

impl ConfigValue for bool {
    const IS_SWITCH: bool = true;
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("`{s}` is not `true` or `false`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! enum_value {
    ($t:ty { $($v:path => $s:literal),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($v),)*
                    _ => Err(format!("`{s}` is not one of: {}", [$($s),*].join(", "))),
                }
            }
            fn render(&self) -> String {
                match self { $($v => $s.to_string(),)* }
            }
        }
    };
}
enum_value!(RewardMode { RewardMode::GroundTruth => "groundtruth", RewardMode::Pseudo => "pseudo" });
enum_value!(BaselineMode {
    BaselineMode::PerStep => "per-step",
    BaselineMode::MeanReturn => "mean-return",
    BaselineMode::None => "none",
});
enum_value!(ReturnMode { ReturnMode::RewardToGo => "reward-to-go", ReturnMode::Total => "total" });

/// Description of one configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
    pub is_switch: bool,
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr => $help:literal; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        /// Every key, in documentation order.
        pub const KEYS: &[KeySpec] = &[
            $( KeySpec { name: stringify!($field), help: $help, is_switch: <$ty as ConfigValue>::IS_SWITCH }, )*
        ];

        impl RunConfig {
            /// Sets `key` from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value.trim())
                            .map_err(|e| CliError::Config(format!("{key}: {e}")))?;
                    } )*
                    _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($field) => Some(self.$field.render()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    // general
    seed: u64 = 0 => "Master seed (default: $KEYSCHED_SEED, else 0)";
    jobs: usize = 1 => "Worker threads for rollouts and evaluation";
    traces: String = "traces".into() => "Directory holding input trace files";
    out: String = "out".into() => "Output directory";
    mkdir: bool = false => "Create the output directory if it is missing";
    checkpoint: String = String::new() => "Policy checkpoint (default: <out>/policy.ksp)";
    // gen
    n: usize = 20 => "Number of traces to generate";
    frames: usize = SynthConfig::default().n_frames => "Frames per generated trace";
    quality_mean: f64 = SynthConfig::default().base_quality_mean => "Mean key-frame quality";
    quality_jitter: f64 = SynthConfig::default().base_quality_jitter => "Per-frame innovation of key-frame quality";
    motion_mean: f64 = SynthConfig::default().motion_mean => "Mean per-frame motion";
    motion_jitter: f64 = SynthConfig::default().motion_jitter => "Log-scale spread of the motion regime";
    motion_persistence: f64 = SynthConfig::default().motion_persistence => "AR(1) coefficient of the motion regime";
    scene_rate: f64 = SynthConfig::default().scene_change_rate => "Expected scene changes per 100 frames";
    scene_spike: f64 = SynthConfig::default().scene_change_motion_spike => "Motion multiplier at a scene change (>= 5)";
    alpha: f64 = SynthConfig::default().alpha => "Linear quality decay per unit of accumulated motion";
    beta: f64 = SynthConfig::default().beta => "Quadratic quality decay";
    floor: f64 = SynthConfig::default().quality_floor => "Lowest propagated quality";
    dim: usize = SynthConfig::default().feature_dim => "Deviation feature dimension (>= 3)";
    sigma: f64 = SynthConfig::default().feature_noise_sigma => "Deviation feature noise";
    kappa: f64 = SynthConfig::default().agreement_kappa => "Agreement slope used by the pseudo reward";
    // train
    eta: f64 = TrainConfig::default().eta => "KAR limit of a training episode";
    episode_len: usize = TrainConfig::default().episode_len => "Decisions per episode (M)";
    trials: usize = TrainConfig::default().trials => "Trials per episode (K)";
    batch: usize = TrainConfig::default().batch_episodes => "Episodes per minibatch (B)";
    episodes: usize = TrainConfig::default().total_episodes => "Total training episodes";
    gamma: f64 = TrainConfig::default().gamma => "Discount factor";
    lambda1: f64 = TrainConfig::default().lambda1 => "Entropy bonus weight";
    epsilon: f64 = TrainConfig::default().epsilon => "Epsilon-greedy threshold";
    reward: RewardMode = TrainConfig::default().reward_mode => "Reward: groundtruth | pseudo";
    reward_scale: f64 = TrainConfig::default().reward_scale => "Multiplier applied to rewards";
    baseline: BaselineMode = TrainConfig::default().baseline_mode => "Baseline: per-step | mean-return | none";
    returns: ReturnMode = TrainConfig::default().return_mode => "Return: reward-to-go | total";
    lr: f64 = TrainConfig::default().learning_rate => "RMSProp learning rate";
    rms_decay: f64 = TrainConfig::default().rms_decay => "RMSProp decay";
    hidden: Vec<usize> = vec![64, 64, 16] => "Hidden layer sizes";
    lkd_scale: f64 = 100.0 => "Divisor applied to LKD before it enters the network";
    init: String = String::new() => "Checkpoint to resume training from";
    checkpoint_every: usize = 0 => "Also save policy_<episode>.ksp every N episodes (0: off)";
    // eval and sweep
    scheduler: String = "fixed".into() => "Scheduler: fixed | random | magnitude | deviation | policy";
    control: f64 = 20.0 => "Operating point: interval, key probability, threshold or tau";
    target_aki: f64 = 0.0 => "Policy only: calibrate tau to this AKI (0: use control)";
    bin_width: usize = 5 => "CKI histogram bin width";
    dump_rollouts: bool = false => "Write rollout_<idx>.csv for every trace";
    fit_traces: String = String::new() => "Traces used to fit the deviation regressor (default: traces)";
    fit_gap: usize = 60 => "Largest key distance in regressor training pairs";
    sweep: String = "fixed=5,10,20,40,80".into() => "Sweep entries: name=c1,c2;name=c1,...";
    oracle: bool = false => "Add oracle rows to the sweep";
    budget: Vec<usize> = vec![10, 20, 40] => "Per-trace key budgets for oracle rows";
    key_fps: f64 = 10.1 => "Throughput of the full segmentation network";
    nonkey_fps: f64 = 153.8 => "Throughput of feature propagation";
    sched_ms: f64 = 1.0 => "Scheduler overhead per frame in milliseconds";
    // plot
    input: String = String::new() => "Curve CSV to plot (default: <out>/curve.csv)";
}

pub const SCHEDULERS: [&str; 5] = ["fixed", "random", "magnitude", "deviation", "policy"];

impl RunConfig {
    /// Applies `key = value` lines. Blank lines and lines starting with `#`
    /// are ignored; unknown or repeated keys are errors.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| CliError::Config(format!("{}:{}: {m}", origin.display(), i + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `key = value`".into()))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(bad(format!("key `{k}` given twice")));
            }
            self.set(k, v).map_err(|e| match e {
                CliError::Config(m) => bad(m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Renders every key; parsing the result gives back an equal config.
    pub fn dump(&self) -> String {
        let mut s = String::from("# keysched run configuration\n");
        for k in KEYS {
            let _ = writeln!(s, "{} = {}", k.name, self.get(k.name).unwrap_or_default());
        }
        s
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_frames: self.frames,
            base_quality_mean: self.quality_mean,
            base_quality_jitter: self.quality_jitter,
            motion_mean: self.motion_mean,
            motion_jitter: self.motion_jitter,
            motion_persistence: self.motion_persistence,
            scene_change_rate: self.scene_rate,
            scene_change_motion_spike: self.scene_spike,
            alpha: self.alpha,
            beta: self.beta,
            quality_floor: self.floor,
            feature_dim: self.dim,
            feature_noise_sigma: self.sigma,
            agreement_kappa: self.kappa,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            episode_len: self.episode_len,
            trials: self.trials,
            batch_episodes: self.batch,
            total_episodes: self.episodes,
            gamma: self.gamma,
            lambda1: self.lambda1,
            epsilon: self.epsilon,
            reward_mode: self.reward,
            reward_scale: self.reward_scale,
            baseline_mode: self.baseline,
            return_mode: self.returns,
            learning_rate: self.lr,
            rms_decay: self.rms_decay,
            seed: self.seed,
        }
    }

    /// Policy architecture for `input_dim`-dimensional traces.
    pub fn arch(&self, input_dim: usize) -> PolicyArch {
        let mut a = PolicyArch::new(input_dim).with_hidden(self.hidden.clone());
        a.lkd_scale = self.lkd_scale;
        a
    }

    pub fn cost(&self) -> CostModel {
        CostModel { t_key: 1.0 / self.key_fps, t_nonkey: 1.0 / self.nonkey_fps, t_sched: self.sched_ms / 1000.0 }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            self.out_dir().join("policy.ksp")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: keysched_core::Error| CliError::Config(e.to_string());
        self.synth().validate().map_err(cfg)?;
        self.train().validate().map_err(cfg)?;
        self.cost().validate().map_err(cfg)?;
        self.arch(self.dim).validate().map_err(cfg)?;
        if self.jobs == 0 {
            return Err(CliError::Config("jobs: must be at least 1".into()));
        }
        if self.bin_width == 0 {
            return Err(CliError::Config("bin_width: must be at least 1".into()));
        }
        if !SCHEDULERS.contains(&self.scheduler.as_str()) {
            return Err(CliError::Config(format!("scheduler: `{}` is not one of {}", self.scheduler, SCHEDULERS.join(", "))));
        }
        if !(self.target_aki.is_finite() && self.target_aki >= 0.0) {
            return Err(CliError::Config("target_aki: must be a nonnegative number".into()));
        }
        if self.budget.contains(&0) {
            return Err(CliError::Config("budget: every budget must be at least 1".into()));
        }
        self.sweep_entries()?;
        Ok(())
    }

    /// Parses `sweep` into `(scheduler, controls)` pairs.
    pub fn sweep_entries(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let mut out = Vec::new();
        for part in self.sweep.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, values) = part
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("sweep: `{part}` is not `name=c1,c2,...`")))?;
            let name = name.trim();
            if !SCHEDULERS.contains(&name) {
                return Err(CliError::Config(format!("sweep: unknown scheduler `{name}`")));
            }
            let controls = <Vec<f64>>::parse_value(values).map_err(|e| CliError::Config(format!("sweep: {e}")))?;
            if controls.is_empty() {
                return Err(CliError::Config(format!("sweep: `{name}` has no control values")));
            }
            out.push((name.to_string(), controls));
        }
        Ok(out)
    }
}
