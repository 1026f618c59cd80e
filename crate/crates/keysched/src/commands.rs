//! The subcommands. Each takes a fully merged [`RunConfig`] and a sink for
//! the human-readable summary, so they can be driven from tests as well as
//! from `main`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use keysched_core::env::{gen_trace, Trace};
use keysched_core::eval::{
    self, build_scheduler, calibrate_tau, cki_histogram, oracle_schedule, run_all, CurveRow, EvalMetrics,
    SchedulerKind, SweepEntry,
};
use keysched_core::policy::{init_params, PolicyParams};
use keysched_core::rng::derive_key;
use keysched_core::schedulers::AgreementRegressor;
use keysched_core::trainer::{Executor, Trainer};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::csv::{self as out_csv, OracleRow};
use crate::error::{CliError, Result};
use crate::exec::Parallel;
use crate::plot::{self, XAxis};
use crate::trace_file::{load_trace, save_trace};

pub const TRACE_EXT: &str = "ksch";
/// Bisection steps used when calibrating `tau` to a target AKI.
pub const CALIBRATION_ITERS: usize = 60;

fn not_found(path: &Path, what: &str) -> CliError {
    CliError::io(path, io::Error::new(io::ErrorKind::NotFound, what.to_string()))
}

/// Returns the output directory, creating it when `mkdir` is set.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    if dir.is_dir() {
        return Ok(dir);
    }
    if dir.exists() {
        return Err(CliError::io(&dir, io::Error::new(io::ErrorKind::AlreadyExists, "not a directory")));
    }
    if !cfg.mkdir {
        return Err(not_found(&dir, "output directory does not exist (use --mkdir to create it)"));
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io("<stdout>", e))
}

/// Sort key of `trace_<seed>_<idx>.ksch`; other names sort after, by name.
fn trace_order(path: &Path) -> (u8, u64, u64, String) {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
    let nums = stem
        .strip_prefix("trace_")
        .and_then(|r| r.split_once('_'))
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
    match nums {
        Some((s, i)) => (0, s, i, stem),
        None => (1, 0, 0, stem),
    }
}

/// Loads every `*.ksch` file of `dir` in a stable order.
pub fn load_traces(dir: &Path) -> Result<Vec<Trace>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(TRACE_EXT) && path.is_file() {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(not_found(dir, "no .ksch trace files"));
    }
    paths.sort_by_key(|p| trace_order(p));
    paths.iter().map(|p| load_trace(p)).collect()
}

pub fn trace_file_name(seed: u64, idx: usize) -> String {
    format!("trace_{seed}_{idx}.{TRACE_EXT}")
}

/// Generates `n` traces into the output directory.
pub fn gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.n == 0 {
        return Err(CliError::Config("n: must be at least 1".into()));
    }
    let dir = prepare_out(cfg)?;
    let synth = cfg.synth();
    let exec = Parallel::new(cfg.jobs)?;
    let traces = exec.map(cfg.n, |i| gen_trace(&synth, derive_key(cfg.seed, &[i as u64])));
    let mut paths = Vec::with_capacity(cfg.n);
    for (i, t) in traces.into_iter().enumerate() {
        let path = dir.join(trace_file_name(cfg.seed, i));
        save_trace(&path, &t?)?;
        paths.push(path);
    }
    say(out, format_args!("wrote {} traces of {} frames to {}", cfg.n, cfg.frames, dir.display()))?;
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub episodes_done: usize,
    pub checkpoint: PathBuf,
    /// Means over the last minibatch of this invocation, if any ran.
    pub final_return: Option<f64>,
    pub final_kar: Option<f64>,
}

/// Trains (or resumes) a policy and writes the checkpoint and training log.
pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let traces = load_traces(Path::new(&cfg.traces))?;
    let dir = prepare_out(cfg)?;
    let ckpt_path = cfg.checkpoint_path();
    if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(not_found(parent, "checkpoint directory does not exist"));
        }
    }
    let exec = Parallel::new(cfg.jobs)?;
    let tcfg = cfg.train();
    let mut trainer = if cfg.init.is_empty() {
        let params = init_params(&cfg.arch(traces[0].feature_dim()), cfg.seed)?;
        Trainer::new(&traces, tcfg, params)?
    } else {
        let ck = load_checkpoint(Path::new(&cfg.init))?;
        Trainer::resume(&traces, tcfg, ck.params, ck.optimizer, ck.episodes_done)?
    };

    let every = cfg.checkpoint_every;
    loop {
        let before = trainer.episodes_done();
        if trainer.step_batch(&exec)? == 0 {
            break;
        }
        let after = trainer.episodes_done();
        if every > 0 && before / every != after / every {
            let path = dir.join(format!("policy_{after}.ksp"));
            save_checkpoint(&path, &snapshot(&trainer))?;
        }
    }
    save_checkpoint(&ckpt_path, &snapshot(&trainer))?;
    let log_path = dir.join("train_log.csv");
    write_file(&log_path, |w| out_csv::write_train_log(w, trainer.log()))?;

    let batch = cfg.batch.min(trainer.log().len());
    let last = &trainer.log()[trainer.log().len() - batch..];
    let mean = |f: fn(&keysched_core::trainer::TrainLogRow) -> f64| {
        (!last.is_empty()).then(|| last.iter().map(f).sum::<f64>() / last.len() as f64)
    };
    let summary = TrainSummary {
        episodes_done: trainer.episodes_done(),
        checkpoint: ckpt_path,
        final_return: mean(|r| r.mean_return),
        final_kar: mean(|r| r.realized_kar),
    };
    match (summary.final_return, summary.final_kar) {
        (Some(r), Some(k)) => say(
            out,
            format_args!(
                "trained to {} episodes: last-batch mean return {r:.4}, realized KAR {k:.4}; saved {}",
                summary.episodes_done,
                summary.checkpoint.display()
            ),
        )?,
        _ => say(out, format_args!("already at {} episodes; saved {}", summary.episodes_done, summary.checkpoint.display()))?,
    }
    Ok(summary)
}

fn snapshot(t: &Trainer<'_>) -> Checkpoint {
    Checkpoint { params: t.params().clone(), optimizer: t.optimizer().clone(), episodes_done: t.episodes_done() }
}

/// Policy parameters and regressor, loaded only when a scheduler needs them.
struct Resources {
    params: Option<PolicyParams>,
    regressor: Option<AgreementRegressor>,
}

impl Resources {
    fn load<'s>(cfg: &RunConfig, names: impl Iterator<Item = &'s str> + Clone, traces: &[Trace]) -> Result<Self> {
        let mut names = names;
        let params = if names.clone().any(|n| n == "policy") {
            Some(load_checkpoint(&cfg.checkpoint_path())?.params)
        } else {
            None
        };
        let regressor = if names.any(|n| n == "deviation") {
            let fitted = if cfg.fit_traces.is_empty() {
                AgreementRegressor::fit_traces(traces, cfg.fit_gap)?
            } else {
                AgreementRegressor::fit_traces(&load_traces(Path::new(&cfg.fit_traces))?, cfg.fit_gap)?
            };
            Some(fitted)
        } else {
            None
        };
        Ok(Self { params, regressor })
    }

    fn kind(&self, name: &str, seed: u64) -> SchedulerKind<'_> {
        match name {
            "fixed" => SchedulerKind::Fixed,
            "random" => SchedulerKind::Random { seed },
            "magnitude" => SchedulerKind::Magnitude,
            "deviation" => SchedulerKind::Deviation(self.regressor.as_ref()),
            "policy" => SchedulerKind::Policy(self.params.as_ref().expect("loaded for policy")),
            other => unreachable!("validated scheduler name {other}"),
        }
    }
}

/// Evaluates one scheduler at one operating point.
pub fn eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<EvalMetrics> {
    cfg.validate()?;
    let traces = load_traces(Path::new(&cfg.traces))?;
    let dir = prepare_out(cfg)?;
    let cost = cfg.cost();
    let res = Resources::load(cfg, std::iter::once(cfg.scheduler.as_str()), &traces)?;
    let mut control = cfg.control;
    if cfg.scheduler == "policy" && cfg.target_aki > 0.0 {
        let params = res.params.as_ref().expect("loaded for policy");
        control = calibrate_tau(params, &traces, cfg.target_aki, &cost, CALIBRATION_ITERS)?.0;
    }
    let mut sched = build_scheduler(res.kind(&cfg.scheduler, cfg.seed), control)?;
    let rollouts = run_all(sched.as_mut(), &traces)?;
    let metrics = EvalMetrics::from_rollouts(&rollouts, &cost)?;
    let hist = cki_histogram(&rollouts, cfg.bin_width)?;

    let row = CurveRow::from_metrics(&cfg.scheduler, control, &metrics);
    write_file(&dir.join("metrics.csv"), |w| out_csv::write_curve(w, std::slice::from_ref(&row)))?;
    write_file(&dir.join("cki_hist.csv"), |w| out_csv::write_histogram(w, &hist))?;
    if cfg.dump_rollouts {
        for (i, r) in rollouts.iter().enumerate() {
            write_file(&dir.join(format!("rollout_{i}.csv")), |w| out_csv::write_rollout(w, r))?;
        }
    }
    say(
        out,
        format_args!(
            "{} control={} aki={:.3} mean_quality={:.5} sim_fps={:.3} keys={}/{} cki_mean={:.3} cki_var={:.3}",
            cfg.scheduler, control, metrics.aki, metrics.mean_quality, metrics.sim_fps, metrics.n_keys,
            metrics.n_frames, hist.mean, hist.variance
        ),
    )?;
    Ok(metrics)
}

fn check_budgets(cfg: &RunConfig, traces: &[Trace]) -> Result<()> {
    let shortest = traces.iter().map(Trace::n_frames).min().unwrap_or(0);
    if cfg.budget.is_empty() {
        return Err(CliError::Config("budget: at least one budget is required".into()));
    }
    if let Some(b) = cfg.budget.iter().find(|&&b| b > shortest) {
        return Err(CliError::Config(format!("budget: {b} exceeds the shortest trace ({shortest} frames)")));
    }
    Ok(())
}

/// Oracle operating points, one per budget, over whole traces.
fn oracle_points(cfg: &RunConfig, traces: &[Trace], exec: &Parallel) -> Result<Vec<(OracleRow, CurveRow)>> {
    let cost = cfg.cost();
    let nt = traces.len();
    let results = exec.map(cfg.budget.len() * nt, |j| {
        let t = &traces[j % nt];
        oracle_schedule(t, 0, t.n_frames(), cfg.budget[j / nt])
    });
    let mut results = results.into_iter();
    let mut rows = Vec::new();
    for &b in &cfg.budget {
        let (mut keys, mut frames, mut total) = (0usize, 0usize, 0.0);
        for t in traces {
            let s = results.next().expect("one result per pair")?;
            keys += s.keys.len();
            frames += t.n_frames();
            total += s.total_quality;
        }
        let aki = frames as f64 / keys as f64;
        let quality = total / frames as f64;
        rows.push((
            OracleRow { budget: b, aki, quality },
            CurveRow {
                scheduler: "oracle".into(),
                control: b as f64,
                aki,
                mean_quality: quality,
                sim_fps: cost.sim_fps(frames, keys),
                n_keys: keys,
                n_frames: frames,
            },
        ));
    }
    Ok(rows)
}

/// Evaluates every sweep entry and writes `curve.csv`.
pub fn sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    let traces = load_traces(Path::new(&cfg.traces))?;
    if cfg.oracle {
        check_budgets(cfg, &traces)?;
    }
    let dir = prepare_out(cfg)?;
    let exec = Parallel::new(cfg.jobs)?;
    let spec = cfg.sweep_entries()?;
    let res = Resources::load(cfg, spec.iter().map(|(n, _)| n.as_str()), &traces)?;
    let entries: Vec<SweepEntry<'_>> = spec
        .iter()
        .map(|(name, controls)| SweepEntry { label: name.clone(), kind: res.kind(name, cfg.seed), controls: controls.clone() })
        .collect();
    let (mut rows, warnings) = eval::sweep(&entries, &traces, &cfg.cost(), &exec)?;
    for w in &warnings {
        say(out, format_args!("warning: skipped {} control {}: {}", w.scheduler, w.control, w.error))?;
    }
    if cfg.oracle {
        rows.extend(oracle_points(cfg, &traces, &exec)?.into_iter().map(|(_, c)| c));
        rows.sort_by(|a, b| a.aki.total_cmp(&b.aki));
    }
    let path = dir.join("curve.csv");
    write_file(&path, |w| out_csv::write_curve(w, &rows))?;
    say(out, format_args!("wrote {} operating points to {}", rows.len(), path.display()))?;
    Ok(rows)
}

/// Computes the budget-constrained optimum and writes `oracle.csv`.
pub fn oracle(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<OracleRow>> {
    cfg.validate()?;
    let traces = load_traces(Path::new(&cfg.traces))?;
    check_budgets(cfg, &traces)?;
    let dir = prepare_out(cfg)?;
    let exec = Parallel::new(cfg.jobs)?;
    let rows: Vec<OracleRow> = oracle_points(cfg, &traces, &exec)?.into_iter().map(|(o, _)| o).collect();
    let path = dir.join("oracle.csv");
    write_file(&path, |w| out_csv::write_oracle(w, &rows))?;
    for r in &rows {
        say(out, format_args!("budget {}: aki={:.3} quality={:.5}", r.budget, r.aki, r.quality))?;
    }
    Ok(rows)
}

/// Renders `aki_quality.svg` and `fps_quality.svg` from a curve CSV.
pub fn plot(cfg: &RunConfig, out: &mut dyn Write) -> Result<[PathBuf; 2]> {
    cfg.validate()?;
    let input = if cfg.input.is_empty() { cfg.out_dir().join("curve.csv") } else { PathBuf::from(&cfg.input) };
    let file = File::open(&input).map_err(|e| CliError::io(&input, e))?;
    let rows = out_csv::read_curve(io::BufReader::new(file), &input)?;
    let dir = prepare_out(cfg)?;
    let a = dir.join("aki_quality.svg");
    let f = dir.join("fps_quality.svg");
    let svg_a = plot::render(&rows, XAxis::Aki, "Quality vs average key interval");
    let svg_f = plot::render(&rows, XAxis::Fps, "Quality vs simulated throughput");
    write_file(&a, |w| w.write_all(svg_a.as_bytes()))?;
    write_file(&f, |w| w.write_all(svg_f.as_bytes()))?;
    say(out, format_args!("wrote {} and {}", a.display(), f.display()))?;
    Ok([a, f])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        RunConfig {
            out: dir.join("traces").display().to_string(),
            traces: dir.join("traces").display().to_string(),
            mkdir: true,
            n: 3,
            frames: 150,
            episode_len: 40,
            trials: 4,
            batch: 2,
            episodes: 4,
            hidden: vec![8],
            budget: vec![5, 10],
            sweep: "fixed=5,10;random=0.1,7;magnitude=5;policy=0.5".into(),
            oracle: true,
            ..Default::default()
        }
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        let mut sink = Vec::new();
        let paths = gen(&cfg, &mut sink).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[2].ends_with("trace_0_2.ksch"));

        cfg.out = tmp.path().join("run").display().to_string();
        let s = train(&cfg, &mut sink).unwrap();
        assert_eq!(s.episodes_done, 4);
        assert!(s.checkpoint.is_file());

        let m = eval(&RunConfig { scheduler: "fixed".into(), control: 10.0, ..cfg.clone() }, &mut sink).unwrap();
        assert_eq!(m.n_frames, 450);
        let calibrated =
            eval(&RunConfig { scheduler: "policy".into(), target_aki: 10.0, dump_rollouts: true, ..cfg.clone() }, &mut sink)
                .unwrap();
        assert!(calibrated.aki > 1.0);
        assert!(tmp.path().join("run/rollout_2.csv").is_file());
        eval(&RunConfig { scheduler: "deviation".into(), control: 0.5, ..cfg.clone() }, &mut sink).unwrap();

        let rows = sweep(&cfg, &mut sink).unwrap();
        assert_eq!(rows.len(), 5 + 2);
        assert!(rows.windows(2).all(|w| w[0].aki <= w[1].aki));
        let text = String::from_utf8(sink.clone()).unwrap();
        assert!(text.contains("warning: skipped random control 7"), "{text}");

        assert_eq!(oracle(&cfg, &mut sink).unwrap().len(), 2);
        let [a, f] = plot(&cfg, &mut sink).unwrap();
        assert!(a.is_file() && f.is_file());

        // resuming at the target episode count is a no-op that keeps the counter
        let resumed = train(
            &RunConfig { init: s.checkpoint.display().to_string(), checkpoint: tmp.path().join("again.ksp").display().to_string(), ..cfg.clone() },
            &mut sink,
        )
        .unwrap();
        assert_eq!((resumed.episodes_done, resumed.final_return), (4, None));
    }

    #[test]
    fn resumed_training_matches_uninterrupted_training() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.checkpoint_every = 2;
        gen(&cfg, &mut Vec::new()).unwrap();
        cfg.out = tmp.path().join("full").display().to_string();
        let full = train(&cfg, &mut Vec::new()).unwrap();
        let half = tmp.path().join("full/policy_2.ksp");
        assert!(half.is_file());
        let resumed = train(
            &RunConfig {
                out: tmp.path().join("resumed").display().to_string(),
                init: half.display().to_string(),
                ..cfg.clone()
            },
            &mut Vec::new(),
        )
        .unwrap();
        assert_eq!(load_checkpoint(&full.checkpoint).unwrap(), load_checkpoint(&resumed.checkpoint).unwrap());
    }

    #[test]
    fn error_classes() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(tmp.path());
        let mut sink = Vec::new();
        // missing trace directory is a file problem
        let err = train(&RunConfig { traces: tmp.path().join("nope").display().to_string(), ..cfg.clone() }, &mut sink)
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        // missing output directory without --mkdir
        gen(&cfg, &mut sink).unwrap();
        let err = eval(&RunConfig { out: tmp.path().join("x/y").display().to_string(), mkdir: false, ..cfg.clone() }, &mut sink)
            .unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
        // invalid values are configuration errors, caught before any work
        assert_eq!(train(&RunConfig { eta: 2.0, ..cfg.clone() }, &mut sink).unwrap_err().exit_code(), 2);
        assert_eq!(oracle(&RunConfig { budget: vec![151], ..cfg.clone() }, &mut sink).unwrap_err().exit_code(), 2);
        let err = eval(&RunConfig { scheduler: "fixed".into(), control: 2.5, ..cfg.clone() }, &mut sink).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn trace_order_is_numeric() {
        let mut v: Vec<PathBuf> =
            ["trace_1_10.ksch", "trace_1_2.ksch", "other.ksch", "trace_0_5.ksch"].iter().map(PathBuf::from).collect();
        v.sort_by_key(|p| trace_order(p));
        let names: Vec<_> = v.iter().map(|p| p.to_str().unwrap()).collect();
        assert_eq!(names, ["trace_0_5.ksch", "trace_1_2.ksch", "trace_1_10.ksch", "other.ksch"]);
    }
}
