use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use keysched::config::KEYS;
use keysched::{commands, CliError, Result, RunConfig};

const SUBCOMMANDS: [(&str, &str); 6] = [
    ("gen", "Generate synthetic traces into the output directory"),
    ("train", "Train a key-scheduling policy with REINFORCE"),
    ("eval", "Evaluate one scheduler at one operating point"),
    ("sweep", "Evaluate schedulers over a grid of operating points"),
    ("oracle", "Compute budget-constrained optimal schedules"),
    ("plot", "Render quality curves from a curve CSV as SVG"),
];

fn cli() -> Command {
    let mut cmd = Command::new("keysched")
        .about("Simulator and policy trainer for key-frame scheduling")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .global(true)
                .help("Read `key = value` settings from FILE"),
        )
        .arg(
            Arg::new("dump-config")
                .long("dump-config")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("Print the merged configuration and exit"),
        );
    for key in KEYS {
        let mut arg = Arg::new(key.name).long(key.name.replace('_', "-")).help(key.help).global(true);
        arg = if key.is_switch { arg.action(ArgAction::SetTrue) } else { arg.value_name("VALUE") };
        cmd = cmd.arg(arg);
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

fn merged_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var("KEYSCHED_SEED") {
        cfg.set("seed", &seed).map_err(|e| CliError::Config(format!("KEYSCHED_SEED: {e}")))?;
    }
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(path))?;
    }
    for key in KEYS {
        if m.value_source(key.name) != Some(ValueSource::CommandLine) {
            continue;
        }
        if key.is_switch {
            cfg.set(key.name, "true")?;
        } else if let Some(v) = m.get_one::<String>(key.name) {
            cfg.set(key.name, v)?;
        }
    }
    Ok(cfg)
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = merged_config(m)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if m.get_flag("dump-config") {
        return out.write_all(cfg.dump().as_bytes()).map_err(|e| CliError::io("<stdout>", e));
    }
    match name {
        "gen" => commands::gen(&cfg, &mut out).map(drop),
        "train" => commands::train(&cfg, &mut out).map(drop),
        "eval" => commands::eval(&cfg, &mut out).map(drop),
        "sweep" => commands::sweep(&cfg, &mut out).map(drop),
        "oracle" => commands::oracle(&cfg, &mut out).map(drop),
        "plot" => commands::plot(&cfg, &mut out).map(drop),
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_is_well_formed() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file_and_defaults() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("run.cfg");
        std::fs::write(&file, "eta = 0.06\nlr = 0.5\n").unwrap();
        let m = cli()
            .try_get_matches_from(["keysched", "train", "--config", file.to_str().unwrap(), "--lr", "0.25", "--mkdir"])
            .unwrap();
        let cfg = merged_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!((cfg.eta, cfg.lr, cfg.mkdir), (0.06, 0.25, true));
        assert_eq!(cfg.episodes, RunConfig::default().episodes);
    }
}
