//! `KEYSCHED-TRACE v1` text format.
//!
//! ```text
//! KEYSCHED-TRACE v1
//! params: n_frames=3 alpha=... beta=... floor=... d=8 sigma=... kappa=... seed=7
//! frame,key_quality,motion,scene_change
//! 0,8.5000000000000000e-1,0.0000000000000000e0,0
//! ...
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use keysched_core::env::{Trace, TraceParams};

use crate::error::{CliError, Result};
use crate::fmt_f64;

pub const MAGIC: &str = "KEYSCHED-TRACE";
pub const VERSION: &str = "v1";
const HEADER: &str = "frame,key_quality,motion,scene_change";
const PARAM_KEYS: [&str; 8] = ["n_frames", "alpha", "beta", "floor", "d", "sigma", "kappa", "seed"];

pub fn write_trace<W: Write>(mut w: W, trace: &Trace) -> std::io::Result<()> {
    let p = trace.params();
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(
        w,
        "params: n_frames={} alpha={} beta={} floor={} d={} sigma={} kappa={} seed={}",
        trace.n_frames(),
        fmt_f64(p.alpha),
        fmt_f64(p.beta),
        fmt_f64(p.quality_floor),
        p.feature_dim,
        fmt_f64(p.feature_noise_sigma),
        fmt_f64(p.agreement_kappa),
        p.seed
    )?;
    writeln!(w, "{HEADER}")?;
    let mut scenes = trace.scene_changes().iter().peekable();
    for (f, (q, m)) in trace.key_quality().iter().zip(trace.motion()).enumerate() {
        let sc = scenes.next_if_eq(&&f).is_some();
        writeln!(w, "{f},{},{},{}", fmt_f64(*q), fmt_f64(*m), u8::from(sc))?;
    }
    w.flush()
}

pub fn save_trace(path: &Path, trace: &Trace) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_trace(std::io::BufWriter::new(file), trace).map_err(|e| CliError::io(path, e))
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_trace(BufReader::new(file), path)
}

/// Parses a trace; `origin` is only used in error messages.
pub fn read_trace<R: BufRead>(reader: R, origin: &Path) -> Result<Trace> {
    let bad = |line: usize, msg: String| CliError::format(origin, line, msg);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((_, Err(e))) => Err(CliError::io(origin, e)),
            None => Err(CliError::format(origin, 0, format!("unexpected end of file, expected {what}"))),
        }
    };

    let (n, magic) = next("the format header")?;
    match magic.trim_end().split_once(' ') {
        Some((MAGIC, VERSION)) => {}
        Some((MAGIC, other)) => {
            return Err(CliError::Version { path: origin.to_path_buf(), found: other.to_string(), expected: VERSION })
        }
        _ => return Err(bad(n, format!("expected `{MAGIC} {VERSION}`"))),
    }

    let (n, params_line) = next("the params line")?;
    let body = params_line
        .strip_prefix("params:")
        .ok_or_else(|| bad(n, "expected a `params:` line".into()))?;
    let mut values: [Option<&str>; 8] = [None; 8];
    for item in body.split_whitespace() {
        let (k, v) = item.split_once('=').ok_or_else(|| bad(n, format!("malformed parameter `{item}`")))?;
        let slot = PARAM_KEYS
            .iter()
            .position(|&p| p == k)
            .ok_or_else(|| bad(n, format!("unknown parameter `{k}`")))?;
        if values[slot].replace(v).is_some() {
            return Err(bad(n, format!("duplicate parameter `{k}`")));
        }
    }
    let get = |i: usize| values[i].ok_or_else(|| bad(n, format!("missing parameter `{}`", PARAM_KEYS[i])));
    let float = |i: usize| -> Result<f64> {
        let s = get(i)?;
        s.parse::<f64>().map_err(|_| bad(n, format!("`{}` is not a number: {s}", PARAM_KEYS[i])))
    };
    let int = |i: usize| -> Result<u64> {
        let s = get(i)?;
        s.parse::<u64>().map_err(|_| bad(n, format!("`{}` is not an integer: {s}", PARAM_KEYS[i])))
    };
    let n_frames = int(0)? as usize;
    let params = TraceParams {
        alpha: float(1)?,
        beta: float(2)?,
        quality_floor: float(3)?,
        feature_dim: int(4)? as usize,
        feature_noise_sigma: float(5)?,
        agreement_kappa: float(6)?,
        seed: int(7)?,
    };
    let params_line_no = n;

    let (n, header) = next("the column header")?;
    if header.trim_end() != HEADER {
        return Err(bad(n, format!("expected header `{HEADER}`")));
    }

    let mut key_quality = Vec::with_capacity(n_frames);
    let mut motion = Vec::with_capacity(n_frames);
    let mut scenes = Vec::new();
    loop {
        let (n, row) = match lines.next() {
            None => break,
            Some((n, Ok(l))) => (n, l),
            Some((_, Err(e))) => return Err(CliError::io(origin, e)),
        };
        if row.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = row.trim_end().split(',').collect();
        if cols.len() != 4 {
            return Err(bad(n, format!("expected 4 columns, found {}", cols.len())));
        }
        let frame = key_quality.len();
        if cols[0].parse::<usize>().ok() != Some(frame) {
            return Err(bad(n, format!("expected frame index {frame}, found `{}`", cols[0])));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(n, format!("{what} is not a number: `{s}`")));
        key_quality.push(num(cols[1], "key_quality")?);
        motion.push(num(cols[2], "motion")?);
        match cols[3] {
            "0" => {}
            "1" => scenes.push(frame),
            other => return Err(bad(n, format!("scene_change must be 0 or 1, found `{other}`"))),
        }
    }
    if key_quality.len() != n_frames {
        return Err(bad(params_line_no, format!("declares {n_frames} frames but {} rows follow", key_quality.len())));
    }
    Trace::new(params, key_quality, motion, scenes).map_err(|e| bad(params_line_no, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use keysched_core::env::{gen_trace, SynthConfig};

    fn text(t: &Trace) -> String {
        let mut buf = Vec::new();
        write_trace(&mut buf, t).unwrap();
        String::from_utf8(buf).unwrap()
    }

    fn parse(s: &str) -> Result<Trace> {
        read_trace(s.as_bytes(), Path::new("t.ksch"))
    }

    #[test]
    fn round_trip_is_exact() {
        let t = gen_trace(&SynthConfig { n_frames: 200, ..Default::default() }, 11).unwrap();
        let s = text(&t);
        let back = parse(&s).unwrap();
        assert_eq!(back.key_quality(), t.key_quality());
        assert_eq!(back.motion(), t.motion());
        assert_eq!(back.scene_changes(), t.scene_changes());
        assert_eq!(back.params(), t.params());
        assert_eq!(text(&back), s);
        assert!(s.starts_with("KEYSCHED-TRACE v1\nparams: n_frames=200 "));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let t = gen_trace(&SynthConfig { n_frames: 5, ..Default::default() }, 1).unwrap();
        let good = text(&t);

        let v2 = good.replacen("v1", "v2", 1);
        assert!(matches!(parse(&v2), Err(CliError::Version { .. })));

        let mut rows: Vec<&str> = good.lines().collect();
        rows[5] = "2,0.9,abc,0";
        match parse(&rows.join("\n")) {
            Err(CliError::Format { line, message, .. }) => {
                assert_eq!(line, 6);
                assert!(message.contains("motion"));
            }
            other => panic!("{other:?}"),
        }

        let short: Vec<&str> = good.lines().take(6).collect();
        assert!(matches!(parse(&short.join("\n")), Err(CliError::Format { line: 2, .. })));

        let unknown = good.replacen("seed=", "colour=1 seed=", 1);
        assert!(matches!(parse(&unknown), Err(CliError::Format { line: 2, .. })));

        assert!(matches!(parse(""), Err(CliError::Format { line: 0, .. })));
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_traces_round_trip(
            frames in proptest::collection::vec((0.31f64..=1.0, 0.0f64..1e3, proptest::bool::ANY), 1..40),
            alpha in 0.0f64..1.0,
            sigma in 0.0f64..1.0,
            seed in proptest::num::u64::ANY,
        ) {
            let params = TraceParams { alpha, feature_noise_sigma: sigma, seed, ..Default::default() };
            let q = frames.iter().map(|f| f.0).collect();
            let mut m: Vec<f64> = frames.iter().map(|f| f.1).collect();
            m[0] = 0.0;
            let scenes = frames.iter().enumerate().filter(|(_, f)| f.2).map(|(i, _)| i).collect();
            let t = Trace::new(params, q, m, scenes).unwrap();
            proptest::prop_assert_eq!(parse(&text(&t)).unwrap(), t);
        }
    }
}
