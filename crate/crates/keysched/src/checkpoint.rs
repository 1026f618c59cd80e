//! `KEYSCHED-POLICY v1` checkpoint format: architecture, parameters and the
//! optimizer state needed to resume training bit-exactly.
//!
//! ```text
//! KEYSCHED-POLICY v1
//! arch: input_dim=8 hidden=64,64,16 lkd_scale=... deviation_scale=...
//! optimizer: lr=... rho=... eps=... episodes_done=2400
//! W0,64,8
//! <64 rows of 8 values>
//! b0,1,64
//! <1 row of 64 values>
//! ...
//! acc.W0,64,8
//! ...
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use keysched_core::policy::{PolicyArch, PolicyParams, RmsProp};

use crate::error::{CliError, Result};
use crate::fmt_f64;

pub const MAGIC: &str = "KEYSCHED-POLICY";
pub const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub optimizer: RmsProp,
    pub episodes_done: usize,
}

/// `(name, rows, cols, offset)` of every tensor inside the flat vector.
fn tensors(arch: &PolicyArch) -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (l, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
        out.push((format!("W{l}"), fan_out, fan_in, offset));
        offset += fan_in * fan_out;
        out.push((format!("b{l}"), 1, fan_out, offset));
        offset += fan_out;
    }
    out
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> std::io::Result<()> {
    let arch = ckpt.params.arch();
    let hidden: Vec<String> = arch.hidden_sizes.iter().map(usize::to_string).collect();
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(
        w,
        "arch: input_dim={} hidden={} lkd_scale={} deviation_scale={}",
        arch.input_dim,
        hidden.join(","),
        fmt_f64(arch.lkd_scale),
        join(&arch.deviation_scale)
    )?;
    let opt = &ckpt.optimizer;
    writeln!(
        w,
        "optimizer: lr={} rho={} eps={} episodes_done={}",
        fmt_f64(opt.lr),
        fmt_f64(opt.rho),
        fmt_f64(opt.eps),
        ckpt.episodes_done
    )?;
    for (prefix, data) in [("", ckpt.params.as_flat()), ("acc.", opt.accumulators())] {
        for (name, rows, cols, offset) in tensors(arch) {
            writeln!(w, "{prefix}{name},{rows},{cols}")?;
            for r in 0..rows {
                writeln!(w, "{}", join(&data[offset + r * cols..offset + (r + 1) * cols]))?;
            }
        }
    }
    w.flush()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), ckpt).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(BufReader::new(file), path)
}

/// Splits `key=value` items of a `label:` line.
fn fields<'a>(line: &'a str, label: &str, keys: &[&str], bad: &dyn Fn(String) -> CliError) -> Result<Vec<&'a str>> {
    let body = line
        .strip_prefix(label)
        .and_then(|s| s.strip_prefix(':'))
        .ok_or_else(|| bad(format!("expected a `{label}:` line")))?;
    let mut out: Vec<Option<&str>> = vec![None; keys.len()];
    for item in body.split_whitespace() {
        let (k, v) = item.split_once('=').ok_or_else(|| bad(format!("malformed field `{item}`")))?;
        let slot = keys.iter().position(|&x| x == k).ok_or_else(|| bad(format!("unknown field `{k}`")))?;
        if out[slot].replace(v).is_some() {
            return Err(bad(format!("duplicate field `{k}`")));
        }
    }
    out.into_iter()
        .zip(keys)
        .map(|(v, k)| v.ok_or_else(|| bad(format!("missing field `{k}`"))))
        .collect()
}

pub fn read_checkpoint<R: BufRead>(reader: R, origin: &Path) -> Result<Checkpoint> {
    let mut lines = reader.lines();
    let mut line_no = 0usize;
    let mut next = |what: &str| -> Result<(usize, String)> {
        line_no += 1;
        match lines.next() {
            Some(Ok(l)) => Ok((line_no, l)),
            Some(Err(e)) => Err(CliError::io(origin, e)),
            None => Err(CliError::format(origin, line_no, format!("unexpected end of file, expected {what}"))),
        }
    };

    let (n, magic) = next("the format header")?;
    match magic.trim_end().split_once(' ') {
        Some((MAGIC, VERSION)) => {}
        Some((MAGIC, other)) => {
            return Err(CliError::Version { path: origin.to_path_buf(), found: other.to_string(), expected: VERSION })
        }
        _ => return Err(CliError::format(origin, n, format!("expected `{MAGIC} {VERSION}`"))),
    }

    let (n, line) = next("the arch line")?;
    let bad = |m: String| CliError::format(origin, n, m);
    let f = fields(line.trim_end(), "arch", &["input_dim", "hidden", "lkd_scale", "deviation_scale"], &bad)?;
    let input_dim = f[0].parse::<usize>().map_err(|_| bad(format!("bad input_dim `{}`", f[0])))?;
    let hidden = f[1]
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad hidden size `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let lkd_scale = f[2].parse::<f64>().map_err(|_| bad(format!("bad lkd_scale `{}`", f[2])))?;
    let deviation_scale = f[3]
        .split(',')
        .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad deviation_scale entry `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let arch = PolicyArch { input_dim, hidden_sizes: hidden, lkd_scale, deviation_scale };
    arch.validate().map_err(|e| bad(e.to_string()))?;

    let (n, line) = next("the optimizer line")?;
    let bad = |m: String| CliError::format(origin, n, m);
    let f = fields(line.trim_end(), "optimizer", &["lr", "rho", "eps", "episodes_done"], &bad)?;
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
    let (lr, rho, eps) = (num(f[0])?, num(f[1])?, num(f[2])?);
    let episodes_done = f[3].parse::<usize>().map_err(|_| bad(format!("bad episodes_done `{}`", f[3])))?;

    let total = arch.num_params();
    let mut blocks = [vec![0.0; total], vec![0.0; total]];
    for (prefix, data) in ["", "acc."].into_iter().zip(blocks.iter_mut()) {
        for (name, rows, cols, offset) in tensors(&arch) {
            let want = format!("{prefix}{name},{rows},{cols}");
            let (n, header) = next(&format!("tensor `{want}`"))?;
            if header.trim_end() != want {
                return Err(CliError::format(origin, n, format!("expected tensor header `{want}`")));
            }
            for r in 0..rows {
                let (n, row) = next(&format!("row {r} of `{prefix}{name}`"))?;
                let values: Vec<&str> = row.trim_end().split(',').collect();
                if values.len() != cols {
                    return Err(CliError::format(origin, n, format!("expected {cols} values, found {}", values.len())));
                }
                for (c, s) in values.into_iter().enumerate() {
                    data[offset + r * cols + c] = s
                        .parse::<f64>()
                        .map_err(|_| CliError::format(origin, n, format!("`{s}` is not a number")))?;
                }
            }
        }
    }
    let [flat, acc] = blocks;
    let params = PolicyParams::from_flat(arch, flat).map_err(|e| CliError::format(origin, 2, e.to_string()))?;
    let optimizer = RmsProp::from_parts(lr, rho, eps, acc).map_err(|e| CliError::format(origin, 3, e.to_string()))?;
    Ok(Checkpoint { params, optimizer, episodes_done })
}

#[cfg(test)]
mod tests {
    use super::*;
    use keysched_core::policy::{init_params, Gradient};

    fn sample() -> Checkpoint {
        let arch = PolicyArch::new(5).with_hidden(vec![4, 3]);
        let mut params = init_params(&arch, 9).unwrap();
        let mut optimizer = RmsProp::new(&params, 0.001);
        let g: Vec<f64> = (0..params.as_flat().len()).map(|i| (i as f64 * 0.37).sin()).collect();
        optimizer.step(&mut params, &Gradient::from_flat(g)).unwrap();
        Checkpoint { params, optimizer, episodes_done: 16 }
    }

    fn text(c: &Checkpoint) -> String {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, c).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let s = text(&c);
        let back = read_checkpoint(s.as_bytes(), Path::new("p.ksp")).unwrap();
        assert_eq!(back, c);
        assert_eq!(text(&back), s);
        assert!(s.contains("\nW0,4,5\n"));
        assert!(s.contains("\nacc.b2,1,2\n"));
    }

    #[test]
    fn malformed_checkpoints_are_rejected() {
        let s = text(&sample());
        let p = Path::new("p.ksp");
        assert!(matches!(read_checkpoint(s.replacen("v1", "v7", 1).as_bytes(), p), Err(CliError::Version { .. })));
        let mut lines: Vec<String> = s.lines().map(String::from).collect();
        lines[4] = "1.0,2.0".into();
        match read_checkpoint(lines.join("\n").as_bytes(), p) {
            Err(CliError::Format { line: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        let truncated: Vec<&str> = s.lines().take(10).collect();
        assert!(matches!(read_checkpoint(truncated.join("\n").as_bytes(), p), Err(CliError::Format { line: 11, .. })));
        let renamed = s.replacen("W1,3,4", "W9,3,4", 1);
        assert!(matches!(read_checkpoint(renamed.as_bytes(), p), Err(CliError::Format { .. })));
    }
}
