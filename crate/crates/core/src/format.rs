//! Text formats: pool CSV, generative parameter dumps, and JSON with
//! round-trip scientific floats.
//!
//! Every float is written with Rust's shortest round-trip `{:e}` form, so
//! output is locale independent and parses back to the identical value.
//!
//! Parameter dump layout (one record per line, fields separated by spaces):
//!
//! ```text
//! pfpt-params 1
//! dim <d>
//! hidden <selection hidden> <variance hidden>
//! pool <n>
//! phi <d values>            (n lines)
//! selection <values>        (flat network parameters)
//! variance <values>
//! ```

use std::fmt::Write as _;
use std::io;

use serde::Serialize;

use crate::model::{GenerativeParams, GlobalPool, MlpParams, Nets, Prompt};
use crate::{PfptError, Result};

/// Shortest round-trip scientific notation.
pub fn sci(x: f64) -> String {
    format!("{x:e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.trim().parse().map_err(|_| PfptError::Parse {
        line,
        message: format!("not a number: `{tok}`"),
    })?;
    if !v.is_finite() {
        return Err(PfptError::Parse {
            line,
            message: format!("non-finite value `{tok}`"),
        });
    }
    Ok(v)
}

/// Header `d0,d1,...` then one prompt per row.
pub fn prompts_to_csv(prompts: &[Prompt]) -> String {
    let d = prompts.first().map_or(0, Prompt::dim);
    let mut out = (0..d).map(|j| format!("d{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for p in prompts {
        let row: Vec<String> = p.as_slice().iter().map(|&x| sci(x)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn pool_to_csv(pool: &GlobalPool) -> String {
    prompts_to_csv(pool.prompts())
}

/// Reads prompt CSV as written by [`prompts_to_csv`]. A header row is
/// recognised by a non-numeric first field; blank lines are skipped.
pub fn parse_prompts_csv(text: &str) -> Result<Vec<Prompt>> {
    let mut out: Vec<Prompt> = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if out.is_empty() && dim.is_none() && fields[0].trim().parse::<f64>().is_err() {
            dim = Some(fields.len());
            continue;
        }
        let values = fields.iter().map(|f| parse_f64(f, line)).collect::<Result<Vec<_>>>()?;
        match dim {
            Some(d) if d != values.len() => {
                return Err(PfptError::Parse {
                    line,
                    message: format!("expected {d} columns, found {}", values.len()),
                })
            }
            None => dim = Some(values.len()),
            _ => {}
        }
        out.push(Prompt::new(values).map_err(|e| PfptError::Parse {
            line,
            message: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(PfptError::Empty("prompt CSV"));
    }
    Ok(out)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|&x| sci(x)).collect::<Vec<_>>().join(" ")
}

pub fn params_to_text(gp: &GenerativeParams) -> String {
    let mut out = String::from("pfpt-params 1\n");
    let _ = writeln!(out, "dim {}", gp.dim());
    let _ = writeln!(
        out,
        "hidden {} {}",
        gp.nets.selection.hidden_dim(),
        gp.nets.variance.hidden_dim()
    );
    let _ = writeln!(out, "pool {}", gp.pool.len());
    for p in gp.pool.prompts() {
        let _ = writeln!(out, "phi {}", join(p.as_slice()));
    }
    let _ = writeln!(out, "selection {}", join(gp.nets.selection.as_slice()));
    let _ = writeln!(out, "variance {}", join(gp.nets.variance.as_slice()));
    out
}

pub fn params_from_text(text: &str) -> Result<GenerativeParams> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut next = |key: &str| -> Result<(usize, Vec<String>)> {
        let (i, l) = lines.next().ok_or_else(|| PfptError::Parse {
            line: 0,
            message: format!("unexpected end of input, expected `{key}`"),
        })?;
        let mut toks = l.split_whitespace();
        let head = toks.next().unwrap_or_default();
        if head != key {
            return Err(PfptError::Parse {
                line: i + 1,
                message: format!("expected `{key}`, found `{head}`"),
            });
        }
        Ok((i + 1, toks.map(str::to_owned).collect()))
    };
    let int = |line: usize, tok: Option<&String>| -> Result<usize> {
        tok.and_then(|t| t.parse().ok()).ok_or(PfptError::Parse {
            line,
            message: "expected a non-negative integer".into(),
        })
    };
    let floats = |line: usize, toks: &[String]| -> Result<Vec<f64>> { toks.iter().map(|t| parse_f64(t, line)).collect() };

    let (line, v) = next("pfpt-params")?;
    if v.first().map(String::as_str) != Some("1") {
        return Err(PfptError::Parse {
            line,
            message: "unsupported parameter format version".into(),
        });
    }
    let (line, v) = next("dim")?;
    let d = int(line, v.first())?;
    let (line, v) = next("hidden")?;
    let (hs, hv) = (int(line, v.first())?, int(line, v.get(1))?);
    let (line, v) = next("pool")?;
    let n = int(line, v.first())?;
    let mut prompts = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, v) = next("phi")?;
        let values = floats(line, &v)?;
        if values.len() != d {
            return Err(PfptError::Parse {
                line,
                message: format!("expected {d} values, found {}", values.len()),
            });
        }
        prompts.push(Prompt::new(values)?);
    }
    let (line, v) = next("selection")?;
    let selection = MlpParams::from_flat(d, hs, 1, floats(line, &v)?).map_err(|e| PfptError::Parse {
        line,
        message: e.to_string(),
    })?;
    let (line, v) = next("variance")?;
    let variance = MlpParams::from_flat(d, hv, d, floats(line, &v)?).map_err(|e| PfptError::Parse {
        line,
        message: e.to_string(),
    })?;
    GenerativeParams::new(GlobalPool::new(prompts)?, Nets { selection, variance })
}

/// JSON formatter that writes floats as `{:e}`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SciFormatter;

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:e}")
    }
}

/// Compact single-line JSON with scientific floats.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| PfptError::Io(io::Error::other(e)))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
