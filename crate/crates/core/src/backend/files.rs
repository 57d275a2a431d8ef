//! Touchstone (version 1, Z parameters) and JSON multiport files.
//!
//! Touchstone Z values are read and written in ohms. JSON layout:
//!
//! ```text
//! { "z0": 50.0, "freq_ghz": [f0, f1, ...], "n_ports": N,
//!   "z_re": [[row-major N*N at f0], ...], "z_im": [[...], ...] }
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{BackendError, FrequencySweep, MultiportZ};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Touchstone,
    Json,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        if ext == "json" {
            Some(Self::Json)
        } else if touchstone_ports_from_extension(&ext).is_some() {
            Some(Self::Touchstone)
        } else {
            None
        }
    }
}

/// Port count encoded in an `sNp` / `zNp` / `yNp` extension.
fn touchstone_ports_from_extension(ext: &str) -> Option<usize> {
    let ext = ext.to_ascii_lowercase();
    let body = ext.strip_suffix('p')?;
    let digits = body.strip_prefix(['s', 'z', 'y'])?;
    digits.parse().ok().filter(|n| *n > 0)
}

/// Loads a multiport file. For Touchstone files the port count comes from
/// `n_ports` when given, otherwise from the file extension.
pub fn load_multiport_file(
    path: &Path,
    format: FileFormat,
    n_ports: Option<usize>,
) -> Result<MultiportZ, BackendError> {
    let text = std::fs::read_to_string(path).map_err(|source| BackendError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        FileFormat::Json => read_json(&text),
        FileFormat::Touchstone => {
            let n = n_ports
                .or_else(|| {
                    path.extension()
                        .and_then(|e| e.to_str())
                        .and_then(touchstone_ports_from_extension)
                })
                .ok_or_else(|| {
                    BackendError::UnsupportedFormat(format!("cannot infer port count from '{}'", path.display()))
                })?;
            read_touchstone(&text, n)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ValueFormat {
    RealImag,
    MagAngle,
}

struct OptionLine {
    freq_scale_to_ghz: f64,
    format: ValueFormat,
    z0: f64,
}

fn parse_option_line(line: &str, line_no: usize) -> Result<OptionLine, BackendError> {
    let parse_err = |message: String| BackendError::Parse { line: line_no, message };
    let mut opts = OptionLine {
        freq_scale_to_ghz: 1.0,
        format: ValueFormat::MagAngle,
        z0: 50.0,
    };
    let mut param = "S".to_string();
    let mut tokens = line.trim_start_matches('#').split_whitespace();
    while let Some(tok) = tokens.next() {
        let up = tok.to_ascii_uppercase();
        match up.as_str() {
            "HZ" => opts.freq_scale_to_ghz = 1e-9,
            "KHZ" => opts.freq_scale_to_ghz = 1e-6,
            "MHZ" => opts.freq_scale_to_ghz = 1e-3,
            "GHZ" => opts.freq_scale_to_ghz = 1.0,
            "S" | "Y" | "Z" | "H" | "G" => param = up,
            "RI" => opts.format = ValueFormat::RealImag,
            "MA" => opts.format = ValueFormat::MagAngle,
            "DB" => return Err(BackendError::UnsupportedFormat("DB value format".into())),
            "R" => {
                let v = tokens
                    .next()
                    .ok_or_else(|| parse_err("option 'R' without a reference impedance".into()))?;
                opts.z0 = v
                    .parse()
                    .map_err(|_| parse_err(format!("invalid reference impedance '{v}'")))?;
            }
            u if u.ends_with("HZ") => return Err(BackendError::Unit(tok.to_string())),
            _ => return Err(parse_err(format!("unrecognised option token '{tok}'"))),
        }
    }
    if param != "Z" {
        return Err(BackendError::UnsupportedFormat(format!(
            "{param} parameters (only Z is supported)"
        )));
    }
    Ok(opts)
}

/// Parses Touchstone v1 text holding `n_ports`-port Z parameters.
pub fn read_touchstone(text: &str, n_ports: usize) -> Result<MultiportZ, BackendError> {
    let per_record = 2 * n_ports * n_ports;
    let mut options: Option<OptionLine> = None;
    let mut records: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut current: Option<(usize, Vec<f64>)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('!').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if options.is_none() {
                options = Some(parse_option_line(line, line_no)?);
            }
            continue;
        }
        if options.is_none() {
            return Err(BackendError::Parse {
                line: line_no,
                message: "data before the option line".into(),
            });
        }
        let values = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| BackendError::Parse {
                    line: line_no,
                    message: format!("invalid number '{t}'"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        if n_ports <= 2 {
            if values.len() != 1 + per_record {
                return Err(BackendError::Parse {
                    line: line_no,
                    message: format!("expected {} columns, found {}", 1 + per_record, values.len()),
                });
            }
            records.push((line_no, values));
            continue;
        }
        // Larger networks wrap each record over several lines; a record
        // starts with a line holding the frequency plus whole pairs.
        let starts_record = values.len() % 2 == 1;
        match (&mut current, starts_record) {
            (None, true) => current = Some((line_no, values)),
            (Some(_), false) => current.as_mut().unwrap().1.extend(values),
            (None, false) | (Some(_), true) => {
                return Err(BackendError::Parse {
                    line: line_no,
                    message: format!("wrong column count ({})", values.len()),
                })
            }
        }
        if let Some((start, rec)) = &current {
            if rec.len() > 1 + per_record {
                return Err(BackendError::Parse {
                    line: line_no,
                    message: format!("record starting at line {start} has too many values"),
                });
            }
            if rec.len() == 1 + per_record {
                records.push(current.take().unwrap());
            }
        }
    }
    if let Some((start, _)) = current {
        return Err(BackendError::Parse {
            line: start,
            message: "incomplete record at end of file".into(),
        });
    }
    let options = options.ok_or(BackendError::Parse {
        line: 0,
        message: "missing option line".into(),
    })?;
    if records.is_empty() {
        return Err(BackendError::Parse {
            line: 0,
            message: "no data records".into(),
        });
    }

    let mut freqs = Vec::with_capacity(records.len());
    let mut matrices = Vec::with_capacity(records.len());
    for (line_no, rec) in &records {
        freqs.push(rec[0] * options.freq_scale_to_ghz);
        let mut m = DMatrix::<Complex64>::zeros(n_ports, n_ports);
        for (k, pair) in rec[1..].chunks_exact(2).enumerate() {
            let (row, col) = if n_ports == 2 {
                // Two-port records are ordered 11, 21, 12, 22.
                [(0, 0), (1, 0), (0, 1), (1, 1)][k]
            } else {
                (k / n_ports, k % n_ports)
            };
            m[(row, col)] = match options.format {
                ValueFormat::RealImag => Complex64::new(pair[0], pair[1]),
                ValueFormat::MagAngle => Complex64::from_polar(pair[0], pair[1].to_radians()),
            };
        }
        if m.iter().any(|z| !z.is_finite()) {
            return Err(BackendError::Parse {
                line: *line_no,
                message: "non-finite value".into(),
            });
        }
        matrices.push(m);
    }
    let sweep = FrequencySweep::from_points(freqs).map_err(|e| BackendError::Parse {
        line: records[0].0,
        message: e.to_string(),
    })?;
    MultiportZ::new(sweep, options.z0, matrices)
}

/// Touchstone v1 text in GHz / RI with 17 significant digits per value.
pub fn write_touchstone(z: &MultiportZ) -> String {
    let n = z.n_ports();
    let mut out = String::new();
    let _ = writeln!(out, "! {n}-port impedance matrix, ohms");
    let _ = writeln!(out, "# GHz Z RI R {}", z.z0());
    let fmt_pair = |c: &Complex64| format!("{:.16e} {:.16e}", c.re, c.im);
    for (f, m) in z.sweep().points().iter().zip(z.matrices()) {
        if n <= 2 {
            let order: &[(usize, usize)] = if n == 1 {
                &[(0, 0)]
            } else {
                &[(0, 0), (1, 0), (0, 1), (1, 1)]
            };
            let pairs: Vec<String> = order.iter().map(|&(r, c)| fmt_pair(&m[(r, c)])).collect();
            let _ = writeln!(out, "{:.16e} {}", f, pairs.join(" "));
            continue;
        }
        for row in 0..n {
            for (chunk_idx, cols) in (0..n).collect::<Vec<_>>().chunks(4).enumerate() {
                let pairs: Vec<String> = cols.iter().map(|&c| fmt_pair(&m[(row, c)])).collect();
                if row == 0 && chunk_idx == 0 {
                    let _ = writeln!(out, "{:.16e} {}", f, pairs.join(" "));
                } else {
                    let _ = writeln!(out, "  {}", pairs.join(" "));
                }
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonMultiport {
    z0: f64,
    freq_ghz: Vec<f64>,
    n_ports: usize,
    z_re: Vec<Vec<f64>>,
    z_im: Vec<Vec<f64>>,
}

pub fn read_json(text: &str) -> Result<MultiportZ, BackendError> {
    let doc: JsonMultiport = serde_json::from_str(text).map_err(|e| BackendError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let n = doc.n_ports;
    let bad = |message: String| BackendError::Parse { line: 0, message };
    if doc.z_re.len() != doc.freq_ghz.len() || doc.z_im.len() != doc.freq_ghz.len() {
        return Err(bad("z_re/z_im must hold one entry per frequency".into()));
    }
    let mut matrices = Vec::with_capacity(doc.freq_ghz.len());
    for (k, (re, im)) in doc.z_re.iter().zip(&doc.z_im).enumerate() {
        if re.len() != n * n || im.len() != n * n {
            return Err(bad(format!("frequency index {k}: expected {} values", n * n)));
        }
        matrices.push(DMatrix::from_fn(n, n, |i, j| {
            Complex64::new(re[i * n + j], im[i * n + j])
        }));
    }
    let sweep = FrequencySweep::from_points(doc.freq_ghz).map_err(|e| bad(e.to_string()))?;
    MultiportZ::new(sweep, doc.z0, matrices)
}

pub fn write_json(z: &MultiportZ) -> String {
    let n = z.n_ports();
    let flat = |part: fn(&Complex64) -> f64| -> Vec<Vec<f64>> {
        z.matrices()
            .iter()
            .map(|m| {
                (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .map(|(i, j)| part(&m[(i, j)]))
                    .collect()
            })
            .collect()
    };
    let doc = JsonMultiport {
        z0: z.z0(),
        freq_ghz: z.sweep().points().to_vec(),
        n_ports: n,
        z_re: flat(|c| c.re),
        z_im: flat(|c| c.im),
    };
    serde_json::to_string_pretty(&doc).expect("multiport JSON serialisation cannot fail")
}
