//! Versioned text checkpoint container.
//!
//! ```text
//! NRSFM-CHECKPOINT v1 p=<p> n=<n> k=<k1,..,kn> step=<step> coherence=<c>
//! D1 <3p> <k1>
//! <3p rows of k1 reals>
//! D2 <k1> <k2>            (layers 2..n)
//! ...
//! B1 <k1>                  encoder thresholds, one line each
//! ...
//! BP2 <k1>                 decoder thresholds (layers 2..n)
//! ...
//! CAM <kn>
//! G <kn> <6kn>
//! GB <kn>
//! END
//! ```
//!
//! Reals use 17 significant digits, so identical parameters always produce
//! identical bytes and a load reproduces every array bit exactly.

use super::{LayerSizes, ModelParams};
use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use std::path::Path;

/// Parsed checkpoint: parameters plus the training step and the
/// final-dictionary coherence recorded at save time.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub coherence: f64,
}

fn push_mat(out: &mut String, name: &str, m: &Mat) {
    out.push_str(&format!("{} {} {}\n", name, m.rows(), m.cols()));
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|&x| fmt_f64(x)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn push_vec(out: &mut String, name: &str, v: &[f64]) {
    out.push_str(&format!("{} {}\n", name, v.len()));
    let row: Vec<String> = v.iter().map(|&x| fmt_f64(x)).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
}

pub fn checkpoint_to_string(params: &ModelParams, step: u64, coherence: f64) -> String {
    let sizes = &params.sizes;
    let k_list: Vec<String> = sizes.k.iter().map(|k| k.to_string()).collect();
    let mut out = format!(
        "NRSFM-CHECKPOINT v1 p={} n={} k={} step={} coherence={}\n",
        sizes.p,
        sizes.depth(),
        k_list.join(","),
        step,
        fmt_f64(coherence)
    );
    push_mat(&mut out, "D1", &params.d1());
    for (i, d) in params.deeper.iter().enumerate() {
        push_mat(&mut out, &format!("D{}", i + 2), d);
    }
    for (i, b) in params.enc_bias.iter().enumerate() {
        push_vec(&mut out, &format!("B{}", i + 1), b);
    }
    for (i, b) in params.dec_bias.iter().enumerate() {
        push_vec(&mut out, &format!("BP{}", i + 2), b);
    }
    push_vec(&mut out, "CAM", &params.cam_weights);
    push_mat(&mut out, "G", &params.code_weights);
    push_vec(&mut out, "GB", &params.code_bias);
    out.push_str("END\n");
    out
}

pub fn save_checkpoint(params: &ModelParams, step: u64, coherence: f64, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params, step, coherence))?;
    Ok(())
}

const MAX_P: usize = 100_000;
const MAX_K: usize = 100_000;
const MAX_DEPTH: usize = 64;

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((i, l)) => Ok((i + 1, l)),
            None => Err(Error::parse(0, format!("unexpected end of file, wanted {what}"))),
        }
    }
}

fn parse_count(tok: &str, lineno: usize, what: &str, cap: usize) -> Result<usize> {
    let v: usize = tok
        .parse()
        .map_err(|_| Error::parse(lineno, format!("{what}: bad count '{tok}'")))?;
    if v == 0 || v > cap {
        return Err(Error::parse(lineno, format!("{what}: count {v} out of range 1..={cap}")));
    }
    Ok(v)
}

fn read_array_header(
    reader: &mut LineReader,
    name: &str,
    dims: usize,
) -> Result<(usize, Vec<usize>)> {
    let (lineno, line) = reader.next(&format!("'{name}' header"))?;
    let toks: Vec<&str> = line.split_ascii_whitespace().collect();
    if toks.len() != dims + 1 || toks[0] != name {
        return Err(Error::parse(
            lineno,
            format!("expected '{name}' header with {dims} dimension(s), got '{line}'"),
        ));
    }
    let mut out = Vec::with_capacity(dims);
    for t in &toks[1..] {
        out.push(parse_count(t, lineno, name, MAX_P * 3)?);
    }
    Ok((lineno, out))
}

fn read_row(reader: &mut LineReader, what: &str, expect: usize) -> Result<Vec<f64>> {
    let (lineno, line) = reader.next(what)?;
    let mut vals = Vec::new();
    for tok in line.split_ascii_whitespace() {
        if vals.len() == expect {
            return Err(Error::parse(lineno, format!("{what}: more than {expect} values")));
        }
        let x: f64 = tok
            .parse()
            .map_err(|_| Error::parse(lineno, format!("{what}: non-numeric token '{tok}'")))?;
        if !x.is_finite() {
            return Err(Error::parse(lineno, format!("{what}: non-finite value '{tok}'")));
        }
        vals.push(x);
    }
    if vals.len() != expect {
        return Err(Error::parse(
            lineno,
            format!("{what}: expected {expect} values, got {}", vals.len()),
        ));
    }
    Ok(vals)
}

fn read_mat(reader: &mut LineReader, name: &str, rows: usize, cols: usize) -> Result<Mat> {
    let (lineno, got) = read_array_header(reader, name, 2)?;
    if got[0] != rows || got[1] != cols {
        return Err(Error::parse(
            lineno,
            format!("{name}: expected {rows}x{cols}, header says {}x{}", got[0], got[1]),
        ));
    }
    let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
    for _ in 0..rows {
        data.extend(read_row(reader, name, cols)?);
    }
    Ok(Mat::new(rows, cols, data))
}

fn read_vec(reader: &mut LineReader, name: &str, len: usize) -> Result<Vec<f64>> {
    let (lineno, got) = read_array_header(reader, name, 1)?;
    if got[0] != len {
        return Err(Error::parse(
            lineno,
            format!("{name}: expected length {len}, header says {}", got[0]),
        ));
    }
    read_row(reader, name, len)
}

/// Parse a checkpoint from text. Never panics on malformed input.
pub fn parse_checkpoint_str(text: &str) -> Result<Checkpoint> {
    let mut reader = LineReader {
        lines: text.lines().enumerate(),
    };
    let (_, header) = reader.next("header")?;
    let mut toks = header.split_ascii_whitespace();
    if toks.next() != Some("NRSFM-CHECKPOINT") || toks.next() != Some("v1") {
        return Err(Error::parse(1, "expected header 'NRSFM-CHECKPOINT v1 ...'"));
    }
    let mut p = None;
    let mut n = None;
    let mut k: Option<Vec<usize>> = None;
    let mut step = None;
    let mut coherence = None;
    for tok in toks {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("malformed header field '{tok}'")))?;
        match key {
            "p" => p = Some(parse_count(val, 1, "p", MAX_P)?),
            "n" => n = Some(parse_count(val, 1, "n", MAX_DEPTH)?),
            "k" => {
                let mut ks = Vec::new();
                for part in val.split(',') {
                    ks.push(parse_count(part, 1, "k", MAX_K)?);
                }
                k = Some(ks);
            }
            "step" => {
                let v: u64 = val
                    .parse()
                    .map_err(|_| Error::parse(1, format!("bad step value '{val}'")))?;
                step = Some(v);
            }
            "coherence" => {
                let v: f64 = val
                    .parse()
                    .map_err(|_| Error::parse(1, format!("bad coherence value '{val}'")))?;
                if !v.is_finite() {
                    return Err(Error::parse(1, "coherence must be finite"));
                }
                coherence = Some(v);
            }
            _ => return Err(Error::parse(1, format!("unknown header field '{key}'"))),
        }
    }
    let p = p.ok_or_else(|| Error::parse(1, "header missing p"))?;
    let n = n.ok_or_else(|| Error::parse(1, "header missing n"))?;
    let k = k.ok_or_else(|| Error::parse(1, "header missing k"))?;
    let step = step.ok_or_else(|| Error::parse(1, "header missing step"))?;
    let coherence = coherence.ok_or_else(|| Error::parse(1, "header missing coherence"))?;
    if k.len() != n {
        return Err(Error::parse(1, format!("k lists {} sizes but n={n}", k.len())));
    }
    let sizes = LayerSizes::new(p, k).map_err(|e| Error::parse(1, e.to_string()))?;
    let kn = sizes.deepest();

    let d1 = read_mat(&mut reader, "D1", 3 * p, sizes.k[0])?;
    let mut deeper = Vec::with_capacity(n - 1);
    for i in 1..n {
        deeper.push(read_mat(
            &mut reader,
            &format!("D{}", i + 1),
            sizes.k[i - 1],
            sizes.k[i],
        )?);
    }
    let mut enc_bias = Vec::with_capacity(n);
    for (i, &ki) in sizes.k.iter().enumerate() {
        enc_bias.push(read_vec(&mut reader, &format!("B{}", i + 1), ki)?);
    }
    let mut dec_bias = Vec::with_capacity(n - 1);
    for i in 1..n {
        dec_bias.push(read_vec(&mut reader, &format!("BP{}", i + 1), sizes.k[i - 1])?);
    }
    let cam_weights = read_vec(&mut reader, "CAM", kn)?;
    let code_weights = read_mat(&mut reader, "G", kn, 6 * kn)?;
    let code_bias = read_vec(&mut reader, "GB", kn)?;

    let (lineno, end) = reader.next("END marker")?;
    if end.trim() != "END" {
        return Err(Error::parse(lineno, "expected END marker"));
    }
    while let Some((i, rest)) = reader.lines.next() {
        if !rest.trim().is_empty() {
            return Err(Error::parse(i + 1, "trailing content after END"));
        }
    }

    let d1_sharp = ModelParams::d1_sharp_from_d1(&sizes, &d1);
    Ok(Checkpoint {
        params: ModelParams {
            sizes,
            d1_sharp,
            deeper,
            enc_bias,
            dec_bias,
            cam_weights,
            code_weights,
            code_bias,
        },
        step,
        coherence,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    parse_checkpoint_str(&text)
}
