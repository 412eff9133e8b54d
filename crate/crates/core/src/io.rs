//! Plain-text file formats.
//!
//! System: `n m`, then n rows of A (n numbers each), then n rows of B (m
//! numbers each). Weights: `n m`, then n rows of Q, then m rows of R. Data:
//! `n m N`, then N rows holding `u_k` followed by `x_k`. Blank lines and
//! text after `#` are ignored.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::oracle::CostWeights;
use crate::systems::{LinearSystem, Trajectory};

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { inner: text.lines().enumerate(), last: 0 }
    }

    /// Next non-empty line as (1-based number, fields).
    fn next_fields(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        for (i, raw) in self.inner.by_ref() {
            let body = raw.split('#').next().unwrap_or("");
            let fields: Vec<&str> = body.split_whitespace().collect();
            if !fields.is_empty() {
                self.last = i + 1;
                return Ok((i + 1, fields));
            }
        }
        Err(Error::Parse {
            line: self.last + 1,
            message: format!("unexpected end of file, expected {what}"),
        })
    }

    fn numbers(&mut self, what: &str, count: usize) -> Result<Vec<f64>> {
        let (line, fields) = self.next_fields(what)?;
        if fields.len() != count {
            return Err(Error::Parse {
                line,
                message: format!("{what}: expected {count} numbers, found {}", fields.len()),
            });
        }
        fields
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse { line, message: format!("{what}: '{f}' is not a finite number") }),
            })
            .collect()
    }

    fn header(&mut self, names: &[&str]) -> Result<(usize, Vec<usize>)> {
        let what = format!("header '{}'", names.join(" "));
        let (line, fields) = self.next_fields(&what)?;
        if fields.len() != names.len() {
            return Err(Error::Parse {
                line,
                message: format!("{what}: expected {} integers, found {}", names.len(), fields.len()),
            });
        }
        let dims = fields
            .iter()
            .zip(names)
            .map(|(f, name)| match f.parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(Error::Parse { line, message: format!("{name} must be a positive integer, got '{f}'") }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((line, dims))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<(usize, DMatrix<f64>)> {
        let mut data = Vec::with_capacity(rows * cols);
        let mut first = 0;
        for r in 0..rows {
            data.extend(self.numbers(&format!("row {} of {name}", r + 1), cols)?);
            if r == 0 {
                first = self.last;
            }
        }
        Ok((first, DMatrix::from_row_slice(rows, cols, &data)))
    }

    fn finish(&mut self) -> Result<()> {
        match self.next_fields("end of file") {
            Ok((line, _)) => Err(Error::Parse { line, message: "trailing content".into() }),
            Err(_) => Ok(()),
        }
    }
}

fn at_line(line: usize, e: Error) -> Error {
    match e {
        Error::Parse { .. } => e,
        other => Error::Parse { line, message: other.to_string() },
    }
}

pub fn parse_system(text: &str) -> Result<LinearSystem> {
    let mut lines = Lines::new(text);
    let (hl, dims) = lines.header(&["n", "m"])?;
    let (n, m) = (dims[0], dims[1]);
    let (_, a) = lines.matrix("A", n, n)?;
    let (_, b) = lines.matrix("B", n, m)?;
    lines.finish()?;
    LinearSystem::new(a, b).map_err(|e| at_line(hl, e))
}

pub fn parse_weights(text: &str) -> Result<CostWeights> {
    let mut lines = Lines::new(text);
    let (_, dims) = lines.header(&["n", "m"])?;
    let (n, m) = (dims[0], dims[1]);
    let (ql, q) = lines.matrix("Q", n, n)?;
    let (rl, r) = lines.matrix("R", m, m)?;
    lines.finish()?;
    let q_ok = CostWeights::new(q.clone(), DMatrix::identity(m, m)).is_ok();
    CostWeights::new(q, r).map_err(|e| at_line(if q_ok { rl } else { ql }, e))
}

pub fn parse_data(text: &str) -> Result<Trajectory> {
    let mut lines = Lines::new(text);
    let (_, dims) = lines.header(&["n", "m", "N"])?;
    let (n, m, len) = (dims[0], dims[1], dims[2]);
    let mut inputs = DMatrix::zeros(m, len);
    let mut states = DMatrix::zeros(n, len);
    for k in 0..len {
        let row = lines.numbers(&format!("sample {k}"), m + n)?;
        inputs.column_mut(k).copy_from_slice(&row[..m]);
        states.column_mut(k).copy_from_slice(&row[m..]);
    }
    lines.finish()?;
    Trajectory::new(inputs, states)
}

/// 17 significant digits, enough to parse back to the same double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_rows(out: &mut String, m: &DMatrix<f64>) {
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
}

pub fn format_system(sys: &LinearSystem) -> String {
    let mut out = format!("{} {}\n", sys.n(), sys.m());
    write_rows(&mut out, sys.a());
    write_rows(&mut out, sys.b());
    out
}

pub fn format_weights(w: &CostWeights) -> String {
    let mut out = format!("{} {}\n", w.n(), w.m());
    write_rows(&mut out, w.q());
    write_rows(&mut out, w.r());
    out
}

/// Writes the first `min(N, states)` samples; a terminal state has no
/// input row and is dropped.
pub fn format_data(traj: &Trajectory) -> String {
    let len = traj.len().min(traj.states().ncols());
    let mut out = format!("{} {} {}\n", traj.state_dim(), traj.input_dim(), len);
    for k in 0..len {
        let cells: Vec<String> = traj
            .inputs()
            .column(k)
            .iter()
            .chain(traj.states().column(k).iter())
            .map(|v| fmt_f64(*v))
            .collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(e: Error) -> usize {
        match e {
            Error::Parse { line, .. } => line,
            other => panic!("not a parse error: {other}"),
        }
    }

    #[test]
    fn scalar_system() {
        let sys = parse_system("1 1\n1\n1\n").unwrap();
        assert_eq!(sys.a()[(0, 0)], 1.0);
        assert_eq!(sys.b()[(0, 0)], 1.0);
        let sys = parse_system("# plant\n2 1\n\n0.5 1 # row\n0 0.3\n1\n0\n").unwrap();
        assert_eq!(sys.a()[(0, 1)], 1.0);
        assert_eq!(sys.b().shape(), (2, 1));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of(parse_system("2 1\n1 2\n3 x\n1\n1\n").unwrap_err()), 3);
        assert_eq!(line_of(parse_system("2 1\n1 2\n3\n").unwrap_err()), 3);
        assert_eq!(line_of(parse_system("2 1\n1 2\n3 4\n1\n").unwrap_err()), 5);
        assert_eq!(line_of(parse_system("0 1\n").unwrap_err()), 1);
        assert_eq!(line_of(parse_system("1 1\n1\n1\n7\n").unwrap_err()), 4);
        assert_eq!(line_of(parse_system("").unwrap_err()), 1);
        assert_eq!(line_of(parse_weights("1 1\n1\n-1\n").unwrap_err()), 3);
        assert_eq!(line_of(parse_weights("2 1\n1 2\n0 1\n1\n").unwrap_err()), 2);
        assert_eq!(line_of(parse_data("1 1 2\n1 2\n3\n").unwrap_err()), 3);
        assert_eq!(line_of(parse_system("1 1\ninf\n1\n").unwrap_err()), 2);
    }

    #[test]
    fn round_trips() {
        let sys = LinearSystem::random_controllable(3, 2, 4).unwrap();
        assert_eq!(parse_system(&format_system(&sys)).unwrap(), sys);
        let w = CostWeights::identity(3, 2).scaled(0.1).unwrap();
        let back = parse_weights(&format_weights(&w)).unwrap();
        assert_eq!(back.q(), w.q());
        assert_eq!(back.r(), w.r());
        let traj = sys
            .simulate(&nalgebra::DVector::zeros(3), &DMatrix::from_fn(2, 6, |i, j| (i + j) as f64 / 7.0))
            .unwrap();
        let back = parse_data(&format_data(&traj)).unwrap();
        assert_eq!(back.inputs(), traj.inputs());
        assert_eq!(back.states(), &traj.states().columns(0, 6).into_owned());
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
