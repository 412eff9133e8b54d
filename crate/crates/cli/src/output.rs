use std::io::{self, Write};

use ddlqr::io::fmt_f64;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

/// Compact JSON whose floats carry 17 significant digits.
struct SeventeenDigits;

impl Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{}", fmt_f64(v))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        write!(w, "{}", fmt_f64(v.into()))
    }
}

pub fn to_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    value.serialize(&mut Serializer::with_formatter(&mut buf, SeventeenDigits))?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn matrix_lines(m: &DMatrix<f64>) -> String {
    m.row_iter()
        .map(|row| row.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn csv_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}
