//! Plain CSV tables: header line, `\n` endings, floats to 9 significant digits.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(if v { "true" } else { "false" }.into())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// `%.9g`: fixed notation for exponents in [-5, 9), scientific otherwise,
/// trailing zeros dropped.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let s = format!("{:.*}", (8 - exp) as usize, x);
        trim_zeros(&s).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mant), sign, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, c) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                match c {
                    Cell::Int(v) => write!(out, "{v}").unwrap(),
                    Cell::Float(v) => out.push_str(&fmt_float(*v)),
                    Cell::Text(s) => out.push_str(s),
                    Cell::Empty => {}
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Writes the table to `path`, or to stdout when `path` is `None`.
pub fn emit_csv(table: &Table, path: Option<&Path>) -> io::Result<()> {
    let text = table.render();
    match path {
        Some(p) => std::fs::write(p, text),
        None => {
            use std::io::Write;
            io::stdout().lock().write_all(text.as_bytes())
        }
    }
}

/// Splits CSV text into a header and rows of raw fields.
pub fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let split = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let header = lines.next().map(split).unwrap_or_default();
    (header, lines.map(split).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_float(0.5), "0.5");
        assert_eq!(fmt_float(1.0), "1");
        assert_eq!(fmt_float(-2.25), "-2.25");
        assert_eq!(fmt_float(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_float(123456789.4), "123456789");
        assert_eq!(fmt_float(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_float(1.5e-7), "1.5e-07");
        assert_eq!(fmt_float(0.0001234), "0.0001234");
        assert_eq!(fmt_float(f64::NAN), "nan");
        assert_eq!(fmt_float(9.9999999999), "10");
    }

    #[test]
    fn reparse_recovers_values() {
        let mut t = Table::new(&["a", "b", "c"]);
        let vals = [std::f64::consts::PI, -1e-12, 6.02214076e23, 0.1 + 0.2, 12345.678901234];
        for (i, &v) in vals.iter().enumerate() {
            t.push(vec![Cell::from(i), v.into(), Cell::Empty]);
        }
        let (h, rows) = parse_csv(&t.render());
        assert_eq!(h, ["a", "b", "c"]);
        for (row, &v) in rows.iter().zip(&vals) {
            let back: f64 = row[1].parse().unwrap();
            assert!(((back - v) / v).abs() <= 5e-9);
            assert_eq!(row[2], "");
        }
    }

    #[test]
    fn unit_interval_values_recover_to_1e_9() {
        let mut rng = wideformer::Rng::new(3);
        for _ in 0..10_000 {
            let v = rng.uniform(0.0, 1.0);
            let back: f64 = fmt_float(v).parse().unwrap();
            assert!((back - v).abs() <= 1e-9, "{v}");
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(Table::new(&["x", "y"]).render(), "x,y\n");
    }
}
