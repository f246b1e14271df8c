//! Fixed-precision number formatting and CSV writing.

use num_complex::Complex64;
use serde_json::{json, Value};

/// C `%.17g` formatting.
pub fn g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mant), exp.abs())
    } else {
        let decimals = (16 - exp) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV text with a header row, `,` separators and LF line endings.
pub fn csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&x| g17(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn complex_json(z: Complex64) -> Value {
    json!([z.re, z.im])
}

pub fn complex_matrix_json(m: &nalgebra::DMatrix<Complex64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| complex_json(m[(i, j)])).collect()))
            .collect(),
    )
}

pub fn real_matrix_json(m: &nalgebra::DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| json!((0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())).collect())
}

/// `start:stop:count`, inclusive of both ends.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("sweep '{spec}' must have the form start:stop:count"));
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("sweep '{spec}': '{s}' is not a number"));
    let (start, stop) = (num(parts[0])?, num(parts[1])?);
    let count: usize = parts[2].trim().parse().map_err(|_| format!("sweep '{spec}': count must be a positive integer"))?;
    if count == 0 || !start.is_finite() || !stop.is_finite() {
        return Err(format!("sweep '{spec}': count must be positive and bounds finite"));
    }
    if count == 1 {
        return Ok(vec![start]);
    }
    Ok((0..count).map(|i| start + (stop - start) * i as f64 / (count - 1) as f64).collect())
}

/// Centered differences inside, one-sided at the ends.
pub fn gradient(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 { (0, 1) } else if i == n - 1 { (n - 2, n - 1) } else { (i - 1, i + 1) };
            (y[b] - y[a]) / (x[b] - x[a])
        })
        .collect()
}
