//! TOML configuration documents.
//!
//! Keys are exactly `a, A, B, Lambda, Xi, M, N, Q, m, n, M_T, m_T, theta, T, x0`.
//! Matrices are row-major nested arrays, and a bare number stands for a 1×1
//! matrix or a length-1 vector. For the schedules `Lambda`, `Xi` and `N`:
//!
//! * a number or a matrix is broadcast over all `T` steps,
//! * a flat array of numbers is a schedule of 1×1 matrices,
//! * an array of matrices is a schedule given step by step.
//!
//! The state dimension is read off `x0`; the control dimension off the columns of `B`.

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::ModelSpec;

const KEYS: [&str; 15] = [
    "a", "A", "B", "Lambda", "Xi", "M", "N", "Q", "m", "n", "M_T", "m_T", "theta", "T", "x0",
];

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

fn number(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(parse_err(
            key,
            format!("expected a number, found {}", other.type_str()),
        )),
    }
}

fn depth(v: &Value) -> usize {
    match v {
        Value::Array(items) => 1 + items.first().map(depth).unwrap_or(0),
        _ => 0,
    }
}

fn vector(key: &str, v: &Value) -> Result<Vector> {
    match v {
        Value::Array(items) => {
            let xs = items
                .iter()
                .enumerate()
                .map(|(i, x)| number(&format!("{key}[{i}]"), x))
                .collect::<Result<Vec<_>>>()?;
            Ok(Vector::from_vec(xs))
        }
        _ => Ok(Vector::from_element(1, number(key, v)?)),
    }
}

fn matrix(key: &str, v: &Value) -> Result<Mat> {
    match v {
        Value::Array(rows) => {
            let mut data = Vec::new();
            let mut ncols = None;
            for (i, row) in rows.iter().enumerate() {
                let loc = format!("{key}[{i}]");
                let Value::Array(cells) = row else {
                    return Err(parse_err(loc, "expected a row array"));
                };
                if *ncols.get_or_insert(cells.len()) != cells.len() {
                    return Err(parse_err(loc, "ragged matrix rows"));
                }
                for (j, c) in cells.iter().enumerate() {
                    data.push(number(&format!("{key}[{i}][{j}]"), c)?);
                }
            }
            Ok(Mat::from_row_slice(rows.len(), ncols.unwrap_or(0), &data))
        }
        _ => Ok(Mat::from_element(1, 1, number(key, v)?)),
    }
}

fn schedule(key: &str, v: &Value, horizon: usize) -> Result<Vec<Mat>> {
    match (v, depth(v)) {
        (_, 0) | (_, 2) => Ok(vec![matrix(key, v)?; horizon]),
        (Value::Array(items), 1) => items
            .iter()
            .enumerate()
            .map(|(i, x)| Ok(Mat::from_element(1, 1, number(&format!("{key}[{i}]"), x)?)))
            .collect(),
        (Value::Array(items), 3) => items
            .iter()
            .enumerate()
            .map(|(i, x)| matrix(&format!("{key}[{i}]"), x))
            .collect(),
        _ => Err(parse_err(key, "expected a number, matrix, or schedule")),
    }
}

fn location_of(text: &str, err: &toml::de::Error) -> String {
    match err.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
            format!("line {line}, column {col}")
        }
        None => "document".into(),
    }
}

/// Parse a configuration document into an (unvalidated) [`ModelSpec`].
pub fn load_config(text: &str) -> Result<ModelSpec> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| parse_err(location_of(text, &e), e.message().to_string()))?;
    if let Some(unknown) = table.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(parse_err(unknown.clone(), "unknown key"));
    }
    let get = |k: &str| table.get(k).ok_or_else(|| Error::MissingKey(k.to_string()));

    let horizon = match get("T")? {
        Value::Integer(i) if *i >= 0 => *i as usize,
        other => {
            return Err(parse_err(
                "T",
                format!("expected a non-negative integer, found {other}"),
            ))
        }
    };

    Ok(ModelSpec {
        drift: vector("a", get("a")?)?,
        transition: matrix("A", get("A")?)?,
        input: matrix("B", get("B")?)?,
        system_noise: schedule("Lambda", get("Lambda")?, horizon)?,
        exploration: schedule("Xi", get("Xi")?, horizon)?,
        state_cost: matrix("M", get("M")?)?,
        control_cost: schedule("N", get("N")?, horizon)?,
        cross_cost: matrix("Q", get("Q")?)?,
        state_linear: vector("m", get("m")?)?,
        control_linear: vector("n", get("n")?)?,
        terminal_cost: matrix("M_T", get("M_T")?)?,
        terminal_linear: vector("m_T", get("m_T")?)?,
        theta: number("theta", get("theta")?)?,
        horizon,
        x0: vector("x0", get("x0")?)?,
    })
}

fn vector_value(v: &Vector) -> Value {
    if v.len() == 1 {
        Value::Float(v[0])
    } else {
        Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
    }
}

fn matrix_value(m: &Mat) -> Value {
    if m.nrows() == 1 && m.ncols() == 1 {
        return Value::Float(m[(0, 0)]);
    }
    Value::Array(
        m.row_iter()
            .map(|row| Value::Array(row.iter().map(|x| Value::Float(*x)).collect()))
            .collect(),
    )
}

fn schedule_value(s: &[Mat]) -> Value {
    if let Some(first) = s.first() {
        if s.iter().all(|m| m == first) {
            return matrix_value(first);
        }
    }
    let scalar = s.iter().all(|m| m.nrows() == 1 && m.ncols() == 1);
    Value::Array(
        s.iter()
            .map(|m| {
                if scalar {
                    Value::Float(m[(0, 0)])
                } else {
                    Value::Array(
                        m.row_iter()
                            .map(|row| Value::Array(row.iter().map(|x| Value::Float(*x)).collect()))
                            .collect(),
                    )
                }
            })
            .collect(),
    )
}

/// Render `spec` as a configuration document accepted by [`load_config`].
pub fn to_config_string(spec: &ModelSpec) -> String {
    let mut t = Table::new();
    t.insert("a".into(), vector_value(&spec.drift));
    t.insert("A".into(), matrix_value(&spec.transition));
    t.insert("B".into(), matrix_value(&spec.input));
    t.insert("Lambda".into(), schedule_value(&spec.system_noise));
    t.insert("Xi".into(), schedule_value(&spec.exploration));
    t.insert("M".into(), matrix_value(&spec.state_cost));
    t.insert("N".into(), schedule_value(&spec.control_cost));
    t.insert("Q".into(), matrix_value(&spec.cross_cost));
    t.insert("m".into(), vector_value(&spec.state_linear));
    t.insert("n".into(), vector_value(&spec.control_linear));
    t.insert("M_T".into(), matrix_value(&spec.terminal_cost));
    t.insert("m_T".into(), vector_value(&spec.terminal_linear));
    t.insert("theta".into(), Value::Float(spec.theta));
    t.insert("T".into(), Value::Integer(spec.horizon as i64));
    t.insert("x0".into(), vector_value(&spec.x0));
    toml::to_string(&t).expect("a table of numbers always serializes")
}

/// The built-in scalar instance as a configuration document.
pub const TABLE2_CONFIG: &str = "\
a = 0.0
A = -0.2
B = 0.4
Lambda = 0.15
Xi = 0.15
M = 2.0
N = 2.0
Q = 1.0
m = 0.0
n = 0.0
M_T = 4.0
m_T = 0.0
theta = 1.0
T = 25
x0 = 1.0
";
