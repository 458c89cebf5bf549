//! Number formatting, provenance and CSV/JSON emission.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};
use shannon_cert::entropy::CertifyOptions;

use crate::CliError;

const DECIMALS: usize = 7;
/// Below this magnitude numbers switch to scientific notation.
const SCIENTIFIC_BELOW: f64 = 1e-4;

/// Fixed 7 decimals, or 7-decimal scientific notation for tiny values.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else if x != 0.0 && x.abs() < SCIENTIFIC_BELOW {
        format!("{x:.DECIMALS$e}")
    } else {
        // Values that round to zero print without a sign.
        let rounded = format!("{x:.DECIMALS$}");
        if rounded.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            format!("{:.DECIMALS$}", 0.0)
        } else {
            rounded
        }
    }
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Rounds every float in a JSON tree the same way [`num`] prints it.
pub fn round_json(value: Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            num(x).parse::<f64>().ok().and_then(serde_json::Number::from_f64).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(round_json).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub level: String,
    pub feasibility_tol: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
    pub extras: bool,
    pub restarts: usize,
}

impl Provenance {
    pub fn new(command: &'static str, options: &CertifyOptions) -> Self {
        Provenance {
            tool: "shannon-cert",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: options.seed,
            level: options.relaxation.to_string(),
            feasibility_tol: options.tolerances.feasibility,
            gap_tol: options.tolerances.gap,
            max_iter: options.tolerances.max_iterations,
            extras: options.extras,
            restarts: options.restarts(),
        }
    }

    /// `# key: value` lines for the top of a CSV file.
    pub fn csv_header(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# tool: {} {}", self.tool, self.version);
        let _ = writeln!(s, "# command: {}", self.command);
        let _ = writeln!(s, "# seed: {}", self.seed);
        let _ = writeln!(s, "# level: {}", self.level);
        let _ = writeln!(
            s,
            "# tolerances: feasibility={:e} gap={:e} max_iter={}",
            self.feasibility_tol, self.gap_tol, self.max_iter
        );
        let _ = writeln!(s, "# extras: {} restarts: {}", self.extras, self.restarts);
        s
    }

    /// Tolerances keep full precision; everything else goes through rounding.
    pub fn json(&self) -> Value {
        serde_json::to_value(self).unwrap_or(Value::Null)
    }
}

/// `{"provenance": ..., <body fields>}` with floats rounded.
pub fn json_document(provenance: &Provenance, body: Value) -> Value {
    let mut map = Map::new();
    map.insert("provenance".into(), provenance.json());
    match round_json(body) {
        Value::Object(fields) => map.extend(fields),
        other => {
            map.insert("result".into(), other);
        }
    }
    Value::Object(map)
}

pub fn to_json_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).unwrap_or_else(|e| json!({ "serialization_error": e.to_string() }))
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_row<I, S>(fields: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut line = fields.into_iter().map(|f| csv_field(f.as_ref())).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

/// Writes the whole document to `path`, or to standard output.
pub fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_formats() {
        assert_eq!(num(1.0), "1.0000000");
        assert_eq!(num(0.123456789), "0.1234568");
        assert_eq!(num(0.0), "0.0000000");
        assert_eq!(num(-1e-12), "-1.0000000e-12");
        assert_eq!(num(3.2e-5), "3.2000000e-5");
        assert_eq!(num(-0.00000000001 + 0.00000000001), "0.0000000");
        assert_eq!(num(f64::NAN), "nan");
    }

    #[test]
    fn no_negative_zero() {
        assert_eq!(num(-0.0), "0.0000000");
        assert_eq!(num(-0.00001), "-1.0000000e-5");
    }

    #[test]
    fn json_rounding() {
        let v = round_json(json!({"a": 0.123456789, "b": [1, 2.0000000001], "c": "x"}));
        assert_eq!(v, json!({"a": 0.1234568, "b": [1, 2.0], "c": "x"}));
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_row(["a", "b,c", "d\"e"]), "a,\"b,c\",\"d\"\"e\"\n");
    }
}
