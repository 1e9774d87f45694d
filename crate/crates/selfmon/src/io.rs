//! JSON persistence with a fixed float wire format. Every real is written
//! with 17 significant digits, which is enough to round-trip any f64
//! bit-exactly; combined with struct-ordered fields this makes artifact
//! files byte-stable across runs.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::Formatter;

use crate::error::{Error, Result};

/// Compact JSON formatter that pins f64 output to 17 significant digits.
struct SigDigits17;

impl Formatter for SigDigits17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        if !value.is_finite() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("non-finite real {value} cannot be serialized"),
            ));
        }
        write!(writer, "{value:.16e}")
    }

    // serde_json maps non-finite reals to null instead of calling
    // write_f64, so rejecting null closes that hole. Artifact types use
    // no optional fields, making null unreachable for valid data.
    fn write_null<W>(&mut self, _writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "null is reserved (non-finite reals cannot be serialized)",
        ))
    }
}

/// Serialize to a JSON string using the pinned float format.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigits17);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Data(format!("serialize: {e}")))?;
    String::from_utf8(out).map_err(|e| Error::Data(format!("serialize produced non-utf8: {e}")))
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = to_json_string(value)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(path, e))?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn parse_json_str<T: DeserializeOwned>(body: &str) -> Result<T> {
    serde_json::from_str(body).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json_str(&body)
}

/// Reads only the schema_version field, tolerating unknown structure
/// elsewhere, so version mismatches are reported as such rather than as
/// field errors.
#[derive(serde::Deserialize)]
struct VersionProbe {
    schema_version: u64,
}

pub fn check_schema_version(body: &str, supported: u64) -> Result<()> {
    let probe: VersionProbe = parse_json_str(body)?;
    if probe.schema_version != supported {
        return Err(Error::Version {
            found: probe.schema_version,
            supported,
        });
    }
    Ok(())
}

/// Append one compact JSON record plus newline (line-delimited logs).
pub fn append_jsonl<T: Serialize>(out: &mut impl Write, value: &T) -> Result<()> {
    let line = to_json_string(value)?;
    out.write_all(line.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::Data(format!("log write: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bit_exactly() {
        let xs = vec![
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            std::f64::consts::PI,
            17.0,
            1e17 + 1.0,
        ];
        let body = to_json_string(&xs).unwrap();
        let back: Vec<f64> = parse_json_str(&body).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b} in {body}");
        }
    }

    #[test]
    fn seventeen_significant_digits_in_output() {
        let body = to_json_string(&vec![0.1f64]).unwrap();
        assert_eq!(body, "[1.0000000000000001e-1]");
    }

    #[test]
    fn non_finite_rejected() {
        assert!(to_json_string(&vec![f64::NAN]).is_err());
    }

    #[test]
    fn parse_error_carries_location() {
        let err = parse_json_str::<Vec<f64>>("[1.0,").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 1);
                assert!(column >= 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_probe_rejects_future_schema() {
        let body = r#"{"schema_version": 99, "whatever": []}"#;
        match check_schema_version(body, 1).unwrap_err() {
            Error::Version { found, supported } => {
                assert_eq!(found, 99);
                assert_eq!(supported, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
