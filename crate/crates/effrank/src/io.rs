//! Output files: JSON envelopes and CSV tables.
//!
//! Every output embeds a schema version and the effective configuration it
//! was produced from. File names carry the experiment family and a hash of
//! that configuration. Formatting is bitwise deterministic: float fields use
//! the shortest round-trip representation, '.' decimals, '\n' line endings.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

pub const SCHEMA_VERSION: &str = "1";

/// FNV-1a over the canonical `key=value` lines of a configuration.
pub fn config_hash(config: &BTreeMap<String, String>) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for (k, v) in config {
        for byte in k
            .as_bytes()
            .iter()
            .chain(b"=")
            .chain(v.as_bytes())
            .chain(b"\n")
        {
            hash ^= *byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{hash:016x}")
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: &'static str,
    family: &'a str,
    config: &'a BTreeMap<String, String>,
    data: &'a T,
}

/// Path for one output file: `<out>/<family>-<confighash>.<ext>`.
pub fn output_path(
    out_dir: &Path,
    family: &str,
    config: &BTreeMap<String, String>,
    ext: &str,
) -> PathBuf {
    out_dir.join(format!("{family}-{}.{ext}", config_hash(config)))
}

/// Write the JSON envelope; returns the path written.
pub fn write_json<T: Serialize>(
    out_dir: &Path,
    family: &str,
    config: &BTreeMap<String, String>,
    data: &T,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let path = output_path(out_dir, family, config, "json");
    let envelope = Envelope {
        schema_version: SCHEMA_VERSION,
        family,
        config,
        data,
    };
    let mut body = serde_json::to_string_pretty(&envelope).expect("serializable output");
    body.push('\n');
    fs::write(&path, body)?;
    Ok(path)
}

/// Write a CSV table: `#`-prefixed schema/family/config lines, a column
/// header, then the rows. Returns the path written.
pub fn write_csv(
    out_dir: &Path,
    family: &str,
    config: &BTreeMap<String, String>,
    columns: &[&str],
    rows: &[Vec<String>],
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let path = output_path(out_dir, family, config, "csv");
    let mut buf = Vec::new();
    writeln!(buf, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(buf, "# family={family}")?;
    for (k, v) in config {
        writeln!(buf, "# {k}={v}")?;
    }
    writeln!(buf, "{}", columns.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        writeln!(buf, "{}", row.join(","))?;
    }
    fs::write(&path, buf)?;
    Ok(path)
}

/// Shortest round-trip float formatting used in CSV cells.
pub fn fmt(v: f64) -> String {
    v.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_config() -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kernel".to_string(), "rbf".to_string()),
            ("n".to_string(), "256".to_string()),
        ])
    }

    #[test]
    fn hash_is_stable_and_order_independent() {
        let a = demo_config();
        let mut b = BTreeMap::new();
        b.insert("n".to_string(), "256".to_string());
        b.insert("kernel".to_string(), "rbf".to_string());
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn hash_changes_with_values() {
        let a = demo_config();
        let mut b = demo_config();
        b.insert("n".to_string(), "257".to_string());
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn csv_and_json_outputs_are_deterministic() {
        let dir = std::env::temp_dir().join(format!("effrank-io-test-{}", std::process::id()));
        let config = demo_config();
        let rows = vec![vec![fmt(1.25), fmt(-0.5)], vec![fmt(2.0), fmt(0.125)]];
        let p1 = write_csv(&dir, "demo", &config, &["x", "y"], &rows).unwrap();
        let c1 = fs::read(&p1).unwrap();
        let p2 = write_csv(&dir, "demo", &config, &["x", "y"], &rows).unwrap();
        let c2 = fs::read(&p2).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(c1, c2);
        let j1 = write_json(&dir, "demo", &config, &rows).unwrap();
        let b1 = fs::read(&j1).unwrap();
        let b2 = fs::read(&write_json(&dir, "demo", &config, &rows).unwrap()).unwrap();
        assert_eq!(b1, b2);
        fs::remove_dir_all(&dir).ok();
    }
}
