// SPDX-License-Identifier: MIT OR Apache-2.0

//! File helpers for report bundles.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, StidError};

/// Write pretty JSON with a trailing newline, creating parent directories.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| StidError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| StidError::io(path, e))
}

/// Serialize records as CSV into `path`.
pub fn write_csv<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| StidError::io(path, e))?;
    }
    write_bytes(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: u32,
        b: f64,
    }

    #[test]
    fn csv_and_json_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/y.csv");
        write_csv(&p, &[Row { a: 1, b: 0.5 }]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n1,0.5\n");
        let j = dir.path().join("s.json");
        write_json(&j, &serde_json::json!({"k": 1})).unwrap();
        assert!(fs::read_to_string(&j).unwrap().ends_with("}\n"));
    }
}
