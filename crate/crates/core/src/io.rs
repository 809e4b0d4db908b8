//! Atomic artifact writes and the dataset CSV format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::eh_circuit::Sample;
use crate::error::{Error, Result};

pub const DATASET_HEADER: &str = "v0,x_eh,v_next,avg_power";

/// Writes `bytes` to a sibling temporary file, syncs it, then renames it over
/// `path`, so readers see either the old or the new file, never a prefix.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// 17 significant digits; round-trips every `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn dataset_to_csv(rows: &[Sample]) -> String {
    let mut s = String::with_capacity(80 * (rows.len() + 1));
    s.push_str(DATASET_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            fmt17(r.v0),
            fmt17(r.x_eh),
            fmt17(r.v_next),
            fmt17(r.avg_power)
        ));
    }
    s
}

pub fn parse_dataset_csv(text: &str) -> Result<Vec<Sample>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == DATASET_HEADER => {}
        other => {
            return Err(Error::invalid(format!(
                "dataset header must be `{DATASET_HEADER}`, got {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("dataset line {}: {e}", i + 2)))?;
        if vals.len() != 4 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("dataset line {}: expected 4 finite values", i + 2)));
        }
        rows.push(Sample {
            v0: vals[0],
            x_eh: vals[1],
            v_next: vals[2],
            avg_power: vals[3],
        });
    }
    Ok(rows)
}

pub fn write_dataset(path: &Path, rows: &[Sample]) -> Result<()> {
    atomic_write(path, dataset_to_csv(rows).as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    parse_dataset_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trips_exactly() {
        let rows = vec![
            Sample { v0: 0.1, x_eh: -1.0 / 3.0, v_next: 0.123_456_789_012_345_67, avg_power: 1e-300 },
            Sample { v0: 0.0, x_eh: 0.0, v_next: 0.0, avg_power: 0.0 },
        ];
        let csv = dataset_to_csv(&rows);
        assert!(csv.starts_with("v0,x_eh,v_next,avg_power\n"));
        assert_eq!(parse_dataset_csv(&csv).unwrap(), rows);
    }

    #[test]
    fn rejects_wrong_header() {
        assert!(parse_dataset_csv("a,b,c,d\n1,2,3,4\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join(format!("swipt-io-{}", std::process::id()));
        let p = dir.join("x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        let leftovers = fs::read_dir(&dir).unwrap().count();
        assert_eq!(leftovers, 1);
        fs::remove_dir_all(&dir).unwrap();
    }
}
