use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Dataset, DatasetMeta, Trajectory};
use crate::error::{Error, Result};

/// Write the meta object on the first line and one trajectory per line after.
/// Reals are written in shortest round-trip decimal form.
pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let non_finite = ds
        .trajectories
        .iter()
        .flat_map(|t| t.states.iter().chain(&t.actions).flatten().chain(&t.rewards))
        .any(|v| !v.is_finite());
    if non_finite {
        return Err(Error::Validation("trajectories contain non-finite values".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &ds.meta)?;
    w.write_all(b"\n")?;
    for t in &ds.trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let display = path.display().to_string();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut meta: Option<DatasetMeta> = None;
    let mut trajectories = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match &meta {
            None => {
                let m: DatasetMeta = serde_json::from_str(&line).map_err(|e| parse_err(no, e.to_string()))?;
                m.validate()?;
                meta = Some(m);
            }
            Some(m) => {
                let t: Trajectory = serde_json::from_str(&line).map_err(|e| parse_err(no, e.to_string()))?;
                t.validate(m)
                    .map_err(|e| Error::Validation(format!("{display} line {no}: {e}")))?;
                trajectories.push(t);
            }
        }
    }
    let meta = meta.ok_or_else(|| parse_err(1, "missing meta line".into()))?;
    Ok(Dataset { meta, trajectories })
}
