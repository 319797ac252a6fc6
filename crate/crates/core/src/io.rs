//! Trajectory files: CSV with one observation per line and an optional second column holding
//! the one-based hidden state, or JSON `{"obs": [...], "hidden": [...] | null}`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::Trajectory;

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    obs: Vec<f64>,
    #[serde(default)]
    hidden: Option<Vec<usize>>,
}

fn to_zero_based(hidden: Option<Vec<usize>>) -> Result<Option<Vec<usize>>> {
    hidden
        .map(|h| {
            h.into_iter()
                .map(|s| {
                    s.checked_sub(1)
                        .ok_or_else(|| Error::InvalidInput("hidden states are one-based".into()))
                })
                .collect()
        })
        .transpose()
}

pub fn read_csv<R: Read>(reader: R) -> Result<Trajectory<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut obs = Vec::new();
    let mut hidden = Vec::new();
    let mut any_hidden = false;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let first = match rec.get(0) {
            Some(f) if !f.is_empty() => f,
            _ => continue,
        };
        let y: f64 = match first.parse() {
            Ok(y) => y,
            // a header line
            Err(_) if line == 0 => continue,
            Err(_) => {
                return Err(Error::InvalidInput(format!(
                    "line {}: cannot parse observation {first:?}",
                    line + 1
                )))
            }
        };
        obs.push(y);
        match rec.get(1).filter(|s| !s.is_empty()) {
            Some(h) => {
                any_hidden = true;
                let s: usize = h.parse().map_err(|_| {
                    Error::InvalidInput(format!("line {}: bad hidden state {h:?}", line + 1))
                })?;
                hidden.push(s);
            }
            None if any_hidden => {
                return Err(Error::InvalidInput(format!(
                    "line {}: missing hidden state",
                    line + 1
                )))
            }
            None => {}
        }
    }
    if any_hidden && hidden.len() != obs.len() {
        return Err(Error::InvalidInput("hidden column is incomplete".into()));
    }
    let hidden = to_zero_based(any_hidden.then_some(hidden))?;
    Trajectory::new(obs, hidden)
}

pub fn write_csv<W: Write>(traj: &Trajectory<f64>, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for (i, y) in traj.obs.iter().enumerate() {
        match &traj.hidden {
            Some(h) => w.write_record(&[y.to_string(), (h[i] + 1).to_string()])?,
            None => w.write_record(&[y.to_string()])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<R: Read>(reader: R) -> Result<Trajectory<f64>> {
    let rec: TrajectoryRecord = serde_json::from_reader(reader)?;
    Trajectory::new(rec.obs, to_zero_based(rec.hidden)?)
}

pub fn write_json<W: Write>(traj: &Trajectory<f64>, writer: W) -> Result<()> {
    let rec = TrajectoryRecord {
        obs: traj.obs.clone(),
        hidden: traj.hidden.as_ref().map(|h| h.iter().map(|s| s + 1).collect()),
    };
    serde_json::to_writer(writer, &rec)?;
    Ok(())
}

/// Reads a trajectory, choosing the format from the file extension (`.json` or CSV otherwise).
pub fn read_trajectory(path: &Path) -> Result<Trajectory<f64>> {
    let f = std::fs::File::open(path)?;
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        read_json(f)
    } else {
        read_csv(f)
    }
}
