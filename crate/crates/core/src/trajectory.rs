//! Recorded time series and their long-format CSV representation.
//!
//! The CSV header is `time,volume,<species...>` with one row per
//! (sample time, volume), sample-major.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Count, SimulationConfig, Volume};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub engine: String,
    pub scenario: String,
    pub config: SimulationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Termination {
    /// Reached `t_end`.
    Completed,
    /// No rule could fire anywhere from `time` on.
    Exhausted { time: f64 },
    /// Some count exceeded the configured population cap at `time`.
    PopulationCap { time: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub leaps: u64,
    pub rejected_leaps: u64,
    pub critical_firings: u64,
    pub exact_events: u64,
    pub fallback_episodes: u64,
}

/// Sample grid `0, h, 2h, ...` up to and including `t_end` (within rounding).
pub fn sample_grid(t_end: f64, interval: f64) -> Vec<f64> {
    let n = (t_end / interval + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 * interval).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub species: Vec<String>,
    pub volumes: Vec<String>,
    pub times: Vec<f64>,
    /// Per volume, a row-major `times x species` matrix.
    data: Vec<Vec<Count>>,
    pub meta: Option<TrajectoryMeta>,
    pub termination: Termination,
    pub stats: RunStats,
}

impl Trajectory {
    pub fn new(species: Vec<String>, volumes: Vec<String>) -> Self {
        let data = vec![Vec::new(); volumes.len()];
        Trajectory {
            species,
            volumes,
            times: Vec::new(),
            data,
            meta: None,
            termination: Termination::Completed,
            stats: RunStats::default(),
        }
    }

    /// Appends one sample for every volume. `time` must exceed the last one.
    pub fn push_sample(&mut self, time: f64, volumes: &[Volume]) {
        debug_assert!(self.times.last().is_none_or(|&t| t < time));
        self.times.push(time);
        for (row, v) in self.data.iter_mut().zip(volumes) {
            row.extend_from_slice(&v.counts);
        }
    }

    pub fn push_row(&mut self, time: f64, rows: &[Vec<Count>]) {
        self.times.push(time);
        for (row, counts) in self.data.iter_mut().zip(rows) {
            row.extend_from_slice(counts);
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s == name)
    }

    pub fn volume_index(&self, name: &str) -> Option<usize> {
        self.volumes.iter().position(|s| s == name)
    }

    /// Counts of all species in `volume` at sample `k`.
    pub fn sample(&self, volume: usize, k: usize) -> &[Count] {
        let ns = self.species.len();
        &self.data[volume][k * ns..(k + 1) * ns]
    }

    pub fn series(&self, volume: usize, species: usize) -> Vec<Count> {
        let ns = self.species.len();
        self.data[volume].iter().skip(species).step_by(ns).copied().collect()
    }

    pub fn series_f64(&self, volume: usize, species: usize) -> Vec<f64> {
        self.series(volume, species).into_iter().map(|c| c as f64).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TrajectoryError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header = vec!["time".to_string(), "volume".to_string()];
        header.extend(self.species.iter().cloned());
        w.write_record(&header)?;
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for (k, t) in self.times.iter().enumerate() {
            for (v, name) in self.volumes.iter().enumerate() {
                record.clear();
                record.push(t.to_string());
                record.push(name.clone());
                record.extend(self.sample(v, k).iter().map(|c| c.to_string()));
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads a long-format CSV. Volumes appear in first-seen order and every
    /// sample time must list every volume once.
    pub fn read_csv<R: Read>(reader: R) -> Result<Trajectory, TrajectoryError> {
        let mut r = csv::ReaderBuilder::new().from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "time" || &header[1] != "volume" {
            return Err(TrajectoryError::Schema(
                "header must start with `time,volume` followed by species".into(),
            ));
        }
        let species: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut volumes: Vec<String> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        let mut rows: Vec<(f64, String, Vec<Count>)> = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let bad = |what: &str| TrajectoryError::Schema(format!("row {}: {what}", line + 2));
            let t: f64 = record[0].parse().map_err(|_| bad("bad time"))?;
            let counts = record
                .iter()
                .skip(2)
                .map(|c| c.parse::<Count>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("bad count"))?;
            if counts.len() != species.len() {
                return Err(bad("wrong number of columns"));
            }
            if counts.iter().any(|&c| c < 0) {
                return Err(bad("negative count"));
            }
            let name = record[1].to_string();
            if !volumes.contains(&name) {
                volumes.push(name.clone());
            }
            if times.last() != Some(&t) {
                if times.last().is_some_and(|&last| last >= t) {
                    return Err(bad("sample times must increase"));
                }
                times.push(t);
            }
            rows.push((t, name, counts));
        }
        if times.is_empty() {
            return Err(TrajectoryError::Schema("no samples".into()));
        }
        if rows.len() != times.len() * volumes.len() {
            return Err(TrajectoryError::Schema(
                "every sample time must list every volume exactly once".into(),
            ));
        }
        let mut traj = Trajectory::new(species, volumes.clone());
        for (k, chunk) in rows.chunks(volumes.len()).enumerate() {
            let mut ordered = vec![Vec::new(); volumes.len()];
            for (t, name, counts) in chunk {
                if *t != times[k] {
                    return Err(TrajectoryError::Schema(format!("sample {k} is incomplete")));
                }
                let v = volumes.iter().position(|n| n == name).unwrap();
                if !ordered[v].is_empty() {
                    return Err(TrajectoryError::Schema(format!("duplicate row for {name} at t={t}")));
                }
                ordered[v] = counts.clone();
            }
            traj.push_row(times[k], &ordered);
        }
        Ok(traj)
    }
}
