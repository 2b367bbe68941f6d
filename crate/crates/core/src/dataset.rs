//! Offline datasets of hourly transitions, their JSON-Lines encoding and
//! per-feature normalization statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{PLevel, StateWindow, Trajectory, Transition, N_FEATURES, WINDOW_LEN, WINDOW_STEPS};
use crate::error::{invalid, Result};

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub state: StateWindow,
    pub action: PLevel,
    pub reward: f64,
    pub next_state: StateWindow,
    pub done: bool,
    pub traj_id: u64,
    pub t: u32,
}

impl Record {
    pub fn transition(&self) -> Transition {
        Transition {
            state: self.state,
            action: self.action,
            reward: self.reward,
            next_state: self.next_state,
            done: self.done,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
}

/// Records of one trajectory, ordered by time.
pub struct Episode<'a> {
    pub traj_id: u64,
    pub records: Vec<&'a Record>,
}

impl Episode<'_> {
    pub fn trajectory(&self) -> Trajectory {
        let mut states: Vec<StateWindow> = self.records.iter().map(|r| r.state).collect();
        if let Some(last) = self.records.last() {
            states.push(last.next_state);
        }
        let actions = self.records.iter().map(|r| r.action).collect();
        Trajectory { states, actions }
    }
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Groups records by trajectory id; each group must hold `t = 0, 1, ...`.
    pub fn episodes(&self) -> Result<Vec<Episode<'_>>> {
        let mut groups: BTreeMap<u64, Vec<&Record>> = BTreeMap::new();
        for r in &self.records {
            groups.entry(r.traj_id).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(traj_id, mut records)| {
                records.sort_by_key(|r| r.t);
                for (i, r) in records.iter().enumerate() {
                    if r.t as usize != i {
                        return Err(invalid(format!(
                            "trajectory {traj_id} is not contiguous: expected t={i}, found t={}",
                            r.t
                        )));
                    }
                }
                Ok(Episode { traj_id, records })
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

/// Per-feature mean and standard deviation, shared across the six time steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl Default for FeatureStats {
    fn default() -> Self {
        Self { mean: [0.0; N_FEATURES], std: [1.0; N_FEATURES] }
    }
}

impl FeatureStats {
    /// Statistics over every row of every `state` and `next_state`.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a StateWindow>) -> Self {
        let mut sum = [0.0; N_FEATURES];
        let mut sq = [0.0; N_FEATURES];
        let mut n = 0.0;
        for w in windows {
            for row in w.rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut stats = Self::default();
        for j in 0..N_FEATURES {
            let mean = sum[j] / n;
            let var = (sq[j] / n - mean * mean).max(0.0);
            stats.mean[j] = mean;
            stats.std[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        stats
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        Self::from_windows(ds.records.iter().flat_map(|r| [&r.state, &r.next_state]))
    }

    /// Row-major z-normalized copy of `w`.
    pub fn normalize(&self, w: &StateWindow) -> [f64; WINDOW_LEN] {
        let mut out = [0.0; WINDOW_LEN];
        for (t, row) in w.rows().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out[t * N_FEATURES + j] = (v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<StateWindow> {
        if z.len() != WINDOW_LEN {
            return Err(invalid("normalized window must have 72 entries"));
        }
        let mut rows = [[0.0; N_FEATURES]; WINDOW_STEPS];
        for (t, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = z[t * N_FEATURES + j] * self.std[j] + self.mean[j];
            }
        }
        StateWindow::new(rows)
    }
}

/// Contents of the `<dataset>.meta.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: crate::synth::GeneratorConfig,
    /// Present when the file was produced by noise injection.
    pub noise: Option<crate::synth::NoiseConfig>,
    pub n_records: usize,
    pub n_trajectories: usize,
    pub stats: FeatureStats,
}

impl DatasetMeta {
    pub fn describe(ds: &Dataset, generator: crate::synth::GeneratorConfig, noise: Option<crate::synth::NoiseConfig>) -> Result<Self> {
        Ok(Self {
            generator,
            noise,
            n_records: ds.len(),
            n_trajectories: ds.episodes()?.len(),
            stats: FeatureStats::from_dataset(ds),
        })
    }
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

impl Dataset {
    /// Writes the JSON-Lines file and its metadata sidecar.
    pub fn write_with_meta(&self, path: &Path, meta: &DatasetMeta) -> Result<()> {
        self.write_jsonl(path)?;
        let mut text = serde_json::to_string_pretty(meta)?;
        text.push('\n');
        std::fs::write(meta_path(path), text)?;
        Ok(())
    }

    pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
        Ok(serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?)
    }
}

/// Linear map of a P-level onto roughly unit scale (levels 2..9 -> about -1.5..1.5).
pub fn normalize_action(a: PLevel) -> f64 {
    (a.as_f64() - 5.5) / 2.291_287_847_477_92
}
