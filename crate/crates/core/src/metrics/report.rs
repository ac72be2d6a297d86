use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::is_saturated;
use crate::error::{Error, Result};

/// One evaluated test pair; the row schema of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scene_id: usize,
    pub method: String,
    pub mode: String,
    pub snr_lo: f64,
    pub snr_hi: f64,
    pub pair_id: usize,
    pub si_sdr_db: f64,
    pub snr_db: f64,
}

/// One adaptation update; the row schema of `trajectory.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub scene_id: usize,
    pub method: String,
    pub update_idx: usize,
    pub loss: f64,
    pub probe_delta_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub method: String,
    pub mode: String,
    /// SNR range bounds in millidecibels, so keys order and compare exactly.
    pub snr_lo_mdb: i64,
    pub snr_hi_mdb: i64,
}

impl CellKey {
    pub fn snr_range(&self) -> (f64, f64) {
        (
            self.snr_lo_mdb as f64 / 1000.0,
            self.snr_hi_mdb as f64 / 1000.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    /// Mean over scenes of each scene's mean SI-SDR.
    pub si_sdr_db: f64,
    pub snr_db: f64,
    pub scenes: usize,
    /// Pairs that entered the means.
    pub pairs: usize,
    /// Pairs excluded because a metric saturated.
    pub saturated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAccounting {
    pub method: String,
    pub adaptable: usize,
    pub total: usize,
}

impl ParamAccounting {
    pub fn percent(&self) -> f64 {
        100.0 * self.adaptable as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateReport {
    pub cells: BTreeMap<CellKey, CellStats>,
    pub accounting: Vec<ParamAccounting>,
    /// Mean probe delta-SNR per update, keyed by (method, mode).
    pub trajectories: BTreeMap<(String, String), Vec<f64>>,
}

fn mdb(v: f64) -> i64 {
    (v * 1000.0).round() as i64
}

/// Groups records by method, mode and SNR range. Each scene contributes the
/// mean of its non-saturated pairs; cells average those scene means. The
/// result does not depend on record order.
pub fn aggregate(records: &[MetricRecord]) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no metric records to aggregate".into()));
    }
    type Pairs = BTreeMap<usize, (f64, f64)>;
    let mut grouped: BTreeMap<CellKey, BTreeMap<usize, (Pairs, usize)>> = BTreeMap::new();
    for r in records {
        let key = CellKey {
            method: r.method.clone(),
            mode: r.mode.clone(),
            snr_lo_mdb: mdb(r.snr_lo),
            snr_hi_mdb: mdb(r.snr_hi),
        };
        let scene = grouped
            .entry(key)
            .or_default()
            .entry(r.scene_id)
            .or_default();
        if is_saturated(r.si_sdr_db) || is_saturated(r.snr_db) {
            scene.1 += 1;
        } else if scene.0.insert(r.pair_id, (r.si_sdr_db, r.snr_db)).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate record for scene {} pair {} ({}/{})",
                r.scene_id, r.pair_id, r.method, r.mode
            )));
        }
    }
    let mut cells = BTreeMap::new();
    for (key, scenes) in grouped {
        let (mut si, mut snr, mut n_scenes, mut pairs, mut saturated) = (0.0, 0.0, 0, 0, 0);
        for (_, (pair_map, sat)) in scenes {
            saturated += sat;
            if pair_map.is_empty() {
                continue;
            }
            let n = pair_map.len() as f64;
            si += pair_map.values().map(|v| v.0).sum::<f64>() / n;
            snr += pair_map.values().map(|v| v.1).sum::<f64>() / n;
            n_scenes += 1;
            pairs += pair_map.len();
        }
        let denom = n_scenes.max(1) as f64;
        cells.insert(
            key,
            CellStats {
                si_sdr_db: si / denom,
                snr_db: snr / denom,
                scenes: n_scenes,
                pairs,
                saturated,
            },
        );
    }
    Ok(AggregateReport {
        cells,
        ..Default::default()
    })
}

impl AggregateReport {
    pub fn with_accounting(mut self, accounting: Vec<ParamAccounting>) -> Self {
        self.accounting = accounting;
        self
    }

    /// Mean probe delta-SNR per update across scenes.
    pub fn add_trajectories(&mut self, rows: &[TrajectoryRow], mode: &str) {
        let mut sums: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
        let mut sorted: Vec<&TrajectoryRow> = rows.iter().collect();
        sorted.sort_by(|a, b| {
            (a.scene_id, &a.method, a.update_idx).cmp(&(b.scene_id, &b.method, b.update_idx))
        });
        for r in sorted {
            let e = sums
                .entry(r.method.clone())
                .or_default()
                .entry(r.update_idx)
                .or_default();
            e.0 += r.probe_delta_snr_db;
            e.1 += 1;
        }
        for (method, per_update) in sums {
            let curve = per_update.values().map(|(s, n)| s / *n as f64).collect();
            self.trajectories.insert((method, mode.to_string()), curve);
        }
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.cells.keys().map(|k| k.method.clone()).collect();
        m.dedup();
        m
    }

    /// Plain-text table: one row per (method, mode), one column group per SNR range.
    pub fn to_text(&self) -> String {
        let mut ranges: Vec<(i64, i64)> = self
            .cells
            .keys()
            .map(|k| (k.snr_lo_mdb, k.snr_hi_mdb))
            .collect();
        ranges.sort();
        ranges.dedup();
        let mut rows: Vec<(String, String)> = self
            .cells
            .keys()
            .map(|k| (k.method.clone(), k.mode.clone()))
            .collect();
        rows.sort();
        rows.dedup();
        let mut out = String::new();
        let _ = write!(
            out,
            "{:<16} {:<11} {:>9} {:>8}",
            "method", "mode", "params", "%"
        );
        for (lo, hi) in &ranges {
            let label = format!("[{}, {}] dB", *lo as f64 / 1000.0, *hi as f64 / 1000.0);
            let _ = write!(out, " | {:^35}", label);
        }
        out.push('\n');
        let _ = write!(out, "{:<16} {:<11} {:>9} {:>8}", "", "", "", "");
        for _ in &ranges {
            let _ = write!(
                out,
                " | {:>6} {:>6} {:>9} {:>9}",
                "PESQ", "STOI", "SI-SDR", "SNR"
            );
        }
        out.push('\n');
        for (method, mode) in rows {
            let acct = self.accounting.iter().find(|a| a.method == method);
            let (n, pct) = match acct {
                Some(a) if a.adaptable > 0 => {
                    (a.adaptable.to_string(), format!("{:.2}", a.percent()))
                }
                _ => ("-".into(), "-".into()),
            };
            let _ = write!(out, "{method:<16} {mode:<11} {n:>9} {pct:>8}");
            for (lo, hi) in &ranges {
                let key = CellKey {
                    method: method.clone(),
                    mode: mode.clone(),
                    snr_lo_mdb: *lo,
                    snr_hi_mdb: *hi,
                };
                match self.cells.get(&key) {
                    Some(c) => {
                        let _ = write!(
                            out,
                            " | {:>6} {:>6} {:>9.2} {:>9.2}",
                            "n/a", "n/a", c.si_sdr_db, c.snr_db
                        );
                    }
                    None => {
                        let _ = write!(out, " | {:>6} {:>6} {:>9} {:>9}", "n/a", "n/a", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        if !self.trajectories.is_empty() {
            out.push_str("\nmean probe delta-SNR (dB) per update\n");
            for ((method, mode), curve) in &self.trajectories {
                let _ = write!(out, "{method:<16} {mode:<11}");
                for v in curve {
                    let _ = write!(out, " {v:>6.3}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// One CSV row per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            method: &'a str,
            mode: &'a str,
            snr_lo: f64,
            snr_hi: f64,
            si_sdr_db: f64,
            snr_db: f64,
            scenes: usize,
            pairs: usize,
            saturated: usize,
            pesq: &'a str,
            stoi: &'a str,
        }
        let mut w = csv_writer(path)?;
        for (k, c) in &self.cells {
            let (lo, hi) = k.snr_range();
            w.serialize(Row {
                method: &k.method,
                mode: &k.mode,
                snr_lo: lo,
                snr_hi: hi,
                si_sdr_db: c.si_sdr_db,
                snr_db: c.snr_db,
                scenes: c.scenes,
                pairs: c.pairs,
                saturated: c.saturated,
                pesq: "unavailable",
                stoi: "unavailable",
            })
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

pub fn write_results_csv(path: &Path, rows: &[MetricRecord]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    read_rows(path)
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    read_rows(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(scene: usize, pair: usize, si: f64) -> MetricRecord {
        MetricRecord {
            scene_id: scene,
            method: "lora".into(),
            mode: "sequential".into(),
            snr_lo: 0.0,
            snr_hi: 5.0,
            pair_id: pair,
            si_sdr_db: si,
            snr_db: si - 1.0,
        }
    }

    #[test]
    fn single_record_mean_is_the_record() {
        let r = aggregate(&[rec(0, 0, 4.5)]).unwrap();
        let c = r.cells.values().next().unwrap();
        assert_eq!((c.si_sdr_db, c.snr_db, c.pairs), (4.5, 3.5, 1));
    }

    #[test]
    fn cell_is_mean_of_scene_means() {
        let r = aggregate(&[rec(0, 0, 2.0), rec(0, 1, 4.0), rec(1, 0, 9.0)]).unwrap();
        let c = r.cells.values().next().unwrap();
        assert_eq!(c.si_sdr_db, (3.0 + 9.0) / 2.0);
        assert_eq!(c.scenes, 2);
    }

    #[test]
    fn saturated_pairs_are_excluded() {
        let r = aggregate(&[rec(0, 0, 2.0), rec(0, 1, 100.0)]).unwrap();
        let c = r.cells.values().next().unwrap();
        assert_eq!((c.si_sdr_db, c.saturated, c.pairs), (2.0, 1, 1));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let rows = vec![rec(0, 0, 1.0 / 3.0), rec(2, 7, -4.25e-7)];
        write_results_csv(&path, &rows).unwrap();
        assert_eq!(read_results_csv(&path).unwrap(), rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("scene_id,method,mode,snr_lo,snr_hi,pair_id,si_sdr_db,snr_db\n"));
        assert_eq!(
            aggregate(&read_results_csv(&path).unwrap()).unwrap(),
            aggregate(&rows).unwrap()
        );
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(values in prop::collection::vec(-20.0f64..30.0, 1..30), seed in any::<u64>()) {
            let rows: Vec<MetricRecord> = values.iter().enumerate().map(|(i, v)| rec(i % 4, i, *v)).collect();
            let mut shuffled = rows.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(aggregate(&rows).unwrap(), aggregate(&shuffled).unwrap());
        }
    }
}
