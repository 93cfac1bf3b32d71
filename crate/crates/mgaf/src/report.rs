//! Experiment reports and the files written for them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mgaf_core::cnn::TrainHistory;
use mgaf_core::diagnostics::NccTable;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::formats::{ncc_csv_string, write_bytes};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub split: usize,
    pub mode: String,
    pub accuracy: f64,
    pub train_minutes: f64,
    pub infer_micros_per_sample: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config_echo: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Dataset labels; confusion indices refer to positions here.
    pub classes: Vec<u32>,
    pub rows: Vec<ReportRow>,
    /// Confusion matrix per mode, summed over splits.
    pub confusion: Vec<(String, Vec<Vec<usize>>)>,
    pub ncc_per_split: Vec<NccTable>,
    /// Per split, the training history of each modality's CNN.
    pub histories: Vec<Vec<(String, TrainHistory)>>,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig, classes: Vec<u32>) -> Self {
        Self {
            config_echo: cfg.to_kv(),
            seed: cfg.seed,
            deterministic: cfg.deterministic,
            classes,
            rows: Vec::new(),
            confusion: Vec::new(),
            ncc_per_split: Vec::new(),
            histories: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ReportRow, confusion: &[Vec<usize>]) {
        let slot = match self.confusion.iter().position(|(m, _)| *m == row.mode) {
            Some(i) => &mut self.confusion[i].1,
            None => {
                self.confusion.push((row.mode.clone(), Vec::new()));
                &mut self.confusion.last_mut().expect("just pushed").1
            }
        };
        let k = confusion.len().max(slot.len());
        slot.resize(k, Vec::new());
        for (i, row_counts) in confusion.iter().enumerate() {
            slot[i].resize(k, 0);
            for (j, &c) in row_counts.iter().enumerate() {
                slot[i][j] += c;
            }
        }
        for r in slot.iter_mut() {
            r.resize(k, 0);
        }
        self.rows.push(row);
    }

    /// Modes in first-reported order.
    pub fn modes(&self) -> Vec<String> {
        self.confusion.iter().map(|(m, _)| m.clone()).collect()
    }

    pub fn accuracies(&self, mode: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.accuracy)
            .collect()
    }

    pub fn mean_accuracy(&self, mode: &str) -> Option<f64> {
        let a = self.accuracies(mode);
        (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64)
    }

    /// Per-stage NCC averaged over the splits where it is defined.
    pub fn ncc(&self) -> NccTable {
        let Some(first) = self.ncc_per_split.first() else {
            return NccTable::default();
        };
        let rows = first
            .rows
            .iter()
            .map(|(stage, _)| {
                let vals: Vec<f64> = self
                    .ncc_per_split
                    .iter()
                    .filter_map(|t| t.get(stage))
                    .filter(|v| v.is_finite())
                    .collect();
                let mean = if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                (stage.clone(), mean)
            })
            .collect();
        NccTable { rows }
    }

    fn rows_csv(&self, timings: bool) -> String {
        let mut s = String::from("split_id,mode,accuracy,train_minutes,infer_micros_per_sample\n");
        for r in &self.rows {
            if timings {
                let _ = writeln!(s, "{},{},{},{},{}", r.split, r.mode, r.accuracy, r.train_minutes, r.infer_micros_per_sample);
            } else {
                let _ = writeln!(s, "{},{},{},NA,NA", r.split, r.mode, r.accuracy);
            }
        }
        s
    }

    /// report.csv; timing columns are `NA` in deterministic mode.
    pub fn report_csv(&self) -> String {
        self.rows_csv(!self.deterministic)
    }

    pub fn timing_csv(&self) -> String {
        self.rows_csv(true)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("mode,splits,mean_accuracy,min_accuracy,max_accuracy\n");
        for mode in self.modes() {
            let a = self.accuracies(&mode);
            let min = a.iter().copied().fold(f64::INFINITY, f64::min);
            let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(s, "{mode},{},{},{min},{max}", a.len(), self.mean_accuracy(&mode).unwrap_or(0.0));
        }
        s
    }

    /// One block per mode: rows are true labels, columns predicted labels.
    pub fn confusion_csv(&self) -> String {
        let labels: Vec<String> = self.classes.iter().map(u32::to_string).collect();
        let mut s = format!("mode,truth,{}\n", labels.join(","));
        for (mode, m) in &self.confusion {
            for (i, row) in m.iter().enumerate() {
                let label = self.classes.get(i).map_or_else(|| i.to_string(), u32::to_string);
                let counts: Vec<String> = row.iter().map(usize::to_string).collect();
                let _ = writeln!(s, "{mode},{label},{}", counts.join(","));
            }
        }
        s
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("split_id,modality,epoch,train_loss,val_loss\n");
        for (split, per_mod) in self.histories.iter().enumerate() {
            for (name, h) in per_mod {
                for (e, loss) in h.train_loss.iter().enumerate() {
                    let val = h.val_loss.get(e).map_or_else(|| "NA".to_string(), f64::to_string);
                    let _ = writeln!(s, "{split},{name},{},{loss},{val}", e + 1);
                }
            }
        }
        s
    }

    /// Writes report.csv, timing.csv, summary.csv, confusion.csv, ncc.csv,
    /// history.csv and manifest.txt into `dir`.
    pub fn write(&self, dir: &Path, command: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_bytes(&dir.join("report.csv"), self.report_csv().as_bytes())?;
        write_bytes(&dir.join("timing.csv"), self.timing_csv().as_bytes())?;
        write_bytes(&dir.join("summary.csv"), self.summary_csv().as_bytes())?;
        write_bytes(&dir.join("confusion.csv"), self.confusion_csv().as_bytes())?;
        write_bytes(&dir.join("ncc.csv"), ncc_csv_string(&self.ncc()).as_bytes())?;
        write_bytes(&dir.join("history.csv"), self.history_csv().as_bytes())?;
        write_manifest(dir, command, &self.config_echo)
    }
}

/// manifest.txt: command, crate versions, then the effective configuration.
pub fn write_manifest(dir: &Path, command: &str, config_echo: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = format!(
        "command={command}\nmgaf_version={}\nmgaf_core_version={}\n# effective configuration\n{config_echo}",
        env!("CARGO_PKG_VERSION"),
        mgaf_core::VERSION,
    );
    write_bytes(&dir.join("manifest.txt"), text.as_bytes())
}
