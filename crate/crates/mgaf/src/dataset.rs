//! Dataset directories: one `<stem>.csv` inertial file and one
//! `<stem>.dseq` depth file per action instance.

use std::fs;
use std::path::Path;

use mgaf_core::data::{synth_generate, ActionInstance};

use crate::config::ExperimentConfig;
use crate::error::{Context, Error, Result};
use crate::formats::{load_depth_dseq, load_inertial_csv, write_depth_dseq, write_inertial_csv};

/// Loads every `<stem>.csv`/`<stem>.dseq` pair, in stem order. Subject and
/// trial for the depth side come from the CSV metadata.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<ActionInstance>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::format(dir, "no inertial .csv files found"));
    }
    let mut out = Vec::with_capacity(stems.len());
    for (id, stem) in stems.iter().enumerate() {
        let csv = dir.join(format!("{stem}.csv"));
        let dseq = dir.join(format!("{stem}.dseq"));
        if !dseq.is_file() {
            return Err(Error::format(&dseq, "missing depth file for inertial recording"));
        }
        let inertial = load_inertial_csv(&csv)?;
        let mut depth = load_depth_dseq(&dseq)?;
        depth.subject = inertial.subject;
        depth.trial = inertial.trial;
        out.push(ActionInstance::new(id, inertial, depth).context(|| format!("instance '{stem}'"))?);
    }
    Ok(out)
}

pub fn instance_stem(inst: &ActionInstance) -> String {
    format!(
        "i{:04}_a{:02}_s{:02}_t{:02}",
        inst.id, inst.label, inst.inertial.subject, inst.inertial.trial
    )
}

pub fn write_dataset_dir(dir: &Path, instances: &[ActionInstance]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for inst in instances {
        let stem = instance_stem(inst);
        write_inertial_csv(&dir.join(format!("{stem}.csv")), &inst.inertial)?;
        write_depth_dseq(&dir.join(format!("{stem}.dseq")), &inst.depth)?;
    }
    Ok(())
}

/// The configured dataset: the directory when set, otherwise the synthetic
/// generator.
pub fn load_instances(cfg: &ExperimentConfig) -> Result<Vec<ActionInstance>> {
    match &cfg.data_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
                ));
            }
            load_dataset_dir(dir)
        }
        None => synth_generate(&cfg.synth).context(|| "synthetic dataset".to_string()),
    }
}
