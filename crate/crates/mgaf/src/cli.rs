//! The `mgaf` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use mgaf_core::data::synth_generate;
use mgaf_core::gaf::FusionMode;
use mgaf_core::svm::{train_svm, SvmConfig};

use crate::checkpoint::{save_cnn, save_svm};
use crate::config::{ExperimentConfig, Variant};
use crate::dataset::{instance_stem, load_instances, write_dataset_dir};
use crate::error::{Context, Error, Result};
use crate::experiment::{derive_seed, make_split, run_split, split_ncc, variant_features, Dataset, Split};
use crate::formats::{export_features, write_bytes, write_ncc_csv, write_pgm};
use crate::report::{write_manifest, Report};

#[derive(Debug, Parser)]
#[command(name = "mgaf", version, about = "Multistage gated average fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode a dataset into signal and front-view images (PGM) for inspection
    Prepare(Common),
    /// Train the per-modality CNNs and an SVM on the whole dataset, writing checkpoints
    Train(Common),
    /// Run the split protocol for the configured mode(s) and write report.csv
    Evaluate(Common),
    /// Run the split protocol once per mode
    Ablate(Common),
    /// Per-stage NCC between depth and inertial features on each test split
    Ncc(Common),
    /// Write a synthetic dataset directory
    Synth(SynthArgs),
    /// Export the multimodal layer of the first split as feature CSV
    Export(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key=value experiment configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Fusion mode, or a unimodal baseline such as depth_only
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated list of modes
    #[arg(long)]
    modes: Option<String>,
    /// Training pairing policy: random_frame or mean_frame
    #[arg(long)]
    pairing: Option<String>,
    /// Train the modality CNNs concurrently when above 1
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    splits: Option<usize>,
    /// Dataset directory (overrides data_dir)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra configuration override, key=value; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Dataset directory to create
    #[arg(long, default_value = "synth")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    depth_size: usize,
    #[arg(long, default_value_t = 104)]
    inertial_len: usize,
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = &self.mode {
            set("modes", v.clone())?;
        }
        if let Some(v) = &self.modes {
            set("modes", v.clone())?;
        }
        if let Some(v) = &self.pairing {
            set("pairing", v.clone())?;
        }
        if let Some(v) = self.threads {
            set("threads", v.to_string())?;
        }
        if let Some(v) = self.epochs {
            set("epochs", v.to_string())?;
        }
        if let Some(v) = self.splits {
            set("splits", v.to_string())?;
        }
        if let Some(v) = &self.data {
            set("data_dir", v.display().to_string())?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Messages go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{e}");
            eprintln!("{}", Cli::command().render_help());
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mgaf: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Prepare(c) => prepare(&c.resolve()?, &c.out),
        Command::Train(c) => train(&c.resolve()?, &c.out),
        Command::Evaluate(c) => evaluate(&c.resolve()?, &c.out, "evaluate"),
        Command::Ablate(c) => {
            let mut cfg = c.resolve()?;
            if c.mode.is_none() && c.modes.is_none() && !config_sets_modes(c.config.as_deref())? {
                cfg.modes = ablation_modes(cfg.n_modalities());
            }
            evaluate(&cfg, &c.out, "ablate")
        }
        Command::Ncc(c) => ncc(&c.resolve()?, &c.out),
        Command::Export(c) => export(&c.resolve()?, &c.out),
    }
}

fn config_sets_modes(path: Option<&Path>) -> Result<bool> {
    let Some(p) = path else { return Ok(false) };
    let text = crate::formats::read_text(p)?;
    Ok(text.lines().any(|l| {
        let l = l.trim_start();
        l.starts_with("mode=") || l.starts_with("modes=") || l.starts_with("mode =") || l.starts_with("modes =")
    }))
}

/// Every fusion mode followed by each unimodal baseline.
pub fn ablation_modes(n_modalities: usize) -> Vec<Variant> {
    FusionMode::ALL
        .iter()
        .map(|&m| Variant::Fused(m))
        .chain((0..n_modalities).map(Variant::Unimodal))
        .collect()
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.synth.seed = a.seed;
    cfg.synth.n_classes = a.classes;
    cfg.synth.n_per_class = a.per_class;
    cfg.synth.noise = a.noise;
    cfg.synth.frames = a.frames;
    cfg.synth.depth_size = a.depth_size;
    cfg.synth.inertial_len = a.inertial_len;
    let instances = synth_generate(&cfg.synth).context(|| "synthetic dataset".into())?;
    write_dataset_dir(&a.out, &instances)?;
    write_manifest(&a.out, "synth", &cfg.to_kv())
}

fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Dataset::prepare(load_instances(cfg)?, cfg)?;
    let dir = out.join("images");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut index = String::from("file,modality,instance,label,augmented\n");
    for m in &data.modalities {
        let mut counter = vec![0usize; data.instances.len()];
        for (i, img) in m.images.iter().enumerate() {
            let inst = &data.instances[m.owner[i]];
            let k = counter[m.owner[i]];
            counter[m.owner[i]] += 1;
            let name = format!("{}_{}_{k:03}.pgm", instance_stem(inst), m.name);
            write_pgm(&dir.join(&name), img)?;
            let _ = writeln!(index, "images/{name},{},{},{},{}", m.name, inst.id, inst.label, m.augmented[i]);
        }
    }
    write_bytes(&out.join("images.csv"), index.as_bytes())?;
    write_manifest(out, "prepare", &cfg.to_kv())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Dataset::prepare(load_instances(cfg)?, cfg)?;
    if data.n_classes() < 2 {
        return Err(Error::Config("training needs at least two classes".into()));
    }
    let split = Split {
        train: (0..data.instances.len()).collect(),
        test: Vec::new(),
    };
    let run = run_split(&data, &split, cfg, 0)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (m, model) in run.models.iter().enumerate() {
        save_cnn(&out.join(format!("cnn_{}.ckpt", data.modalities[m].name)), model)?;
    }
    for &v in &cfg.modes {
        let x = variant_features(&run.train_acts, v, cfg, &run.stage_names)?;
        let svm_cfg = SvmConfig {
            c: cfg.svm_c,
            epochs: cfg.svm_epochs,
            seed: derive_seed(cfg.seed, &[0, 0x5f3]),
            standardize: true,
        };
        let svm = train_svm(&x.data, &run.train_labels, &svm_cfg).context(|| format!("{v} SVM"))?;
        save_svm(&out.join(format!("svm_{v}.ckpt")), &svm)?;
    }
    let mut report = Report::new(cfg, data.classes.clone());
    report.histories.push(
        run.histories
            .iter()
            .enumerate()
            .map(|(m, h)| (data.modalities[m].name.to_string(), h.clone()))
            .collect(),
    );
    write_bytes(&out.join("history.csv"), report.history_csv().as_bytes())?;
    write_manifest(out, "train", &cfg.to_kv())
}

fn evaluate(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<()> {
    let report = crate::experiment::run_experiment(cfg)?;
    report.write(out, command)?;
    eprint!("{}", report.summary_csv());
    Ok(())
}

fn ncc(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Dataset::prepare(load_instances(cfg)?, cfg)?;
    if data.n_classes() < 2 {
        return Err(Error::Config("NCC needs trained features, which need at least two classes".into()));
    }
    let mut per_split = String::from("split_id,stage,value\n");
    let mut report = Report::new(cfg, data.classes.clone());
    for s in 0..cfg.splits {
        let sid = s as u64;
        let split = make_split(&data.targets, cfg.train_fraction, derive_seed(cfg.seed, &[sid, 0x5b1]));
        let run = run_split(&data, &split, cfg, sid)?;
        let table = split_ncc(&run)?;
        for (stage, v) in &table.rows {
            let _ = writeln!(per_split, "{s},{stage},{v}");
        }
        report.ncc_per_split.push(table);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_ncc_csv(&out.join("ncc.csv"), &report.ncc())?;
    write_bytes(&out.join("ncc_splits.csv"), per_split.as_bytes())?;
    write_manifest(out, "ncc", &cfg.to_kv())
}

fn export(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Dataset::prepare(load_instances(cfg)?, cfg)?;
    let split = make_split(&data.targets, cfg.train_fraction, derive_seed(cfg.seed, &[0, 0x5b1]));
    let run = run_split(&data, &split, cfg, 0)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for &v in &cfg.modes {
        for (tag, acts, labels) in [
            ("train", &run.train_acts, &run.train_labels),
            ("test", &run.test_acts, &run.test_labels),
        ] {
            let x = variant_features(acts, v, cfg, &run.stage_names)?;
            let y: Vec<u32> = labels.iter().map(|&c| data.classes[c]).collect();
            export_features(&out.join(format!("features_{v}_{tag}.csv")), &x, &y)?;
        }
    }
    write_manifest(out, "export", &cfg.to_kv())
}
