//! `hstvq` command line: `synth`, `train`, `segment`, `eval` and `plot`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{load_manifest, synth_generate, DatasetManifest, SkeletonSequence, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{evaluate, prediction_path, read_predictions, write_predictions, EvalItem, EvalReport};
use crate::plot::render;
use crate::trainer::{ModelState, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "hstvq", version, about = "Unsupervised skeleton action segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic skeleton corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint with its loss log.
    Train(TrainArgs),
    /// Write per-frame cluster predictions for every sequence.
    Segment(SegmentArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Render length histograms and segmentation timelines.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    #[arg(long, default_value_t = 20)]
    pub sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub mean_segments: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path, defaults to `<out>.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides `epochs` from the config.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let manifest = synth(&a)?;
            println!("{}", manifest.display());
        }
        Command::Train(a) => {
            let report = train(&a)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Segment(a) => {
            let n = segment(&a.ckpt, &a.data, &a.out)?;
            println!("wrote {} prediction files to {}", n, a.out.display());
        }
        Command::Eval(a) => {
            let r = eval(&a.data, &a.pred, &a.out)?;
            println!(
                "mof {:.2}  edit {:.2}  f1@10 {:.2}  f1@25 {:.2}  f1@50 {:.2}  jsd {:.2}",
                r.mof, r.edit, r.f1_10, r.f1_25, r.f1_50, r.jsd
            );
        }
        Command::Plot(a) => {
            let files = plot(&a.data, &a.pred, &a.out)?;
            println!("wrote {} files to {}", files.len(), a.out.display());
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Returns the manifest path.
pub fn synth(a: &SynthArgs) -> Result<PathBuf> {
    let cfg = SynthConfig {
        classes: a.classes as usize,
        sequences: a.sequences,
        seed: a.seed,
        mean_segments: a.mean_segments,
        ..SynthConfig::default()
    };
    synth_generate(&cfg, &a.out)?;
    Ok(a.out.join("manifest.json"))
}

pub fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

pub fn train(a: &TrainArgs) -> Result<LossReport> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    let manifest = load_manifest(&a.data)?;
    let data = manifest.load_all()?;
    let mut state = ModelState::new(config, manifest.k_gt, manifest.c, manifest.v)?;

    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let mut log = Vec::new();
    writeln!(log, "{}", LossReport::csv_header()).expect("in-memory write");
    let epochs = state.config.epochs;
    let result = state.fit(&data, epochs, &mut log);
    fs::write(&log_path, &log).map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
    let last = result?;
    save_checkpoint(&state, &a.out)?;
    Ok(last.unwrap_or_default())
}

fn check_dims(state: &ModelState, manifest: &DatasetManifest) -> Result<()> {
    let dims = state.model.dims;
    if dims.channels != manifest.c || dims.joints != manifest.v {
        return Err(Error::invalid(
            "data",
            format!(
                "checkpoint was trained on C={} V={}, dataset has C={} V={}",
                dims.channels, dims.joints, manifest.c, manifest.v
            ),
        ));
    }
    Ok(())
}

/// Returns the number of prediction files written.
pub fn segment(ckpt: &Path, data: &Path, out: &Path) -> Result<usize> {
    let state = load_checkpoint(ckpt)?;
    let manifest = load_manifest(data)?;
    check_dims(&state, &manifest)?;
    create_dir(out)?;
    let seqs = manifest.load_all()?;
    for seq in &seqs {
        let labels = state.predict_labels(seq)?;
        write_predictions(&prediction_path(out, &seq.id), &labels)?;
    }
    Ok(seqs.len())
}

struct Scored {
    seqs: Vec<SkeletonSequence>,
    preds: Vec<Vec<usize>>,
    k_gt: usize,
}

fn load_scored(data: &Path, pred: &Path) -> Result<Scored> {
    let manifest = load_manifest(data)?;
    let seqs: Vec<SkeletonSequence> = manifest.load_all()?.into_iter().filter(|s| s.labels.is_some()).collect();
    if seqs.is_empty() {
        return Err(Error::invalid("data", "no sequence in the manifest has labels"));
    }
    let preds = seqs.iter().map(|s| read_predictions(pred, &s.id)).collect::<Result<Vec<_>>>()?;
    Ok(Scored {
        seqs,
        preds,
        k_gt: manifest.k_gt,
    })
}

impl Scored {
    fn items(&self) -> Vec<EvalItem<'_>> {
        self.seqs
            .iter()
            .zip(&self.preds)
            .map(|(s, p)| EvalItem {
                id: &s.id,
                gt: s.labels.as_deref().expect("filtered to labeled"),
                pred: p,
                activity: s.activity.as_deref(),
            })
            .collect()
    }
}

pub fn eval(data: &Path, pred: &Path, out: &Path) -> Result<EvalReport> {
    let scored = load_scored(data, pred)?;
    let report = evaluate(&scored.items(), scored.k_gt)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, text).map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
    Ok(report)
}

/// Returns the paths written.
pub fn plot(data: &Path, pred: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let scored = load_scored(data, pred)?;
    let set = render(&scored.items(), scored.k_gt)?;
    create_dir(out)?;
    let mut written = Vec::with_capacity(set.files.len());
    for (name, contents) in set.files {
        let path = out.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        written.push(path);
    }
    Ok(written)
}
