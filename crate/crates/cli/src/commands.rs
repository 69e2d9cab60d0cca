//! Fully resolved command invocations and their execution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use combinet::arch::{build_combinet, load_checkpoint, ArchConfig, Checkpoint, Graph};
use combinet::bayes::{format_percent, format_plain, mc_predict, mean_entropy, miou, McOptions};
use combinet::cost::{count_macs, render_report, ReportFormat};
use combinet::data::{
    load_image_png, load_manifest, load_pair, normalize_channels, read_manifest, save_entropy_png, save_image_png,
    save_mask_png, split, synth_dataset, write_manifest, AugmentSpec, Sample, SynthSpec,
};
use combinet::rng::substream;
use combinet::trainer::{evaluate_detailed, train, EvalOptions, LogRow, TrainConfig, TrainEvent};
use combinet::{Mask, Tensor};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, CliResult};
use crate::run::{write_atomic, RunDir};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Invocation {
    Count(CountArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    Infer(InferArgs),
    Synth(SynthArgs),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountArgs {
    pub arch: ArchConfig,
    /// Height, width, channels.
    pub input: [usize; 3],
    pub samples: u64,
    pub csv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    /// Without a validation manifest, `data` is split by `split`.
    pub val: Option<PathBuf>,
    pub split: [f64; 3],
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub samples: usize,
    pub seed: u64,
    pub repeats: usize,
    pub dropout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferInput {
    Image(PathBuf),
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub input: InferInput,
    pub samples: usize,
    pub seed: u64,
    pub dropout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthArgs {
    pub spec: SynthSpec,
    pub seed: u64,
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Count(_) => "count",
            Invocation::Train(_) => "train",
            Invocation::Eval(_) => "eval",
            Invocation::Infer(_) => "infer",
            Invocation::Synth(_) => "synth",
        }
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        match self {
            Invocation::Count(_) => {}
            Invocation::Train(a) => {
                m.insert("seed".into(), a.train.seed);
            }
            Invocation::Eval(a) => {
                m.insert("seed".into(), a.seed);
                for r in 0..a.repeats {
                    m.insert(format!("repeat{r}"), repeat_seed(a.seed, r));
                }
            }
            Invocation::Infer(a) => {
                m.insert("seed".into(), a.seed);
            }
            Invocation::Synth(a) => {
                m.insert("seed".into(), a.seed);
            }
        }
        m
    }

    pub fn execute(&self, dir: &mut RunDir) -> CliResult<()> {
        match self {
            Invocation::Count(a) => count(a, dir),
            Invocation::Train(a) => run_train(a, dir),
            Invocation::Eval(a) => eval(a, dir),
            Invocation::Infer(a) => infer(a, dir),
            Invocation::Synth(a) => synth(a, dir),
        }
    }
}

fn repeat_seed(seed: u64, r: usize) -> u64 {
    substream(seed, "repeat", r as u64).next_u64()
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())
}

fn count(a: &CountArgs, dir: &mut RunDir) -> CliResult<()> {
    let [h, w, c] = a.input;
    if c != a.arch.input_channels {
        return Err(usage(format!("input has {c} channels, architecture expects {}", a.arch.input_channels)));
    }
    let graph = build_combinet(&a.arch, 0)?;
    let report = count_macs(&graph, [1, c, h, w], a.samples)?;
    let (format, file) = if a.csv { (ReportFormat::Csv, "cost.csv") } else { (ReportFormat::Text, "cost.txt") };
    let text = render_report(&report, format);
    write_text(&dir.artifact(file), &text)?;
    print!("{text}");
    Ok(())
}

/// Fails with a usage error when the network cannot process `h×w` inputs.
fn check_geometry(graph: &Graph, c: usize, h: usize, w: usize, what: &str) -> CliResult<()> {
    graph
        .infer_shapes([1, c, h, w])
        .map(|_| ())
        .map_err(|e| usage(format!("{what} ({c}×{h}×{w}) is incompatible with the network: {e}")))
}

fn check_samples(graph: &Graph, samples: &[Sample], what: &str) -> CliResult<()> {
    for s in samples {
        check_geometry(graph, s.channels(), s.height(), s.width(), what)?;
    }
    Ok(())
}

fn format_log(rows: &[LogRow]) -> (String, String) {
    let mut log = String::from("epoch,lr,train_loss,val_miou\n");
    let mut timing = String::from("epoch,wall_seconds\n");
    for r in rows {
        let miou = r.val_miou.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(log, "{},{},{},{}", r.epoch, r.lr, r.train_loss, miou);
        let _ = writeln!(timing, "{},{}", r.epoch, r.wall_seconds);
    }
    (log, timing)
}

fn run_train(a: &TrainArgs, dir: &mut RunDir) -> CliResult<()> {
    let data = load_manifest(&a.data)?;
    let (train_set, val_set) = match &a.val {
        Some(v) => (data, load_manifest(v)?),
        None => {
            let [tr, va, _] = split(&data, a.split, a.train.seed)?;
            (tr, va)
        }
    };
    let (mut graph, state) = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let g = ck.to_graph(p)?;
            if g.config() != Some(&a.arch) {
                return Err(usage(format!("{}: checkpoint architecture differs from --arch", p.display())));
            }
            let state = ck.state.ok_or_else(|| usage(format!("{}: checkpoint has no optimizer state", p.display())))?;
            (g, Some(state))
        }
        None => (build_combinet(&a.arch, a.train.seed)?, None),
    };
    if let Some(crop) = a.train.augment.crop_size {
        check_geometry(&graph, a.arch.input_channels, crop, crop, "training crop")?;
    } else {
        check_samples(&graph, &train_set, "training image")?;
    }
    check_samples(&graph, &val_set, "validation image")?;

    let last = dir.artifact("last.cbn");
    let best = dir.artifact("best.cbn");
    let log_path = dir.artifact("train_log.csv");
    let timing_path = dir.volatile("train_timing.csv");
    let initial = state.clone().unwrap_or_else(|| combinet::trainer::TrainState::new(&graph));
    Checkpoint::from_graph(&graph, Some(&initial)).with_train_config(&a.train).save(&last)?;
    let (log, timing) = format_log(&[]);
    write_text(&log_path, &log)?;
    write_text(&timing_path, &timing)?;

    let mut rows = Vec::new();
    let mut io_error: Option<CliError> = None;
    let mut observer = |ev: TrainEvent<'_>| {
        if io_error.is_some() {
            return;
        }
        let res: CliResult<()> = (|| {
            match ev {
                TrainEvent::Epoch { row, graph, state } => {
                    rows.push(row.clone());
                    let miou = row.val_miou.map(|m| format!(" val_miou {m:.4}")).unwrap_or_default();
                    eprintln!("epoch {:>4}  lr {:.3e}  loss {:.5}{miou}", row.epoch, row.lr, row.train_loss);
                    let (log, timing) = format_log(&rows);
                    write_text(&log_path, &log)?;
                    write_text(&timing_path, &timing)?;
                    Checkpoint::from_graph(graph, Some(state)).with_train_config(&a.train).save(&last)?;
                }
                TrainEvent::NewBest { graph, .. } => {
                    Checkpoint::from_graph(graph, None).with_train_config(&a.train).save(&best)?;
                }
            }
            Ok(())
        })();
        if let Err(e) = res {
            io_error = Some(e);
        }
    };
    let outcome = train(&mut graph, &train_set, &val_set, &a.train, state, &mut observer)?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if !best.exists() {
        dir.artifacts.retain(|p| p != "best.cbn");
    }
    if let Some(e) = outcome.halted {
        eprintln!("training halted: {e}; last good checkpoint kept at {}", last.display());
        return Err(e.into());
    }
    if let (Some(m), Some(e)) = (outcome.state.best_miou, outcome.state.best_epoch) {
        println!("best val mIoU {m:.4} at epoch {e}");
    }
    Ok(())
}

struct Loaded {
    graph: Graph,
    /// Normalisation recorded with the training run.
    preprocess: AugmentSpec,
}

fn load_model(path: &Path) -> CliResult<Loaded> {
    let ck = load_checkpoint(path)?;
    let graph = ck.to_graph(path)?;
    let normalize = ck.train.and_then(|t| t.augment.normalize);
    Ok(Loaded { graph, preprocess: AugmentSpec { normalize, ..AugmentSpec::identity() } })
}

fn eval(a: &EvalArgs, dir: &mut RunDir) -> CliResult<()> {
    if a.repeats == 0 || a.samples == 0 {
        return Err(usage("--repeats and --samples must be positive"));
    }
    let model = load_model(&a.checkpoint)?;
    let data = load_manifest(&a.data)?;
    check_samples(&model.graph, &data, "image")?;
    let ignore = data[0].ignore_index;
    let mut csv = String::from("repeat,seed,miou,mean_entropy\n");
    let (mut mious, mut entropies) = (Vec::new(), Vec::new());
    for r in 0..a.repeats {
        let seed = repeat_seed(a.seed, r);
        let opts = EvalOptions { samples: a.samples, seed, ignore_index: ignore, dropout: a.dropout };
        let report = evaluate_detailed(&model.graph, &data, &opts, &model.preprocess)?;
        let _ = writeln!(csv, "{r},{seed},{},{}", report.miou, report.mean_entropy);
        eprintln!("repeat {r}: mIoU {:.4}  mean entropy {:.4}", report.miou, report.mean_entropy);
        mious.push(report.miou);
        entropies.push(report.mean_entropy);
    }
    let summary = format!("mIoU {}\nmean entropy {}\n", format_percent(&mious), format_plain(&entropies));
    write_text(&dir.artifact("eval.csv"), &csv)?;
    write_text(&dir.artifact("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn image_id(path: &Path, seen: &mut BTreeMap<String, usize>) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let n = seen.entry(stem.clone()).or_insert(0);
    *n += 1;
    if *n == 1 {
        stem
    } else {
        format!("{stem}_{n}")
    }
}

fn infer(a: &InferArgs, dir: &mut RunDir) -> CliResult<()> {
    if a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    let model = load_model(&a.checkpoint)?;
    let g = &model.graph;
    let mut seen = BTreeMap::new();
    let items: Vec<(String, Tensor, Option<Mask>)> = match &a.input {
        InferInput::Image(p) => vec![(image_id(p, &mut seen), load_image_png(p)?, None)],
        InferInput::Manifest(m) => {
            let pairs = read_manifest(m)?;
            if pairs.is_empty() {
                return Err(usage(format!("{}: manifest is empty", m.display())));
            }
            pairs
                .iter()
                .map(|(i, l)| {
                    let s = load_pair(i, l)?;
                    Ok((image_id(i, &mut seen), s.image, Some(s.mask)))
                })
                .collect::<CliResult<_>>()?
        }
    };
    dir.subdir("masks")?;
    dir.subdir("entropy")?;
    let classes = g.output_channels();
    let max_entropy = (classes as f64).ln().max(f64::MIN_POSITIVE);
    let ignore = combinet::data::DEFAULT_IGNORE;
    let mut csv = String::from("image,miou,mean_entropy\n");
    for (i, (id, image, mask)) in items.iter().enumerate() {
        let [c, h, w] = <[usize; 3]>::try_from(image.shape()).map_err(|_| usage("image must be C×H×W"))?;
        check_geometry(g, c, h, w, &format!("image {id}"))?;
        let image = match &model.preprocess.normalize {
            Some(n) => normalize_channels(image, &n.mean, &n.std)?,
            None => image.clone(),
        };
        let x = image.reshape([1, c, h, w])?;
        let opts = McOptions {
            dropout: a.dropout,
            ..McOptions::new(a.samples, substream(a.seed, "infer", i as u64).next_u64())
        };
        let r = mc_predict(g, &x, opts)?;
        save_mask_png(dir.artifact(&format!("masks/{id}.png")), &r.masks[0])?;
        save_entropy_png(dir.artifact(&format!("entropy/{id}.png")), r.entropy.data(), h, w, max_entropy)?;
        dir.artifact(&format!("entropy/{id}.png.scale"));
        let (m, e) = match mask {
            Some(t) => {
                let ignored: Vec<bool> = t.data().iter().map(|&v| v == ignore).collect();
                let e = mean_entropy(r.entropy.data(), Some(&ignored)).or_else(|_| mean_entropy(r.entropy.data(), None))?;
                (miou(&r.masks[0], t, classes, Some(ignore))?.to_string(), e)
            }
            None => (String::new(), mean_entropy(r.entropy.data(), None)?),
        };
        let _ = writeln!(csv, "{id},{m},{e}");
        println!("{id}\tmean entropy {e:.6} nats");
    }
    write_text(&dir.artifact("metrics.csv"), &csv)?;
    Ok(())
}

fn synth(a: &SynthArgs, dir: &mut RunDir) -> CliResult<()> {
    let samples = synth_dataset(&a.spec, &mut substream(a.seed, "synth", 0))?;
    dir.subdir("images")?;
    dir.subdir("masks")?;
    let mut pairs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (img, msk) = (format!("images/{i:04}.png"), format!("masks/{i:04}.png"));
        save_image_png(dir.artifact(&img), &s.image, false)?;
        save_mask_png(dir.artifact(&msk), &s.mask)?;
        pairs.push((img, msk));
    }
    write_manifest(dir.artifact("dataset.tsv"), &pairs)?;
    println!("{} pairs written to {}", samples.len(), dir.root.join("dataset.tsv").display());
    Ok(())
}

/// Byte comparison of every reproducible artifact of two run directories.
pub fn compare_runs(original: &Path, artifacts: &[String], replay: &Path) -> Vec<String> {
    artifacts
        .iter()
        .filter(|rel| match (fs::read(original.join(rel)), fs::read(replay.join(rel))) {
            (Ok(a), Ok(b)) => a != b,
            _ => true,
        })
        .cloned()
        .collect()
}
