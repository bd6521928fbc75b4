use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use memo_core::eval::{evaluate_with, thresholds, EvalReport, Protocol};
use memo_core::inference::{run_inference, InferenceConfig, InferenceTrace};
use memo_core::io::{checkpoint, config::RunConfig, netpbm};
use memo_core::synthdata::{build_dataset, load_dataset, Manifest};
use memo_core::training::{adapter_param_count, lora_inject, Trainer};
use memo_core::{BinaryMap, Error, LoraTargets, Network, ProbabilityMap, Result, TensorF32};

use crate::{Cli, Command, EvalArgs, GenDataArgs, InferArgs, InferOptions, SweepArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        info!("no --seed given; using seed {s}");
        s
    });
    match cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Infer(a) => infer(a, seed),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a, seed),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidState(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    set_jobs(a.jobs)?;
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.data.seed = seed;
    let manifest = build_dataset(a.n, &cfg.data, &a.out_dir)?;
    println!("wrote {} samples to {}", manifest.entries.len(), a.out_dir.display());
    Ok(())
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = load_dataset(&a.data_dir)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no samples", a.data_dir.display())));
    }
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    let net = match (a.lora, &a.base) {
        (Some(rank), Some(base)) => {
            let mut net: Network = checkpoint::load(base)?;
            let alpha = tcfg.lora_alpha.unwrap_or(rank as f64);
            lora_inject(&mut net, rank, alpha, LoraTargets::default())?;
            tcfg = tcfg.for_fine_tuning();
            info!(
                "fine-tuning rank-{rank} adapters ({} trainable of {} parameters)",
                adapter_param_count(&net),
                net.params().num_elements()
            );
            net
        }
        _ => Network::new(cfg.model.clone(), seed)?,
    };
    for img in &data.images {
        net.check_dims(img.shape()[1], img.shape()[2])?;
    }
    let mut trainer = Trainer::new(net, tcfg)?;
    trainer.fit(&data.samples()?, |epoch, loss| info!("epoch {epoch}: mean loss {loss:.5}"))?;
    checkpoint::save(&trainer.into_network(), &a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn infer_config(base: &InferenceConfig, o: &InferOptions, seed: u64) -> InferenceConfig {
    let mut cfg = base.clone();
    if let Some(s) = o.steps {
        cfg.steps = s;
    }
    if let Some(s) = o.strategy {
        cfg.strategy = s;
    }
    if let Some(s) = o.scale {
        cfg.scale = s;
    }
    cfg.seed = seed;
    cfg
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm"))
}

fn sorted_files(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && keep(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Expand dataset directories (via their manifest) and plain directories.
fn expand_images(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            if p.join("manifest.txt").is_file() {
                out.extend(Manifest::read(p)?.entries.into_iter().map(|e| p.join(e.image)));
            } else {
                out.extend(sorted_files(p, is_image)?);
            }
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

struct Prediction {
    stem: String,
    edges: BinaryMap,
    soft: ProbabilityMap,
    trace: InferenceTrace,
}

fn predict_all(net: &Network, images: &[(String, TensorF32)], cfg: &InferenceConfig) -> Result<Vec<Prediction>> {
    images
        .par_iter()
        .map(|(stem, img)| {
            let (edges, trace) = run_inference(net, img, cfg)?;
            let soft = trace.soft_map(edges.height(), edges.width())?;
            Ok(Prediction {
                stem: stem.clone(),
                edges,
                soft,
                trace,
            })
        })
        .collect()
}

fn write_predictions(preds: &[Prediction], out_dir: &Path, o: &InferOptions) -> Result<()> {
    for p in preds {
        netpbm::write_edges(&out_dir.join(format!("{}.pgm", p.stem)), &p.edges)?;
        if o.raw {
            netpbm::write_raw(&out_dir.join(format!("{}.f32", p.stem)), &p.soft)?;
        }
        if o.trace {
            let path = out_dir.join(format!("{}.trace.tsv", p.stem));
            fs::write(&path, p.trace.to_tsv()).map_err(|e| Error::Io { path, source: e })?;
        }
    }
    Ok(())
}

fn read_images(paths: &[PathBuf]) -> Result<Vec<(String, TensorF32)>> {
    paths.iter().map(|p| Ok((stem(p), netpbm::read_ppm(p)?))).collect()
}

fn infer(a: InferArgs, seed: u64) -> Result<()> {
    let cfg = infer_config(&load_config(a.config.as_deref())?.infer, &a.options, seed);
    cfg.validate()?;
    let net: Network = checkpoint::load(&a.checkpoint)?;
    let images = read_images(&expand_images(&a.images)?)?;
    let preds = predict_all(&net, &images, &cfg)?;
    write_predictions(&preds, &a.out_dir, &a.options)?;
    let passes: usize = preds.iter().map(|p| p.trace.forward_passes).sum();
    println!(
        "wrote {} edge maps to {} ({} forward passes per branch)",
        preds.len(),
        a.out_dir.display(),
        passes
    );
    Ok(())
}

/// Directory name holding predictions at one granularity scale.
pub fn scale_dir(scale: f64) -> String {
    format!("scale_{scale}")
}

/// Ground-truth maps with the stems used to find their predictions.
fn ground_truth(dir: &Path) -> Result<Vec<(String, BinaryMap)>> {
    let paths = if dir.join("manifest.txt").is_file() {
        Manifest::read(dir)?.entries.into_iter().map(|e| dir.join(e.edges)).collect()
    } else {
        sorted_files(dir, |p| p.extension().is_some_and(|e| e == "pgm"))?
    };
    paths.iter().map(|p| Ok((stem(p), netpbm::read_edges(p)?))).collect()
}

fn find_prediction(dir: &Path, stem: &str) -> Result<ProbabilityMap> {
    for candidate in [
        dir.join(format!("{stem}.f32")),
        dir.join(format!("{stem}.pgm")),
        dir.join("edges").join(format!("{stem}.pgm")),
    ] {
        if candidate.is_file() {
            return netpbm::read_prediction(&candidate);
        }
    }
    Err(Error::InvalidArgument(format!("no prediction for {stem} in {}", dir.display())))
}

fn score(
    per_scale: &[(f64, Vec<ProbabilityMap>)],
    gts: &[BinaryMap],
    protocol: Protocol,
    cfg: &RunConfig,
    out: &Path,
) -> Result<EvalReport> {
    let report = evaluate_with(per_scale, gts, &thresholds(cfg.eval.thresholds), protocol, &cfg.eval)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(out, report.to_tsv()).map_err(|e| Error::Io { path: out.into(), source: e })?;
    println!("{}", report.summary());
    println!("report: {}", out.display());
    Ok(report)
}

fn eval(a: EvalArgs) -> Result<()> {
    set_jobs(a.jobs)?;
    let cfg = load_config(a.config.as_deref())?;
    let gt = ground_truth(&a.gt_dir)?;
    let scales = a.scales.clone().unwrap_or_default();
    let dirs: Vec<(f64, PathBuf)> = if scales.is_empty() {
        vec![(1.0, a.pred_dir.clone())]
    } else {
        scales.iter().map(|&s| (s, a.pred_dir.join(scale_dir(s)))).collect()
    };
    let per_scale = dirs
        .iter()
        .map(|(s, d)| Ok((*s, gt.iter().map(|(stem, _)| find_prediction(d, stem)).collect::<Result<Vec<_>>>()?)))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<BinaryMap> = gt.into_iter().map(|(_, g)| g).collect();
    let out = a
        .out
        .unwrap_or_else(|| a.pred_dir.join(format!("report_{}.tsv", a.protocol)));
    score(&per_scale, &gts, a.protocol, &cfg, &out)?;
    Ok(())
}

fn sweep(a: SweepArgs, seed: u64) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let net: Network = checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data_dir)?;
    let images: Vec<(String, TensorF32)> = data
        .manifest
        .entries
        .iter()
        .zip(&data.images)
        .map(|(e, img)| (stem(&e.edges), img.clone()))
        .collect();
    let mut per_scale = Vec::new();
    for &s in &a.scales {
        let icfg = InferenceConfig {
            scale: s,
            ..infer_config(&cfg.infer, &a.options, seed)
        };
        icfg.validate()?;
        let preds = predict_all(&net, &images, &icfg)?;
        let dir = a.out_dir.join(scale_dir(s));
        write_predictions(&preds, &dir, &a.options)?;
        info!("scale {s}: wrote {} edge maps to {}", preds.len(), dir.display());
        let maps = preds
            .into_iter()
            .map(|p| if a.options.raw { p.soft } else { p.edges.to_probability() })
            .collect();
        per_scale.push((s, maps));
    }
    let out = a.out_dir.join(format!("report_{}.tsv", a.protocol));
    score(&per_scale, &data.edges, a.protocol, &cfg, &out)?;
    Ok(())
}
