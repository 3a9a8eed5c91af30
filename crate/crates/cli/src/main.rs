//! `odm`: synthesize data, train, evaluate, reconstruct and plot.

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odm_core::config::{parse_override, RunConfig};
use odm_core::dataset::{
    denormalize, generate_synthetic, load_annotations, load_jsonl, split_manifest, write_jsonl,
    DatasetManifest, Profile, Source, Split, TrajectoryRecord,
};
use odm_core::evaluation::{
    prepare_sample, run_occlusion_grid, standard_ablations, AblationFlags, EvalReport,
};
use odm_core::model::OdmModel;
use odm_core::occlusion::{OcclusionPattern, OcclusionSpec};
use odm_core::rng::{derive_seed, fnv1a, seeded};
use odm_core::training::{fit_with, run_ablations};
use odm_core::{checkpoint, OdmError, Result};

#[derive(Parser)]
#[command(
    name = "odm",
    version,
    about = "Occlusion-masked diffusion for pedestrian motion and crossing intention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic JSONL dataset.
    Synth(SynthArgs),
    /// Train a model and keep the best-validation-F1 checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint over an occlusion grid.
    Eval(EvalArgs),
    /// Train and score the ablation suite.
    Ablate(AblateArgs),
    /// Dump one record's reconstruction as JSON.
    Reconstruct(ReconstructArgs),
    /// Scatter plots of chain state against ground truth during denoising.
    PlotDenoise(PlotArgs),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    /// Defaults, then the file, then `--seed`, then `--override`s in order.
    fn run_config(&self) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        if let Some(seed) = self.seed {
            pairs.push(("seed".to_string(), seed.to_string()));
        }
        for s in &self.overrides {
            pairs.push(parse_override(s)?);
        }
        RunConfig::load(self.config.as_deref(), &pairs)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    t_total: usize,
    #[arg(long, default_value = "curver")]
    profile: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// JSONL dataset.
    #[arg(long)]
    data: PathBuf,
    /// Annotation flavour; `auto` keeps each line's `source`.
    #[arg(long, default_value = "auto")]
    kind: String,
}

impl DataArgs {
    fn records(&self) -> Result<Vec<TrajectoryRecord>> {
        match self.kind.as_str() {
            "auto" => load_jsonl(&self.data),
            other => load_annotations(&self.data, other.parse::<Source>()?),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: Common,
    /// Shorthand for `--override epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split file written by `train`; defaults to `splits.json` beside the
    /// checkpoint, or every record when absent.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "EO,PO")]
    patterns: String,
    /// Lengths as a list and/or ranges, e.g. `1-5` or `0,2,4`.
    #[arg(long, default_value = "1-5")]
    lengths: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Network branch at every entry of every reverse step.
    #[arg(long)]
    no_diffusion_mask: bool,
    /// Classify the zero-filled observation instead of the reconstruction.
    #[arg(long)]
    no_diffusion: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "EO3")]
    occlusion: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id: String,
    #[arg(long, default_value = "EO3")]
    occlusion: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id: String,
    /// Chain steps to draw; `K` stands for the schedule length.
    #[arg(long, default_value = "K,75,50,25,0")]
    steps: String,
    #[arg(long, default_value = "EO3")]
    occlusion: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::PlotDenoise(a) => cmd_plot_denoise(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &OdmError) -> u8 {
    match e {
        OdmError::Argument(_) | OdmError::Config(_) | OdmError::Lookup { .. } => 2,
        OdmError::Io { .. } | OdmError::Serde { .. } => 3,
        OdmError::Numerical { .. } => 4,
        _ => 1,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| OdmError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| OdmError::io(path, e))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let profile: Profile = a.profile.parse()?;
    let manifest = generate_synthetic(a.n, a.t_total, &mut seeded(a.seed), profile)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| OdmError::io(dir, e))?;
    }
    write_jsonl(&a.out, &manifest.records)?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        a.out.display()
    );
    Ok(())
}

fn split_data(records: Vec<TrajectoryRecord>, cfg: &RunConfig) -> Result<DatasetManifest> {
    let all = DatasetManifest::from_records(records);
    let mut rng = seeded(derive_seed(cfg.train.seed, &[0x7370_6c69_74]));
    split_manifest(&all, cfg.split, &mut rng)
}

fn echo_defaults(cfg: &RunConfig) {
    println!(
        "lr={} batch={} K={} dim={} lambda={} epochs={} occlusion={}",
        cfg.get("lr").unwrap_or_default(),
        cfg.train.batch,
        cfg.model.steps,
        cfg.model.denoiser.model_dim,
        cfg.train.lambda,
        cfg.train.epochs,
        cfg.train.occlusion
    );
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.common.run_config()?;
    if let Some(e) = a.epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    echo_defaults(&cfg);
    let manifest = split_data(a.data.records()?, &cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| OdmError::io(&a.out, e))?;
    write_file(&a.out.join("config.txt"), &cfg.to_text())?;
    let splits = serde_json::to_string_pretty(&manifest.splits).map_err(|e| OdmError::Serde {
        path: a.out.join("splits.json"),
        message: e.to_string(),
    })?;
    write_file(&a.out.join("splits.json"), &splits)?;

    let mut model = OdmModel::<f64>::new(cfg.model.clone(), manifest.stats.clone())?;
    let outcome = fit_with(&mut model, &manifest, &cfg.train, &a.out, |row| {
        println!(
            "epoch {:>3}  l_simp {:.5}  l_int {:.5}  val_acc {:.4}  val_auc {:.4}  val_f1 {:.4}",
            row.epoch, row.l_simp, row.l_int, row.val_acc, row.val_auc, row.val_f1
        );
    })?;
    match outcome.history.iter().rev().find(|r| !r.val_f1.is_nan()) {
        Some(r) => println!(
            "final val: acc {:.4} auc {:.4} f1 {:.4} ade_bbox {:.3} ade_center {:.3}",
            r.val_acc, r.val_auc, r.val_f1, r.val_ade_bbox, r.val_ade_center
        ),
        None => println!("final val: not evaluated"),
    }
    println!(
        "checkpoint {} (epoch {}), metrics {}",
        outcome.checkpoint.display(),
        outcome.best_epoch,
        outcome.metrics_log.display()
    );
    Ok(())
}

/// `"1-5"`, `"0,2,4"`, or a mix such as `"0,2-3"`.
fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    let bad = || OdmError::argument(format!("bad length list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                out.extend(lo..=hi);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn parse_patterns(s: &str) -> Result<Vec<OcclusionPattern>> {
    let out = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<OcclusionPattern>()
                .map_err(|_| OdmError::argument(format!("bad pattern {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(OdmError::argument("no occlusion patterns given"));
    }
    Ok(out)
}

fn load_splits(
    explicit: Option<&Path>,
    checkpoint: &Path,
) -> Result<Option<BTreeMap<Split, Vec<String>>>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = checkpoint.with_file_name("splits.json");
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    let text = fs::read_to_string(&path).map_err(|e| OdmError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| OdmError::Serde {
            path,
            message: e.to_string(),
        })
}

fn select_records<'a>(
    records: &'a [TrajectoryRecord],
    splits: Option<&BTreeMap<Split, Vec<String>>>,
    split: &str,
) -> Result<Vec<&'a TrajectoryRecord>> {
    if split == "all" || splits.is_none() {
        return Ok(records.iter().collect());
    }
    let which: Split = split.parse()?;
    let by_id: BTreeMap<&str, &TrajectoryRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let ids = splits
        .and_then(|s| s.get(&which))
        .map_or(&[][..], Vec::as_slice);
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| OdmError::Lookup {
                    what: "record id",
                    key: id.clone(),
                })
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let patterns = parse_patterns(&a.patterns)?;
    let lengths = parse_lengths(&a.lengths)?;
    let model: OdmModel<f64> = checkpoint::load(&a.checkpoint)?;
    let records = a.data.records()?;
    let splits = load_splits(a.splits.as_deref(), &a.checkpoint)?;
    let selected = select_records(&records, splits.as_ref(), &a.split)?;
    let flags = AblationFlags {
        diffusion_mask: !a.no_diffusion_mask,
        diffusion: !a.no_diffusion,
        noise_std: a.noise_std,
        ..AblationFlags::default()
    };
    let report = run_occlusion_grid(&model, &selected, &patterns, &lengths, &flags, a.seed)?;
    write_report(&report, &a.out)
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| OdmError::io(out, e))?;
    report.write(&out.join("report.csv"), &out.join("report.json"))?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = a.common.run_config()?;
    if let Some(e) = a.epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    echo_defaults(&cfg);
    let spec: OcclusionSpec = a.occlusion.parse()?;
    let manifest = split_data(a.data.records()?, &cfg)?;
    let mut base = OdmModel::<f64>::new(cfg.model.clone(), manifest.stats.clone())?;
    fit_with(
        &mut base,
        &manifest,
        &cfg.train,
        &a.out.join("base"),
        |_| {},
    )?;
    let test = manifest.split_records(Split::Test)?;
    let records = if test.is_empty() {
        manifest.records.iter().collect()
    } else {
        test
    };
    let report = run_ablations(
        &base,
        &manifest,
        &cfg.train,
        &standard_ablations(),
        &records,
        spec,
        &a.out,
    )?;
    write_report(&report, &a.out)
}

fn find_record<'a>(records: &'a [TrajectoryRecord], id: &str) -> Result<&'a TrajectoryRecord> {
    records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| OdmError::Lookup {
            what: "record id",
            key: id.to_string(),
        })
}

fn record_rng(seed: u64, id: &str) -> odm_core::rng::SeededRng {
    seeded(derive_seed(
        seed,
        &[fnv1a(id.as_bytes()), 0x7265_7665_7273_65],
    ))
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let spec: OcclusionSpec = a.occlusion.parse()?;
    let model: OdmModel<f64> = checkpoint::load(&a.checkpoint)?;
    let records = a.data.records()?;
    let record = find_record(&records, &a.id)?;
    let sample = prepare_sample::<f64>(record, &model.stats, spec, 0.0, a.seed)?;
    let recon = model.reconstruct(
        &sample.observed,
        &sample.mask,
        &mut record_rng(a.seed, &a.id),
    )?;
    let p = model.predict_intention(&recon)?;
    let rows = |m: &odm_core::Mat64| -> Vec<Vec<f64>> {
        (0..m.rows()).map(|t| m.row(t).to_vec()).collect()
    };
    let truth = denormalize(&sample.truth, &model.stats);
    let pixel = denormalize(&recon, &model.stats);
    let dump = serde_json::json!({
        "id": record.id,
        "occlusion": spec.to_string(),
        "occluded_frames": (0..sample.mask.len()).filter(|&t| sample.mask.is_occluded(t)).collect::<Vec<_>>(),
        "label": record.label,
        "p_cross": p,
        "truth": rows(&truth),
        "reconstruction": rows(&pixel),
    });
    let text = serde_json::to_string_pretty(&dump).map_err(|e| OdmError::Serde {
        path: a.out.clone(),
        message: e.to_string(),
    })?;
    write_file(&a.out, &text)?;
    println!("wrote {} (p_cross {p:.4})", a.out.display());
    Ok(())
}

fn parse_steps(s: &str, k_max: usize) -> Result<Vec<usize>> {
    let steps = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let k = if p == "K" {
                k_max
            } else {
                p.parse()
                    .map_err(|_| OdmError::argument(format!("bad step {p:?}")))?
            };
            if k > k_max {
                return Err(OdmError::argument(format!("step {k} exceeds K = {k_max}")));
            }
            Ok(k)
        })
        .collect::<Result<Vec<_>>>()?;
    if steps.is_empty() {
        return Err(OdmError::argument("step list is empty"));
    }
    Ok(steps)
}

fn cmd_plot_denoise(a: &PlotArgs) -> Result<()> {
    let spec: OcclusionSpec = a.occlusion.parse()?;
    let model: OdmModel<f64> = checkpoint::load(&a.checkpoint)?;
    let steps = parse_steps(&a.steps, model.schedule.steps())?;
    let records = a.data.records()?;
    let record = find_record(&records, &a.id)?;
    let sample = prepare_sample::<f64>(record, &model.stats, spec, 0.0, a.seed)?;
    let mut states = BTreeMap::new();
    model.reconstruct_traced(
        &sample.observed,
        &sample.mask,
        &mut record_rng(a.seed, &a.id),
        |k, x| {
            if steps.contains(&k) {
                states.insert(k, x.clone());
            }
        },
    )?;
    let truth = denormalize(&sample.truth, &model.stats);
    fs::create_dir_all(&a.out).map_err(|e| OdmError::io(&a.out, e))?;
    let mut summary = String::from("k,file,mean_diagonal_distance_px\n");
    for &k in &steps {
        let state = denormalize(&states[&k], &model.stats);
        let file = a.out.join(format!("denoise_k{k:03}.png"));
        let dist = plot::denoise_scatter(&file, &truth, &state)?;
        summary.push_str(&format!("{k},{},{dist:.6}\n", file.display()));
        println!(
            "k={k:>3}  mean distance to diagonal {dist:.3} px  -> {}",
            file.display()
        );
    }
    write_file(&a.out.join("denoise.csv"), &summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_lists() {
        assert_eq!(parse_lengths("1-5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_lengths("0,2-3").unwrap(), vec![0, 2, 3]);
        assert!(parse_lengths("3-1").is_err());
        assert!(parse_lengths("").is_err());
        assert!(parse_lengths("x").is_err());
    }

    #[test]
    fn step_lists() {
        assert_eq!(
            parse_steps("K,75,50,25,0", 100).unwrap(),
            vec![100, 75, 50, 25, 0]
        );
        assert!(parse_steps("", 100).is_err());
        assert!(parse_steps("101", 100).is_err());
    }
}
