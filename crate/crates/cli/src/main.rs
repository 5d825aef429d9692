//! `texproto`: learn texture prototypes from masked volumes and predict
//! per-scan tissue mixtures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use texproto::evaluation::{write_repro_csv, CvReport};
use texproto::merging::write_lineage_csv;
use texproto::pipeline::{train, Dataset};
use texproto::synth::{write_phantom, PhantomSpec};
use texproto::{
    cross_validate, generate_phantom, read_mask, read_volume, split_half_reproducibility, Error,
    FeatureKind, IntensityMap, PipelineConfig, RoiMode, TissueClass, TrainedModel,
};

#[derive(Parser)]
#[command(name = "texproto", version, about)]
struct Cli {
    /// Log filter, e.g. `info` or `texproto=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Train a model and write it as one JSON file.
    Train(PipelineArgs),
    /// Predict class mixtures for every scan of a manifest.
    Predict(PredictArgs),
    /// Cross-validated ICC per class and K.
    Evaluate(EvaluateArgs),
    /// Cross validation and split-half reproducibility across merge checkpoints.
    MergeSweep(PipelineArgs),
    /// Split-half prototype reproducibility.
    Repro(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Phantom spec JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short, long)]
    output_dir: PathBuf,
    #[arg(long)]
    n_scans: Option<usize>,
    /// Grid size as `nx,ny,nz`.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Isotropic spacing in mm.
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    hu_jitter: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapArg {
    Linear,
    Sigmoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoiModeArg {
    #[value(name = "3d")]
    Cube3d,
    #[value(name = "2d")]
    Square2d,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Pipeline config JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// texton, dog2 or lbp2.
    #[arg(long)]
    feature: Option<String>,
    #[arg(long)]
    intensity_map: Option<MapArg>,
    #[arg(long)]
    roi_mode: Option<RoiModeArg>,
    #[arg(long)]
    roi_edge_mm: Option<f64>,
    #[arg(long)]
    density_mm3: Option<f64>,
    #[arg(short, long)]
    k: Option<usize>,
    /// Comma-separated K values to merge down to.
    #[arg(long, value_delimiter = ',')]
    merge_checkpoints: Option<Vec<usize>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV.
    #[arg(short, long)]
    output: PathBuf,
    /// Fail unless the model uses this feature kind.
    #[arg(long)]
    feature: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Also run split-half reproducibility.
    #[arg(long)]
    repro: bool,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            if matches!(e, Error::InvalidConfig { .. } | Error::KindMismatch { .. }) {
                return 2;
            }
        }
    }
    1
}

/// Joins the cause chain, skipping causes whose text the previous message
/// already contains.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::MergeSweep(a) => cmd_merge_sweep(a),
        Command::Repro(a) => cmd_repro(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn parse_feature(s: &str) -> Result<FeatureKind> {
    s.parse::<FeatureKind>().map_err(anyhow::Error::new)
}

fn resolve_config(a: &PipelineArgs) -> Result<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_json_file(p)
            .map_err(|e| usage(format!("reading config: {e}")))?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &a.output_dir {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(f) = &a.feature {
        cfg.feature = parse_feature(f)?;
    }
    if let Some(m) = a.intensity_map {
        cfg.intensity_map = Some(match m {
            MapArg::Linear => IntensityMap::Linear,
            MapArg::Sigmoid => IntensityMap::sigmoid(),
        });
    }
    if let Some(r) = a.roi_mode {
        cfg.sampling.roi_mode = match r {
            RoiModeArg::Cube3d => RoiMode::Cube3d,
            RoiModeArg::Square2d => RoiMode::Square2d,
        };
    }
    if let Some(v) = a.roi_edge_mm {
        cfg.sampling.roi_edge_mm = v;
    }
    if let Some(v) = a.density_mm3 {
        cfg.sampling.density_mm3 = v;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(c) = &a.merge_checkpoints {
        cfg.merge_checkpoints = c.clone();
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if cfg.manifest.is_none() {
        return Err(usage("invalid manifest: no dataset manifest given (--manifest or config)"));
    }
    cfg.validate_paths()?;
    Ok(cfg)
}

fn output_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| usage("invalid output_dir: no output directory given (--output-dir or config)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_dataset(cfg: &PipelineConfig, require_labels: bool) -> Result<Dataset> {
    let manifest = cfg.manifest.as_ref().expect("validated");
    Dataset::load(manifest, cfg, require_labels).context("loading dataset")
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::default_suite(a.seed.unwrap_or(0)),
    };
    let mut reweigh = false;
    if let Some(n) = a.n_scans {
        spec.n_scans = n;
        reweigh = true;
    }
    if let Some(d) = &a.dims {
        let d: [usize; 3] = d
            .as_slice()
            .try_into()
            .map_err(|_| usage(format!("invalid dims: expected nx,ny,nz, got {} values", d.len())))?;
        spec.dims = d;
    }
    if let Some(s) = a.spacing {
        spec.spacing_mm = [s; 3];
    }
    if let Some(j) = a.hu_jitter {
        spec.hu_jitter = j;
    }
    if let Some(s) = a.seed {
        reweigh |= s != spec.seed;
        spec.seed = s;
    }
    if reweigh {
        spec.regenerate_weights();
    }
    spec.validate()?;
    let scans = generate_phantom(&spec).context("generating phantom")?;
    write_phantom(&a.output_dir, &spec, &scans).context("writing phantom")?;
    println!("wrote {} scans to {}", scans.len(), a.output_dir.display());
    Ok(())
}

fn cmd_train(a: PipelineArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let out = output_dir(&cfg)?;
    let dataset = load_dataset(&cfg, true)?;
    let scans: Vec<_> = dataset.scans.iter().collect();
    let models = train(&scans, &cfg).context("training")?;
    for m in &models {
        if models.len() > 1 {
            m.save(out.join(format!("model_k{}.json", m.k())))?;
        }
    }
    let last = models.last().expect("at least one model");
    last.save(out.join("model.json"))?;
    last.regression.write_csv(out.join("explanation.csv"))?;
    if !last.prototypes.lineage.is_empty() {
        write_lineage_csv(out.join("lineage.csv"), &last.prototypes.lineage)?;
    }
    println!("trained K = {} on {} scans; model at {}", last.k(), scans.len(), out.join("model.json").display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = TrainedModel::load(&a.model).context("loading model")?;
    if let Some(f) = &a.feature {
        let requested = parse_feature(f)?;
        if requested != model.prototypes.feature_kind {
            return Err(anyhow::Error::new(Error::KindMismatch {
                expected: model.prototypes.feature_kind.to_string(),
                got: requested.to_string(),
            }));
        }
    }
    let manifest = texproto::volume::Manifest::read(&a.manifest)?;
    let root = a.manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut buf = Vec::new();
    write!(buf, "scan_id")?;
    for k in 0..model.k() {
        write!(buf, ",h{k}")?;
    }
    writeln!(buf, ",cle,ple,pse,ne")?;
    for entry in &manifest.scans {
        let vol = read_volume(root.join(&entry.volume))?;
        let mask = read_mask(root.join(&entry.mask))?;
        let scan = model.sample(&entry.scan_id, &vol, &mask).with_context(|| format!("sampling {}", entry.scan_id))?;
        let (h, y) = model.predict_scan(&scan)?;
        write!(buf, "{}", entry.scan_id)?;
        for v in &h.values {
            write!(buf, ",{v}")?;
        }
        let y = y.as_array();
        writeln!(buf, ",{},{},{},{}", y[0], y[1], y[2], y[3])?;
    }
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.output, buf).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

fn print_icc(report: &CvReport) {
    for &k in &report.ks {
        let row: Vec<String> = TissueClass::ALL
            .iter()
            .map(|&c| format!("{} {:.3}", c.name(), report.get(c, k).map_or(f64::NAN, |r| r.icc)))
            .collect();
        println!("K = {k}: {}", row.join(", "));
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = resolve_config(&a.pipeline)?;
    let out = output_dir(&cfg)?;
    let dataset = load_dataset(&cfg, true)?;
    let report = cross_validate(&dataset, &cfg).context("cross validation")?;
    report.write_icc_csv(out.join("icc.csv"))?;
    report.write_predictions_csv(out.join("cv_predictions.csv"))?;
    print_icc(&report);
    if a.repro {
        let repro = split_half_reproducibility(&dataset, &cfg).context("split-half reproducibility")?;
        write_repro_csv(out.join("repro.csv"), &repro)?;
    }
    Ok(())
}

fn cmd_merge_sweep(a: PipelineArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    if cfg.merge_checkpoints.is_empty() {
        return Err(usage("invalid merge_checkpoints: merge-sweep needs at least one checkpoint"));
    }
    let out = output_dir(&cfg)?;
    let dataset = load_dataset(&cfg, true)?;
    let report = cross_validate(&dataset, &cfg).context("cross validation")?;
    report.write_icc_csv(out.join("icc.csv"))?;
    report.write_predictions_csv(out.join("cv_predictions.csv"))?;
    print_icc(&report);
    let repro = split_half_reproducibility(&dataset, &cfg).context("split-half reproducibility")?;
    write_repro_csv(out.join("repro.csv"), &repro)?;
    Ok(())
}

fn cmd_repro(a: PipelineArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let out = output_dir(&cfg)?;
    let dataset = load_dataset(&cfg, true)?;
    let repro = split_half_reproducibility(&dataset, &cfg).context("split-half reproducibility")?;
    write_repro_csv(out.join("repro.csv"), &repro)?;
    for r in &repro {
        println!("K = {}: R = {:.3}", r.k, r.r);
    }
    Ok(())
}
