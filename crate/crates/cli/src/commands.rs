use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use idcnet_core::data::{load_patch, make_split, read_rgb, scan_dataset, FileSource, InMemorySource, Normalization, PatchRecord, PatchSource, Split, SplitPlan};
use idcnet_core::gradcheck::{layer_checks, run_checks};
use idcnet_core::heatmap::{assemble_slide, write_slide_outputs, HeatmapOptions};
use idcnet_core::metrics::{write_roc_csv, EvalReport};
use idcnet_core::model::{load_checkpoint, Model, PATCH_SIZE};
use idcnet_core::train::{score_source, RunArtifacts};
use idcnet_core::{build_model, train as fit, Tensor};
use log::{info, warn};

use crate::config::{Invalid, Overrides, Resolved, RunConfig, ValidateOn};
use crate::PartArg;

/// Why a command stopped; each maps to one exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration, found before any work.
    Invalid(String),
    Runtime(anyhow::Error),
    /// At least one gradient check exceeded its tolerance.
    Gradcheck,
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Gradcheck => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Invalid(m) => f.write_str(m),
            Failure::Runtime(e) => write!(f, "{e:#}"),
            Failure::Gradcheck => f.write_str("gradient check failed"),
        }
    }
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Invalid(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<idcnet_core::Error> for Failure {
    fn from(e: idcnet_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn source(records: Vec<PatchRecord>, normalization: Normalization, preload: bool) -> anyhow::Result<Box<dyn PatchSource>> {
    let files = FileSource::new(records, normalization);
    Ok(if preload { Box::new(InMemorySource::preload(&files)?) } else { Box::new(files) })
}

fn rooted(root: &Path, records: Vec<PatchRecord>) -> Vec<PatchRecord> {
    records
        .into_iter()
        .map(|mut r| {
            r.path = root.join(&r.path);
            r
        })
        .collect()
}

/// Records under `root` with paths relative to it, so plans survive a move.
fn scan_relative(root: &Path) -> anyhow::Result<Vec<PatchRecord>> {
    let scan = scan_dataset(root)?;
    for skip in &scan.skipped {
        warn!("skipped {}: {}", skip.path.display(), skip.reason);
    }
    info!("{} patches ({} positive) from {} patients", scan.records.len(), scan.positives(), scan.patients().len());
    Ok(scan
        .records
        .into_iter()
        .map(|mut r| {
            r.path = r.path.strip_prefix(root).map(Path::to_path_buf).unwrap_or(r.path);
            r
        })
        .collect())
}

pub fn train(config: Option<&Path>, overrides: &Overrides) -> Result<(), Failure> {
    let mut run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    run.apply(overrides);
    let Resolved { run, data, output, model: model_cfg, train: train_cfg } = run.resolve()?;

    let records = scan_relative(&data)?;
    let plan = match &run.split.plan {
        Some(p) => SplitPlan::load(p)?,
        None => make_split(&records, run.seed, run.split.sizes, run.split.unit)?,
    };
    if run.split.validate_on == ValidateOn::Val && plan.val.is_empty() {
        return Err(Failure::Invalid("invalid config field `split.sizes.val`: the validation split is empty (set split.validate_on = \"train\" to validate on the training records)".into()));
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        let c = plan.counts(split);
        info!("{split:?}: {} patches, {} positive", c.total, c.positive);
    }

    fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
    write_file(&output.join("run.toml"), toml::to_string(&run).context("serializing the run config")?)?;
    plan.save(output.join("split.json"))?;

    let norm = run.data_opts.normalization;
    let train_set = source(rooted(&data, plan.records(Split::Train)?), norm, run.data_opts.preload)?;
    let val_set = match run.split.validate_on {
        ValidateOn::Val => Some(source(rooted(&data, plan.records(Split::Val)?), norm, run.data_opts.preload)?),
        ValidateOn::Train => None,
    };
    let model = build_model(&model_cfg, run.seed)?;
    info!("model with {} trainable parameters", model.trainable_count());
    let checkpoint = output.join("best.idcn");
    let mut artifacts = RunArtifacts::create(output.join("train_log.jsonl"), &checkpoint)?;
    let outcome = fit(model, train_set.as_ref(), val_set.as_deref().unwrap_or(train_set.as_ref()), &train_cfg, &mut artifacts)?;
    println!(
        "best validation accuracy {:.4} at epoch {} of {}{}",
        outcome.best_val_accuracy,
        outcome.best_epoch,
        outcome.log.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    println!("checkpoint {}", checkpoint.display());

    let test = plan.records(Split::Test)?;
    let test_counts = plan.counts(Split::Test);
    if test_counts.positive > 0 && test_counts.negative() > 0 {
        let test_set = source(rooted(&data, test), norm, false)?;
        let scores = score_source(&outcome.best, test_set.as_ref())?;
        let labels: Vec<u8> = (0..test_set.len()).map(|i| test_set.label(i)).collect();
        let (report, roc) = EvalReport::compute(&scores, &labels, run.metrics.threshold)?;
        write_file(&output.join("test_report.json"), serde_json::to_string_pretty(&report).context("serializing the report")?)?;
        write_roc(&roc, &output.join("test_roc.csv"))?;
        println!("test balanced accuracy {:.4}, F1 {:.4}, AUC {:.4}", report.balanced_accuracy, report.f1, report.auc);
    }
    Ok(())
}

fn write_roc(roc: &idcnet_core::RocCurve, path: &Path) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_roc_csv(roc, &mut buf)?;
    write_file(path, buf)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    load_checkpoint(path).map_err(|e| Failure::Runtime(anyhow!(e).context(format!("loading checkpoint {}", path.display()))))
}

pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub split: PathBuf,
    pub data: PathBuf,
    pub part: PartArg,
    pub threshold: f64,
    pub normalization: Normalization,
    pub report: Option<PathBuf>,
    pub roc: Option<PathBuf>,
}

pub fn eval(req: &EvalRequest) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&req.threshold) {
        return Err(Failure::Invalid(format!("--threshold must lie in [0, 1], got {}", req.threshold)));
    }
    for (flag, p) in [("--checkpoint", &req.checkpoint), ("--split", &req.split)] {
        if !p.is_file() {
            return Err(Failure::Invalid(format!("{flag} {} does not exist", p.display())));
        }
    }
    if !req.data.is_dir() {
        return Err(Failure::Invalid(format!("--data {} is not a directory", req.data.display())));
    }
    let model = load_model(&req.checkpoint)?;
    let plan = SplitPlan::load(&req.split)?;
    let split = match req.part {
        PartArg::Train => Split::Train,
        PartArg::Val => Split::Val,
        PartArg::Test => Split::Test,
    };
    let records = rooted(&req.data, plan.records(split)?);
    let set = FileSource::new(records, req.normalization);
    let scores = score_source(&model, &set)?;
    let labels: Vec<u8> = set.records().iter().map(|r| r.label).collect();
    let (report, roc) = EvalReport::compute(&scores, &labels, req.threshold)?;
    let json = serde_json::to_string_pretty(&report).context("serializing the report")?;
    println!("{json}");
    if let Some(p) = &req.report {
        write_file(p, &json)?;
    }
    if let Some(p) = &req.roc {
        write_roc(&roc, p)?;
    }
    Ok(())
}

fn png_files(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(input).sort_by_file_name() {
        let entry = entry.with_context(|| format!("reading {}", input.display()))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

const PREDICT_BATCH: usize = 64;

pub fn predict(checkpoint: &Path, input: &Path, normalization: Normalization, output: Option<&Path>) -> Result<(), Failure> {
    if !input.exists() {
        return Err(Failure::Invalid(format!("--input {} does not exist", input.display())));
    }
    let model = load_model(checkpoint)?;
    let files = png_files(input)?;
    if files.is_empty() {
        return Err(Failure::Invalid(format!("no .png files under {}", input.display())));
    }
    let mut csv = String::from("path,probability\n");
    for chunk in files.chunks(PREDICT_BATCH) {
        let images = chunk.iter().map(|p| load_patch(p, normalization)).collect::<idcnet_core::Result<Vec<_>>>()?;
        let probs = model.predict_proba(&Tensor::stack(&images)?)?;
        for (path, row) in chunk.iter().zip(probs.data().chunks(2)) {
            csv.push_str(&format!("{},{}\n", path.display(), row[1]));
        }
    }
    match output {
        Some(p) => write_file(p, csv)?,
        None => std::io::stdout().write_all(csv.as_bytes()).context("writing to standard output")?,
    }
    Ok(())
}

pub fn heatmap(checkpoint: &Path, data: &Path, patient: &str, output: &Path, opts: &HeatmapOptions, normalization: Normalization) -> Result<(), Failure> {
    opts.validate().map_err(|e| Failure::Invalid(e.to_string()))?;
    if !data.is_dir() {
        return Err(Failure::Invalid(format!("--data {} is not a directory", data.display())));
    }
    let scan = scan_dataset(data)?;
    let records: Vec<PatchRecord> = scan.records.iter().filter(|r| r.patient_id == patient).cloned().collect();
    if records.is_empty() {
        return Err(Failure::Invalid(format!("unknown patient {patient}; available: {}", scan.patients().join(", "))));
    }
    let model = load_model(checkpoint)?;
    let set = FileSource::new(records.clone(), normalization);
    let probs = score_source(&model, &set)?;
    let canvas = assemble_slide(&records, &probs, |r| read_rgb(&r.path))?;
    let (outputs, summary) = write_slide_outputs(&canvas, opts, output)?;
    info!("slide {}x{} from {} patches of {PATCH_SIZE}px", canvas.width, canvas.height, summary.patch_count);
    for p in [&outputs.original, &outputs.heatmap, &outputs.overlay, &outputs.summary] {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn gradcheck(seeds: u64, tolerance: f64, corrupt: Option<&str>) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(Failure::Invalid("--seeds must be at least 1".into()));
    }
    if !(tolerance > 0.0) {
        return Err(Failure::Invalid(format!("--tolerance must be positive, got {tolerance}")));
    }
    let fault = match corrupt {
        Some(kind) => Some(
            *idcnet_core::autodiff::fault::KINDS
                .iter()
                .find(|&&k| k == kind)
                .ok_or_else(|| Failure::Invalid(format!("unknown op kind {kind}; one of {}", idcnet_core::autodiff::fault::KINDS.join(", "))))?,
        ),
        None => None,
    };
    let cases = layer_checks();
    let mut worst = vec![0.0f64; cases.len()];
    for seed in 0..seeds {
        let report = match fault {
            Some(kind) => idcnet_core::autodiff::fault::with_corrupted_backward(kind, || run_checks(&cases, seed, tolerance)),
            None => run_checks(&cases, seed, tolerance),
        }?;
        for (w, r) in worst.iter_mut().zip(&report.results) {
            *w = w.max(r.max_rel_error);
        }
    }
    let mut failed = false;
    for (case, &err) in cases.iter().zip(&worst) {
        let pass = err <= tolerance;
        failed |= !pass;
        println!("{:<24} max_rel_error={err:.3e} tol={tolerance:.0e} {}", case.kind, if pass { "PASS" } else { "FAIL" });
    }
    if failed {
        Err(Failure::Gradcheck)
    } else {
        Ok(())
    }
}

pub fn synth_data(output: &Path, patients: usize, rows: u32, cols: u32, seed: u64) -> Result<(), Failure> {
    if patients == 0 || rows == 0 || cols == 0 {
        return Err(Failure::Invalid("--patients, --rows and --cols must be at least 1".into()));
    }
    let records = idcnet_core::data::synth::write_synthetic_dataset(output, patients, rows, cols, seed)?;
    let positives = records.iter().filter(|r| r.label == 1).count();
    println!("wrote {} patches ({positives} positive) under {}", records.len(), output.display());
    Ok(())
}
