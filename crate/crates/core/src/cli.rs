//! `eso` command-line interface: `gen`, `train`, `infer` and `eval`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{build_report, evaluate_case, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, Stage};
use crate::phantom::{load_case, read_case, read_manifest, summarize, write_dataset, Case};
use crate::pipeline::{infer_volume, prepare_cases, read_detections, train_stage, write_detections};

/// Environment variable capping worker threads (0 or unset = all cores).
pub const THREADS_ENV: &str = "ESO_NUM_THREADS";
/// Training log file written next to the output checkpoint.
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
/// Resolved configuration written next to every primary output.
pub const RUN_CONFIG_JSON: &str = "run_config.json";

#[derive(Debug, Parser)]
#[command(name = "eso", version, about = "Detection of extremely small objects in 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset
    Gen(GenArgs),
    /// Run one training stage
    Train(TrainArgs),
    /// Detect objects in one case
    Infer(InferArgs),
    /// Score detections against a dataset
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON) [default: built-in defaults]
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output dataset directory [default: paths.data from the config]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of cases
    #[arg(long, default_value_t = 24)]
    pub n_cases: usize,
    /// Seed for every section [default: seed from the config]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Training dataset directory [default: paths.data from the config]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Stage: backbone, rpn_step1, rpn_step2, rcn_step1 or rcn_step2
    #[arg(long)]
    pub stage: Stage,
    /// Checkpoint of the previous stage [default: none; required after backbone]
    #[arg(long, value_name = "DIR")]
    pub ckpt_in: Option<PathBuf>,
    /// Output checkpoint directory [default: paths.checkpoints/<stage>]
    #[arg(long, value_name = "DIR")]
    pub ckpt_out: Option<PathBuf>,
    /// Seed for every section [default: seed from the config]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Checkpoint trained through rcn_step2
    #[arg(long, value_name = "DIR")]
    pub ckpt: PathBuf,
    /// Case directory
    #[arg(long, value_name = "DIR")]
    pub case: PathBuf,
    /// Detections file [default: paths.detections/<case>.json]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Directory of `<case>.json` detection files [default: paths.detections]
    #[arg(long, value_name = "DIR")]
    pub detections: Option<PathBuf>,
    /// Dataset directory [default: paths.data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Report directory [default: paths.report]
    #[arg(long, value_name = "DIR")]
    pub report: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::PatchTooSmall { .. } | Error::NotNormalized(_) => 2,
        Error::Io { .. } | Error::Json { .. } | Error::RawSizeMismatch { .. } | Error::Corrupt(_) => 3,
        Error::StageOrder(_) => 4,
        Error::IncompatibleCheckpoint(_) => 5,
        Error::IdMismatch(_) => 6,
        _ => 1,
    }
}

/// Applies [`THREADS_ENV`] to the global thread pool.
pub fn init_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {s:?}")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // a pool built earlier in the process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or paths section)")))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join(RUN_CONFIG_JSON);
    std::fs::write(&p, cfg.to_json_pretty()).map_err(|e| Error::io(&p, e))
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

pub fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    let out = required(a.out, &cfg.paths.data, "output directory")?;
    let (manifest, cases) = write_dataset(&out, &cfg.phantom, a.n_cases)?;
    let s = summarize(cases.iter().flat_map(|c| &c.objects), cases.len());
    println!("cases: {}", manifest.cases.len());
    println!("objects: {}", s.n_objects);
    println!(
        "size histogram [5,10) [10,20) [20,50) [50,100) [100,inf): {:?}",
        s.size_histogram
    );
    println!("fraction below 10 voxels: {:.3}", s.frac_below_10vox);
    println!("lacune fraction: {:.3}", s.lacune_fraction);
    println!("unanimous agreement rate: {:.3}", s.unanimous_fraction);
    Ok(())
}

fn load_all(root: &Path) -> Result<(Vec<String>, Vec<Case>)> {
    let m = read_manifest(root)?;
    let cases = m.cases.iter().map(|n| load_case(root, n)).collect::<Result<_>>()?;
    Ok((m.cases, cases))
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    let data = required(a.data, &cfg.paths.data, "dataset directory")?;
    let out = match a.ckpt_out {
        Some(p) => p,
        None => required(None, &cfg.paths.checkpoints, "output checkpoint directory")?.join(a.stage.as_str()),
    };
    let start = match &a.ckpt_in {
        Some(p) => Some(load_checkpoint(p, Some(&cfg.model))?),
        None => None,
    };
    if let Some(req) = a.stage.prerequisite() {
        match &start {
            None => {
                return Err(Error::StageOrder(format!(
                    "stage {} requires --ckpt-in from stage {req}",
                    a.stage
                )))
            }
            Some(ck) if ck.stage != req => {
                return Err(Error::StageOrder(format!(
                    "stage {} requires --ckpt-in from stage {req}, got {}",
                    a.stage, ck.stage
                )))
            }
            Some(_) => {}
        }
    }
    let (_, cases) = load_all(&data)?;
    let settings = cfg.stage_settings(a.stage);
    let prepared = prepare_cases(&cases, &settings.patch)?;
    let (ckpt, log) = train_stage(a.stage, &prepared, start, &settings)?;
    save_checkpoint(&out, &ckpt)?;
    log.write_csv(&out.join(TRAIN_LOG_CSV))?;
    write_config(&out, &cfg)?;
    let last = log.rows.last().expect("at least one iteration");
    println!("stage {} finished after {} iterations", a.stage, log.rows.len());
    println!("final total loss: {}", last.total);
    let parts = [
        ("rmse", last.rmse),
        ("cls", last.cls),
        ("rater", last.rater),
        ("reg", last.reg),
        ("w_reg", last.w_reg),
    ];
    for (k, v) in parts {
        if let Some(v) = v {
            println!("final {k}: {v}");
        }
    }
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn case_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into())
}

pub fn cmd_infer(a: InferArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let ckpt = load_checkpoint(&a.ckpt, None)?;
    let case = read_case(&a.case)?;
    let out = match a.out {
        Some(p) => p,
        None => required(None, &cfg.paths.detections, "detections file")?.join(format!("{}.json", case_name(&a.case))),
    };
    let dets = infer_volume(&case.volume, &ckpt, &cfg.infer)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_detections(&out, &dets)?;
    println!("detections: {}", dets.len());
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let det_dir = required(a.detections, &cfg.paths.detections, "detections directory")?;
    let data = required(a.data, &cfg.paths.data, "dataset directory")?;
    let report_dir = required(a.report, &cfg.paths.report, "report directory")?;
    let report = evaluate_dirs(&det_dir, &data, &cfg)?;
    report.write(&report_dir)?;
    print_report(&report);
    Ok(())
}

/// Pairs `<case>.json` files with the cases of the manifest; the two name
/// sets must be equal.
pub fn evaluate_dirs(det_dir: &Path, data: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let manifest = read_manifest(data)?;
    let rd = std::fs::read_dir(det_dir).map_err(|e| Error::io(det_dir, e))?;
    let mut found = BTreeSet::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(det_dir, e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            if let Some(stem) = p.file_stem() {
                found.insert(stem.to_string_lossy().into_owned());
            }
        }
    }
    let expected: BTreeSet<String> = manifest.cases.iter().cloned().collect();
    if found != expected {
        let missing: Vec<_> = expected.difference(&found).collect();
        let extra: Vec<_> = found.difference(&expected).collect();
        return Err(Error::IdMismatch(format!(
            "detections lack {missing:?}, unknown {extra:?}"
        )));
    }
    let mut per_case = Vec::with_capacity(manifest.cases.len());
    for name in &manifest.cases {
        let case = load_case(data, name)?;
        let dets = read_detections(&det_dir.join(format!("{name}.json")))?;
        per_case.push(evaluate_case(name, &dets, &case.objects, case.volume.spacing_mm)?);
    }
    build_report(&per_case, &cfg.eval)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
}

pub fn print_report(r: &EvalReport) {
    println!("objects: {}  matched: {}", r.n_gt, r.n_matched);
    println!("sensitivity: {}", fmt_opt(r.sensitivity));
    println!("sensitivity (>= 10 voxels): {}", fmt_opt(r.sensitivity_large));
    println!("sensitivity (< 10 voxels): {}", fmt_opt(r.sensitivity_small));
    for s in &r.strata {
        println!(
            "stratum {}: {} objects, median coverage of box {}",
            s.stratum.as_str(),
            s.count,
            fmt_opt(s.median_coverage_of_pred)
        );
    }
    if let Some(t) = &r.size_comparison.test {
        println!(
            "scale matched vs missed: U = {}, p = {:.3e} ({:?})",
            t.u, t.p_two_sided, t.method
        );
    }
    println!("detections: {}  matched to no object: {}", r.n_detections, r.unmatched_detections);
}
