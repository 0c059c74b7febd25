//! Command-line front end. Every subcommand echoes its effective settings
//! to a `run-config` file next to what it writes.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::balancer::{plan_auto, plan_from_factors, AugmentationPlan, AutoTarget};
use crate::baseline::{predict_images, train_centroids, CentroidModel, DEFAULT_BINS, DEFAULT_TEMPERATURE};
use crate::evalkit::{confusion, fuse, load_probabilities, predict, vote, EnsembleConfig, EvaluationReport};
use crate::imgops::max_rgb_normalize;
use crate::manifest::{class_counts, parse_ground_truth, ClassLabel, IMAGE_EXTENSIONS, NUM_CLASSES};
use crate::pipeline::{encode_png, execute, expand, load_image, write_atomic, ExecuteOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Io(m) => m,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "dermaug", version, about = "Balance, augment, colour-normalize and evaluate lesion image datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print per-class image counts of a ground-truth CSV
    Stats {
        ground_truth: PathBuf,
        /// Also write the counts as `class,count` CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute a flip + rotation balancing plan
    Plan(PlanArgs),
    /// Execute a plan: write augmented PNGs and an output manifest
    Augment(AugmentArgs),
    /// Apply max-RGB normalization to every image in a directory
    Normalize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Fuse probability CSVs by weighted averaging (or weighted voting)
    Fuse {
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        /// Comma-separated weights, one per file; defaults to 0.5 each
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Weighted argmax vote instead of probability averaging
        #[arg(long)]
        vote: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a probability CSV against ground truth
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Directory receiving metrics.csv, recall.csv and report.txt
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Colour-histogram nearest-centroid reference classifier
    #[command(subcommand)]
    Baseline(BaselineCommand),
}

#[derive(Args, Debug)]
struct PlanArgs {
    ground_truth: PathBuf,
    /// Seven factors in AKIEC,BCC,BKL,DF,MEL,NV,VASC order, or CODE=n pairs
    #[arg(long, conflicts_with = "target", required_unless_present = "target")]
    factors: Option<String>,
    /// Target class size: a positive integer or `largest-class`
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    no_flip: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Apply max-RGB normalization to every output (default)
    #[arg(long, overrides_with = "no_normalize")]
    normalize: bool,
    #[arg(long, overrides_with = "normalize")]
    no_normalize: bool,
    /// Normalize each source before flipping and rotating
    #[arg(long)]
    normalize_first: bool,
    /// Record failing items and continue
    #[arg(long)]
    keep_going: bool,
}

#[derive(Subcommand, Debug)]
enum BaselineCommand {
    /// Fit class centroids on a labelled image set
    Train {
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a probability CSV for a set of images
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Restrict to (and order by) the ids in this ground-truth CSV;
        /// otherwise every jpg/jpeg/png in the directory is scored
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Stats { ground_truth, out } => cmd_stats(&ground_truth, out.as_deref()),
        Command::Plan(args) => cmd_plan(&args),
        Command::Augment(args) => cmd_augment(&args),
        Command::Normalize { input, out, workers } => cmd_normalize(&input, &out, workers),
        Command::Fuse { predictions, weights, vote, out } => cmd_fuse(&predictions, weights, vote, &out),
        Command::Evaluate { predictions, ground_truth, out_dir } => cmd_evaluate(&predictions, &ground_truth, &out_dir),
        Command::Baseline(b) => cmd_baseline(b),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// `<dir>/run-config` for directory outputs, `<file>.run-config` for files.
fn write_run_config(output: &Path, is_dir: bool, settings: &[(&str, String)]) -> Result<(), CliError> {
    let path = if is_dir {
        output.join("run-config")
    } else {
        let mut p = output.as_os_str().to_owned();
        p.push(".run-config");
        PathBuf::from(p)
    };
    let mut text = String::new();
    for (k, v) in settings {
        writeln!(text, "{k} = {v}").unwrap();
    }
    write_text(&path, &text)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// `96274` -> `96,274`.
pub fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Parses a factor list into canonical order. Accepts seven bare integers
/// in AKIEC,BCC,BKL,DF,MEL,NV,VASC order, or `CODE=n` pairs naming every class.
pub fn parse_factors(s: &str) -> Result<[u32; NUM_CLASSES], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != NUM_CLASSES {
        return Err(format!("--factors needs {NUM_CLASSES} values, got {}", parts.len()));
    }
    let num = |v: &str| v.parse::<u32>().map_err(|_| format!("invalid factor `{v}`"));
    let mut out = [0u32; NUM_CLASSES];
    if parts.iter().all(|p| p.contains('=')) {
        let mut seen = [false; NUM_CLASSES];
        for p in parts {
            let (code, v) = p.split_once('=').unwrap();
            let label: ClassLabel = code.trim().parse().map_err(|e| format!("{e}"))?;
            if std::mem::replace(&mut seen[label.index()], true) {
                return Err(format!("class {label} given twice"));
            }
            out[label.index()] = num(v.trim())?;
        }
    } else {
        for (label, p) in ClassLabel::TABLE_ORDER.iter().zip(parts) {
            out[label.index()] = num(p)?;
        }
    }
    Ok(out)
}

fn counts_table(counts: &[u64; NUM_CLASSES]) -> String {
    let mut out = String::new();
    for c in ClassLabel::TABLE_ORDER {
        write!(out, "{:>8}", c.code()).unwrap();
    }
    writeln!(out, "{:>10}", "TOTAL").unwrap();
    for c in ClassLabel::TABLE_ORDER {
        write!(out, "{:>8}", counts[c.index()]).unwrap();
    }
    writeln!(out, "{:>10}", group_thousands(counts.iter().sum())).unwrap();
    out
}

fn cmd_stats(gt: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let m = parse_ground_truth(&read_text(gt)?).map_err(data)?;
    let counts = class_counts(&m);
    print!("{}", counts_table(&counts.0));
    if let Some(out) = out {
        let mut csv = String::from("class,count\n");
        for c in ClassLabel::TABLE_ORDER {
            writeln!(csv, "{c},{}", counts.get(c)).unwrap();
        }
        writeln!(csv, "TOTAL,{}", counts.total()).unwrap();
        write_text(out, &csv)?;
        write_run_config(out, false, &[("command", "stats".into()), ("ground_truth", display(gt))])?;
    }
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> Result<(), CliError> {
    let m = parse_ground_truth(&read_text(&args.ground_truth)?).map_err(data)?;
    let counts = class_counts(&m);
    let flip = !args.no_flip;
    let plan = match (&args.factors, &args.target) {
        (Some(f), _) => plan_from_factors(&counts, parse_factors(f).map_err(CliError::Usage)?, flip),
        (None, Some(t)) => {
            let target: AutoTarget = t.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
            plan_auto(&counts, flip, target).map_err(|e| CliError::Usage(e.to_string()))?
        }
        (None, None) => return Err(CliError::Usage("one of --factors or --target is required".into())),
    };
    print!("{plan}");
    println!("total after flipping: {}", group_thousands(plan.total_after_flip()));
    println!("total after rotation: {}", group_thousands(plan.total_output()));
    if let Some(out) = &args.out {
        write_text(out, &plan.to_csv())?;
        write_run_config(
            out,
            false,
            &[
                ("command", "plan".into()),
                ("ground_truth", display(&args.ground_truth)),
                ("flip", flip.to_string()),
                ("factors", args.factors.clone().unwrap_or_else(|| "-".into())),
                ("target", args.target.clone().unwrap_or_else(|| "-".into())),
            ],
        )?;
    }
    Ok(())
}

fn cmd_augment(args: &AugmentArgs) -> Result<(), CliError> {
    if args.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let plan = AugmentationPlan::from_csv(&read_text(&args.plan)?).map_err(data)?;
    let m = parse_ground_truth(&read_text(&args.ground_truth)?).map_err(data)?;
    let normalize = !args.no_normalize;
    let items = expand(&plan, &m, normalize).map_err(data)?;
    let opts =
        ExecuteOptions { workers: args.workers, normalize_first: args.normalize_first, keep_going: args.keep_going };
    let report = execute(&items, &args.images, &args.out, &opts).map_err(|e| {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            data(e)
        }
    })?;
    write_text(&args.out.join("manifest.csv"), &report.manifest.to_csv())?;
    write_run_config(
        &args.out,
        true,
        &[
            ("command", "augment".into()),
            ("plan", display(&args.plan)),
            ("ground_truth", display(&args.ground_truth)),
            ("images", display(&args.images)),
            ("workers", args.workers.to_string()),
            ("normalize", normalize.to_string()),
            ("normalize_first", args.normalize_first.to_string()),
            ("keep_going", args.keep_going.to_string()),
        ],
    )?;
    println!("augment: {} of {} files written", report.manifest.len(), items.len());
    print!("{}", counts_table(&report.manifest.class_counts()));
    if !report.failures.is_empty() {
        for f in &report.failures {
            eprintln!("failed: {f}");
        }
        return Err(CliError::Data(format!("{} items failed", report.failures.len())));
    }
    Ok(())
}

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| CliError::Io(e.to_string()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((stem, PathBuf::from(path.file_name().unwrap())));
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CliError::Data(format!("several files share the image id `{}`", w[0].0)));
    }
    Ok(out)
}

fn cmd_normalize(input: &Path, out: &Path, workers: usize) -> Result<(), CliError> {
    if workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let images = list_images(input)?;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Io(e.to_string()))?;
    pool.install(|| {
        images.par_iter().try_for_each(|(id, rel)| {
            let img = load_image(&input.join(rel)).map_err(CliError::Data)?;
            let dest = out.join(format!("{id}.png"));
            write_atomic(&dest, &encode_png(&max_rgb_normalize(&img)))
                .map_err(|e| CliError::Io(format!("{}: {e}", dest.display())))
        })
    })?;
    write_run_config(
        out,
        true,
        &[("command", "normalize".into()), ("in", display(input)), ("workers", workers.to_string())],
    )?;
    println!("normalize: {} files written", images.len());
    Ok(())
}

fn cmd_fuse(paths: &[PathBuf], weights: Option<Vec<f64>>, use_vote: bool, out: &Path) -> Result<(), CliError> {
    let weights = weights.unwrap_or_else(|| vec![0.5; paths.len()]);
    if weights.len() != paths.len() {
        return Err(CliError::Usage(format!("{} weights given for {} prediction files", weights.len(), paths.len())));
    }
    let cfg = EnsembleConfig::new(weights.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let matrices = paths
        .iter()
        .map(|p| load_probabilities(&read_text(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = if use_vote { vote(&matrices, &cfg) } else { fuse(&matrices, &cfg) }.map_err(data)?;
    write_text(out, &fused.to_csv())?;
    let joined = |v: Vec<String>| v.join(",");
    write_run_config(
        out,
        false,
        &[
            ("command", "fuse".into()),
            ("predictions", joined(paths.iter().map(|p| display(p)).collect())),
            ("weights", joined(weights.iter().map(f64::to_string).collect())),
            ("mode", if use_vote { "vote" } else { "average" }.into()),
        ],
    )?;
    println!("fuse: {} rows from {} models", fused.len(), paths.len());
    Ok(())
}

fn cmd_evaluate(pred: &Path, gt: &Path, out_dir: &Path) -> Result<(), CliError> {
    let probs = load_probabilities(&read_text(pred)?).map_err(data)?;
    let truth = parse_ground_truth(&read_text(gt)?).map_err(data)?;
    let cm = confusion(&predict(&probs), &truth).map_err(data)?;
    let report = EvaluationReport::from_confusion(cm).map_err(data)?;
    let table = report.to_table();
    print!("{table}");
    write_text(&out_dir.join("metrics.csv"), &report.metrics_csv())?;
    write_text(&out_dir.join("recall.csv"), &report.recall_csv())?;
    write_text(&out_dir.join("report.txt"), &table)?;
    write_run_config(
        out_dir,
        true,
        &[("command", "evaluate".into()), ("predictions", display(pred)), ("ground_truth", display(gt))],
    )
}

fn cmd_baseline(cmd: BaselineCommand) -> Result<(), CliError> {
    match cmd {
        BaselineCommand::Train { ground_truth, images, bins, temperature, workers, out } => {
            let m = parse_ground_truth(&read_text(&ground_truth)?).map_err(data)?;
            let model = train_centroids(&m, &images, bins, temperature, workers).map_err(data)?;
            write_text(&out, &model.to_csv())?;
            write_run_config(
                &out,
                false,
                &[
                    ("command", "baseline train".into()),
                    ("ground_truth", display(&ground_truth)),
                    ("images", display(&images)),
                    ("bins", bins.to_string()),
                    ("temperature", temperature.to_string()),
                    ("workers", workers.to_string()),
                ],
            )?;
            let present = model.centroids.iter().filter(|c| c.is_some()).count();
            println!("baseline train: {} images, {present} classes present", m.len());
            Ok(())
        }
        BaselineCommand::Predict { model, images, ground_truth, workers, out } => {
            let centroid_model = CentroidModel::from_csv(&read_text(&model)?).map_err(data)?;
            let list = match &ground_truth {
                Some(gt) => parse_ground_truth(&read_text(gt)?)
                    .map_err(data)?
                    .entries()
                    .iter()
                    .map(|e| (e.image_id.clone(), e.path.clone()))
                    .collect(),
                None => list_images(&images)?,
            };
            let probs = predict_images(&centroid_model, &list, &images, workers).map_err(data)?;
            write_text(&out, &probs.to_csv())?;
            write_run_config(
                &out,
                false,
                &[
                    ("command", "baseline predict".into()),
                    ("model", display(&model)),
                    ("images", display(&images)),
                    ("ground_truth", ground_truth.as_deref().map_or_else(|| "-".into(), display)),
                    ("workers", workers.to_string()),
                ],
            )?;
            println!("baseline predict: {} rows", probs.len());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_lists() {
        let f = parse_factors("22,13,6,60,6,1,52").unwrap();
        assert_eq!(f[ClassLabel::Akiec.index()], 22);
        assert_eq!(f[ClassLabel::Mel.index()], 6);
        assert_eq!(f[ClassLabel::Vasc.index()], 52);
        assert_eq!(parse_factors("MEL=6,NV=1,BCC=13,AKIEC=22,BKL=6,DF=60,VASC=52").unwrap(), f);
        assert!(parse_factors("1,2,3,4,5,6").is_err());
        assert!(parse_factors("1,2,3,4,5,6,x").is_err());
        assert!(parse_factors("MEL=1,MEL=1,BCC=1,AKIEC=1,BKL=1,DF=1,VASC=1").is_err());
    }

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(10_015), "10,015");
        assert_eq!(group_thousands(96_274), "96,274");
        assert_eq!(group_thousands(1_000_000), "1,000,000");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["dermaug"]), EXIT_USAGE);
        assert_eq!(run(["dermaug", "plan", "gt.csv"]), EXIT_USAGE);
        assert_eq!(run(["dermaug", "stats", "/nonexistent/gt.csv"]), EXIT_IO);
    }
}
