//! The `spn` command line.
//!
//! Exit codes: 0 success, 1 a check failed (or a run aborted), 2 usage or
//! input-format error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity::{
    build_dense_g, combined_affinity, impulse_response, laplacian_decompose, sparsity_stats,
    SparsityStats,
};
use crate::config::TrainConfig;
use crate::error::{Result, SpnError};
use crate::gradcheck;
use crate::io::{
    map_from_tensor, read_image_pnm, read_label_pgm, read_tensor, write_label_pgm, write_tensor,
    TensorFile,
};
use crate::propagation::{ConnectionKind, Direction, GateTensor};
use crate::tensor::{LabelMap, Map};
use crate::training::data::file_sha256;
use crate::training::{eval_iou, gen_toy_dataset, load_checkpoint, refine, train};
use crate::verify::{run_verify, Fault, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "spn",
    version,
    about = "Spatial propagation networks: verification, diagnostics, training"
)]
pub struct Cli {
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the dense-oracle property suites.
    Verify(VerifyArgs),
    /// Compare reverse passes with finite differences.
    Gradcheck(GradcheckArgs),
    /// Materialize G, A and L for one direction.
    Affinity(AffinityArgs),
    /// Impulse support image of a scan.
    Impulse(ImpulseArgs),
    /// Generate the synthetic dataset.
    GenData(ConfigArgs),
    /// Train the refinement pipeline.
    Train(ConfigArgs),
    /// Refine one coarse mask with a checkpoint.
    Refine(RefineArgs),
    /// Per-class and mean IoU of two label maps.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// one-way, three-way or both.
    #[arg(long, default_value = "both")]
    kind: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// CSV report path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, hide = true, default_value = "none")]
    inject_fault: String,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates per check.
    #[arg(long, default_value_t = 120)]
    coords: usize,
    #[arg(long, hide = true, default_value = "none")]
    inject_fault: String,
}

#[derive(Args, Debug)]
struct AffinityArgs {
    /// Gate tensor file, (H, W, C·4·K) layout.
    #[arg(long, conflicts_with = "random")]
    gates: Option<PathBuf>,
    /// Use seeded random gates instead of a file.
    #[arg(long)]
    random: bool,
    /// Use all-zero gates.
    #[arg(long, conflicts_with_all = ["gates", "random"])]
    zero: bool,
    #[arg(long, default_value = "left-to-right")]
    dir: String,
    #[arg(long, default_value = "three-way")]
    kind: String,
    #[arg(long, default_value_t = 6)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ImpulseArgs {
    #[arg(long, default_value = "three-way")]
    kind: String,
    /// A direction, or `all` for the union of the four.
    #[arg(long, default_value = "left-to-right")]
    dir: String,
    #[arg(long, default_value_t = 9)]
    size: usize,
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    col: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// PGM support image (255 inside the support).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Dataset directory (gen-data) or run directory (train).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory to train on.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM guidance image.
    #[arg(long)]
    image: PathBuf,
    /// Coarse class probabilities, (H, W, classes) tensor file.
    #[arg(long)]
    coarse: PathBuf,
    /// Refined label map (PGM).
    #[arg(long)]
    out_labels: PathBuf,
    /// Refined probabilities (tensor file).
    #[arg(long)]
    out_probs: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Defaults to one more than the largest label seen.
    #[arg(long)]
    classes: Option<usize>,
}

/// Failure classes mapped onto exit codes.
enum Outcome {
    Ok,
    CheckFailed,
}

fn usage(msg: impl Into<String>) -> SpnError {
    SpnError::Config(msg.into())
}

fn exit_code_for(e: &SpnError) -> i32 {
    match e {
        SpnError::Config(_)
        | SpnError::Format { .. }
        | SpnError::Dimension(_)
        | SpnError::Shape(_) => EXIT_USAGE,
        SpnError::Checkpoint(_) => EXIT_USAGE,
        _ => EXIT_FAIL,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    // a pool may already exist when called repeatedly in-process
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::CheckFailed) => EXIT_FAIL,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Verify(a) => cmd_verify(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Affinity(a) => cmd_affinity(a),
        Command::Impulse(a) => cmd_impulse(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn parse_kind(s: &str) -> Result<ConnectionKind> {
    s.parse()
        .map_err(|_| usage(format!("unknown connection kind '{s}'")))
}

fn parse_dir(s: &str) -> Result<Direction> {
    s.parse()
        .map_err(|_| usage(format!("unknown direction '{s}'")))
}

fn cmd_verify(a: VerifyArgs) -> Result<Outcome> {
    let kind = match a.kind.as_str() {
        "both" => None,
        k => Some(parse_kind(k)?),
    };
    let opts = VerifyOptions {
        size: a.size,
        trials: a.trials,
        seed: a.seed,
        kind,
        fault: a.inject_fault.parse()?,
    };
    let report = run_verify(&opts)?;
    for s in &report.suites {
        println!(
            "{:<13} {}  cases={:<5} max_error={:.3e} tol={:e}  {}",
            s.name,
            if s.pass { "PASS" } else { "FAIL" },
            s.cases,
            s.max_error,
            s.tolerance,
            s.message
        );
    }
    if let Some(p) = &a.report {
        fs::write(p, report.to_csv())?;
    }
    Ok(if report.pass() {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    })
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    if a.coords == 0 {
        return Err(usage("--coords must be positive"));
    }
    let fault: Fault = a.inject_fault.parse()?;
    let reports = gradcheck::run_all(a.seed, a.coords, fault)?;
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{} {}", if r.pass() { "PASS" } else { "FAIL" }, r.summary());
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    Ok(if reports.iter().all(|r| r.pass()) {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    })
}

fn write_matrix(path: &Path, m: &crate::dense::DenseMatrix) -> Result<()> {
    TensorFile::new(&[m.rows(), m.cols()], m.data())?.write(path)
}

fn cmd_affinity(a: AffinityArgs) -> Result<Outcome> {
    let kind = parse_kind(&a.kind)?;
    let dir = parse_dir(&a.dir)?;
    let gates: GateTensor<f64> = if let Some(p) = &a.gates {
        GateTensor::from_map(map_from_tensor(&TensorFile::read(p)?)?, kind)?
    } else if a.zero {
        GateTensor::zeros(a.size, a.size, a.channel + 1, kind)?
    } else if a.random {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let raw = GateTensor::random(a.size, a.size, a.channel + 1, kind, -1.0, 1.0, &mut rng)?;
        crate::stability::project_gates(&raw)?
    } else {
        return Err(usage("one of --gates, --random or --zero is required"));
    };
    let ga = build_dense_g(&gates, dir, a.channel)?;
    let lap = laplacian_decompose(&ga)?;
    fs::create_dir_all(&a.out)?;
    write_matrix(&a.out.join("G.spnt"), &ga.g)?;
    write_matrix(&a.out.join("A.spnt"), &lap.a)?;
    write_matrix(&a.out.join("L.spnt"), &lap.l)?;
    let (_, line) = ga.extent();
    let single = sparsity_stats(&ga.affinity(), line)?;
    let combined = sparsity_stats(&combined_affinity(&gates, a.channel)?, gates.width())?;
    let csv = format!(
        "{}\n{}\n{}\n",
        SparsityStats::csv_header(),
        single.csv_row(&format!("{kind}-{dir}")),
        combined.csv_row(&format!("{kind}-all-directions"))
    );
    fs::write(a.out.join("sparsity.csv"), &csv)?;
    let max_row_err =
        ga.g.row_sums()
            .iter()
            .fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
    let report = format!(
        "direction {dir}\nkind {kind}\nsize {}x{}\nlower_triangular {}\nmax_row_sum_error {max_row_err:e}\nnonzero_fraction {:.6}\ncombined_nonzero_fraction {:.6}\n",
        gates.height(),
        gates.width(),
        ga.g.is_lower_triangular(),
        single.nonzero_fraction,
        combined.nonzero_fraction
    );
    fs::write(a.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(Outcome::Ok)
}

fn cmd_impulse(a: ImpulseArgs) -> Result<Outcome> {
    let kind = parse_kind(&a.kind)?;
    let n = a.size;
    if n == 0 {
        return Err(usage("--size must be positive"));
    }
    let (row, col) = (a.row.unwrap_or(n / 2), a.col.unwrap_or(n / 2));
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    // nonnegative gates with Σp < 1 keep every reachable pixel nonzero
    let hi = 0.9 / kind.multiplicity() as f64;
    let gates = GateTensor::<f64>::random(n, n, 1, kind, 0.05 * hi, hi, &mut rng)?;
    let support = if a.dir == "all" {
        crate::affinity::impulse_response_all(&gates, row, col)?
    } else {
        impulse_response(&gates, parse_dir(&a.dir)?, row, col)?
    };
    let labels: Vec<u8> = support
        .data()
        .iter()
        .map(|&v| if v > 0.0 { 255 } else { 0 })
        .collect();
    write_label_pgm(&a.out, &LabelMap::new(n, n, labels)?)?;
    let rows = (0..n)
        .filter(|&r| (0..n).any(|c| support.at(r, c, 0) > 0.0))
        .count();
    let cols = (0..n)
        .filter(|&c| (0..n).any(|r| support.at(r, c, 0) > 0.0))
        .count();
    let count = support.data().iter().filter(|&&v| v > 0.0).count();
    println!("support_pixels {count}\nsupport_rows {rows}\nsupport_cols {cols}");
    for r in 0..n {
        let line: String = (0..n)
            .map(|c| if support.at(r, c, 0) > 0.0 { '#' } else { '.' })
            .collect();
        println!("{line}");
    }
    Ok(Outcome::Ok)
}

fn load_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for s in &a.sets {
        cfg.set_assignment(s)?;
    }
    Ok(cfg)
}

fn cmd_gen_data(a: ConfigArgs) -> Result<Outcome> {
    let mut cfg = load_config(&a)?;
    if let Some(o) = a.out.clone().or(a.data.clone()) {
        cfg.data_dir = o;
    }
    cfg.validate()?;
    print!("{}", cfg.to_kv_string());
    let manifest = gen_toy_dataset(&cfg)?;
    cfg.save(cfg.data_dir.join("config.txt"))?;
    println!("manifest {}", manifest.display());
    println!("manifest_sha256 {}", file_sha256(&manifest)?);
    Ok(Outcome::Ok)
}

fn cmd_train(a: ConfigArgs) -> Result<Outcome> {
    let mut cfg = load_config(&a)?;
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &a.data {
        cfg.data_dir = d.clone();
    }
    cfg.validate()?;
    print!("{}", cfg.to_kv_string());
    let report = match train(&cfg) {
        Ok(r) => r,
        Err(e @ SpnError::Diverged(_)) => {
            eprintln!("error: {e}");
            return Ok(Outcome::CheckFailed);
        }
        Err(e) => return Err(e),
    };
    println!("coarse mean IoU {:.4}", report.coarse.mean);
    for m in &report.epochs {
        println!("{}", m.csv_row());
    }
    println!(
        "best epoch {} mean IoU {:.4} ({:.1}s)",
        report.best_epoch, report.best_mean_iou, report.seconds
    );
    Ok(Outcome::Ok)
}

fn cmd_refine(a: RefineArgs) -> Result<Outcome> {
    let model = load_checkpoint::<f32>(&a.checkpoint)?;
    let image: Map<f32> = read_image_pnm(&a.image)?;
    let coarse: Map<f32> = read_tensor(&a.coarse)?;
    if coarse.channels() != model.classes {
        return Err(SpnError::Checkpoint(format!(
            "coarse has {} classes, checkpoint expects {}",
            coarse.channels(),
            model.classes
        )));
    }
    let (probs, labels) = refine(&image, &coarse, &model).map_err(|e| match e {
        SpnError::Shape(m) | SpnError::Dimension(m) => SpnError::Checkpoint(m),
        other => other,
    })?;
    write_label_pgm(&a.out_labels, &labels)?;
    if let Some(p) = &a.out_probs {
        write_tensor(p, &probs)?;
    }
    println!(
        "refined {}x{} into {}",
        labels.height(),
        labels.width(),
        a.out_labels.display()
    );
    Ok(Outcome::Ok)
}

fn cmd_eval(a: EvalArgs) -> Result<Outcome> {
    let pred = read_label_pgm(&a.pred)?;
    let gt = read_label_pgm(&a.gt)?;
    let classes = a
        .classes
        .unwrap_or(pred.max_label().max(gt.max_label()) as usize + 1);
    let r = eval_iou(&pred, &gt, classes)?;
    for (c, v) in r.per_class.iter().enumerate() {
        match v {
            Some(x) => println!("class {c} IoU {x:.6}"),
            None => println!("class {c} IoU absent"),
        }
    }
    println!("mean IoU {:.6}", r.mean);
    Ok(Outcome::Ok)
}
