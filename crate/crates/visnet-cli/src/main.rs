//! Command-line front end: parameter accounting, gradient checking, the
//! synthetic training demo, retrieval evaluation, background augmentation,
//! and batch-composition dumps.
//!
//! Exit codes are a stable contract: 0 success, 2 input or config error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use visnet::arch::{check_reference, count_parameters, default_arch, ArchSpec};
use visnet::augment::{
    augment_pipeline, augmented_path, mask_path, per_image_rng, AugmentConfig, MaskedImage,
};
use visnet::demo::{grad_check_instance, instance_forward, run_demo, DemoConfig, DemoError};
use visnet::evalkit::{
    cmc_map, distance_matrix, l2_normalize, read_embeddings, write_embeddings, EmbeddingSet,
    EvalError, RowMeta,
};
use visnet::gradcheck::{grad_check, GradCheckConfig, Sabotage};
use visnet::sampling::{DatasetManifest, PkSampler, Split};
use visnet::TensorError;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

enum CliError {
    Input(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Numeric(m) => m,
        }
    }
}

fn input(err: impl std::fmt::Display) -> CliError {
    CliError::Input(err.to_string())
}

fn numeric(err: impl std::fmt::Display) -> CliError {
    CliError::Numeric(err.to_string())
}

/// Tensor errors surface from inside a computation, so they default to the
/// numerical code; only explicit argument rejection is an input error.
fn tensor_err(err: TensorError) -> CliError {
    match err {
        TensorError::InvalidArgument { .. } => input(err),
        other => numeric(other),
    }
}

fn eval_err(file: &Path, err: EvalError) -> CliError {
    let msg = format!("{}: {err}", file.display());
    match err {
        EvalError::ZeroNormRow { .. } | EvalError::NoPositives => CliError::Numeric(msg),
        _ => CliError::Input(msg),
    }
}

fn demo_err(err: DemoError) -> CliError {
    match err {
        DemoError::Diverged { step, last_good } => CliError::Numeric(format!(
            "training diverged at step {step}; last finite total {last_good:.6}"
        )),
        DemoError::Config(m) => CliError::Input(m),
        DemoError::Sampling(e) => input(e),
        DemoError::Eval(e) => numeric(e),
        DemoError::Tensor(e) => tensor_err(e),
    }
}

#[derive(Parser)]
#[command(
    name = "visnet",
    version,
    about = "Multi-scale fusion re-identification mechanics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count parameters of the full-scale architecture descriptor.
    ParamCount(ParamCountArgs),
    /// Finite-difference check of the composed model and all three losses.
    GradCheck(GradCheckArgs),
    /// Train the synthetic demo end to end and evaluate retrieval.
    TrainDemo(TrainDemoArgs),
    /// Rank stored query embeddings against a gallery.
    Eval(EvalArgs),
    /// Background augmentation of masked person images.
    Augment(AugmentArgs),
    /// Dump identity-balanced batch compositions for a manifest.
    Sample(SampleArgs),
}

#[derive(Args)]
struct ParamCountArgs {
    /// Architecture descriptor to count; defaults to the built-in one.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Exit nonzero unless every independently derivable published row
    /// matches. The fusion row is reported but never gates.
    #[arg(long)]
    assert_reference: bool,
    /// Write the built-in descriptor to this path and exit.
    #[arg(long, value_name = "PATH")]
    write_default: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference half step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 6)]
    probes: usize,
    /// Corrupt this parameter's first analytic gradient (negative control).
    #[arg(long, value_name = "PARAM")]
    sabotage: Option<String>,
    #[arg(long, default_value_t = 1e-2)]
    sabotage_offset: f64,
}

#[derive(Args)]
struct TrainDemoArgs {
    /// TOML run configuration; defaults apply for every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where embeddings, manifest, and reports are written.
    #[arg(long, default_value = "demo-out")]
    out_dir: PathBuf,
    /// Write the default configuration to this path and exit.
    #[arg(long, value_name = "PATH")]
    write_config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Suppress the per-step loss/weight log lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// Dataset manifest supplying identity and camera per row, in split
    /// file order.
    #[arg(long)]
    manifest: PathBuf,
    /// Per-query average precision report; defaults next to the query file.
    #[arg(long)]
    ap_out: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Augmented variants per input image.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// TOML augmentation configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Person images; each needs a sibling `<stem>_mask` file.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 8)]
    p: usize,
    #[arg(long, default_value_t = 12)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Also list the raw record indices of every batch.
    #[arg(long)]
    indices: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ParamCount(args) => cmd_param_count(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::TrainDemo(args) => cmd_train_demo(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Sample(args) => cmd_sample(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_param_count(args: ParamCountArgs) -> Result<(), CliError> {
    if let Some(path) = args.write_default {
        std::fs::write(&path, default_arch().to_toml_string()).map_err(input)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            ArchSpec::from_toml_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => default_arch(),
    };
    let table = count_parameters(&spec).map_err(input)?;
    print!("{}", table.render());
    print!("{}", table.render_rows());

    match check_reference(&table) {
        Ok(checks) => {
            let mut hard_failures = 0;
            for c in &checks {
                let status = match (c.matches, c.hard) {
                    (true, _) => "ok",
                    (false, true) => {
                        hard_failures += 1;
                        "MISMATCH"
                    }
                    (false, false) => "DISCREPANCY (documented)",
                };
                println!(
                    "reference component={} expected={} actual={} status={status}",
                    c.component, c.expected, c.actual
                );
            }
            if args.assert_reference && hard_failures > 0 {
                return Err(CliError::Numeric(format!(
                    "{hard_failures} derivable reference row(s) mismatch"
                )));
            }
        }
        Err(e) => {
            if args.assert_reference {
                return Err(input(e));
            }
            println!("reference comparison skipped: {e}");
        }
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<(), CliError> {
    let instance = grad_check_instance(args.seed).map_err(demo_err)?;
    let cfg = GradCheckConfig {
        step: args.step,
        tolerance: args.tolerance,
        probe_limit: Some(args.probes.max(1)),
        sabotage: args.sabotage.map(|param| Sabotage {
            param,
            offset: args.sabotage_offset,
        }),
    };
    let report = grad_check(&instance, instance_forward, &cfg).map_err(tensor_err)?;
    print!("{}", report.render());
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn cmd_train_demo(args: TrainDemoArgs) -> Result<(), CliError> {
    if let Some(path) = args.write_config {
        let text =
            toml::to_string_pretty(&DemoConfig::default()).expect("default config serializes");
        std::fs::write(&path, text).map_err(input)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            toml::from_str::<DemoConfig>(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => DemoConfig::default(),
    };
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
        cfg.data.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.p {
        cfg.p = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }

    let (report, artifacts) = run_demo(&cfg).map_err(demo_err)?;
    if !args.quiet {
        for line in &report.log {
            println!("{line}");
        }
    }
    print!("{}", report.render_summary());

    std::fs::create_dir_all(&args.out_dir).map_err(input)?;
    let q_path = args.out_dir.join("query.vneb");
    let g_path = args.out_dir.join("gallery.vneb");
    let m_path = args.out_dir.join("manifest.csv");
    write_embeddings(
        &q_path,
        &artifacts.query.data,
        artifacts.query.n,
        artifacts.query.dim,
    )
    .map_err(|e| eval_err(&q_path, e))?;
    write_embeddings(
        &g_path,
        &artifacts.gallery.data,
        artifacts.gallery.n,
        artifacts.gallery.dim,
    )
    .map_err(|e| eval_err(&g_path, e))?;
    std::fs::write(&m_path, artifacts.manifest.to_csv_string()).map_err(input)?;
    println!("wrote {}", q_path.display());
    println!("wrote {}", g_path.display());
    println!("wrote {}", m_path.display());
    Ok(())
}

/// Pairs VNEB rows with the manifest records of one split, in file order.
fn split_meta(
    manifest: &DatasetManifest,
    split: Split,
    rows: usize,
    file: &Path,
) -> Result<Vec<RowMeta>, CliError> {
    let indices = manifest.split_indices(split);
    if indices.len() != rows {
        return Err(CliError::Input(format!(
            "{}: {rows} embedding rows but the manifest lists {} {split} images",
            file.display(),
            indices.len()
        )));
    }
    Ok(indices
        .iter()
        .map(|&i| {
            let r = &manifest.records()[i];
            RowMeta {
                pid: r.pid,
                camid: r.camid,
            }
        })
        .collect())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&args.manifest)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.manifest.display())))?;
    let (q_data, q_n, q_dim) =
        read_embeddings(&args.query).map_err(|e| eval_err(&args.query, e))?;
    let (g_data, g_n, g_dim) =
        read_embeddings(&args.gallery).map_err(|e| eval_err(&args.gallery, e))?;
    if q_dim != g_dim {
        return Err(CliError::Input(format!(
            "embedding width mismatch: query {q_dim}, gallery {g_dim}"
        )));
    }
    let q_meta = split_meta(&manifest, Split::Query, q_n, &args.query)?;
    let g_meta = split_meta(&manifest, Split::Gallery, g_n, &args.gallery)?;

    let query = l2_normalize(
        &EmbeddingSet::new(q_data, q_dim, q_meta).map_err(|e| eval_err(&args.query, e))?,
    )
    .map_err(|e| eval_err(&args.query, e))?;
    let gallery = l2_normalize(
        &EmbeddingSet::new(g_data, g_dim, g_meta).map_err(|e| eval_err(&args.gallery, e))?,
    )
    .map_err(|e| eval_err(&args.gallery, e))?;
    let dist = distance_matrix(&query, &gallery).map_err(|e| eval_err(&args.query, e))?;
    let report =
        cmc_map(&dist, query.meta(), gallery.meta()).map_err(|e| eval_err(&args.query, e))?;
    print!("{}", report.render_rows());

    let ap_path = args.ap_out.unwrap_or_else(|| {
        let stem = args
            .query
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "query".into());
        args.query.with_file_name(format!("{stem}_ap.txt"))
    });
    let mut ap_text = String::new();
    for (i, ap) in report.per_query_ap.iter().enumerate() {
        match ap {
            Some(v) => ap_text.push_str(&format!("query={i} ap={v:.6}\n")),
            None => ap_text.push_str(&format!("query={i} skipped\n")),
        }
    }
    std::fs::write(&ap_path, ap_text).map_err(input)?;
    println!("wrote {}", ap_path.display());
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::Input("count must be at least 1".into()));
    }
    let cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            toml::from_str::<AugmentConfig>(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => AugmentConfig::default(),
    };
    cfg.validate().map_err(input)?;
    for (index, image_path) in args.images.iter().enumerate() {
        let mask = mask_path(image_path);
        let masked = MaskedImage::load(image_path, &mask)
            .map_err(|e| CliError::Input(format!("{}: {e}", image_path.display())))?;
        // One stream per source image: with a fixed seed, variant n is the
        // same no matter how many variants are requested.
        let mut rng = per_image_rng(args.seed, index as u64);
        for n in 1..=args.count {
            let out = augment_pipeline(&masked, &cfg, &mut rng)
                .map_err(|e| CliError::Input(format!("{}: {e}", image_path.display())))?;
            let out_path = augmented_path(image_path, n);
            out.save(&out_path)
                .map_err(|e| CliError::Input(format!("{}: {e}", out_path.display())))?;
            println!("wrote {}", out_path.display());
        }
    }
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&args.manifest)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.manifest.display())))?;
    let mut sampler = PkSampler::new(&manifest, args.p, args.k, args.seed).map_err(input)?;
    for epoch in 1..=args.epochs.max(1) {
        for (b, batch) in sampler.epoch().into_iter().enumerate() {
            let pids = batch.pids(&manifest);
            let mut composition = Vec::new();
            let mut i = 0;
            while i < pids.len() {
                let pid = pids[i];
                let run = pids[i..].iter().take_while(|&&p| p == pid).count();
                composition.push(format!("{pid}:{run}"));
                i += run;
            }
            let mut line = format!(
                "epoch={epoch} batch={} identities={} images={} composition={}",
                b + 1,
                composition.len(),
                pids.len(),
                composition.join(",")
            );
            if args.indices {
                let idx: Vec<String> = batch.indices.iter().map(|i| i.to_string()).collect();
                line.push_str(&format!(" indices={}", idx.join(",")));
            }
            println!("{line}");
        }
    }
    Ok(())
}
