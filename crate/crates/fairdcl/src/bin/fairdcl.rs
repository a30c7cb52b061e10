//! Command-line front end: synthetic dataset generation, contrastive
//! pre-training, segmentation fine-tuning, linear probing, multi-run
//! aggregation, and standalone mask-pair scoring.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fairdcl::data::{
    generate_synthetic, load_manifest, load_mask, write_dataset, Split, SyntheticSpec,
};
use fairdcl::metrics::FairnessReport;
use fairdcl::plot::{bar_chart, line_chart, Series};
use fairdcl::probe::{linear_probe, ProbeConfig, ProbeStage};
use fairdcl::report::{aggregate_csv_runs, write_aggregate_csv, write_metric_table};
use fairdcl::seg::{build_segmentation_network, finetune, write_agg_csv, write_eval_csv, FinetuneConfig};
use fairdcl::train::{load_encoder, pretrain, TrainConfig, Variant};
use fairdcl::{FairdclError, Result};

#[derive(Parser)]
#[command(
    name = "fairdcl",
    about = "Fairness-aware contrastive pre-training and evaluation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biased-scene tile dataset
    Synth(SynthArgs),
    /// Contrastive pre-training with MI bias tracing
    Pretrain(PretrainArgs),
    /// Fine-tune a segmentation head on a pre-trained checkpoint
    Finetune(FinetuneArgs),
    /// Linear-probe group decodability of frozen features
    Probe(ProbeArgs),
    /// Aggregate several run directories into mean/std tables and plots
    Report(ReportArgs),
    /// Score mask pairs listed in a CSV against fairness metrics
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    tiles: usize,
    #[arg(long, default_value_t = 64)]
    tile_size: usize,
    /// Number of segmentation classes (background included)
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Number of sensitive groups
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Probability that a tile carries its group's typical style
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset manifest.csv
    #[arg(long)]
    data: PathBuf,
    /// Run output directory (default: $FAIRDCL_RUNS_DIR/<name> or ./runs/<name>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name when --out is not given
    #[arg(long, default_value = "pretrain")]
    name: String,
    /// JSON config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Discriminator rounds per encoder update
    #[arg(long)]
    b_rounds: Option<usize>,
    /// Fairness strength on the MI penalty
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Learning rate for the measurement discriminators (defaults to --lr)
    #[arg(long)]
    disc_lr: Option<f64>,
    /// Scale on the color-jitter augmentation strength in [0, 1]
    #[arg(long)]
    color_jitter: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Contrastive temperature
    #[arg(long)]
    tau: Option<f64>,
    /// Momentum-encoder coefficient
    #[arg(long)]
    momentum: Option<f64>,
    /// Gradient-reversal strength (gr variant)
    #[arg(long)]
    lambda: Option<f64>,
    /// Backbone profile: desk or full
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pre-training checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest.csv
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "finetune")]
    name: String,
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Evaluate on the test split every this many iterations
    #[arg(long, default_value_t = 1000)]
    eval_every: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated stages out of l1,l2,l3,l4,fc
    #[arg(long, default_value = "l1,l2,l3,l4,fc")]
    stages: String,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Also emit a per-stage accuracy bar chart next to the CSV
    #[arg(long)]
    plot: bool,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories produced by pretrain/finetune
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Output directory for aggregated tables and plots
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// CSV with header pred,gt,group listing mask PNG paths per row
    #[arg(long)]
    pairs: PathBuf,
    /// Number of sensitive groups
    #[arg(long)]
    k: usize,
    /// Number of segmentation classes
    #[arg(long)]
    classes: usize,
    /// Per-group per-class IoU output CSV
    #[arg(long)]
    out: PathBuf,
}

fn io_err(e: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> FairdclError {
    FairdclError::Io(std::io::Error::other(e))
}

fn runs_root() -> PathBuf {
    std::env::var_os("FAIRDCL_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_dir(out: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| runs_root().join(name));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_tiles: a.tiles,
        tile_size: a.tile_size,
        num_classes: a.classes,
        k: a.k,
        rho: a.rho,
        seed: a.seed,
    };
    let out = generate_synthetic(&spec)?;
    let manifest = write_dataset(&out, &a.out)?;
    println!("wrote {} tiles, manifest {}", a.tiles, manifest.display());
    Ok(())
}

/// defaults < config file < flags
fn layered_config(a: &PretrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| FairdclError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| FairdclError::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = &a.variant {
        cfg.variant = Variant::parse(v)?;
    }
    if let Some(p) = &a.profile {
        cfg.profile = fairdcl::encoder::Profile::parse(p)?;
    }
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    apply!(iterations, batch_size, b_rounds, alpha, lr, weight_decay, tau, momentum, lambda, color_jitter, seed);
    if let Some(v) = a.disc_lr {
        cfg.disc_lr = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = layered_config(&a)?;
    let dir = run_dir(a.out, &a.name)?;
    let manifest = load_manifest(&a.data)?;
    let (trainer, trace) = pretrain(&cfg, &manifest)?;
    let effective = serde_json::to_string_pretty(&cfg).map_err(io_err)?;
    std::fs::write(dir.join("config.json"), effective)?;
    trainer.save(&dir.join("checkpoint.bin"))?;
    trace.write_mi_csv(&dir.join("bias_trace.csv"))?;
    trace.write_loss_csv(&dir.join("contrastive_loss.csv"))?;
    println!(
        "pretrained {} for {} iterations ({} epochs); artifacts in {}",
        cfg.variant.as_str(),
        cfg.iterations,
        trace.num_epochs(),
        dir.display()
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let dir = run_dir(a.out, &a.name)?;
    let manifest = load_manifest(&a.data)?;
    let mut net =
        build_segmentation_network(&a.checkpoint, manifest.num_classes(), a.seed)?;
    let train_tiles = manifest.load_split(Split::Finetune)?;
    let test_tiles = manifest.load_split(Split::Test)?;
    let cfg = FinetuneConfig {
        iterations: a.iterations,
        batch_size: a.batch_size,
        eval_every: a.eval_every,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let reports = finetune(&mut net, &train_tiles, &test_tiles, manifest.num_groups(), &cfg)?;
    write_eval_csv(&reports, &dir.join("finetune_eval.csv"))?;
    write_agg_csv(&reports, &dir.join("finetune_agg.csv"))?;
    if let Some((it, last)) = reports.last() {
        println!(
            "finetuned {} iterations; final (iter {it}) diff={:.4} wst={:.4} acc={:.4}; artifacts in {}",
            a.iterations,
            last.diff,
            last.wst,
            last.acc,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let stages: Vec<ProbeStage> = a
        .stages
        .split(',')
        .map(|s| ProbeStage::parse(s.trim()))
        .collect::<Result<_>>()?;
    let (encoder, _, k) = load_encoder(&a.checkpoint)?;
    let manifest = load_manifest(&a.data)?;
    let train_tiles = manifest.load_split(Split::Pretrain)?;
    let test_tiles = manifest.load_split(Split::Test)?;
    let cfg = ProbeConfig {
        epochs: a.epochs,
        lr: a.lr,
    };
    let mut w = csv::Writer::from_path(&a.out).map_err(io_err)?;
    w.write_record(["stage", "train_accuracy", "test_accuracy"])
        .map_err(io_err)?;
    let mut accs = Vec::new();
    for stage in &stages {
        let r = linear_probe(&encoder, &train_tiles, &test_tiles, k, *stage, &cfg)?;
        w.write_record([
            stage.as_str().to_string(),
            format!("{:.9}", r.train_accuracy),
            format!("{:.9}", r.test_accuracy),
        ])
        .map_err(io_err)?;
        accs.push(r.test_accuracy);
    }
    w.flush()?;
    if a.plot {
        let labels: Vec<&str> = stages.iter().map(|s| s.as_str()).collect();
        let svg = a.out.with_extension("svg");
        bar_chart(
            "linear probe group accuracy",
            "test accuracy",
            &labels,
            &[("probe", accs)],
            &svg,
        )?;
        println!("probe results in {} (chart {})", a.out.display(), svg.display());
    } else {
        println!("probe results in {}", a.out.display());
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let collect = |file: &str| -> Option<Vec<PathBuf>> {
        let paths: Vec<PathBuf> = a.runs.iter().map(|r| r.join(file)).collect();
        paths.iter().all(|p| p.exists()).then_some(paths)
    };
    let mut produced = Vec::new();
    if let Some(paths) = collect("bias_trace.csv") {
        let agg = aggregate_csv_runs(&paths, "iter", "mi_total")?;
        let out = a.out.join("bias_trace_agg.csv");
        write_aggregate_csv(&agg, "iter", &out)?;
        if a.plot {
            let mut s = Series::new(
                "mi_total",
                agg.xs.iter().zip(&agg.mean).map(|(&x, &m)| (x as f64, m)).collect(),
            );
            s.band = Some(
                agg.mean
                    .iter()
                    .zip(&agg.std)
                    .map(|(&m, &sd)| (m - sd, m + sd))
                    .collect(),
            );
            line_chart(
                "bias trace (mean ± std)",
                "iteration",
                "mi_total",
                &[s],
                &a.out.join("bias_trace_agg.svg"),
            )?;
        }
        produced.push(out);
    }
    if let Some(paths) = collect("contrastive_loss.csv") {
        let agg = aggregate_csv_runs(&paths, "iter", "loss")?;
        let out = a.out.join("contrastive_loss_agg.csv");
        write_aggregate_csv(&agg, "iter", &out)?;
        if a.plot {
            let s = Series::new(
                "loss",
                agg.xs.iter().zip(&agg.mean).map(|(&x, &m)| (x as f64, m)).collect(),
            );
            line_chart(
                "contrastive loss (mean)",
                "iteration",
                "loss",
                &[s],
                &a.out.join("contrastive_loss_agg.svg"),
            )?;
        }
        produced.push(out);
    }
    if let Some(paths) = collect("finetune_agg.csv") {
        let out = a.out.join("finetune_metrics_agg.csv");
        write_metric_table(&paths, &["diff", "wst", "acc"], &out)?;
        produced.push(out);
    }
    if produced.is_empty() {
        return Err(FairdclError::Config(
            "no common artifact CSVs found across the given run directories".into(),
        ));
    }
    println!(
        "aggregated {} runs into {}",
        a.runs.len(),
        produced
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let mut rdr = csv::Reader::from_path(&a.pairs).map_err(io_err)?;
    let headers = rdr.headers().map_err(io_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FairdclError::Config(format!("pairs CSV missing column '{name}'")))
    };
    let (pi, gi, ri) = (col("pred")?, col("gt")?, col("group")?);
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let resolve = |s: &str| {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(io_err)?;
        let group: usize = rec[ri]
            .parse()
            .map_err(|e| FairdclError::Config(format!("bad group '{}': {e}", &rec[ri])))?;
        pairs.push((load_mask(&resolve(&rec[pi]))?, load_mask(&resolve(&rec[gi]))?, group));
    }
    let report = FairnessReport::from_mask_pairs(&pairs, a.k, a.classes)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(io_err)?;
    w.write_record(["group", "class", "iou"]).map_err(io_err)?;
    for (g, row) in report.per_group_class_iou.iter().enumerate() {
        for (c, e) in row.iter().enumerate() {
            w.write_record([
                g.to_string(),
                c.to_string(),
                e.iou.map(|v| format!("{v:.9}")).unwrap_or_default(),
            ])
            .map_err(io_err)?;
        }
    }
    w.flush()?;
    println!(
        "diff={:.6} wst={:.6} acc={:.6}",
        report.diff, report.wst, report.acc
    );
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Report(a) => cmd_report(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
