//! `endouda` command-line pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use endouda::config::{RunConfig, OUT_ENV};
use endouda::data::write_dataset;
use endouda::experiment::{
    compare_if_both, evaluate_endouda, evaluate_naive, load_domains, prepare_benchmark, render_panels, run_mixing_sweep,
    train_naive_stage, train_seg_stage, train_vae_stage, write_method_run, Layout, Method,
};
use endouda::metrics::EvalReport;
use endouda::models::{SegModel, VaeModel};
use endouda::training::TrainOptions;
use endouda::{Error, Result};

#[derive(Parser)]
#[command(name = "endouda", version, about = "Latent-search domain adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; overrides ENDOUDA_OUT and the file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Vae,
    Seg,
    Naive,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Naive,
    Endouda,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source and target datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage and write its checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Continue from the per-epoch state file of an interrupted run.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate trained checkpoints on the target test set.
    AdaptEval {
        #[command(flatten)]
        common: Common,
        /// Evaluate one method; both when omitted.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Train and evaluate at every configured target fraction.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    } else if let Some(o) = std::env::var_os(OUT_ENV) {
        cfg.output_dir = PathBuf::from(o);
    }
    // reuse data written by gen-data when no directory is configured
    let generated = cfg.output_dir.join("data");
    if cfg.data.directory.is_none() && generated.join("source").join("manifest.csv").exists() {
        cfg.data.directory = Some(generated);
    }
    let cfg = cfg.resolve()?;
    cfg.write_provenance()?;
    Ok(cfg)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    if cfg.data.directory.is_some() && cfg.data.directory.as_deref() != Some(&cfg.output_dir.join("data")) {
        return Err(Error::config("data.directory", "gen-data only generates synthetic data"));
    }
    let mut synthetic_only = cfg.clone();
    synthetic_only.data.directory = None;
    let (source, target) = load_domains(&synthetic_only)?;
    let root = cfg.output_dir.join("data");
    write_dataset(&root.join("source"), &source, cfg.seed)?;
    write_dataset(&root.join("target"), &target, cfg.seed)?;
    println!("wrote {} source and {} target images to {}", source.len(), target.len(), root.display());
    Ok(())
}

fn train(cfg: &RunConfig, stage: StageArg, resume: bool) -> Result<()> {
    let bench = prepare_benchmark(cfg)?;
    let layout = Layout::new(&cfg.output_dir);
    let name = match stage {
        StageArg::Vae => "vae",
        StageArg::Seg => "seg",
        StageArg::Naive => "naive",
    };
    let opts = TrainOptions {
        state_path: Some(layout.root.join("checkpoints").join(format!("{name}.state"))),
        resume,
        epoch_limit: None,
    };
    let log = match stage {
        StageArg::Vae => train_vae_stage(cfg, &bench, 0.0, &layout, &opts)?.1,
        StageArg::Seg => train_seg_stage(cfg, &bench, 0.0, &layout, &opts)?.2,
        StageArg::Naive => train_naive_stage(cfg, &bench, 0.0, &layout, &opts)?.1,
    };
    println!(
        "{name}: {} epochs, best epoch {}, stop {:?}; checkpoint {}",
        log.records.len(),
        log.best_epoch,
        log.stop_reason,
        layout.checkpoint(name).display()
    );
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "{what} checkpoint not found at {}; run `endouda train` first",
            path.display()
        )));
    }
    Ok(())
}

fn adapt_eval(cfg: &RunConfig, method: Option<MethodArg>) -> Result<()> {
    let methods = match method {
        Some(MethodArg::Naive) => vec![Method::Naive],
        Some(MethodArg::Endouda) => vec![Method::Endouda],
        None => Method::ALL.to_vec(),
    };
    let layout = Layout::new(&cfg.output_dir);
    for m in &methods {
        match m {
            Method::Naive => require(&layout.checkpoint("naive"), "naive U-Net")?,
            Method::Endouda => {
                require(&layout.checkpoint("vae"), "VAE")?;
                require(&layout.checkpoint("seg"), "segmentation")?;
            }
        }
    }
    let bench = prepare_benchmark(cfg)?;
    let test = &bench.target_test;
    for m in &methods {
        let run = match m {
            Method::Naive => {
                let seg = SegModel::load(&layout.checkpoint("naive"), Some(&cfg.model))?;
                evaluate_naive(cfg, &seg, test)?
            }
            Method::Endouda => {
                let vae = VaeModel::load(&layout.checkpoint("vae"), Some(&cfg.model))?;
                let seg = SegModel::load_shared(&layout.checkpoint("seg"), vae.encoder().clone())?;
                evaluate_endouda(cfg, &vae, &seg, test)?
            }
        };
        write_method_run(&layout, *m, &run, test, cfg.eval.write_traces)?;
        for row in run.report.aggregate() {
            println!("{}: {} = {:.4} ± {:.4} (n = {})", m, row.metric.name(), row.mean, row.std, row.n);
        }
    }
    // pair with any report already on disk from an earlier invocation
    let mut reports = Vec::new();
    for m in Method::ALL {
        let p = layout.eval_dir(m).join("per_image.csv");
        if p.exists() {
            reports.push(EvalReport::read_per_image(&p, m.name(), "target_test")?);
        }
    }
    if let Some(cmp) = compare_if_both(&layout, &reports)? {
        for (metric, t) in &cmp.tests {
            println!("paired t-test {} endouda vs naive: t = {:.4}, p = {:.4e}", metric.name(), t.t, t.p);
        }
    }
    let n = render_panels(&layout, test, cfg.eval.panels)?;
    println!("wrote {n} panels to {}", layout.panels().display());
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let bench = prepare_benchmark(cfg)?;
    let root = cfg.output_dir.join("sweep");
    let res = run_mixing_sweep(cfg, &bench, &root, &Method::ALL)?;
    for r in &res.rows {
        println!("fraction {:.2} {:>8}: IoU {:.4} ± {:.4}", r.fraction, r.method, r.iou.0, r.iou.1);
    }
    println!("table: {}", root.join("table.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => gen_data(&load_config(&common)?),
        Command::Train { common, stage, resume } => train(&load_config(&common)?, stage, resume),
        Command::AdaptEval { common, method } => adapt_eval(&load_config(&common)?, method),
        Command::Sweep { common } => sweep(&load_config(&common)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
