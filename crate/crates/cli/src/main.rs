use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use runet::analysis::{self, golden, AnalysisReport, ReportFormat};
use runet::io::{read_volume, write_volume, VolumeKind};
use runet::metrics::BINARIZE_AT;
use runet::net::{build_spec, RfVariant};
use runet::pipeline::eval::{self, write_json};
use runet::pipeline::{self, ensemble_infer, load_model, Config, Dataset};
use runet::Triple;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "runet", version, about = "RoI-aware volumetric U-Net on synthetic phantoms")]
struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset into `--out`.
    Synth {
        /// Number of cases; defaults to `data.n_cases`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one network on the non-held-out cases.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        variant: VariantArg,
    },
    /// Segment one image with one network.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Image path without extension.
        #[arg(long)]
        image: PathBuf,
    },
    /// Segment one image with the mean of several networks.
    EnsembleInfer {
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        image: PathBuf,
    },
    /// Score one network, or the ensemble of several, on dataset cases.
    Eval {
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score every case instead of only the held-out ones.
        #[arg(long)]
        all: bool,
    },
    /// k-fold cross-validation over the whole dataset.
    Crossval {
        #[arg(long)]
        data: PathBuf,
        /// Overrides `crossval.k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Receptive fields and activation footprints per layer.
    Analyze {
        #[arg(long, default_value = "rf64")]
        variant: RfVariant,
        #[arg(long, value_parser = parse_triple, default_value = "40,180,320")]
        input: Triple,
        #[arg(long, value_parser = parse_triple, default_value = "24,96,96")]
        roi: Triple,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Compare against the checked-in tables; exit nonzero on mismatch.
        #[arg(long)]
        golden: bool,
    },
}

#[derive(Args, Debug)]
struct VariantArg {
    /// Overrides `network.rf_variant`.
    #[arg(long)]
    variant: Option<RfVariant>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

fn parse_triple(s: &str) -> std::result::Result<Triple, String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("`{s}` is not three integers"))
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct BoxesOut {
    /// Level-I boxes in the cropped network frame, one list per member.
    members: Vec<Vec<runet::roi::BBox3>>,
    decoder_calls: Vec<usize>,
    loc_seconds: Vec<f64>,
    seg_seconds: Vec<f64>,
}

fn run_inference(cfg: &Config, models: &[PathBuf], image: &Path, out: &Path) -> Result<()> {
    let nets = models.iter().map(|m| load_model(m)).collect::<runet::Result<Vec<_>>>()?;
    let (image, _) = read_volume(image)?;
    let e = ensemble_infer(&nets, &image, cfg)?;
    write_volume(&out.join("prob"), &e.prob, VolumeKind::Image)?;
    write_volume(&out.join("mask"), &e.mask, VolumeKind::Mask)?;
    write_json(
        &out.join("boxes.json"),
        &BoxesOut {
            members: e.members.iter().map(|m| m.boxes.clone()).collect(),
            decoder_calls: e.members.iter().map(|m| m.decoder_calls).collect(),
            loc_seconds: e.members.iter().map(|m| m.loc_seconds).collect(),
            seg_seconds: e.members.iter().map(|m| m.seg_seconds).collect(),
        },
    )?;
    if e.members.iter().all(|m| m.boxes.is_empty()) {
        log::warn!("no region found; the mask is empty");
    }
    log::info!("{} foreground voxels at threshold {BINARIZE_AT}", e.mask.data().iter().filter(|&&v| v > 0.0).count());
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let out = &cli.out;
    match &cli.command {
        Command::Synth { n } => {
            let cfg = load_config(cli)?;
            let n = n.unwrap_or(cfg.data.n_cases);
            let manifest = pipeline::synth(&cfg.phantom, cfg.seed, n, out)?;
            log::info!("wrote {} cases to {}", manifest.cases.len(), out.display());
        }
        Command::Train { data, variant } => {
            let mut cfg = load_config(cli)?;
            if let Some(v) = variant.variant {
                cfg.network.rf_variant = v;
            }
            let data = Dataset::open(data)?;
            let (train_ids, _) = eval::holdout_split(data.len(), cfg.data.holdout)?;
            let (fit, val) = eval::split_validation(&train_ids, cfg.data.val_fraction);
            fs::create_dir_all(out)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            eval::train_on(&cfg, &data, &fit, &val, out)?;
            log::info!("model written to {}", out.join("model").display());
        }
        Command::Infer { model, image } => {
            let cfg = load_config(cli)?;
            run_inference(&cfg, std::slice::from_ref(model), image, out)?;
        }
        Command::EnsembleInfer { models, image } => {
            let cfg = load_config(cli)?;
            run_inference(&cfg, models, image, out)?;
        }
        Command::Eval { models, data, all } => {
            let cfg = load_config(cli)?;
            let nets = models.iter().map(|m| load_model(m)).collect::<runet::Result<Vec<_>>>()?;
            let data = Dataset::open(data)?;
            let ids: Vec<usize> = if *all { (0..data.len()).collect() } else { eval::holdout_split(data.len(), cfg.data.holdout)?.1 };
            let cases = ids.iter().map(|&i| data.load(i)).collect::<runet::Result<Vec<_>>>()?;
            let (report, timings) = pipeline::evaluate(&nets, &cases, &cfg)?;
            write_json(&out.join("report.json"), &report)?;
            write_json(&out.join("timings.json"), &timings)?;
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
        Command::Crossval { data, k } => {
            let mut cfg = load_config(cli)?;
            if let Some(k) = k {
                cfg.crossval.k = *k;
            }
            let data = Dataset::open(data)?;
            let report = pipeline::crossval(&cfg, &data, out)?;
            println!("{}", serde_json::to_string_pretty(&report.pooled)?);
        }
        Command::Analyze {
            variant,
            input,
            roi,
            format,
            golden: check,
        } => {
            let spec = build_spec(*variant, [48, 96, 192], 0);
            let report = AnalysisReport::new(&spec, *input, *roi)?;
            let format = match format {
                Format::Table => ReportFormat::Table,
                Format::Json => ReportFormat::Json,
            };
            println!("{}", analysis::report(&report, format));
            if *check {
                let mut bad = golden::check_receptive_fields(&report);
                if *input == golden::footprints().input && *roi == golden::footprints().roi {
                    bad.extend(golden::check_footprints(&report));
                }
                if !bad.is_empty() {
                    for b in &bad {
                        eprintln!("mismatch: {b}");
                    }
                    return Ok(ExitCode::FAILURE);
                }
                eprintln!("golden tables match");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
