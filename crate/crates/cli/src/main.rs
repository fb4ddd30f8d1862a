use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmclass_core::features::FilterBankConfig;
use fmclass_core::metrics::{aggregate_runs, read_records_csv, write_aggregates_csv, F1Average, RunRecord};
use fmclass_core::pipelines::{
    evaluate_predictions, run_object_obap, run_object_rf, run_pixel_deap, run_pixel_rf, synth_generate, write_outputs, ExperimentSpec,
    FeatureSource, ObjectFeatureSpec, PredictionOutput, ProbeShape, SynthConfig, SynthKind, WORKERS_ENV,
};
use fmclass_core::probes::TrainConfig;
use fmclass_core::sampling::ObjectBudget;
use fmclass_core::store::{load_manifest, ResizeMode, Split};
use fmclass_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fmclass", version, about = "Pixel and object classification on foundation-model features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with a manifest
    Synth(SynthArgs),
    /// Random forest pixel classification
    PixelRf(ExperimentArgs),
    /// Dense attentive probe pixel classification
    PixelDeap(ExperimentArgs),
    /// Random forest object classification on aggregated features
    ObjectRf {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated subset of mean, std, area
        #[arg(long, default_value = "mean,area")]
        aggregators: String,
    },
    /// Object-guided attentive probe object classification
    ObjectObap(ExperimentArgs),
    /// Score saved predictions against a manifest split
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding <name>.png rasters and/or <name>_objects.csv tables
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Support-weighted instead of macro F1
        #[arg(long)]
        weighted: bool,
    },
    /// Aggregate result tables over folds and repeats
    Report {
        /// results.csv files written by the experiment commands
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Also write the summary table here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "pixel")]
    kind: String,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Pixels per feature cell side
    #[arg(long, default_value_t = 4)]
    cell_size: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    distractors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature key in the manifest, or "filterbank" for classical features
    #[arg(long)]
    model: String,
    /// Comma-separated ascending budgets; "all" uses every label
    #[arg(long, default_value = "100,1000,10000,100000")]
    budgets: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Ignored by the probe commands, which train once per fold
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = WORKERS_ENV, default_value_t = 1)]
    workers: usize,
    /// Which cells write prediction files: none, first or all
    #[arg(long, default_value = "first")]
    predictions: String,
    /// Write 0 for every time column so reruns are byte-identical
    #[arg(long)]
    no_timings: bool,
    #[arg(long, default_value_t = 256)]
    rf_side: usize,
    /// Feature interpolation: bilinear or nearest
    #[arg(long, default_value = "bilinear")]
    resize: String,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    #[arg(long, default_value_t = 0.5)]
    dice_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    ce_weight: f64,
    #[arg(long, default_value_t = 1024)]
    input_size: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    ffn_hidden: usize,
    #[arg(long, default_value_t = 64)]
    decoder_channels: usize,
    #[arg(long, default_value_t = 256)]
    max_objects: usize,
    #[arg(long, default_value_t = 256)]
    mlp_hidden: usize,
    #[arg(long, default_value_t = 8.0)]
    sigma_init: f64,
}

fn parse_budgets(s: &str) -> Result<Vec<ObjectBudget>> {
    s.split(',').map(|b| b.trim().parse()).collect()
}

impl ExperimentArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let resize = match self.resize.as_str() {
            "bilinear" => ResizeMode::Bilinear,
            "nearest" => ResizeMode::Nearest,
            other => return Err(Error::Invalid(format!("resize must be bilinear or nearest, got {other:?}"))),
        };
        let mut spec = ExperimentSpec::new(FeatureSource::parse(&self.model), parse_budgets(&self.budgets)?);
        spec.folds = self.folds;
        spec.repeats = self.repeats;
        spec.seed = self.seed;
        spec.out_dir = Some(self.out.clone());
        spec.predictions = self.predictions.parse::<PredictionOutput>()?;
        spec.record_timings = !self.no_timings;
        spec.workers = self.workers;
        spec.rf_side = self.rf_side;
        spec.resize_mode = resize;
        spec.rf.n_trees = self.trees;
        spec.train = TrainConfig {
            iterations: self.iterations,
            learning_rate: self.lr,
            dice_weight: self.dice_weight,
            ce_weight: self.ce_weight,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            seed: self.seed,
        };
        spec.probe = ProbeShape {
            input_size: self.input_size,
            heads: self.heads,
            width: self.width,
            ffn_hidden: self.ffn_hidden,
            decoder_channels: self.decoder_channels,
            max_objects: self.max_objects,
            mlp_hidden: self.mlp_hidden,
            sigma_init: self.sigma_init,
        };
        spec.filter_bank = FilterBankConfig::default();
        spec.validate()?;
        Ok(spec)
    }
}

fn experiment(args: &ExperimentArgs, run: impl FnOnce(&fmclass_core::store::DatasetManifest, &ExperimentSpec) -> Result<Vec<RunRecord>>) -> Result<()> {
    let spec = args.spec()?;
    let manifest = load_manifest(&args.manifest)?;
    let records = run(&manifest, &spec)?;
    write_outputs(&spec, &records)?;
    print_summary(&records);
    Ok(())
}

fn print_summary(records: &[RunRecord]) {
    println!("method,model,budget,n,f1_mean,f1_std,train_s_mean,infer_s_mean");
    for a in aggregate_runs(records) {
        println!(
            "{},{},{},{},{:.4},{:.4},{:.3},{:.4}",
            a.method, a.model, a.budget, a.n, a.f1_mean, a.f1_std, a.train_s_mean, a.infer_s_mean
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                kind: a.kind.parse::<SynthKind>()?,
                num_classes: a.classes,
                num_images: a.images,
                image_size: a.size,
                cell_size: a.cell_size,
                distractors: a.distractors,
                noise: a.noise,
                seed: a.seed,
            };
            let path = synth_generate(&cfg, &a.out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::PixelRf(a) => experiment(&a, run_pixel_rf),
        Command::PixelDeap(a) => experiment(&a, run_pixel_deap),
        Command::ObjectRf { exp, aggregators } => {
            let features: ObjectFeatureSpec = aggregators.parse()?;
            experiment(&exp, |m, s| run_object_rf(m, s, &features))
        }
        Command::ObjectObap(a) => experiment(&a, run_object_obap),
        Command::Eval { manifest, predictions, split, weighted } => {
            let manifest = load_manifest(&manifest)?;
            let split: Split = split.parse()?;
            let average = if weighted { F1Average::Weighted } else { F1Average::Macro };
            let scores = evaluate_predictions(&manifest, &predictions, split, average)?;
            if let Some(f1) = scores.pixel_f1 {
                println!("pixel\t{}\t{f1:.6}", scores.pixel_images);
            }
            if let Some(f1) = scores.object_f1 {
                println!("object\t{}\t{f1:.6}", scores.object_images);
            }
            Ok(())
        }
        Command::Report { results, out } => {
            let mut records = Vec::new();
            for path in &results {
                records.extend(read_records_csv(path)?);
            }
            if let Some(out) = out {
                write_aggregates_csv(&aggregate_runs(&records), out)?;
            }
            print_summary(&records);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
