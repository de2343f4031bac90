use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use art::data::{apply_shift, generate_blobs, make_stream, read_csv, write_csv};
use art::experiment::{
    adapt_stream, bank_path, head_label, model_path, obtain_backbone, run_experiment, summary_table, write_json,
    write_steps, Arm, ArmReport, ExperimentConfig,
};
use art::knn::KnnBackend;
use art::metrics::{decision_grid, evaluate, write_grid_csv};
use art::model::ModelParams;
use art::trainer::EmbeddingBank;
use art::tur::{ColdStartMode, QueryVectorMode, Route, TurState};
use art::{Error, Result};

#[derive(Parser)]
#[command(name = "art", version, about = "Unknown-aware training and test-time unknown rejection on toy blobs")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Overrides {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overwrite existing reports, grids and data files.
    #[arg(long, global = true)]
    force: bool,
    /// Blob generation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    cluster_std: Option<f64>,
    #[arg(long, global = true)]
    samples_per_cluster: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    momentum: Option<f64>,
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
    #[arg(long, global = true)]
    init_seed: Option<u64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    logit_penalty: Option<f64>,
    /// Neighborhood size.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    phi: Option<f64>,
    /// brute_force | partitioned
    #[arg(long, global = true, value_parser = parse_enum::<KnnBackend>)]
    knn_backend: Option<KnnBackend>,
    /// source_centroid | target_embedding
    #[arg(long, global = true, value_parser = parse_enum::<QueryVectorMode>)]
    query_vector_mode: Option<QueryVectorMode>,
    /// seed_on_first_match | copy_source
    #[arg(long, global = true, value_parser = parse_enum::<ColdStartMode>)]
    cold_start_mode: Option<ColdStartMode>,
    /// Comma-separated stream order seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    stream_seeds: Option<Vec<u64>>,
    /// Comma-separated arms: ce_only, no_ua, no_sce, ugd_only, full.
    #[arg(long, global = true, value_delimiter = ',')]
    arms: Option<Vec<Arm>>,
    #[arg(long, global = true)]
    grid_resolution: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.csv and test.csv (shift applied) to the output directory.
    GenData,
    /// Train (or reuse) the backbone of one arm and export its bank.
    Train {
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Stream a dataset through TUR and print the report.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Order seed; the first configured stream seed by default.
        #[arg(long)]
        stream_seed: Option<u64>,
        /// Keep the file order instead of shuffling.
        #[arg(long)]
        in_order: bool,
        /// Continue from a saved TUR snapshot.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        snapshot_out: Option<PathBuf>,
        #[arg(long)]
        steps_out: Option<PathBuf>,
    },
    /// Evaluate head predictions on a dataset and print the report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export the head's decision grid as x,y,label.
    Grid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all five arms and print the ablation table.
    Ablate,
    /// Run the configured arms end to end.
    Run,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(out_dir => output_dir);
        set!(seed => blob.seed);
        set!(cluster_std => blob.cluster_std);
        set!(samples_per_cluster => blob.samples_per_cluster);
        set!(epochs => train.epochs);
        set!(batch_size => train.batch_size);
        set!(learning_rate => train.learning_rate);
        set!(momentum => train.momentum);
        set!(embed_dim => model.embed_dim);
        set!(init_seed => model.init_seed);
        set!(temperature => train.loss.temperature);
        set!(logit_penalty => train.loss.logit_penalty);
        set!(k => tur.k);
        set!(phi => tur.phi);
        set!(knn_backend => tur.knn_backend);
        set!(query_vector_mode => tur.query_vector_mode);
        set!(cold_start_mode => tur.cold_start_mode);
        set!(stream_seeds => stream_seeds);
        set!(arms => arms);
        set!(grid_resolution => grid.resolution);
        c.validate()?;
        Ok(c)
    }
}

fn fresh(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.overrides.resolve()?;
    let force = cli.overrides.force;
    let dir = config.output_dir.clone();
    match cli.command {
        Command::GenData => {
            let data = generate_blobs(&config.blob)?;
            let test = apply_shift(&data.test, &config.shift)?;
            let (train_path, test_path) = (dir.join("train.csv"), dir.join("test.csv"));
            fresh(&train_path, force)?;
            fresh(&test_path, force)?;
            write_csv(&train_path, &data.train)?;
            write_csv(&test_path, &test)?;
            println!("{}", train_path.display());
            println!("{}", test_path.display());
        }
        Command::Train { arm } => {
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let data = generate_blobs(&config.blob)?;
            let backbone = obtain_backbone(&config, arm, &data.train, &dir)?;
            println!("{}", backbone.hash);
            println!("{}", model_path(&dir, &backbone.hash).display());
            println!("{}", bank_path(&dir, &backbone.hash).display());
        }
        Command::Adapt {
            model,
            bank,
            data,
            stream_seed,
            in_order,
            resume,
            snapshot_out,
            steps_out,
        } => {
            let params = ModelParams::load(&model)?;
            let bank = Arc::new(EmbeddingBank::load(&bank)?);
            let samples = read_csv(&data)?;
            let seed = stream_seed.unwrap_or(config.stream_seeds[0]);
            let stream = if in_order { samples } else { make_stream(&samples, seed) };
            let state = match &resume {
                Some(path) => TurState::load_snapshot(bank, path)?,
                None => TurState::new(bank, &params, config.tur)?,
            };
            for path in [&snapshot_out, &steps_out].into_iter().flatten() {
                fresh(path, force)?;
            }
            let run = adapt_stream(&params, state, &stream)?;
            if let Some(path) = &steps_out {
                write_steps(path, &run.records)?;
            }
            if let Some(path) = &snapshot_out {
                run.state.save_snapshot(path)?;
            }
            let truths: Vec<_> = stream.iter().map(|s| s.label).collect();
            let report = ArmReport {
                arm: Arm::Full,
                stream_seed: seed,
                model_hash: String::new(),
                followup_steps: Some(run.records.iter().filter(|r| r.route == Route::Followup).count()),
                metrics: evaluate(&run.predictions, &truths, params.num_known)?,
            };
            print_json(&report)?;
        }
        Command::Eval { model, data } => {
            let params = ModelParams::load(&model)?;
            let samples = read_csv(&data)?;
            let preds = samples
                .iter()
                .map(|s| head_label(&params, &s.features))
                .collect::<Result<Vec<_>>>()?;
            let truths: Vec<_> = samples.iter().map(|s| s.label).collect();
            print_json(&evaluate(&preds, &truths, params.num_known)?)?;
        }
        Command::Grid { model, out } => {
            let params = ModelParams::load(&model)?;
            fresh(&out, force)?;
            let grid = decision_grid(params.input_dim(), config.grid_bbox(), config.grid.resolution, |x| {
                head_label(&params, x)
            })?;
            write_grid_csv(&out, &grid)?;
            let unknown = grid.iter().filter(|p| p.label.is_unknown()).count();
            println!("{} cells, {unknown} unknown", grid.len());
        }
        Command::Ablate => {
            let config = ExperimentConfig {
                arms: Arm::ALL.to_vec(),
                ..config
            };
            let outcome = run_experiment(&config, force)?;
            print!("{}", summary_table(&outcome));
        }
        Command::Run => {
            let outcome = run_experiment(&config, force)?;
            write_json(&dir.join("config.json"), &config)?;
            print!("{}", summary_table(&outcome));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
