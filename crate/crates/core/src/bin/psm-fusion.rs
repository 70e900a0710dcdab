use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use psm_fusion::dataset::Dataset;
use psm_fusion::dgp::{self, DgpConfig};
use psm_fusion::experiment::{self, ExperimentConfig, RepetitionSeeds};
use psm_fusion::fusion::{self, Backend, BucketSpec, FeatureSelection, FusionConfig, Replacement};
use psm_fusion::metrics::{self, MapeMode};
use psm_fusion::nnindex::Metric;
use psm_fusion::uplift::{Hyper, TLearnerModel};

#[derive(Parser)]
#[command(name = "psm-fusion", version, about = "Pseudo-sample matching fusion of RCT and observational data")]
struct Cli {
    /// Cap on worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate biased RCT, observational and ground-truth CSVs.
    Generate {
        /// Experiment or generator config (TOML). Defaults to the built-in config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the generator seed.
        #[arg(long, conflicts_with = "repetition")]
        seed: Option<u64>,
        /// Use the seeds an experiment derives for this repetition, and also
        /// write its train/test split.
        #[arg(long)]
        repetition: Option<usize>,
        /// Override the RCT size.
        #[arg(long)]
        n_rct: Option<usize>,
    },
    /// Fuse an RCT with observational data.
    Fuse {
        #[arg(long)]
        rct: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long, default_value_t = 3)]
        ratio: usize,
        /// Comma-separated feature names; default is every feature.
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<String>>,
        /// `name` (discrete) or `name:e1|e2|...` (edges), separated by `;`.
        #[arg(long, default_value = "")]
        buckets: String,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long, default_value = "kdtree")]
        backend: Backend,
        #[arg(long, default_value = "euclidean")]
        metric: Metric,
        #[arg(long)]
        max_distance: Option<f64>,
        #[arg(long, default_value = "without")]
        replacement: Replacement,
        /// Select rows at random instead of matching (control arm).
        #[arg(long)]
        random: bool,
        /// Seed for `--random`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-cell match counts, shortfalls and mean distances.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a T-learner and write it in the plain-text model format.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take learner settings from an experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Qini curve points per group.
        #[arg(long)]
        curves: Option<PathBuf>,
        #[arg(long, default_value_t = metrics::DEFAULT_GRID)]
        grid: usize,
        /// Per-row MAPE against true uplift instead of group-level.
        #[arg(long)]
        per_sample_mape: bool,
    },
    /// Run the full baseline / random / fused study.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<usize>>,
        #[arg(long)]
        n_rct: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate a runs.csv into the mean/sd comparison table.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the built-in experiment config as TOML.
    DefaultConfig,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_data(path: &Path) -> Result<Dataset> {
    Dataset::from_csv_path(path).with_context(|| format!("reading {}", path.display()))
}

/// Either a full experiment config or a bare generator config.
fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::paper_default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(cfg) = ExperimentConfig::from_toml_str(&text) {
        return Ok(cfg);
    }
    match DgpConfig::from_toml_str(&text) {
        Ok(dgp) => {
            let mut cfg = ExperimentConfig::paper_default();
            cfg.dgp = dgp;
            Ok(cfg)
        }
        Err(_) => Ok(ExperimentConfig::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out_dir,
            seed,
            repetition,
            n_rct,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut dgp_cfg = cfg.dgp.clone();
            if let Some(n) = n_rct {
                dgp_cfg.n_rct = n;
            }
            let seeds = repetition.map(|r| RepetitionSeeds::new(cfg.experiment.master_seed, r));
            if let Some(s) = &seeds {
                dgp_cfg.seed = s.dgp;
            } else if let Some(s) = seed {
                dgp_cfg.seed = s;
            }
            let t = std::time::Instant::now();
            let gen = dgp::generate(&dgp_cfg)?;
            log::info!("generate: {:.2?}", t.elapsed());
            std::fs::create_dir_all(&out_dir)?;
            gen.biased_rct.data.write_csv(create(&out_dir.join("rct.csv"))?)?;
            gen.observational.data.write_csv(create(&out_dir.join("obs.csv"))?)?;
            gen.ground_truth.data.write_csv(create(&out_dir.join("gt.csv"))?)?;
            let mut cats = create(&out_dir.join("categories.csv"))?;
            writeln!(cats, "dataset,persuadables,sure_things,lost_causes,sleeping_dogs")?;
            for (name, d) in [
                ("rct", &gen.biased_rct),
                ("obs", &gen.observational),
                ("gt", &gen.ground_truth),
            ] {
                let c = d.category_counts();
                writeln!(cats, "{name},{},{},{},{}", c[0], c[1], c[2], c[3])?;
            }
            cats.flush()?;
            if let Some(s) = seeds {
                let (train, test) =
                    experiment::train_test_split(&gen.biased_rct.data, cfg.experiment.train_fraction, s.split)?;
                train.write_csv(create(&out_dir.join("train.csv"))?)?;
                test.write_csv(create(&out_dir.join("test.csv"))?)?;
                let mut f = create(&out_dir.join("seeds.txt"))?;
                writeln!(f, "dgp={}\nsplit={}\nrandom_fuse={}\nlearner={}", s.dgp, s.split, s.random_fuse, s.learner)?;
                f.flush()?;
            }
        }
        Command::Fuse {
            rct,
            obs,
            ratio,
            features,
            buckets,
            weights,
            backend,
            metric,
            max_distance,
            replacement,
            random,
            seed,
            out,
            report,
        } => {
            let rct = read_data(&rct)?;
            let obs = read_data(&obs)?;
            let t = std::time::Instant::now();
            if random {
                let fused = fusion::random_fuse(&rct, &obs, ratio, seed)?;
                fused.data.write_csv(create(&out)?)?;
            } else {
                let mut selection = match &features {
                    Some(names) => FeatureSelection::from_names(&rct, names)?,
                    None => FeatureSelection::new((0..rct.n_features()).collect()),
                };
                if let Some(w) = weights {
                    selection = FeatureSelection::with_weights(selection.columns, w)?;
                }
                let config = FusionConfig {
                    selection,
                    buckets: BucketSpec::parse(&buckets, rct.feature_names())?,
                    ratio,
                    backend,
                    metric,
                    max_distance,
                    replacement,
                    ..FusionConfig::default()
                };
                let output = fusion::fuse(&rct, &obs, &config)?;
                output.fused.data.write_csv(create(&out)?)?;
                if let Some(path) = report {
                    output.report.write_csv(create(&path)?)?;
                }
                log::info!(
                    "fuse: {} matched, shortfall {}",
                    output.fused.n_matched(),
                    output.report.total_shortfall()
                );
            }
            log::info!("fuse: {:.2?}", t.elapsed());
        }
        Command::Train {
            data,
            out,
            config,
            learning_rate,
            l2,
            epochs,
            seed,
        } => {
            let mut hyper = match config {
                Some(p) => load_config(Some(&p))?.learner,
                None => Hyper::default(),
            };
            if let Some(v) = learning_rate {
                hyper.learning_rate = v;
            }
            if let Some(v) = l2 {
                hyper.l2 = v;
            }
            if let Some(v) = epochs {
                hyper.max_epochs = v;
            }
            if let Some(v) = seed {
                hyper.seed = v;
            }
            let train = read_data(&data)?;
            let t = std::time::Instant::now();
            let (model, logs) = TLearnerModel::fit(&train, &hyper)?;
            for (arm, l) in logs.iter().enumerate().filter(|(_, l)| l.rows > 0) {
                log::info!(
                    "train arm {arm}: {} rows, {} epochs, {} halvings, degenerate={}",
                    l.rows,
                    l.epochs,
                    l.rate_halvings,
                    l.degenerate
                );
            }
            log::info!("train: {:.2?}", t.elapsed());
            model.save(&out)?;
        }
        Command::Evaluate {
            model,
            data,
            out,
            curves,
            grid,
            per_sample_mape,
        } => {
            let model = TLearnerModel::load(&model)?;
            let data = read_data(&data)?;
            let mode = if per_sample_mape {
                MapeMode::PerSample
            } else {
                MapeMode::Group
            };
            let e = metrics::evaluate(&model, &data, grid, mode)?;
            e.report.write_csv(create(&out)?)?;
            if let Some(path) = curves {
                metrics::write_curves_csv(&e.report.groups, &e.curves, create(&path)?)?;
            }
        }
        Command::Experiment {
            config,
            out_dir,
            repetitions,
            ratios,
            n_rct,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(r) = repetitions {
                cfg.experiment.repetitions = r;
            }
            if let Some(r) = ratios {
                cfg.experiment.ratios = r;
            }
            if let Some(n) = n_rct {
                cfg.dgp.n_rct = n;
            }
            if let Some(s) = seed {
                cfg.experiment.master_seed = s;
            }
            cfg.validate()?;
            let result = experiment::run_experiment(&cfg)?;
            result.write_all(&out_dir)?;
            std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
            log::info!("experiment: {} models trained", result.models_trained);
        }
        Command::Report { runs, out } => {
            let file = File::open(&runs).with_context(|| format!("reading {}", runs.display()))?;
            let records = experiment::read_runs_csv(std::io::BufReader::new(file), &runs.display().to_string())?;
            if records.is_empty() {
                bail!("{} has no runs", runs.display());
            }
            experiment::write_summary_csv(&experiment::summarize(&records), create(&out)?)?;
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::paper_default().to_toml_string());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not configure thread pool: {e}");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
