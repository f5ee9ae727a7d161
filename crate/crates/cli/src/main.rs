use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use tgg_core::dataio::{generate_synthetic, read_attributes, write_feature_rows, Dataset, SyntheticSpec};
use tgg_core::propagate::{argmax_among, propagate_values, LabelMatrix};
use tgg_core::protograph::PrototypeGraph;
use tgg_core::relkernel::InstanceGraph;
use tgg_core::synth::{ConditionalSynthesizer, DEFAULT_RIDGE};
use tgg_core::trainer::{
    build_episode, derive_seed, evaluate, sensitivity_sweep, train, write_log_csv, write_sweep_csv, EpisodeKind,
    ExperimentConfig, Mode, Prepared, TggModel,
};

#[derive(Parser)]
#[command(
    name = "tgg",
    version,
    about = "Transferable graph generation for zero- and few-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoint.json, train_log.csv and metrics.json.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the data named in its stored config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
        /// Write metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export the generated graph of the first test episode.
        #[arg(long)]
        export_graph: Option<PathBuf>,
    },
    /// Retrain and evaluate once per prototype-graph crop threshold.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
        )]
        thresholds: Vec<f64>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Generate the synthetic dataset into a directory.
    SynthData {
        /// JSON synthetic spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Prototype graph utilities.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Conditional feature synthesizer utilities.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Label propagation over an exported instance graph.
    Propagate {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    attributes: PathBuf,
    #[arg(long)]
    splits: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        Dataset::load(&self.features, &self.attributes, &self.splits)
            .with_context(|| format!("loading dataset from {}", self.features.display()))
    }
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Load a dataset, check its invariants and print a summary.
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Build the prototype graph from class attributes.
    Build {
        #[arg(long)]
        attributes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop edges below a threshold.
    Crop {
        #[arg(long)]
        graph: PathBuf,
        /// Attributes CSV naming the classes.
        #[arg(long)]
        attributes: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Fit the synthesizer on seen-class train instances.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_RIDGE)]
        ridge: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample features for one class in the features CSV layout.
    Sample {
        #[arg(long)]
        synth: PathBuf,
        /// Class name from the attributes CSV.
        #[arg(long)]
        class: String,
        #[arg(long)]
        attributes: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    best_val_acc: f64,
    best_episode: usize,
    episodes_run: usize,
    stopped_early: bool,
    test: tgg_core::trainer::Metrics,
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    fs::create_dir_all(out)?;
    let prep = Prepared::from_config(&cfg)?;
    let outcome = train(&prep, &cfg)?;
    outcome.model.save(&out.join("checkpoint.json"))?;
    write_log_csv(&outcome.log, &out.join("train_log.csv"))?;
    let test = evaluate(&outcome.model, &prep, cfg.mode)?;
    let summary = TrainSummary {
        best_val_acc: outcome.best_val_acc,
        best_episode: outcome.best_episode,
        episodes_run: outcome.log.len(),
        stopped_early: outcome.stopped_early,
        test,
    };
    write_json(&summary, Some(&out.join("metrics.json")))?;
    info!("wrote {}", out.display());
    println!(
        "{} accuracy {:.4} (best validation {:.4} at episode {})",
        cfg.mode, summary.test.accuracy, summary.best_val_acc, summary.best_episode
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, mode: Mode, out: Option<&Path>, export: Option<&Path>) -> Result<()> {
    let mut model = TggModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    model.config.mode = mode;
    let cfg = model.config.clone();
    let prep = Prepared::from_config(&cfg)?;
    let metrics = evaluate(&model, &prep, mode)?;
    if let Some(path) = export {
        let seed = derive_seed(cfg.seed, 3, 0);
        let ep = build_episode(
            &prep.dataset,
            &prep.graph,
            &prep.synth,
            &cfg,
            EpisodeKind::Test(mode),
            seed,
        )?;
        let g = model.instance_graph(&ep, &prep.graph)?;
        fs::write(path, serde_json::to_string(&g)?)?;
    }
    write_json(&metrics, out)
}

fn cmd_sweep(config: &Path, thresholds: &[f64], out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let prep = Prepared::from_config(&cfg)?;
    let rows = sensitivity_sweep(&prep, &cfg, thresholds)?;
    write_sweep_csv(&rows, out)?;
    for r in &rows {
        println!("{:.3}\t{:.4}", r.threshold, r.accuracy);
    }
    Ok(())
}

fn cmd_synth_data(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    let ds = generate_synthetic(&spec)?;
    fs::create_dir_all(out)?;
    let paths = ds.save(out)?;
    println!("{}", paths.features.display());
    println!("{}", paths.attributes.display());
    println!("{}", paths.splits.display());
    Ok(())
}

fn class_names(attributes: &Path) -> Result<Vec<String>> {
    Ok(read_attributes(attributes)?.0)
}

fn cmd_graph(command: GraphCommand) -> Result<()> {
    match command {
        GraphCommand::Build { attributes, out } => {
            let (names, attrs) = read_attributes(&attributes)?;
            let g = PrototypeGraph::from_attributes(&attrs, &names)?;
            g.write_edge_list(&out)?;
            println!("{} classes, {} edges", g.num_classes(), g.num_edges());
        }
        GraphCommand::Crop {
            graph,
            attributes,
            threshold,
            out,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                bail!("threshold must lie in [0, 1], got {threshold}");
            }
            let g = PrototypeGraph::from_edge_list(&graph, &class_names(&attributes)?)?;
            let cropped = g.crop(threshold);
            cropped.write_edge_list(&out)?;
            println!("{} of {} edges kept", cropped.num_edges(), g.num_edges());
        }
    }
    Ok(())
}

fn cmd_synth(command: SynthCommand) -> Result<()> {
    match command {
        SynthCommand::Fit { data, ridge, out } => {
            let ds = data.load()?;
            let synth = ConditionalSynthesizer::fit(&ds, ridge)?;
            synth.save(&out)?;
            println!(
                "residual {:.6e} over {} classes",
                synth.report.residual, synth.report.classes_used
            );
        }
        SynthCommand::Sample {
            synth,
            class,
            attributes,
            count,
            seed,
            out,
        } => {
            let synth = ConditionalSynthesizer::load(&synth)?;
            let names = class_names(&attributes)?;
            let k = names
                .iter()
                .position(|n| *n == class)
                .with_context(|| format!("unknown class {class}"))?;
            let x = synth.sample(k, count, seed)?;
            write_feature_rows(&out, x.cols(), (0..count).map(|i| (i as u64, class.as_str(), x.row(i))))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PropagateReport {
    predictions: Vec<Option<usize>>,
    accuracy: Option<f64>,
}

fn cmd_propagate(graph: &Path, mu: f64, out: Option<&Path>) -> Result<()> {
    let g: InstanceGraph =
        serde_json::from_str(&fs::read_to_string(graph)?).with_context(|| format!("parsing {}", graph.display()))?;
    let y = LabelMatrix::new(&g.known, g.classes)?;
    let scores = propagate_values(&g.adjacency, y.tensor(), mu)?;
    let allowed = &g.label_space;
    let predictions: Vec<Option<usize>> = g
        .known
        .iter()
        .enumerate()
        .map(|(v, k)| match k {
            Some(_) => None,
            None => argmax_among(scores.row(v), allowed),
        })
        .collect();
    let accuracy = g.truth.as_ref().map(|truth| {
        let (hit, n) = predictions
            .iter()
            .zip(truth)
            .filter_map(|(p, t)| p.map(|p| usize::from(p == *t)))
            .fold((0, 0), |(h, n), x| (h + x, n + 1));
        hit as f64 / n.max(1) as f64
    });
    write_json(&PropagateReport { predictions, accuracy }, out)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval {
            checkpoint,
            mode,
            out,
            export_graph,
        } => cmd_eval(&checkpoint, mode, out.as_deref(), export_graph.as_deref()),
        Command::Sweep {
            config,
            thresholds,
            out,
        } => cmd_sweep(&config, &thresholds, &out),
        Command::SynthData { spec, out } => cmd_synth_data(spec.as_deref(), &out),
        Command::Dataset {
            command: DatasetCommand::Validate { data },
        } => {
            let ds = data.load()?;
            ds.validate()?;
            println!("{}", ds.report());
            Ok(())
        }
        Command::Graph { command } => cmd_graph(command),
        Command::Synth { command } => cmd_synth(command),
        Command::Propagate { graph, mu, out } => cmd_propagate(&graph, mu, out.as_deref()),
    }
}
