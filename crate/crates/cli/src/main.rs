//! `cdj`: train, evaluate, probe and ensemble convolutional decision jungles
//! from a TOML run configuration.
//!
//! Exit status: 0 on success, 2 for invalid configuration or incompatible
//! inputs, 3 when training stops on a non-finite loss, 1 for anything else.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdj::data::Dataset;
use cdj::network::{init_parameters, load_checkpoint, save_checkpoint, Checkpoint, NetworkTopology, ParameterSet};
use cdj::probes::{
    accuracy_of, class_matrices, entropy_profile, evaluate_accuracy, purity_snapshot, routing_capable_layers,
    ProbeError,
};
use cdj::table::Table;
use cdj::trainer::{predict_ensemble, train_ensemble, train_with_callback, TrainError, TrainingConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, RunConfig};

const CHECKPOINT: &str = "checkpoint.ckpt";
const REPORT: &str = "report.tsv";
const EFFECTIVE_CONFIG: &str = "config.toml";
/// Samples per forward pass when scoring an ensemble.
const CHUNK: usize = 256;

#[derive(Parser)]
#[command(name = "cdj", version, about = "Convolutional decision jungle training and probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    config: PathBuf,
    /// Override a config key after the file is read, e.g. `lambda1=0` or
    /// `train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; defaults to `[output] dir`, then $CDJ_OUTPUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Configuration whose `[data]` section describes the dataset; defaults
    /// to the `config.toml` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network; writes the checkpoint, per-epoch report and
    /// scheduled probe exports.
    Train(ConfigArgs),
    /// Write the untrained network for the configured seed.
    Init(ConfigArgs),
    /// Print the accuracy of a checkpoint on a dataset split.
    Eval {
        /// A checkpoint, or with `--ensemble` a directory of checkpoints.
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Average the softmax outputs of every `*.ckpt` in the directory.
        #[arg(long)]
        ensemble: bool,
    },
    /// Write the per-layer entropy profile and purity snapshots.
    Probe {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Samples per class in the probe slice; defaults to `probe_per_class`.
        #[arg(long)]
        per_class: Option<usize>,
        /// Defaults to `probe/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the raw class-activation matrix of every routing-capable layer.
    Export {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        per_class: Option<usize>,
        /// Defaults to `export/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one member per seed and tabulate member and ensemble accuracy.
    Ensemble {
        #[command(flatten)]
        run: ConfigArgs,
        /// Member seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Number of members; without `--seeds` they use consecutive seeds
        /// from `train.seed`.
        #[arg(long)]
        k: Option<usize>,
        /// Train members on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Abort(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Abort(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Abort(m) | Failure::Other(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.0)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let inner = match &e {
            TrainError::Member { source, .. } => source.as_ref(),
            other => other,
        };
        match inner {
            TrainError::NonFinite { last_finite, .. } => {
                let last = last_finite.as_ref().map_or(String::new(), |b| format!("; last finite total {:e}", b.total));
                Failure::Abort(format!("{e}{last}"))
            }
            TrainError::Tape(_) => Failure::Other(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<ProbeError> for Failure {
    fn from(e: ProbeError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Other(format!("{}: {e}", path.display()))
}

/// Everything a training run needs, validated before any output is written.
struct Setup {
    cfg: RunConfig,
    hash: String,
    train: Dataset,
    test: Dataset,
    topology: NetworkTopology,
    training: TrainingConfig,
}

impl Setup {
    fn new(args: &ConfigArgs) -> Result<Setup, Failure> {
        let cfg = RunConfig::load(&args.config, &args.set)?;
        let (train, test) = cfg.datasets()?;
        let training = cfg.training_config()?;
        let routing_classes = training.routing_classes(&train)?;
        let topology = cfg.topology(train.sample_shape(), train.num_classes(), routing_classes)?;
        training.validate(&topology, &train)?;
        if test.sample_shape() != train.sample_shape() || test.num_classes() != train.num_classes() {
            return Err(Failure::Invalid(format!(
                "test split has {} classes of {:?} samples, training split {} of {:?}",
                test.num_classes(),
                test.sample_shape(),
                train.num_classes(),
                train.sample_shape()
            )));
        }
        let hash = cfg.hash();
        Ok(Setup {
            cfg,
            hash,
            train,
            test,
            topology,
            training,
        })
    }

    fn meta(&self, seed: u64) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), self.hash.clone()),
            ("seed".to_string(), seed.to_string()),
        ])
    }

    /// Creates the output directory and records the effective config in it.
    fn prepare_output(&self, cli: Option<&Path>) -> Result<PathBuf, Failure> {
        let dir = self.cfg.output_dir(cli);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        let text = format!("# config_hash: {}\n{}", self.hash, self.cfg.to_toml());
        cdj::write_atomic(&path, text.as_bytes()).map_err(io(&path))?;
        Ok(dir)
    }
}

fn with_provenance(mut table: Table, meta: &BTreeMap<String, String>) -> Table {
    for (k, v) in meta {
        if table.meta(k).is_none() {
            table = table.with_meta(k, v);
        }
    }
    table
}

fn write_table(table: &Table, path: &Path) -> Result<(), Failure> {
    table.write_to(path).map_err(io(path))
}

fn write_checkpoint(
    path: &Path,
    params: &ParameterSet,
    topology: &NetworkTopology,
    meta: &BTreeMap<String, String>,
) -> Result<(), Failure> {
    save_checkpoint(path, params, topology, meta).map_err(|e| Failure::Other(e.to_string()))
}

/// Entropy profile and one purity snapshot per routing-capable layer.
fn write_probes(
    dir: &Path,
    topology: &NetworkTopology,
    params: &ParameterSet,
    slice: &Dataset,
    meta: &BTreeMap<String, String>,
) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let profile = entropy_profile(topology, params, slice)?;
    let table = with_provenance(profile.to_table().with_meta("samples", slice.len()), meta);
    write_table(&table, &dir.join("entropy.tsv"))?;
    let layers = routing_capable_layers(topology);
    for (l, m) in layers.iter().zip(class_matrices(topology, params, slice, &layers)?) {
        let table = with_provenance(purity_snapshot(&m).to_table(), meta);
        write_table(&table, &dir.join(format!("purity_l{l}.tsv")))?;
    }
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> Result<(), Failure> {
    let s = Setup::new(args)?;
    let dir = s.prepare_output(args.out.as_deref())?;
    let meta = s.meta(s.training.seed);
    let epochs = s.training.epochs;
    let probe_every = s.cfg.output.probe_every;
    let probe_slice = s.test.balanced_subset(s.training.probe_per_class);
    let mut probe_failure = None;
    let init = init_parameters(&s.topology, s.training.seed).map_err(|e| Failure::Invalid(e.to_string()))?;
    let result = train_with_callback(&s.topology, init, &s.train, &s.test, &s.training, |r, params| {
        println!(
            "epoch {}/{epochs} lr {:.6} loss {:.6} softmax {:.6} train_acc {:.4} test_acc {:.4}",
            r.epoch + 1,
            r.learning_rate,
            r.loss.total,
            r.loss.training_cost,
            r.train_accuracy,
            r.test_accuracy
        );
        if probe_every > 0 && (r.epoch + 1) % probe_every == 0 && probe_failure.is_none() {
            let at = dir.join("probes").join(format!("epoch-{:04}", r.epoch + 1));
            probe_failure = write_probes(&at, &s.topology, params, &probe_slice, &meta).err();
        }
    });
    if let Some(f) = probe_failure {
        return Err(f);
    }
    let (params, report) = result?;
    write_checkpoint(&dir.join(CHECKPOINT), &params, &s.topology, &meta)?;
    write_table(&with_provenance(report.to_table(), &meta), &dir.join(REPORT))?;
    Ok(())
}

fn cmd_init(args: &ConfigArgs) -> Result<(), Failure> {
    let s = Setup::new(args)?;
    let params = init_parameters(&s.topology, s.training.seed).map_err(|e| Failure::Invalid(e.to_string()))?;
    let dir = s.prepare_output(args.out.as_deref())?;
    write_checkpoint(&dir.join(CHECKPOINT), &params, &s.topology, &s.meta(s.training.seed))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

/// The requested split of the dataset described by `args`, checked
/// against `topology`.
fn dataset_for(args: &DataArgs, default_dir: &Path, topology: &NetworkTopology) -> Result<(RunConfig, Dataset), Failure> {
    let path = args.config.clone().unwrap_or_else(|| default_dir.join(EFFECTIVE_CONFIG));
    let cfg = RunConfig::load(&path, &args.set)?;
    let (train, test) = cfg.datasets()?;
    let data = match args.split {
        Split::Train => train,
        Split::Test => test,
    };
    if data.sample_shape() != topology.input_shape {
        return Err(Failure::Invalid(format!(
            "dataset samples are {:?}, the network expects {:?}",
            data.sample_shape(),
            topology.input_shape
        )));
    }
    if data.num_classes() != topology.num_classes {
        return Err(Failure::Invalid(format!(
            "dataset has {} classes, the network has {}",
            data.num_classes(),
            topology.num_classes
        )));
    }
    Ok((cfg, data))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Provenance of exports made from `ckpt`: its own config hash and seed
/// when it carries them, else those of `cfg`.
fn provenance(ckpt: &Checkpoint, cfg: &RunConfig) -> BTreeMap<String, String> {
    let get = |k: &str, fallback: String| ckpt.metadata.get(k).cloned().unwrap_or(fallback);
    BTreeMap::from([
        ("config_hash".to_string(), get("config_hash", cfg.hash())),
        ("seed".to_string(), get("seed", cfg.train.seed.to_string())),
    ])
}

fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Invalid(format!("{}: no *.ckpt files", dir.display())));
    }
    Ok(paths)
}

fn ensemble_accuracy(members: &[ParameterSet], topology: &NetworkTopology, data: &Dataset) -> Result<f64, Failure> {
    let mut predictions = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        let p = predict_ensemble(members, topology, &data.stack(idx)).map_err(|e| Failure::Invalid(e.to_string()))?;
        predictions.extend(p);
    }
    Ok(accuracy_of(&predictions, &data.labels()))
}

fn cmd_eval(checkpoint: &Path, args: &DataArgs, ensemble: bool) -> Result<(), Failure> {
    let accuracy = if ensemble {
        let ckpts = checkpoints_in(checkpoint)?
            .iter()
            .map(|p| read_checkpoint(p))
            .collect::<Result<Vec<_>, _>>()?;
        let topology = ckpts[0].topology.clone();
        if let Some(i) = ckpts.iter().position(|c| c.topology != topology) {
            return Err(Failure::Invalid(format!("member {i} has a different topology from member 0")));
        }
        let (_, data) = dataset_for(args, checkpoint, &topology)?;
        let members: Vec<ParameterSet> = ckpts.into_iter().map(|c| c.params).collect();
        ensemble_accuracy(&members, &topology, &data)?
    } else {
        let ckpt = read_checkpoint(checkpoint)?;
        let (_, data) = dataset_for(args, &parent_dir(checkpoint), &ckpt.topology)?;
        evaluate_accuracy(&ckpt.topology, &ckpt.params, &data)?
    };
    println!("{accuracy:.4}");
    Ok(())
}

/// Loads the checkpoint and the balanced probe slice for `probe`/`export`.
fn probe_inputs(
    checkpoint: &Path,
    args: &DataArgs,
    per_class: Option<usize>,
) -> Result<(Checkpoint, Dataset, BTreeMap<String, String>), Failure> {
    let ckpt = read_checkpoint(checkpoint)?;
    let (cfg, data) = dataset_for(args, &parent_dir(checkpoint), &ckpt.topology)?;
    let slice = data.balanced_subset(per_class.unwrap_or(cfg.train.probe_per_class));
    let meta = provenance(&ckpt, &cfg);
    Ok((ckpt, slice, meta))
}

fn cmd_probe(checkpoint: &Path, args: &DataArgs, per_class: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    let (ckpt, slice, meta) = probe_inputs(checkpoint, args, per_class)?;
    // Fail on a bad slice before creating the output directory.
    let profile = entropy_profile(&ckpt.topology, &ckpt.params, &slice)?;
    let dir = out.map_or_else(|| parent_dir(checkpoint).join("probe"), Path::to_path_buf);
    write_probes(&dir, &ckpt.topology, &ckpt.params, &slice, &meta)?;
    print!("{}", profile.to_table().render());
    Ok(())
}

fn cmd_export(checkpoint: &Path, args: &DataArgs, per_class: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    let (ckpt, slice, meta) = probe_inputs(checkpoint, args, per_class)?;
    let layers = routing_capable_layers(&ckpt.topology);
    let mats = class_matrices(&ckpt.topology, &ckpt.params, &slice, &layers)?;
    let dir = out.map_or_else(|| parent_dir(checkpoint).join("export"), Path::to_path_buf);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    for (l, m) in layers.iter().zip(&mats) {
        let table = m.to_table().with_meta("layer", l).with_meta("samples", slice.len());
        write_table(&with_provenance(table, &meta), &dir.join(format!("cmatrix_l{l}.tsv")))?;
    }
    Ok(())
}

fn member_seeds(seeds: &[u64], k: Option<usize>, base: u64) -> Result<Vec<u64>, Failure> {
    match (seeds.is_empty(), k) {
        (true, None) => Err(Failure::Invalid("give --seeds or --k".into())),
        (true, Some(k)) => Ok((0..k as u64).map(|i| base + i).collect()),
        (false, Some(k)) if k != seeds.len() => Err(Failure::Invalid(format!(
            "--k {k} disagrees with the {} seeds given",
            seeds.len()
        ))),
        (false, _) => Ok(seeds.to_vec()),
    }
}

fn cmd_ensemble(args: &ConfigArgs, seeds: &[u64], k: Option<usize>, parallel: bool) -> Result<(), Failure> {
    let s = Setup::new(args)?;
    let seeds = member_seeds(seeds, k, s.training.seed)?;
    if seeds.is_empty() {
        return Err(Failure::Invalid("an ensemble needs at least one member".into()));
    }
    let mut distinct = seeds.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() {
        return Err(Failure::Invalid(format!("ensemble seeds must be distinct, got {seeds:?}")));
    }
    let members = train_ensemble(&s.topology, &s.train, &s.test, &s.training, &seeds, parallel)?;
    let dir = s.prepare_output(args.out.as_deref())?;
    let mut rows = Vec::new();
    for (i, ((params, report), &seed)) in members.iter().zip(&seeds).enumerate() {
        let meta = s.meta(seed);
        write_checkpoint(&dir.join(format!("member-{i}.ckpt")), params, &s.topology, &meta)?;
        write_table(&with_provenance(report.to_table(), &meta), &dir.join(format!("member-{i}-report.tsv")))?;
        let acc = report.final_test_accuracy().expect("at least one epoch");
        println!("member {i} seed {seed} test_acc {acc:.4}");
        rows.push(vec![i.to_string(), seed.to_string(), acc.to_string()]);
    }
    let params: Vec<ParameterSet> = members.into_iter().map(|(p, _)| p).collect();
    let acc = ensemble_accuracy(&params, &s.topology, &s.test)?;
    println!("ensemble test_acc {acc:.4}");
    rows.push(vec!["ensemble".to_string(), "-".to_string(), acc.to_string()]);
    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    let table = Table::new(vec!["member".into(), "seed".into(), "test_accuracy".into()], rows)
        .with_meta("config_hash", &s.hash)
        .with_meta("seed", seed_list);
    write_table(&table, &dir.join("ensemble.tsv"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Init(args) => cmd_init(args),
        Command::Eval {
            checkpoint,
            data,
            ensemble,
        } => cmd_eval(checkpoint, data, *ensemble),
        Command::Probe {
            checkpoint,
            data,
            per_class,
            out,
        } => cmd_probe(checkpoint, data, *per_class, out.as_deref()),
        Command::Export {
            checkpoint,
            data,
            per_class,
            out,
        } => cmd_export(checkpoint, data, *per_class, out.as_deref()),
        Command::Ensemble {
            run,
            seeds,
            k,
            parallel,
        } => cmd_ensemble(run, seeds, *k, *parallel),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
