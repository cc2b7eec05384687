//! `reid` command-line tool: synthetic data, training, fine-tuning, mining
//! and evaluation over feature files.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, Command};

use config::{flag_name, key, Key, Resolved};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] reid_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 1 for usage errors, 2 for anything the data or run caused.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
}

const OUT: Key = key("out", "output directory");
const SEED: Key = key("seed", "random seed");
const THREADS: Key = key("threads", "worker threads (0 = all cores, 1 = bit-exact)");
const PRESET: Key = key("preset", "default parameter set: full or desk");
const MODEL: Key = key("model", "checkpoint file");
const TARGET: Key = key("target", "target feature file");
const ALPHA: Key = key("alpha", "fraction of min(N1, N2) mined per camera pair");
const NEGATIVES: Key = key("negatives_per_pair", "negative tracklets per mined pair");
const SELECTION: Key = key("selection", "pair selection: greedy or raw-top-n");
const COOCC: Key = key(
    "cooccurrence",
    "co-occurrence scope: both, same-camera or cross-camera",
);
const P: Key = key("p", "identities per batch");
const K: Key = key("k", "images per identity");
const EPOCHS: Key = key("epochs", "number of epochs");
const LR0: Key = key("lr0", "initial learning rate");
const LR1: Key = key("lr1", "final learning rate");
const LR_HOLD: Key = key("lr_hold", "last epoch at the initial rate");
const LR_END: Key = key("lr_end", "epoch reaching the final rate");
const MARGIN: Key = key("margin", "softplus or hinge:<m>");
const REDUCTION: Key = key("reduction", "mean or sum over anchors");

pub static COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "synth",
        about: "Generate synthetic multi-camera datasets as feature files",
        keys: &[
            OUT,
            SEED,
            THREADS,
            key("num_datasets", "number of datasets"),
            key("cameras_per_dataset", "cameras per dataset"),
            key("ids_per_dataset", "identities per dataset"),
            key(
                "tracklets_per_id_per_camera",
                "tracklets per identity and visited camera",
            ),
            key("images_per_tracklet", "images per tracklet"),
            key("latent_dim", "identity latent dimension"),
            key("feature_dim", "feature dimension"),
            key(
                "camera_transform_scale",
                "strength of per-camera transforms",
            ),
            key("dataset_shift_scale", "strength of per-dataset offsets"),
            key("noise_sigma", "per-image noise standard deviation"),
            key(
                "cross_camera_id_fraction",
                "fraction of identities seen by two or more cameras",
            ),
            key(
                "splits",
                "also write train/test/query/gallery files (true/false)",
            ),
            key("test_fraction", "fraction of identities in the test split"),
        ],
    },
    CommandSpec {
        name: "train",
        about: "Pre-train an embedding on labeled datasets (bh-merge or bh-switch)",
        keys: &[
            key("data", "comma-separated labeled feature files"),
            OUT,
            SEED,
            THREADS,
            PRESET,
            key("mode", "bh-merge or bh-switch"),
            P,
            K,
            MARGIN,
            REDUCTION,
            EPOCHS,
            LR0,
            LR1,
            LR_HOLD,
            LR_END,
            key("hidden_dim", "hidden layer width"),
            key("embedding_dim", "embedding width"),
            key("dropout_rate", "dropout probability"),
            key("bn_momentum", "batch-norm running-statistics momentum"),
            key("switch_policy", "round-robin or proportional"),
        ],
    },
    CommandSpec {
        name: "finetune",
        about: "Adapt a model to an unlabeled target with mined cross-camera pairs",
        keys: &[
            MODEL,
            TARGET,
            key(
                "stage2_target",
                "optional second target for two-stage fine-tuning",
            ),
            OUT,
            SEED,
            THREADS,
            PRESET,
            ALPHA,
            NEGATIVES,
            SELECTION,
            COOCC,
            P,
            K,
            EPOCHS,
            LR0,
            LR1,
            LR_HOLD,
            LR_END,
            MARGIN,
            REDUCTION,
            key(
                "update_bn",
                "keep updating batch-norm statistics (true/false)",
            ),
        ],
    },
    CommandSpec {
        name: "eval",
        about: "CMC and mAP of a model on a query/gallery pair",
        keys: &[
            MODEL,
            key("query", "query feature file"),
            key("gallery", "gallery feature file"),
            OUT,
            THREADS,
            key("k_max", "largest CMC rank"),
            key("exclusion", "same-camera-same-id or none"),
            key(
                "tracklet_level",
                "average embeddings per tracklet (true/false)",
            ),
        ],
    },
    CommandSpec {
        name: "mine",
        about: "Mine presumed-positive pairs and write the pair report",
        keys: &[
            MODEL, TARGET, OUT, SEED, THREADS, ALPHA, NEGATIVES, SELECTION, COOCC, K,
        ],
    },
    CommandSpec {
        name: "gradcheck",
        about: "Run the finite-difference gradient suites",
        keys: &[
            OUT,
            SEED,
            THREADS,
            key("instances", "random instances per suite"),
        ],
    },
];

pub fn cli() -> Command {
    let mut root = Command::new("reid")
        .about("Person re-identification metric learning over feature vectors")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value file; flags win"),
        );
        for k in spec.keys {
            sub = sub.arg(
                Arg::new(k.name)
                    .long(flag_name(k.name))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(k.help),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let spec = COMMANDS
        .iter()
        .find(|c| c.name == name)
        .expect("registered command");
    let flags: Vec<(String, String)> = spec
        .keys
        .iter()
        .filter_map(|k| {
            sub.get_one::<String>(k.name)
                .map(|v| (k.name.to_string(), v.clone()))
        })
        .collect();
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let result =
        Resolved::new(spec.keys, file.as_deref(), flags).and_then(|r| commands::execute(name, r));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
