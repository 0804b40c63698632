use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use vpmel::data::{load_manifest, synth_dataset, write_manifest, FeatureDims, SynthSpec};
use vpmel::eval::{evaluate, rank, REPORT_KS};
use vpmel::qa::{filter_by_iou, fleiss_kappa, iou, Box as QaBox, RatingMatrix, DEFAULT_IOU_THRESHOLD};
use vpmel::training::train;
use vpmel::{Checkpoint, Error, HyperConfig};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "vpmel", version, about = "Visual-prompt multimodal entity linking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest, selecting the best checkpoint by dev Hit@1.
    Train {
        /// JSON hyperparameter file; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank every mention of a manifest and report Hit@k.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = REPORT_KS.to_vec())]
        k: Vec<usize>,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the top candidates of one mention.
    Rank {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mention: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Write a planted-signal dataset as train and dev manifests.
    Synth(SynthArgs),
    /// Annotation quality statistics.
    Qa {
        #[command(subcommand)]
        command: QaCommand,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    mentions: usize,
    #[arg(long)]
    entities: usize,
    #[arg(long)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    dc: usize,
    #[arg(long, default_value_t = 16)]
    dt: usize,
    /// Candidates per mention, gold included; 0 ranks against the whole KB.
    #[arg(long, default_value_t = 20)]
    candidates: usize,
    /// Fraction of mentions in the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
}

#[derive(Subcommand)]
enum QaCommand {
    /// IoU of each box pair and the pairs kept at the threshold.
    Iou {
        /// JSON list of `[box, box]` pairs; a box is `{x1, y1, x2, y2}` or `[x1, y1, x2, y2]`.
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
        threshold: f64,
    },
    /// Fleiss' kappa of an items-by-categories count matrix.
    Kappa {
        #[arg(long)]
        ratings: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxInput {
    Fields(QaBox),
    Corners([f64; 4]),
}

impl From<BoxInput> for QaBox {
    fn from(b: BoxInput) -> Self {
        match b {
            BoxInput::Fields(b) => b,
            BoxInput::Corners([x1, y1, x2, y2]) => QaBox { x1, y1, x2, y2 },
        }
    }
}

#[derive(Serialize)]
struct IouOutput {
    threshold: f64,
    iou: Vec<f64>,
    kept: Vec<usize>,
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serialises")
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            train: train_path,
            dev,
            out,
        } => {
            let cfg: HyperConfig = match config {
                Some(p) => parse_json(&p)?,
                None => HyperConfig::default(),
            };
            cfg.validate()?;
            let train_set = load_manifest(&train_path)?;
            let dev_set = load_manifest(&dev)?;
            let outcome = train(&cfg, &train_set, &dev_set, &out)?;
            let summary = json!({
                "best_checkpoint": outcome.best_checkpoint,
                "last_checkpoint": outcome.last_checkpoint,
                "metrics_log": outcome.metrics_log,
                "epochs": outcome.state.epoch,
                "steps": outcome.state.step,
                "best_dev_hit1": outcome.state.best_dev_hit1,
            });
            println!("{}", to_json(&summary));
        }
        Command::Eval { ckpt, data, k, report } => {
            if k.contains(&0) {
                return Err(Error::Validation("k values must be >= 1".into()));
            }
            let ck = Checkpoint::load(&ckpt)?;
            let ds = load_manifest(&data)?;
            let r = evaluate(&ck.model, &ds, &k)?;
            for (k, h) in &r.hit_at {
                log::info!("{} Hit@{k} = {h:.4}", r.split);
            }
            let text = to_json(&r);
            match report {
                Some(p) => write(&p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Rank {
            ckpt,
            data,
            mention,
            top,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = load_manifest(&data)?;
            let m = ds
                .mention(&mention)
                .ok_or_else(|| Error::Validation(format!("mention {mention:?} not found in {}", data.display())))?;
            let mut r = rank(&ck.model, &ds, m)?;
            r.candidates.truncate(top);
            println!("{}", to_json(&r));
        }
        Command::Synth(a) => {
            if !(0.0..=1.0).contains(&a.train_fraction) {
                return Err(Error::Validation(format!("train fraction {} outside [0, 1]", a.train_fraction)));
            }
            let mut spec = SynthSpec::new(a.seed, a.mentions, a.entities, FeatureDims { d_c: a.dc, d_t: a.dt }, a.noise);
            spec.candidates = a.candidates;
            let ds = synth_dataset(&spec)?;
            let at = (a.mentions as f64 * a.train_fraction).round() as usize;
            let (train_set, dev_set) = ds.split_at(at, "train", "dev")?;
            let train_path = write_manifest(&train_set, &a.out, "train")?;
            let dev_path = write_manifest(&dev_set, &a.out, "dev")?;
            let summary = json!({
                "train": train_path,
                "dev": dev_path,
                "train_mentions": train_set.len(),
                "dev_mentions": dev_set.len(),
                "entities": ds.kb.len(),
            });
            println!("{}", to_json(&summary));
        }
        Command::Qa { command } => match command {
            QaCommand::Iou { boxes, threshold } => {
                let raw: Vec<(BoxInput, BoxInput)> = parse_json(&boxes)?;
                let pairs: Vec<(QaBox, QaBox)> = raw.into_iter().map(|(a, b)| (a.into(), b.into())).collect();
                let values = pairs.iter().map(|(a, b)| iou(a, b)).collect::<Result<Vec<_>, _>>()?;
                let kept = filter_by_iou(&pairs, threshold)?;
                println!(
                    "{}",
                    to_json(&IouOutput {
                        threshold,
                        iou: values,
                        kept,
                    })
                );
            }
            QaCommand::Kappa { ratings } => {
                let m: RatingMatrix = parse_json(&ratings)?;
                let kappa = fleiss_kappa(&m)?;
                let out = json!({
                    "kappa": kappa,
                    "items": m.items(),
                    "categories": m.categories(),
                    "raters": m.raters(),
                });
                println!("{}", to_json(&out));
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
