use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use saane::config::EvalConfig;
use saane::eval::{evaluate, pr_csv, queries_csv};
use saane::gradcheck::model_grad_check;
use saane::io::{read_features, write_atomic, write_features, Checkpoint, FeatureMap, FeatureRecord, RunManifest};
use saane::synth::generate_synthetic;
use saane::trainer::{fit, TrainingSet};
use saane::{RatioDirection, RunConfig};

const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "saane", version, about = "Multimodal attention place embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/db/query feature files
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        places: usize,
        #[arg(long)]
        conditions: usize,
        #[arg(long)]
        seed: u64,
        /// Channel counts and magnitudes; built-in defaults otherwise
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on DIR/train.safm and write a checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every record of a feature file
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Refuse to run unless this config's architecture matches the checkpoint
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score query embeddings against database embeddings
    Eval {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 5)]
        tolerance: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        thresholds: usize,
        /// Accept queries whose ratio is at most (or at least) the threshold
        #[arg(long, value_enum, default_value_t = Direction::AtMost)]
        direction: Direction,
    },
    /// Export channel, spatial and combined attention maps per frame
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full model
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Directory for the run manifest
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Direction {
    AtMost,
    AtLeast,
}

enum Failure {
    Data(saane::Error),
    Check(String),
}

impl From<saane::Error> for Failure {
    fn from(e: saane::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let invocation = std::env::args().collect::<Vec<_>>().join(" ");
    match run(cli.command, &invocation) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn manifest_beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn run(command: Command, invocation: &str) -> CmdResult {
    match command {
        Command::Synth {
            out,
            places,
            conditions,
            seed,
            config,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.seed = seed;
            let data = generate_synthetic(places, conditions, &cfg, seed)?;
            fs::create_dir_all(&out)?;
            write_features(&data.train, &out.join("train.safm"))?;
            write_features(&data.db, &out.join("db.safm"))?;
            write_features(&data.query, &out.join("query.safm"))?;
            RunManifest::new(invocation, &cfg).write(&out.join("manifest.json"))?;
            println!(
                "wrote {} train, {} db, {} query records to {}",
                data.train.len(),
                data.db.len(),
                data.query.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let set = TrainingSet::from_records(&read_features(&data.join("train.safm"))?)?;
            let mut csv = String::from("epoch,mean_loss,active_triplet_fraction,wall_seconds\n");
            let start = Instant::now();
            let (model, state) = fit(&cfg, &set, |epoch, s| {
                let wall = start.elapsed().as_secs_f64();
                csv.push_str(&format!("{},{:.9},{:.9},{:.3}\n", epoch + 1, s.mean_loss, s.active_fraction, wall));
                eprintln!("epoch {:>3}  loss {:.6}  active {:.3}", epoch + 1, s.mean_loss, s.active_fraction);
            })?;
            Checkpoint::from_model(&model, state.step).save(&out)?;
            let mut csv_path = out.clone().into_os_string();
            csv_path.push(".epochs.csv");
            write_atomic(Path::new(&csv_path), csv.as_bytes())?;
            RunManifest::new(invocation, &cfg).write(&manifest_beside(&out))?;
            println!("wrote {} after {} steps", out.display(), state.step);
        }
        Command::Embed {
            ckpt,
            features,
            out,
            config,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = match config {
                Some(p) => {
                    let cfg = RunConfig::load(&p)?;
                    ck.check_config(&cfg.model)?;
                    cfg
                }
                None => RunConfig {
                    model: ck.model_config.clone(),
                    ..RunConfig::default()
                },
            };
            let records = read_features(&features)?;
            let model = ck.into_model()?;
            let embeddings = model.embed_records(&records)?;
            let out_records: Vec<FeatureRecord> = records
                .iter()
                .zip(&embeddings)
                .map(|(r, e)| FeatureRecord::from_embedding(e, r.class_id, r.condition_id))
                .collect();
            write_features(&out_records, &out)?;
            RunManifest::new(invocation, &cfg).write(&manifest_beside(&out))?;
            println!("wrote {} embeddings of length {}", out_records.len(), cfg.model.embedding_len());
        }
        Command::Eval {
            db,
            query,
            tolerance,
            out,
            thresholds,
            direction,
        } => {
            let direction = match direction {
                Direction::AtMost => RatioDirection::AtMost,
                Direction::AtLeast => RatioDirection::AtLeast,
            };
            let load = |p: &Path| -> Result<Vec<_>, Failure> {
                Ok(read_features(p)?.iter().map(FeatureRecord::to_embedding).collect())
            };
            let result = evaluate(&load(&db)?, &load(&query)?, tolerance, thresholds, direction)?;
            fs::create_dir_all(&out)?;
            write_atomic(&out.join("pr.csv"), pr_csv(&result.curve).as_bytes())?;
            write_atomic(&out.join("queries.csv"), queries_csv(&result.results, tolerance).as_bytes())?;
            let cfg = RunConfig {
                eval: EvalConfig {
                    tolerance,
                    n_thresholds: thresholds,
                    ratio_direction: direction,
                },
                ..RunConfig::default()
            };
            RunManifest::new(invocation, &cfg).write(&out.join("manifest.json"))?;
            println!("AUC {:.6}", result.curve.auc);
        }
        Command::Attn { ckpt, features, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = RunConfig {
                model: ck.model_config.clone(),
                ..RunConfig::default()
            };
            let model = ck.into_model()?;
            let records = read_features(&features)?;
            let (mut channel, mut spatial, mut volume) = (Vec::new(), Vec::new(), Vec::new());
            for r in &records {
                let maps = model
                    .attention_maps(&r.appearance.to_tensor()?, &r.semantic.to_tensor()?)?
                    .ok_or_else(|| {
                        saane::Error::InvalidArgument(format!("{:?} models have no attention", cfg.model.variant))
                    })?;
                let pair = |a, s| -> Result<FeatureRecord, Failure> {
                    Ok(FeatureRecord {
                        frame_id: r.frame_id,
                        class_id: r.class_id,
                        condition_id: r.condition_id,
                        appearance: FeatureMap::from_tensor(a)?,
                        semantic: FeatureMap::from_tensor(s)?,
                    })
                };
                channel.push(pair(&maps.channel_a, &maps.channel_s)?);
                spatial.push(pair(&maps.spatial_a, &maps.spatial_s)?);
                volume.push(pair(&maps.volume_a, &maps.volume_s)?);
            }
            fs::create_dir_all(&out)?;
            write_features(&channel, &out.join("channel.safm"))?;
            write_features(&spatial, &out.join("spatial.safm"))?;
            write_features(&volume, &out.join("volume.safm"))?;
            RunManifest::new(invocation, &cfg).write(&out.join("manifest.json"))?;
            println!("wrote attention maps for {} frames", records.len());
        }
        Command::Gradcheck { config, seed, eps, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.seed = seed;
            let start = Instant::now();
            let report = model_grad_check(&cfg, seed, eps)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                RunManifest::new(invocation, &cfg).write(&dir.join("manifest.json"))?;
            }
            println!(
                "max relative error {:.3e} over {} entries (worst {}[{}]) in {:.1}s",
                report.max_rel_error,
                report.entries_checked,
                report.worst_param,
                report.worst_index,
                start.elapsed().as_secs_f64()
            );
            if !(report.max_rel_error < GRADCHECK_LIMIT) {
                return Err(Failure::Check(format!(
                    "gradient error {:.3e} is not below {GRADCHECK_LIMIT:e}",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}
