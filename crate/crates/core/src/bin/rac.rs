//! `rac` — command-line front end for the counting pipeline.
//!
//! Exit codes: 0 success, 1 validation error (bad input, config or
//! arguments), 2 runtime or numeric error.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use rac_core::checkpoint::{load_checkpoint, save_checkpoint};
use rac_core::config::TrainConfig;
use rac_core::data::{
    dataset_stats, generate_suite, parse_annotations, serialize_annotations, split_dataset, SplitMode, SuiteSpec,
    VideoRecord,
};
use rac_core::encoder::save_racf;
use rac_core::eval::{emit_plot, evaluate, DataDir, DensityPredictor};
use rac_core::sampling::map_cycles_to_samples;
use rac_core::training::{
    grad_check, make_density_target, train_with_progress, write_loss_history, TargetVariant, TrainSample,
};

#[derive(Parser)]
#[command(name = "rac", version, about = "Repetitive action counting with multi-scale temporal correlation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print duration and count statistics of an annotation CSV.
    Stats { annotations: PathBuf },
    /// Split videos into train/val/test id lists.
    Split {
        annotations: PathBuf,
        #[arg(long, default_value = "regular")]
        mode: SplitMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated train,val,test fractions.
        #[arg(long, default_value = "0.7,0.15,0.15")]
        ratios: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset: annotations.csv plus features/<id>.racf.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one `frame,target` CSV per video.
    MakeTargets {
        annotations: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value = "mid")]
        variant: TargetVariant,
        #[arg(long, default_value_t = 0.1)]
        sigma_floor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Training config JSON; defaults to the built-in gradient-check preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Train a model and write a checkpoint plus a `step,loss` CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss history path; defaults to the checkpoint path with `.loss.csv`.
        #[arg(long)]
        loss: Option<PathBuf>,
        /// Restrict training to the ids listed in this file (one per line).
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a per-video report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Round predicted counts before scoring.
        #[arg(long)]
        round: bool,
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Write the predicted (and target) density map of one video as CSV + PGM.
    Plot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mid")]
        variant: TargetVariant,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<rac_core::Error>() {
        Some(e) if e.is_validation() => 1,
        Some(_) => 2,
        None => {
            if err.downcast_ref::<clap::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
                1
            } else {
                2
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn read_records(path: &Path) -> anyhow::Result<Vec<VideoRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_annotations(&text)?)
}

fn read_ids(path: &Path) -> anyhow::Result<HashSet<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn select(records: Vec<VideoRecord>, ids: Option<&Path>) -> anyhow::Result<Vec<VideoRecord>> {
    let Some(path) = ids else { return Ok(records) };
    let wanted = read_ids(path)?;
    let kept: Vec<_> = records.into_iter().filter(|r| wanted.contains(&r.video_id)).collect();
    if kept.len() != wanted.len() {
        return Err(rac_core::Error::Validation(format!(
            "{} lists {} ids but only {} are annotated",
            path.display(),
            wanted.len(),
            kept.len()
        ))
        .into());
    }
    Ok(kept)
}

fn parse_ratios(text: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| rac_core::Error::Validation(format!("bad --ratios `{text}`")))?;
    match parts.as_slice() {
        &[a, b, c] => Ok((a, b, c)),
        _ => Err(rac_core::Error::Validation("--ratios needs three comma-separated values".into()).into()),
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Stats { annotations } => {
            let records = read_records(&annotations)?;
            println!("{}", dataset_stats(&records)?);
        }
        Command::Split { annotations, mode, seed, ratios, out } => {
            let records = read_records(&annotations)?;
            let split = split_dataset(&records, mode, seed, parse_ratios(&ratios)?)?;
            fs::create_dir_all(&out)?;
            for (name, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
                let mut text = ids.join("\n");
                if !text.is_empty() {
                    text.push('\n');
                }
                fs::write(out.join(format!("{name}.txt")), text)?;
            }
            println!("train {} / val {} / test {}", split.train.len(), split.val.len(), split.test.len());
        }
        Command::Synth { spec, seed, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let suite: SuiteSpec =
                serde_json::from_str(&text).map_err(|e| rac_core::Error::Config(format!("{}: {e}", spec.display())))?;
            let videos = generate_suite(&suite, seed)?;
            let dir = DataDir::new(&out);
            fs::create_dir_all(out.join("features"))?;
            for v in &videos {
                save_racf(dir.features_path(&v.record.video_id), &v.features)?;
            }
            let records: Vec<VideoRecord> = videos.into_iter().map(|v| v.record).collect();
            fs::write(dir.annotations_path(), serialize_annotations(&records))?;
            println!("wrote {} videos to {}", records.len(), out.display());
        }
        Command::MakeTargets { annotations, n, variant, sigma_floor, out } => {
            if n == 0 {
                bail!(rac_core::Error::Validation("--n must be positive".into()));
            }
            let records = read_records(&annotations)?;
            fs::create_dir_all(&out)?;
            for r in &records {
                let spans = map_cycles_to_samples(&r.cycles, r.frame_count, n);
                let target = make_density_target(&spans, n, variant, sigma_floor)?;
                let mut f = std::io::BufWriter::new(fs::File::create(out.join(format!("{}.csv", r.video_id)))?);
                writeln!(f, "frame,target")?;
                for (i, v) in target.values.iter().enumerate() {
                    writeln!(f, "{i},{v}")?;
                }
                f.flush()?;
            }
            println!("wrote {} target maps to {}", records.len(), out.display());
        }
        Command::Gradcheck { config, seed, eps } => {
            let cfg = match config {
                Some(path) => TrainConfig::from_json(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?,
                None => TrainConfig::gradcheck(),
            };
            let report = grad_check(&cfg, seed, eps)?;
            println!("{report}");
            return Ok(if report.pass { 0 } else { 2 });
        }
        Command::Train { config, data, out, loss, ids } => {
            let cfg = TrainConfig::from_json(&fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?)?;
            let dir = DataDir::new(&data);
            let records = select(dir.records()?, ids.as_deref())?;
            let mc = cfg.model_config();
            let samples = records
                .iter()
                .map(|r| {
                    let features = dir.features(r)?;
                    TrainSample::from_record(r, &features, &mc, cfg.variant, cfg.sigma_floor)
                })
                .collect::<rac_core::Result<Vec<_>>>()?;
            let every = (cfg.steps / 20).max(1);
            let outcome = train_with_progress(&samples, &cfg, |step, l| {
                if step % every == 0 || step + 1 == cfg.steps {
                    eprintln!("step {step:>6}  loss {l:.6e}");
                }
            })?;
            save_checkpoint(&out, &outcome.model)?;
            let loss_path = loss.unwrap_or_else(|| out.with_extension("loss.csv"));
            write_loss_history(&loss_path, &outcome.history)?;
            println!("wrote {} and {}", out.display(), loss_path.display());
        }
        Command::Eval { model, data, report, round, ids } => {
            let model = load_checkpoint(&model)?;
            let dir = DataDir::new(&data);
            let records = select(dir.records()?, ids.as_deref())?;
            let result = evaluate(&model, &records, &|r| dir.features(r), round)?;
            let mut f = std::io::BufWriter::new(fs::File::create(&report)?);
            result.write_csv(&mut f)?;
            f.flush()?;
            println!("videos {}  MAE {:.4}  OBO {:.4}", result.rows.len(), result.mae, result.obo);
            for (id, reason) in &result.failures {
                eprintln!("excluded {id}: {reason}");
            }
            if !result.failures.is_empty() {
                return Ok(2);
            }
        }
        Command::Plot { model, data, video, out, variant } => {
            let model = load_checkpoint(&model)?;
            let dir = DataDir::new(&data);
            let record = dir
                .records()?
                .into_iter()
                .find(|r| r.video_id == video)
                .ok_or_else(|| rac_core::Error::Validation(format!("video `{video}` is not annotated")))?;
            let features = dir.features(&record)?;
            let pred = model.predict_video(&record, &features)?;
            let n = model.config.num_frames;
            let spans = map_cycles_to_samples(&record.cycles, record.frame_count, n);
            let target = make_density_target(&spans, n, variant, 0.1)?;
            let (csv, pgm) = emit_plot(&pred, Some(&target), &out)?;
            println!("wrote {} and {}", csv.display(), pgm.display());
        }
    }
    Ok(0)
}
