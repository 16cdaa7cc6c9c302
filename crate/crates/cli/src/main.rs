use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use deco_core::ablate::{ablation_csv, run_ablation, AblationAxis};
use deco_core::checkpoint::Checkpoint;
use deco_core::config::RunConfig;
use deco_core::data::{generate_dataset, load_image, normalize, read_dataset, write_dataset, CocoResult};
use deco_core::eval::{detections_from_set, evaluate_model, export_query_slots, predict_scenes, write_slots_csv};
use deco_core::selfcheck::{self, MAX_REL_ERROR};
use deco_core::train::{resume_run, train_run, EpochMetrics};

#[derive(Parser)]
#[command(name = "deco", version, about = "Query-based convolutional object detection on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Kv,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset as PNGs plus a COCO annotation file.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the held-out split instead of the training split.
        #[arg(long)]
        held_out: bool,
    },
    /// Train from scratch (or resume) and write metrics.csv and checkpoint.deco.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a COCO-format dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "kv")]
        format: ReportFormat,
    },
    /// Run one image and write every prediction as COCO results JSON.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        image_id: u64,
    },
    /// Finite-difference check of every op and the composed model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run a single case (see --list).
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        list: bool,
    },
    /// Export confident per-slot predictions over a dataset.
    Slots {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train once per value of a design axis and tabulate AP50 and loss.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: upsample, layers, kernel, fusion, query_shape.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_epoch(m: &EpochMetrics) {
    let ap = m.ap50.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "epoch {:>3}  lr {:.1e}  loss {:.4} (class {:.4}, l1 {:.4}, giou {:.4})  ap50 {ap}",
        m.epoch, m.lr, m.loss.total, m.loss.class_loss, m.loss.l1_loss, m.loss.giou_loss
    );
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { config, out, held_out } => {
            let cfg = RunConfig::load(&config)?;
            let spec = if held_out { cfg.data.held_out() } else { cfg.data.clone() };
            let scenes = generate_dataset(&spec);
            write_dataset(&out, &scenes, spec.num_classes)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Train { config, out, resume } => {
            let outcome = match (config, resume) {
                (_, Some(ck)) => resume_run(&Checkpoint::load(&ck)?, Some(&out), print_epoch)?,
                (Some(config), None) => train_run(&RunConfig::load(&config)?, Some(&out), print_epoch)?,
                (None, None) => unreachable!("clap requires --config or --resume"),
            };
            eprintln!("finished at epoch {}; outputs in {}", outcome.trainer.epoch, out.display());
        }
        Command::Eval { ckpt, data, format } => {
            let (model, store, cfg) = Checkpoint::load(&ckpt)?.restore()?;
            let scenes = read_dataset(&data)?;
            let report = evaluate_model(&model, &store, &scenes, &cfg.data)?;
            match format {
                ReportFormat::Kv => print!("{}", report.to_key_value()),
                ReportFormat::Csv => print!("{}", report.to_csv()),
            }
        }
        Command::Infer { ckpt, image, out, image_id } => {
            let (model, store, cfg) = Checkpoint::load(&ckpt)?.restore()?;
            let img = load_image(&image)?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let set = model.predict(&store, normalize(&img, cfg.data.mean, cfg.data.std))?;
            let results: Vec<CocoResult> = detections_from_set(image_id, &set, w, h).iter().map(CocoResult::from).collect();
            write(&out, &serde_json::to_string_pretty(&results)?)?;
            eprintln!("wrote {} detections to {}", results.len(), out.display());
        }
        Command::Gradcheck { seed, case, list } => {
            if list {
                for n in selfcheck::case_names() {
                    println!("{n}");
                }
                return Ok(true);
            }
            let entries = match case {
                Some(name) => vec![selfcheck::run_case(&name, seed, selfcheck::OP_SAMPLES)?],
                None => selfcheck::run_suite(seed)?,
            };
            let mut ok = true;
            println!("case,max_rel_error,coords,draws,status");
            for e in &entries {
                ok &= e.passed();
                println!(
                    "{},{:.3e},{},{},{}",
                    e.name,
                    e.report.max_rel_error,
                    e.report.coords_checked,
                    e.draws,
                    if e.passed() { "pass" } else { "FAIL" }
                );
            }
            eprintln!("{} (tolerance {MAX_REL_ERROR:e})", if ok { "all cases pass" } else { "some cases FAIL" });
            return Ok(ok);
        }
        Command::Slots { ckpt, data, out, threshold } => {
            let (model, store, cfg) = Checkpoint::load(&ckpt)?.restore()?;
            let scenes = read_dataset(&data)?;
            let sets = predict_scenes(&model, &store, &scenes, &cfg.data)?;
            let rows = export_query_slots(&sets, threshold);
            write(&out, &write_slots_csv(&rows))?;
            eprintln!("wrote {} slot rows to {}", rows.len(), out.display());
        }
        Command::Ablate { config, axis, out } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = RunConfig::load(&config)?;
            let rows = run_ablation(&cfg, axis, |r| eprintln!("{axis}={}  ap50 {:.4}  loss {:.4}", r.value, r.ap50, r.loss))?;
            let csv = ablation_csv(&rows);
            match out {
                Some(path) => write(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn train_needs_config_or_resume() {
        assert!(Cli::try_parse_from(["deco", "train", "--out", "x"]).is_err());
        assert!(Cli::try_parse_from(["deco", "train", "--out", "x", "--config", "c.toml"]).is_ok());
        assert!(Cli::try_parse_from(["deco", "train", "--out", "x", "--resume", "ck"]).is_ok());
    }
}
