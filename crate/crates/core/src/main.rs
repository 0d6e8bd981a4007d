use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use hamletbench::ablation::{run_ablation_grid, GridContext};
use hamletbench::bundle::{Mode, PolicyBundle, Stage};
use hamletbench::env::{generate_demonstrations, read_demo_file, TaskId, Trajectory};
use hamletbench::harness::eval::HeldOut;
use hamletbench::harness::profile::profiling_bundles;
use hamletbench::harness::{
    evaluate_policy, export_attention, profile_efficiency, read_results, write_report, ExperimentConfig, ReportFormat, ResultRow, Results,
};
use hamletbench::training::{
    finetune_memory_variant, finetune_multi_frame, finetune_single_frame, pretrain_single_frame, train_moment_tokens, transfer_memory,
    TrainLog, VariantSpec,
};
use hamletbench::{Error, Result};

#[derive(Parser)]
#[command(name = "hamletbench", version, about = "History-aware policy fine-tuning benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write a demonstration file.
    GenDemos {
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the single-frame policy on one or more demonstration files.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        demos: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialise moment tokens by time-contrastive learning.
    Tcl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune one variant. Moment variants start from a TCL checkpoint,
    /// single- and multi-frame ones from the pretrained policy.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded rollouts of a checkpoint on one task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the ablation grid from a config.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move a trained memory module to another task.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token, MAC, peak-activation and latency profile per variant and T.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "pick_place_twice")]
        task: TaskId,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-step attention maps of seeded rollouts.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        rollouts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate a report from stored raw results.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_stage(bundle: &PolicyBundle, log: &TrainLog, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    bundle.save(out)?;
    write_json(&out.with_extension("log.json"), log)?;
    println!("{} {} -> {} (final loss {:?})", stage_name(bundle.meta.stage), bundle.meta.mode, out.display(), log.final_loss());
    Ok(())
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Stage1 => "STAGE1",
        Stage::Stage2 => "STAGE2",
        Stage::Stage3 => "STAGE3",
    }
}

fn demos(path: &Path) -> Result<Vec<Trajectory>> {
    Ok(read_demo_file(path)?.trajectories)
}

/// The config's spec for `mode`, or the defaults, with the run's seed.
fn spec_for(cfg: &ExperimentConfig, mode: Mode) -> VariantSpec {
    let base = cfg.variants.iter().find(|v| v.mode == mode).cloned().unwrap_or(VariantSpec {
        mode,
        chunk: cfg.chunk,
        ..VariantSpec::default()
    });
    VariantSpec { seed: cfg.seed, ..base }
}

fn held_out(cfg: &ExperimentConfig) -> Option<HeldOut> {
    (cfg.demos.held_out > 0).then_some(HeldOut {
        demos: cfg.demos.held_out,
        seed: cfg.seed ^ 0x4e1d,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos { task, n, seed, out } => {
            let set = generate_demonstrations(task, n, seed, &out)?;
            println!("{} demos of {} (mean length {:.1}) -> {}", set.trajectories.len(), task, set.manifest.mean_length, out.display());
        }
        Command::Pretrain { common, demos: files, out } => {
            let cfg = common.load()?;
            let mut trajs = Vec::new();
            for f in &files {
                trajs.extend(demos(f)?);
            }
            let (b, log) = pretrain_single_frame(&trajs, &cfg.backbone, &cfg.memory, cfg.chunk, &cfg.stage1, cfg.seed)?;
            save_stage(&b, &log, &out)?;
        }
        Command::Tcl { common, stage1, demos: file, out } => {
            let cfg = common.load()?;
            let (b, log) = train_moment_tokens(&PolicyBundle::load(&stage1)?, &demos(&file)?, &cfg.tcl, cfg.seed)?;
            save_stage(&b, &log, &out)?;
        }
        Command::Finetune { common, base, demos: file, mode, out } => {
            let cfg = common.load()?;
            let base = PolicyBundle::load(&base)?;
            let trajs = demos(&file)?;
            let spec = spec_for(&cfg, mode);
            let (b, log) = match mode {
                Mode::SingleFrame => finetune_single_frame(&base, &trajs, &spec)?,
                Mode::MultiFrame => finetune_multi_frame(&base, &trajs, &spec)?,
                _ => finetune_memory_variant(&base, &trajs, &spec)?,
            };
            save_stage(&b, &log, &out)?;
        }
        Command::Eval { common, checkpoint, task, episodes, out } => {
            let cfg = common.load()?;
            let bundle = PolicyBundle::load(&checkpoint)?;
            let eval = evaluate_policy(&bundle, task, episodes.unwrap_or(cfg.eval.episodes), cfg.seed, held_out(&cfg))?;
            println!(
                "{} on {}: full {:.2} ± {:.2}, partial {:.2} ± {:.2}, chunk accuracy {:?} (ceiling {:?})",
                bundle.meta.mode, task, eval.full, eval.full_se, eval.partial, eval.partial_se, eval.chunk_accuracy, eval.ceiling
            );
            write_json(&out, &eval)?;
        }
        Command::Ablate { common, out } => {
            let cfg = common.load()?;
            let data: Vec<(TaskId, Vec<Trajectory>)> = cfg
                .tasks
                .iter()
                .map(|&t| Ok((t, hamletbench::env::demo_set(t, cfg.demos.episodes, cfg.seed)?.trajectories)))
                .collect::<Result<_>>()?;
            let all: Vec<Trajectory> = data.iter().flat_map(|(_, d)| d.iter().cloned()).collect();
            let (stage1, _) = pretrain_single_frame(&all, &cfg.backbone, &cfg.memory, cfg.chunk, &cfg.stage1, cfg.seed)?;
            let ctx = GridContext {
                stage1: &stage1,
                demos: &data,
                tcl: cfg.tcl.clone(),
                eval_episodes: cfg.eval.episodes,
                eval_seed: cfg.seed,
                held_out: held_out(&cfg),
            };
            let cells = run_ablation_grid(&ctx, &cfg.ablation, &spec_for(&cfg, Mode::Hamlet), cfg.seed)?;
            let mut results = Results {
                fingerprint: cfg.fingerprint(),
                config: serde_json::to_value(&cfg)?,
                ..Results::default()
            };
            for cell in &cells {
                match &cell.error {
                    Some(e) => eprintln!("cell {} failed: {e}", cell.label),
                    None => {
                        for eval in &cell.evals {
                            let probe = PolicyBundle::attach_memory(&stage1, cell.spec.mode, &cell.spec.memory_config(cfg.backbone.d_model), 0)?;
                            results.rows.push(ResultRow::from_eval(&cell.label, eval, &probe));
                        }
                    }
                }
            }
            results.details.insert("cells".into(), serde_json::to_value(&cells)?);
            write_report(&results, ReportFormat::Json, &out.join("ablation.json"))?;
            write_report(&results, ReportFormat::Csv, &out.join("ablation.csv"))?;
            print!("{}", results.to_csv());
        }
        Command::Transfer { common, source, stage1, demos: file, out } => {
            let cfg = common.load()?;
            let (b, log) = transfer_memory(
                &PolicyBundle::load(&source)?,
                &PolicyBundle::load(&stage1)?,
                &demos(&file)?,
                &cfg.tcl,
                &spec_for(&cfg, Mode::Hamlet),
            )?;
            save_stage(&b, &log, &out)?;
        }
        Command::Profile { common, task, out } => {
            let cfg = common.load()?;
            let bundles = profiling_bundles(&cfg.backbone, &cfg.memory, cfg.chunk, &cfg.profile.t_values, cfg.seed)?;
            let report = profile_efficiency(&bundles, task, cfg.profile.warmup, cfg.profile.timesteps, cfg.seed)?;
            for r in &report.rows {
                println!(
                    "{:<13} T={} tokens {:>4} macs {:>10} peak {:>9} latency {:.3} ms (x{:.2})",
                    r.variant, r.history, r.tokens, r.macs, r.peak_scalars, r.latency_ms, r.latency_ratio
                );
            }
            write_json(&out, &report)?;
        }
        Command::ExportAttn {
            checkpoint,
            task,
            seed,
            rollouts,
            out,
        } => {
            let paths = export_attention(&PolicyBundle::load(&checkpoint)?, task, seed, rollouts, &out)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Report { results, format, out } => {
            write_report(&read_results(&results)?, format, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
