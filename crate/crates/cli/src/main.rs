use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hinet::data::{
    make_phantom_dataset, normalize_intensity, save_volume, DatasetLayout, Manifest, ManifestSubject, Modality,
    PhantomConfig, PhantomRule, SamplePlan, VolumeFormat,
};
use hinet::experiments::{
    emit_report, evaluate_run, run_ablation, synthesize_subject_dir, train_run, RunConfig, RunManifest, FINAL_MODEL,
};
use hinet::model::{FusionVariant, HiNetParams};
use hinet::{HinetError, Result};

#[derive(Parser)]
#[command(name = "hinet", version, about = "Multi-modal MR synthesis with hybrid fusion")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training / generation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory owned by this run.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Use log(1 - D) for the generator's adversarial term.
    #[arg(long, global = true)]
    strict_paper_adv: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Hinv,
    Nifti,
}

impl From<Format> for VolumeFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Hinv => VolumeFormat::Hinv,
            Format::Nifti => VolumeFormat::Nifti,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    FusionMix,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Plan {
    /// Slices are used at their stored resolution.
    Whole,
    /// 160x180 center crop, four 128x128 corner patches.
    Patches,
}

impl From<Plan> for SamplePlan {
    fn from(p: Plan) -> Self {
        match p {
            Plan::Whole => SamplePlan::whole(),
            Plan::Patches => SamplePlan::cropped_patches(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Normalize raw volumes into a dataset folder with a manifest.
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "hinv")]
        format: Format,
    },
    /// Write a synthetic phantom dataset.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 128)]
        rows: usize,
        #[arg(long, default_value_t = 128)]
        cols: usize,
        #[arg(long, default_value_t = 4)]
        slices: usize,
        #[arg(long, value_enum, default_value = "fusion-mix")]
        rule: Rule,
        #[arg(long, value_enum, default_value = "hinv")]
        format: Format,
    },
    /// Train (or resume) the run in --run-dir.
    Train,
    /// Synthesize the target modality for one subject folder.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subject_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "t1,t2")]
        sources: Vec<Modality>,
        #[arg(long, default_value = "flair")]
        target: Modality,
        #[arg(long, value_enum, default_value = "whole")]
        plan: Plan,
    },
    /// Evaluate a trained run on its test subjects.
    Evaluate {
        /// Defaults to <run-dir>/model.hnck.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate fusion variants over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Defaults to all six variants.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<FusionVariant>,
    },
    /// Write loss curves, metric tables and image grids for a run.
    Report,
}

fn run_dir(cli: &Cli) -> Result<&Path> {
    cli.run_dir
        .as_deref()
        .ok_or_else(|| HinetError::Argument("--run-dir is required".into()))
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if cli.strict_paper_adv {
        cfg.train.strict_paper_adv = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_dataset(layout: &DatasetLayout, subjects: Vec<(String, Vec<(Modality, hinet::data::Volume)>)>, format: VolumeFormat) -> Result<()> {
    let mut manifest = Manifest::default();
    for (id, vols) in subjects {
        let mut entry = ManifestSubject {
            id: id.clone(),
            modalities: Default::default(),
        };
        for (m, v) in vols {
            let path = layout.volume_path(&id, m, format);
            save_volume(&path, &v, format)?;
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            entry.modalities.insert(m, name);
        }
        manifest.subjects.push(entry);
    }
    layout.write_manifest(&manifest)
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::PrepareData { input, out, format } => {
            let src = DatasetLayout::new(input);
            let manifest = src.scan()?;
            let mut subjects = Vec::new();
            for s in &manifest.subjects {
                let mut vols = Vec::new();
                for &m in s.modalities.keys() {
                    vols.push((m, normalize_intensity(&src.load(s, m)?)?));
                }
                subjects.push((s.id.clone(), vols));
            }
            let n = subjects.len();
            write_dataset(&DatasetLayout::new(out), subjects, (*format).into())?;
            println!("prepared {n} subjects into {}", out.display());
        }
        Command::PhantomGen {
            out,
            subjects,
            rows,
            cols,
            slices,
            rule,
            format,
        } => {
            let mut cfg = PhantomConfig::new(*subjects, (*rows, *cols), cli.seed.unwrap_or(0));
            cfg.slices = *slices;
            cfg.rule = match rule {
                Rule::FusionMix => PhantomRule::FusionMix,
                Rule::Identity => PhantomRule::Identity,
            };
            let data = make_phantom_dataset(&cfg)?
                .into_iter()
                .map(|s| {
                    let vols = vec![(Modality::T1, s.x1), (Modality::T2, s.x2), (Modality::Flair, s.y)];
                    (s.subject_id, vols)
                })
                .collect();
            write_dataset(&DatasetLayout::new(out), data, (*format).into())?;
            println!("wrote {subjects} phantom subjects to {}", out.display());
        }
        Command::Train => {
            let dir = run_dir(cli)?;
            let manifest = RunManifest::new(run_config(cli)?)?;
            let trainer = train_run(&manifest, dir)?;
            println!(
                "trained {} for {} epochs ({} steps); model at {}",
                manifest.run_id,
                trainer.epoch,
                trainer.step,
                dir.join(FINAL_MODEL).display()
            );
        }
        Command::Synthesize {
            checkpoint,
            subject_dir,
            out_dir,
            sources,
            target,
            plan,
        } => {
            let [a, b] = sources[..] else {
                return Err(HinetError::Argument(format!(
                    "--sources needs exactly two modalities, got {}",
                    sources.len()
                )));
            };
            let params = HiNetParams::load(checkpoint)?;
            let path = synthesize_subject_dir(&params, subject_dir, [a, b], *target, &(*plan).into(), out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { checkpoint } => {
            let dir = run_dir(cli)?;
            let manifest = RunManifest::read(dir)?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| dir.join(FINAL_MODEL));
            let params = HiNetParams::load(&ckpt)?;
            let report = evaluate_run(&manifest, &params, dir)?;
            print!("{}", report.table());
        }
        Command::Ablate { seeds, variants } => {
            let dir = run_dir(cli)?;
            let cfg = run_config(cli)?;
            let variants = if variants.is_empty() {
                FusionVariant::ALL.to_vec()
            } else {
                variants.clone()
            };
            let table = run_ablation(&cfg, &variants, seeds, dir)?;
            print!("{}", table.render());
        }
        Command::Report => {
            let dir = run_dir(cli)?;
            for p in emit_report(dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(dir) = &cli.run_dir {
        if let Err(e) = fs::create_dir_all(dir) {
            eprintln!("error: cannot create {}: {e}", dir.display());
            return ExitCode::from(3);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
