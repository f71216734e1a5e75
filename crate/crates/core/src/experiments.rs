//! Run configuration, fusion-variant ablation, inference on subject folders
//! and report generation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    build_samples, make_phantom_dataset, normalize_intensity, save_volume, split_subjects, DatasetLayout,
    Modality, PhantomConfig, Sample, SamplePlan, SubjectVolumes, Volume, VolumeFormat,
};
use crate::error::{HinetError, Result};
use crate::metrics::{
    aggregate_evaluate, read_slice_metrics, write_slice_metrics, AggregateReport, SliceMetrics, Summary,
};
use crate::model::{init_params, FusionVariant, HiNetParams, ModelConfig};
use crate::synthesis::{assemble_volume, synthesize_subject};
use crate::trainer::{read_loss_log, TrainConfig, Trainer, LOSS_LOG};

pub mod plot;

/// One of the six fusion variants together with its description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub variant: FusionVariant,
    pub description: &'static str,
}

impl VariantSpec {
    pub fn all() -> Vec<VariantSpec> {
        FusionVariant::ALL.into_iter().map(VariantSpec::of).collect()
    }

    pub fn of(variant: FusionVariant) -> Self {
        let description = match variant {
            FusionVariant::Hybrid => "modality encoders, MFB fusion network, MFB generator",
            FusionVariant::EarlyFusion => "sources stacked as channels into one encoder",
            FusionVariant::LateFusion => "modality encoders, latents concatenated once",
            FusionVariant::ConcateD1 => "concatenation in fusion network and generator",
            FusionVariant::ConcateD2 => "MFB fusion network, concatenation in generator",
            FusionVariant::ConcateD3 => "concatenation fusion network, MFB generator",
        };
        Self { variant, description }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(Self::of(name.parse()?))
    }
}

/// Model configuration for `spec` on top of `base`.
pub fn build_variant(spec: &VariantSpec, base: &ModelConfig) -> Result<ModelConfig> {
    let config = base.clone().with_variant(spec.variant);
    config.validate()?;
    Ok(config)
}

/// Where the subjects of a run come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    /// Generated in memory from a seed.
    Phantom(PhantomConfig),
    /// A prepared dataset folder (`<root>/<subject>/<modality>.<ext>`).
    Directory { root: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub sources: [Modality; 2],
    pub target: Modality,
}

impl TaskSpec {
    pub fn label(&self) -> String {
        format!("{}+{}->{}", self.sources[0], self.sources[1], self.target)
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            sources: [Modality::T1, Modality::T2],
            target: Modality::Flair,
        }
    }
}

/// Everything a run needs; the JSON file given to `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub dataset: DatasetSource,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub plan: SamplePlan,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            dataset: DatasetSource::Phantom(PhantomConfig::new(10, (128, 128), 0)),
            train_fraction: 0.8,
            split_seed: 0,
            plan: SamplePlan::whole(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HinetError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HinetError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.task.sources[0] == self.task.sources[1]
            || self.task.sources.contains(&self.task.target)
        {
            return Err(HinetError::Config(format!("task {} repeats a modality", self.task.label())));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(HinetError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Written to `<run_dir>/run_manifest.json` before anything else happens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub variant: FusionVariant,
    pub config_hash: String,
    pub config: RunConfig,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const SLICE_METRICS: &str = "slice_metrics.csv";
pub const AGGREGATE: &str = "aggregate.json";
pub const METRICS_TABLE: &str = "metrics_table.txt";
pub const FINAL_MODEL: &str = "model.hnck";

impl RunManifest {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.content_hash();
        Ok(Self {
            run_id: format!("{}-{}", config.model.fusion_variant, &hash[..12]),
            variant: config.model.fusion_variant,
            config_hash: hash,
            config,
        })
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir).map_err(|e| HinetError::io(run_dir, e))?;
        let path = run_dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| HinetError::io(&path, e))
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| HinetError::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| HinetError::format("run manifest", e.to_string()))?;
        if m.config.content_hash() != m.config_hash {
            return Err(HinetError::corrupt("config_hash", "does not match the stored configuration"));
        }
        Ok(m)
    }
}

/// Subjects of a run, split into train and test.
pub struct LoadedData {
    pub train: Vec<SubjectVolumes>,
    pub test: Vec<SubjectVolumes>,
    /// Subjects dropped because a modality file was missing.
    pub skipped: Vec<String>,
}

/// Loads (or generates) all subjects of `config` and splits them.
pub fn load_data(config: &RunConfig) -> Result<LoadedData> {
    let (subjects, skipped) = match &config.dataset {
        DatasetSource::Phantom(p) => (make_phantom_dataset(p)?, Vec::new()),
        DatasetSource::Directory { root } => load_directory(&DatasetLayout::new(root), &config.task)?,
    };
    if subjects.len() < 2 {
        return Err(HinetError::Data(format!(
            "need at least two complete subjects, found {}",
            subjects.len()
        )));
    }
    let ids: Vec<String> = subjects.iter().map(|s| s.subject_id.clone()).collect();
    let split = split_subjects(&ids, config.train_fraction, config.split_seed)?;
    let pick = |wanted: &[String]| -> Vec<SubjectVolumes> {
        wanted
            .iter()
            .filter_map(|id| subjects.iter().find(|s| &s.subject_id == id).cloned())
            .collect()
    };
    Ok(LoadedData {
        train: pick(&split.train_ids),
        test: pick(&split.test_ids),
        skipped,
    })
}

/// Loads every subject with all three task modalities; subjects missing one
/// are skipped with a warning.
pub fn load_directory(layout: &DatasetLayout, task: &TaskSpec) -> Result<(Vec<SubjectVolumes>, Vec<String>)> {
    let manifest = match layout.read_manifest() {
        Ok(m) => m,
        Err(_) => layout.scan()?,
    };
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for s in &manifest.subjects {
        let load = |m| layout.load(s, m);
        match (load(task.sources[0]), load(task.sources[1]), load(task.target)) {
            (Ok(x1), Ok(x2), Ok(y)) => out.push(SubjectVolumes {
                subject_id: s.id.clone(),
                x1: normalize_intensity(&x1)?,
                x2: normalize_intensity(&x2)?,
                y: normalize_intensity(&y)?,
            }),
            (a, b, c) => {
                let err = [a.err(), b.err(), c.err()].into_iter().flatten().next().unwrap();
                if !matches!(err, HinetError::MissingModality { .. }) {
                    return Err(err);
                }
                warn!("skipping subject {}: {err}", s.id);
                skipped.push(s.id.clone());
            }
        }
    }
    Ok((out, skipped))
}

pub fn training_samples(subjects: &[SubjectVolumes], plan: &SamplePlan) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for s in subjects {
        samples.extend(build_samples(&s.x1, &s.x2, &s.y, plan)?);
    }
    Ok(samples)
}

/// Trains the run described by `manifest` in `run_dir`, resuming from the
/// newest `ckpt_epoch_<k>` when one exists.
pub fn train_run(manifest: &RunManifest, run_dir: &Path) -> Result<Trainer> {
    manifest.write(run_dir)?;
    let cfg = &manifest.config;
    let data = load_data(cfg)?;
    let samples = training_samples(&data.train, &cfg.plan)?;
    info!("{}: {} training samples", manifest.run_id, samples.len());
    let mut trainer = match latest_checkpoint(run_dir)? {
        Some(path) => {
            info!("resuming from {}", path.display());
            let t = Trainer::load(&path)?;
            if t.config != cfg.train || t.params.config != cfg.model {
                return Err(HinetError::Config(format!(
                    "{} was written by a different configuration",
                    path.display()
                )));
            }
            t
        }
        None => Trainer::new(init_params(&cfg.model, cfg.train.seed)?, cfg.train.clone())?,
    };
    trainer.fit(&samples, Some(run_dir))?;
    trainer.params.save(&run_dir.join(FINAL_MODEL))?;
    Ok(trainer)
}

/// Highest-epoch checkpoint in `run_dir`, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    if !run_dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for e in fs::read_dir(run_dir).map_err(|e| HinetError::io(run_dir, e))? {
        let path = e.map_err(|e| HinetError::io(run_dir, e))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_epoch_"))
            .and_then(|k| k.parse::<usize>().ok());
        if let Some(k) = epoch {
            if best.as_ref().is_none_or(|(b, _)| k > *b) {
                best = Some((k, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Evaluates `params` on the run's test subjects and writes
/// `slice_metrics.csv`, `aggregate.json` and `metrics_table.txt`.
pub fn evaluate_run(manifest: &RunManifest, params: &HiNetParams, run_dir: &Path) -> Result<AggregateReport> {
    let data = load_data(&manifest.config)?;
    let (report, rows) = aggregate_evaluate(
        params,
        &data.test,
        &manifest.config.plan,
        &manifest.config.task.label(),
        data.skipped,
    )?;
    fs::create_dir_all(run_dir).map_err(|e| HinetError::io(run_dir, e))?;
    write_slice_metrics(&run_dir.join(SLICE_METRICS), &rows)?;
    let agg = run_dir.join(AGGREGATE);
    fs::write(&agg, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| HinetError::io(&agg, e))?;
    let table = run_dir.join(METRICS_TABLE);
    fs::write(&table, report.table()).map_err(|e| HinetError::io(&table, e))?;
    Ok(report)
}

/// Trains and evaluates one run.
pub fn execute_run(manifest: &RunManifest, run_dir: &Path) -> Result<AggregateReport> {
    let trainer = train_run(manifest, run_dir)?;
    evaluate_run(manifest, &trainer.params, run_dir)
}

/// One row of the ablation table; `error` is set when a run failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: FusionVariant,
    pub psnr: Summary,
    pub nmse: Summary,
    pub ssim: Summary,
    /// Mean held-out PSNR of each seed.
    pub seed_psnr: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_JSON: &str = "ablation.json";

impl AblationTable {
    pub fn row(&self, variant: FusionVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Task {}  seeds {:?}", self.task, self.seeds);
        let _ = writeln!(s, "{:<14} {:>18} {:>18} {:>18}", "Method", "PSNR (dB) ^", "NMSE v", "SSIM ^");
        for r in &self.rows {
            match &r.error {
                Some(e) => {
                    let _ = writeln!(s, "{:<14} {:>18} {:>18} {:>18}  FAILED: {e}", r.variant.name(), "-", "-", "-");
                }
                None => {
                    let _ = writeln!(
                        s,
                        "{:<14} {:>18} {:>18} {:>18}",
                        r.variant.name(),
                        format!("{:.3}±{:.3}", r.psnr.mean, r.psnr.std),
                        format!("{:.4}±{:.4}", r.nmse.mean, r.nmse.std),
                        format!("{:.4}±{:.4}", r.ssim.mean, r.ssim.std)
                    );
                }
            }
        }
        s
    }
}

pub fn seed_run_dir(out_dir: &Path, variant: FusionVariant, seed: u64) -> PathBuf {
    out_dir.join(variant.name()).join(format!("seed{seed}"))
}

fn ablation_row(variant: FusionVariant, per_seed: &[Vec<SliceMetrics>]) -> AblationRow {
    let all: Vec<&SliceMetrics> = per_seed.iter().flatten().collect();
    let finite = |rows: &[&SliceMetrics]| rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect::<Vec<_>>();
    AblationRow {
        variant,
        psnr: Summary::of(&finite(&all)),
        nmse: Summary::of(&all.iter().map(|r| r.nmse).collect::<Vec<_>>()),
        ssim: Summary::of(&all.iter().map(|r| r.ssim).collect::<Vec<_>>()),
        seed_psnr: per_seed
            .iter()
            .map(|rows| Summary::of(&finite(&rows.iter().collect::<Vec<_>>())).mean)
            .collect(),
        error: None,
    }
}

/// Trains and evaluates each variant once per seed (the seed drives model
/// initialization and batch order; the subject split stays fixed). Summaries
/// pool the per-slice metrics of all seeds.
pub fn run_ablation(base: &RunConfig, variants: &[FusionVariant], seeds: &[u64], out_dir: &Path) -> Result<AblationTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(HinetError::Argument("ablation needs at least one seed and one variant".into()));
    }
    let mut rows = Vec::new();
    for &v in variants {
        let mut per_seed = Vec::new();
        let mut error = None;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model = build_variant(&VariantSpec::of(v), &base.model)?;
            cfg.train.seed = seed;
            let dir = seed_run_dir(out_dir, v, seed);
            let outcome = RunManifest::new(cfg)
                .and_then(|m| execute_run(&m, &dir))
                .and_then(|_| read_slice_metrics(&dir.join(SLICE_METRICS)));
            match outcome {
                Ok(r) => per_seed.push(r),
                Err(e) => {
                    warn!("{v} seed {seed} failed: {e}");
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let mut row = ablation_row(v, &per_seed);
        row.error = error;
        info!("{v}: PSNR {:.3} over seeds {:?}", row.psnr.mean, row.seed_psnr);
        rows.push(row);
    }
    let table = AblationTable {
        task: base.task.label(),
        seeds: seeds.to_vec(),
        rows,
    };
    fs::create_dir_all(out_dir).map_err(|e| HinetError::io(out_dir, e))?;
    let txt = out_dir.join(ABLATION_TABLE);
    fs::write(&txt, table.render()).map_err(|e| HinetError::io(&txt, e))?;
    let json = out_dir.join(ABLATION_JSON);
    fs::write(&json, serde_json::to_string_pretty(&table).expect("table serializes"))
        .map_err(|e| HinetError::io(&json, e))?;
    Ok(table)
}

/// Synthesizes the target for the subject in `subject_dir` and writes it to
/// `out_dir/<target>.<ext>` in the format of the first source file. Values are
/// mapped back from [-1, 1] to the joint intensity range of the sources.
pub fn synthesize_subject_dir(
    params: &HiNetParams,
    subject_dir: &Path,
    sources: [Modality; 2],
    target: Modality,
    plan: &SamplePlan,
    out_dir: &Path,
) -> Result<PathBuf> {
    let root = subject_dir.parent().unwrap_or(Path::new("."));
    let layout = DatasetLayout::new(root);
    let id = subject_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let scanned = layout.scan()?;
    let entry = scanned
        .subjects
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| HinetError::MissingModality {
            subject: id.clone(),
            modality: sources[0].to_string(),
        })?;
    let format = VolumeFormat::from_path(Path::new(
        entry.modalities.get(&sources[0]).map(String::as_str).unwrap_or(""),
    ));
    let raw1 = layout.load(&entry, sources[0])?;
    let raw2 = layout.load(&entry, sources[1])?;
    let (x1, x2) = (normalize_intensity(&raw1)?, normalize_intensity(&raw2)?);
    let slices = synthesize_subject(params, &x1, &x2, plan)?;
    let vol = assemble_volume(&id, slices, x1.num_slices())?;
    let lo = raw1.intensity_range.0.min(raw2.intensity_range.0);
    let hi = raw1.intensity_range.1.max(raw2.intensity_range.1);
    let data = vol
        .data()
        .iter()
        .map(|&v| crate::data::denormalize(v, (lo, hi)))
        .collect();
    let out = Volume::new(&id, target, vol.shape(), data)?;
    let path = out_dir.join(format!("{}.{}", target.as_str(), format.extension()));
    save_volume(&path, &out, format)?;
    Ok(path)
}

/// Writes the loss curves, the metric table and (when the run's data and
/// final model are available) a source/target/synthesized image grid.
pub fn emit_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let log_path = run_dir.join(LOSS_LOG);
    if !log_path.exists() {
        return Err(HinetError::Data(format!("no loss log at {}", log_path.display())));
    }
    let mut written = Vec::new();
    let rows = read_loss_log(&log_path)?;
    let curves = run_dir.join("loss_curves.png");
    plot::loss_curves(&rows, &curves)?;
    written.push(curves);

    let metrics = run_dir.join(SLICE_METRICS);
    if metrics.exists() {
        let slices = read_slice_metrics(&metrics)?;
        let task = RunManifest::read(run_dir).map(|m| m.config.task.label()).unwrap_or_default();
        let report = AggregateReport::from_slices(&task, &slices, Vec::new());
        let table = run_dir.join(METRICS_TABLE);
        fs::write(&table, report.table()).map_err(|e| HinetError::io(&table, e))?;
        written.push(table);
    }

    let model = run_dir.join(FINAL_MODEL);
    if let (Ok(manifest), true) = (RunManifest::read(run_dir), model.exists()) {
        let params = HiNetParams::load(&model)?;
        let data = load_data(&manifest.config)?;
        let grid = run_dir.join("image_grid.png");
        plot::image_grid(&params, &data.test, &manifest.config.plan, 4, &grid)?;
        written.push(grid);
    }
    Ok(written)
}
