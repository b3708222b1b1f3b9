//! Pipeline orchestration behind the command-line binary.
//!
//! Commands are plain functions over a validated [`PipelineConfig`] so the
//! binary stays a thin argument-parsing shell and the behavior is testable
//! in-process. Every command is deterministic given (inputs, config, seed).

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    load_model, predict, save_model, synthesize_training_set, train, Hyperparams, MlpModel,
    SynthesisConfig, TrainingReport,
};
use crate::features::{
    build_feature_vector, export_candidates_csv, screen_candidates, FeatureConfig, FeatureVariant,
    ScreenConfig,
};
use crate::interpolate::{apply_corrections, merge_decision, CorrectionDecision, Verdict};
use crate::metrics::{review_report_csv, stack_metrics, StackMetrics};
use crate::ot::GeoWassersteinConfig;
use crate::tilted::{evaluate_tilted_pair, TiltedConfig, TiltedDecision, TiltedError};
use crate::volume::{build_adjacency, build_cell_index, load_volume, write_volume, FormatHint};

/// Exit code classification: validation errors exit 2, runtime errors 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// On-disk config file; every field optional so flags can fill the rest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub inputs: Option<Vec<PathBuf>>,
    pub gt: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub max_gap: Option<usize>,
    pub projections: Option<usize>,
    pub threshold: Option<f64>,
    pub tilted: Option<bool>,
    pub min_contact: Option<usize>,
    pub dry_run: Option<bool>,
    pub true_cases_per_volume: Option<usize>,
    pub exact_cap: Option<usize>,
}

/// Flag values from the command line; they override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub inputs: Vec<PathBuf>,
    pub gt: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub max_gap: Option<usize>,
    pub projections: Option<usize>,
    pub threshold: Option<f64>,
    pub tilted: bool,
    pub dry_run: bool,
}

/// Fully resolved, validated configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub inputs: Vec<PathBuf>,
    pub gt: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub variant: FeatureVariant,
    pub max_gap: usize,
    pub projections: usize,
    pub threshold: f64,
    pub tilted: bool,
    pub min_contact: usize,
    pub dry_run: bool,
    pub true_cases_per_volume: usize,
    pub exact_cap: usize,
}

impl PipelineConfig {
    /// Merge config file and flags (flags win) and validate.
    pub fn resolve(config_path: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let file: ConfigFile = match config_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("bad config file: {e}")))?
            }
            None => ConfigFile::default(),
        };
        let inputs = if flags.inputs.is_empty() {
            file.inputs.unwrap_or_default()
        } else {
            flags.inputs.clone()
        };
        let seed = flags
            .seed
            .or(file.seed)
            .ok_or_else(|| CliError::Validation("seed is required (flag --seed or config)".into()))?;
        let variant_name = flags
            .variant
            .clone()
            .or(file.variant)
            .unwrap_or_else(|| "default".into());
        let variant = FeatureVariant::parse(&variant_name)
            .ok_or_else(|| CliError::Validation(format!("unknown variant '{variant_name}'")))?;
        let threshold = flags.threshold.or(file.threshold).unwrap_or(0.5);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(CliError::Validation(format!(
                "threshold {threshold} outside [0, 1]"
            )));
        }
        let cfg = Self {
            inputs,
            gt: flags.gt.clone().or(file.gt),
            model: flags.model.clone().or(file.model),
            out: flags
                .out
                .clone()
                .or(file.out)
                .ok_or_else(|| CliError::Validation("output directory is required".into()))?,
            seed,
            variant,
            max_gap: flags.max_gap.or(file.max_gap).unwrap_or(1),
            projections: flags.projections.or(file.projections).unwrap_or(50),
            threshold,
            tilted: flags.tilted || file.tilted.unwrap_or(false),
            min_contact: file.min_contact.unwrap_or(10),
            dry_run: flags.dry_run || file.dry_run.unwrap_or(false),
            true_cases_per_volume: file.true_cases_per_volume.unwrap_or(20),
            exact_cap: file.exact_cap.unwrap_or(GeoWassersteinConfig::default().exact_cap),
        };
        for p in &cfg.inputs {
            if !p.exists() {
                return Err(CliError::Validation(format!(
                    "input not found: {}",
                    p.display()
                )));
            }
        }
        for p in [&cfg.gt, &cfg.model] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Validation(format!(
                        "path not found: {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(cfg)
    }

    pub fn ot(&self) -> GeoWassersteinConfig {
        GeoWassersteinConfig {
            exact_cap: self.exact_cap,
            n_projections: self.projections,
            seed: self.seed,
        }
    }

    fn single_input(&self) -> Result<&Path, CliError> {
        match self.inputs.as_slice() {
            [one] => Ok(one),
            [] => Err(CliError::Validation("an input volume is required".into())),
            many => Err(CliError::Validation(format!(
                "exactly one input volume expected, got {}",
                many.len()
            ))),
        }
    }

    fn ensure_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Runtime(format!("cannot create output dir: {e}")))
    }
}

fn log_stage(name: &str, start: Instant) {
    eprintln!("[{name}] {:.3}s", start.elapsed().as_secs_f64());
}

/// Screen one volume and write the candidate feature CSV.
pub fn cmd_screen(cfg: &PipelineConfig) -> Result<usize, CliError> {
    cfg.ensure_out()?;
    let t = Instant::now();
    let volume = load_volume(cfg.single_input()?, FormatHint::Auto).map_err(runtime)?;
    log_stage("load", t);

    let t = Instant::now();
    let index = build_cell_index(&volume);
    let pairs = screen_candidates(&index, &ScreenConfig { max_gap: cfg.max_gap });
    log_stage("screen", t);

    let t = Instant::now();
    let fcfg = FeatureConfig {
        variant: cfg.variant,
        ot: cfg.ot(),
        normalizers: Default::default(),
    };
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let features = build_feature_vector(&pair, &index, &fcfg).map_err(runtime)?;
        rows.push((pair, features));
    }
    log_stage("featurize", t);

    let path = cfg.out.join("candidates.csv");
    let file = std::fs::File::create(&path).map_err(runtime)?;
    export_candidates_csv(&rows, file).map_err(runtime)?;
    eprintln!("wrote {} ({} candidates)", path.display(), rows.len());
    Ok(rows.len())
}

/// Synthesize a training set from ground-truth volumes and train a model.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainingReport, CliError> {
    cfg.ensure_out()?;
    if cfg.inputs.is_empty() {
        return Err(CliError::Validation(
            "at least one ground-truth input volume is required".into(),
        ));
    }
    let t = Instant::now();
    let mut volumes = Vec::new();
    for p in &cfg.inputs {
        volumes.push((
            p.display().to_string(),
            load_volume(p, FormatHint::Auto).map_err(runtime)?,
        ));
    }
    log_stage("load", t);

    let t = Instant::now();
    let refs: Vec<(String, &crate::volume::LabelVolume)> =
        volumes.iter().map(|(n, v)| (n.clone(), v)).collect();
    let scfg = SynthesisConfig {
        true_cases_per_volume: cfg.true_cases_per_volume,
        feature: FeatureConfig {
            variant: cfg.variant,
            ot: cfg.ot(),
            normalizers: Default::default(),
        },
        screen: ScreenConfig { max_gap: cfg.max_gap },
        ..Default::default()
    };
    let examples = synthesize_training_set(&refs, &scfg, cfg.seed).map_err(runtime)?;
    log_stage("synthesize", t);

    let t = Instant::now();
    let (mut model, report) = train(&examples, &Hyperparams::default(), cfg.seed)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    model.threshold = cfg.threshold;
    log_stage("train", t);

    let model_path = cfg.out.join("model.json");
    save_model(&model, &model_path).map_err(runtime)?;
    std::fs::write(
        cfg.out.join("training_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(runtime)?;
    eprintln!(
        "wrote {} (val accuracy {:.3}, {} pos / {} neg)",
        model_path.display(),
        report.val_accuracy,
        report.n_positive,
        report.n_negative
    );
    Ok(report)
}

#[derive(Debug, Serialize)]
struct DecisionSummary {
    label_a: u32,
    label_b: u32,
    verdict: Verdict,
    probability: f64,
    gap_layers: Vec<usize>,
}

/// Screen, classify, and repair one volume. Returns the change-log path.
pub fn cmd_correct(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    cfg.ensure_out()?;
    let model_path = cfg
        .model
        .as_deref()
        .ok_or_else(|| CliError::Validation("a trained model is required (--model)".into()))?;
    let model = load_model(model_path).map_err(|e| CliError::Validation(e.to_string()))?;
    let input = cfg.single_input()?.to_path_buf();
    let t = Instant::now();
    let mut volume = load_volume(&input, FormatHint::Auto).map_err(runtime)?;
    log_stage("load", t);

    if cfg.tilted {
        return correct_tilted(cfg, &mut volume, &model, &input);
    }

    let t = Instant::now();
    let index = build_cell_index(&volume);
    let pairs = screen_candidates(&index, &ScreenConfig { max_gap: cfg.max_gap });
    log_stage("screen", t);

    let t = Instant::now();
    let fcfg = FeatureConfig {
        variant: model.variant,
        ot: cfg.ot(),
        normalizers: model.normalizers,
    };
    let mut decisions: Vec<CorrectionDecision> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let features = build_feature_vector(&pair, &index, &fcfg).map_err(runtime)?;
        let (probability, merge) = predict(&model, &features.values).map_err(runtime)?;
        if merge && probability >= cfg.threshold.min(model.threshold) {
            let src = index.get(pair.label_a).unwrap().bottom_mask();
            let dst = index.get(pair.label_b).unwrap().top_mask();
            decisions.push(merge_decision(pair, probability, src, dst).map_err(runtime)?);
        } else {
            decisions.push(CorrectionDecision::keep(pair, probability));
        }
    }
    log_stage("classify", t);

    let changes_path = cfg.out.join("changes.json");
    if cfg.dry_run {
        let summaries: Vec<DecisionSummary> = decisions
            .iter()
            .map(|d| DecisionSummary {
                label_a: d.pair.label_a,
                label_b: d.pair.label_b,
                verdict: d.verdict,
                probability: d.probability,
                gap_layers: d.pair.gap_layers.clone(),
            })
            .collect();
        std::fs::write(
            &changes_path,
            serde_json::to_string_pretty(&summaries).expect("summaries serialize"),
        )
        .map_err(runtime)?;
        eprintln!("dry run: {} decisions, no volume written", summaries.len());
        return Ok(changes_path);
    }

    let t = Instant::now();
    let log = apply_corrections(&mut volume, &decisions).map_err(runtime)?;
    log_stage("apply", t);

    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("lbl");
    let out_volume = cfg.out.join(format!("corrected.{ext}"));
    write_volume(&volume, &out_volume, FormatHint::Auto).map_err(runtime)?;
    std::fs::write(
        &changes_path,
        serde_json::to_string_pretty(&log).expect("log serializes"),
    )
    .map_err(runtime)?;
    std::fs::write(
        cfg.out.join("review.csv"),
        review_report_csv(&volume, &log).map_err(runtime)?,
    )
    .map_err(runtime)?;
    eprintln!(
        "wrote {} ({} merges)",
        out_volume.display(),
        log.iter().filter(|r| r.verdict == Verdict::Merge).count()
    );
    Ok(changes_path)
}

fn correct_tilted(
    cfg: &PipelineConfig,
    volume: &mut crate::volume::LabelVolume,
    model: &MlpModel,
    input: &Path,
) -> Result<PathBuf, CliError> {
    let t = Instant::now();
    let graph = build_adjacency(volume);
    let tcfg = TiltedConfig {
        min_contact: cfg.min_contact,
        ot: cfg.ot(),
        ..Default::default()
    };
    let edges: Vec<(u32, u32)> = graph
        .edges
        .iter()
        .filter(|&(_, &c)| c >= cfg.min_contact)
        .map(|(&e, _)| e)
        .collect();
    log_stage("adjacency", t);

    let t = Instant::now();
    let mut decisions: Vec<TiltedDecision> = Vec::new();
    let mut scratch = if cfg.dry_run { Some(volume.clone()) } else { None };
    for (a, b) in edges {
        let target: &mut crate::volume::LabelVolume = match scratch.as_mut() {
            Some(s) => s,
            None => &mut *volume,
        };
        // labels may already have merged into an earlier partner
        if !target.data.contains(&a) || !target.data.contains(&b) {
            continue;
        }
        match evaluate_tilted_pair(target, a, b, model, &tcfg) {
            Ok(d) => decisions.push(d),
            Err(
                TiltedError::ContactTooSmall { .. }
                | TiltedError::DegenerateCloud
                | TiltedError::ResliceEmpty(_)
                | TiltedError::NotAdjacent(_, _),
            ) => continue,
            Err(e) => return Err(runtime(e)),
        }
    }
    log_stage("tilted", t);

    let changes_path = cfg.out.join("changes.json");
    std::fs::write(
        &changes_path,
        serde_json::to_string_pretty(&decisions).expect("decisions serialize"),
    )
    .map_err(runtime)?;
    if cfg.dry_run {
        eprintln!("dry run: {} tilted decisions, no volume written", decisions.len());
        return Ok(changes_path);
    }
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("lbl");
    let out_volume = cfg.out.join(format!("corrected.{ext}"));
    write_volume(volume, &out_volume, FormatHint::Auto).map_err(runtime)?;
    eprintln!(
        "wrote {} ({} merges)",
        out_volume.display(),
        decisions
            .iter()
            .filter(|d| d.verdict == Verdict::Merge)
            .count()
    );
    Ok(changes_path)
}

/// Compare a predicted volume against ground truth and write metrics JSON.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<StackMetrics, CliError> {
    cfg.ensure_out()?;
    let gt_path = cfg
        .gt
        .as_deref()
        .ok_or_else(|| CliError::Validation("a ground-truth volume is required (--gt)".into()))?;
    let pred = load_volume(cfg.single_input()?, FormatHint::Auto).map_err(runtime)?;
    let gt = load_volume(gt_path, FormatHint::Auto).map_err(runtime)?;
    if pred.dims != gt.dims {
        return Err(CliError::Validation(format!(
            "dimension mismatch: {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let t = Instant::now();
    let metrics = stack_metrics(&pred, &gt).map_err(runtime)?;
    log_stage("evaluate", t);
    std::fs::write(
        cfg.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("metrics serialize"),
    )
    .map_err(runtime)?;
    eprintln!(
        "mAP {:.4}, Jaccard (matched) {:.4}",
        metrics.mean_ap, metrics.jaccard.jaccard_matched
    );
    Ok(metrics)
}
