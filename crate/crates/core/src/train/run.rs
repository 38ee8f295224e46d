use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::Regularization;
use crate::dataio::{load_checkpoint, load_idx, Dataset};
use crate::error::{DonnError, Result};
use crate::field::{forward, predict, DetectorLayout, DonnModel};
use crate::roughness::{overall_roughness, NeighborMode, RoughnessReport};
use crate::slr::{slr_sparsify, InnerSettings, SlrTraceRow};
use crate::smoothing::{smooth_model, GsConfig, LayerSmoothing};
use crate::train::config::{Mode, TrainConfig};
use crate::train::optim::{LossTerms, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Slr,
    Finetune,
    Smooth,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Train => "train",
            Stage::Slr => "slr",
            Stage::Finetune => "finetune",
            Stage::Smooth => "smooth",
        })
    }
}

/// Batch-averaged loss terms of one epoch (or one SLR outer iteration).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub p: f64,
    pub q: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
}

pub const LOSS_CSV_HEADER: &str = "stage,epoch,data,roughness,intra_block,objective";

pub fn loss_curve_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.stage, r.epoch, r.terms.data, r.terms.roughness, r.terms.intra_block, r.terms.objective
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    /// Test accuracy of the trained (unsmoothed) model.
    pub accuracy: f64,
    pub roughness_before: RoughnessReport,
    /// Present when the mode runs 2π smoothing.
    pub roughness_after: Option<RoughnessReport>,
    pub accuracy_after: Option<f64>,
    pub loss_curve: Vec<EpochRecord>,
    /// Every stage that ran, in order.
    pub stages: Vec<Stage>,
    pub slr_trace: Vec<SlrTraceRow>,
    pub smoothing: Vec<LayerSmoothing>,
    pub config: TrainConfig,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DonnError::InvalidArgument(e.to_string()))
    }
}

/// Trained model, its smoothed twin (when smoothing ran) and the report.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: DonnModel,
    pub smoothed: Option<DonnModel>,
    pub report: RunReport,
}

/// Training and test sets named by the config, truncated to the configured sizes.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let mut train = load_idx(&d.train_images, &d.train_labels)?;
    let mut test = load_idx(&d.test_images, &d.test_labels)?;
    if d.train_samples > 0 {
        train = train.truncated(d.train_samples);
    }
    if d.test_samples > 0 {
        test = test.truncated(d.test_samples);
    }
    if train.is_empty() || test.is_empty() {
        return Err(DonnError::InvalidArgument("empty training or test set".into()));
    }
    Ok((
        Dataset::new(train, cfg.geometry).with_input_power(cfg.input_power)?,
        Dataset::new(test, cfg.geometry).with_input_power(cfg.input_power)?,
    ))
}

pub fn predictions(model: &DonnModel, data: &Dataset) -> Result<Vec<usize>> {
    if !model.geometry().same_grid(&data.geometry()) {
        return Err(DonnError::Dimension(format!(
            "model grid {} does not match dataset grid {}",
            model.geometry().n,
            data.geometry().n
        )));
    }
    (0..data.len())
        .map(|i| predict(&forward(model, &data.field(i)?)?.sums))
        .collect()
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(model: &DonnModel, data: &Dataset) -> Result<f64> {
    let preds = predictions(model, data)?;
    let hits = preds.iter().enumerate().filter(|&(i, &p)| p == data.label(i)).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Outcome of [`smooth2pi`].
#[derive(Clone, Debug)]
pub struct SmoothOutcome {
    pub model: DonnModel,
    pub layers: Vec<LayerSmoothing>,
    pub before: RoughnessReport,
    pub after: RoughnessReport,
    pub accuracy: f64,
}

/// 2π smoothing of every layer. Fails if any prediction on `holdout` changes.
pub fn smooth2pi(model: &DonnModel, mode: NeighborMode, gs: &GsConfig, seed: u64, holdout: &Dataset) -> Result<SmoothOutcome> {
    let (smoothed, layers) = smooth_model(model, mode, gs, seed)?;
    let before_preds = predictions(model, holdout)?;
    let after_preds = predictions(&smoothed, holdout)?;
    if let Some(i) = (0..before_preds.len()).find(|&i| before_preds[i] != after_preds[i]) {
        return Err(DonnError::Divergence(format!(
            "2π smoothing changed the prediction of sample {i}: {} -> {}",
            before_preds[i], after_preds[i]
        )));
    }
    let hits = after_preds.iter().enumerate().filter(|&(i, &p)| p == holdout.label(i)).count();
    Ok(SmoothOutcome {
        before: overall_roughness(model, mode),
        after: overall_roughness(&smoothed, mode),
        model: smoothed,
        layers,
        accuracy: hits as f64 / holdout.len() as f64,
    })
}

/// Per-layer and overall roughness under both neighborhoods.
pub fn roughness_report(model: &DonnModel) -> [RoughnessReport; 2] {
    [
        overall_roughness(model, NeighborMode::Four),
        overall_roughness(model, NeighborMode::Eight),
    ]
}

pub fn roughness_csv(model: &DonnModel) -> String {
    let mut out = format!("{}\n", RoughnessReport::CSV_HEADER);
    for r in roughness_report(model) {
        for row in r.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

fn regularization(cfg: &TrainConfig) -> Regularization {
    Regularization {
        p: cfg.effective_p(),
        q: cfg.effective_q(),
        mode: cfg.neighbors,
        block_size: cfg.slr.block_size,
    }
}

fn initial_model(cfg: &TrainConfig) -> Result<DonnModel> {
    match &cfg.init_checkpoint {
        Some(path) => {
            let m = load_checkpoint(path)?;
            if !m.geometry().same_grid(&cfg.geometry) || m.depth() != cfg.depth {
                return Err(DonnError::Config(format!(
                    "init checkpoint {} is {} layers of {}x{}, config wants {} of {}x{}",
                    path.display(),
                    m.depth(),
                    m.geometry().n,
                    m.geometry().n,
                    cfg.depth,
                    cfg.geometry.n,
                    cfg.geometry.n
                )));
            }
            let masks = m.masks().to_vec();
            DonnModel::with_masks(cfg.geometry, masks, m.layout().clone(), cfg.pad_propagation)
        }
        None => {
            let layout = DetectorLayout::even(cfg.geometry.n)?;
            let masks = vec![crate::field::PhaseMask::zeros(cfg.geometry.n); cfg.depth];
            DonnModel::with_masks(cfg.geometry, masks, layout, cfg.pad_propagation)
        }
    }
}

fn train_epochs(
    model: &mut DonnModel,
    data: &Dataset,
    cfg: &TrainConfig,
    reg: Regularization,
    records: &mut Vec<EpochRecord>,
) -> Result<()> {
    let mut trainer = Trainer::new(model, reg, cfg.learning_rate, cfg.batch_size, data.len(), cfg.seed)?;
    for epoch in 0..cfg.epochs {
        let terms = trainer.epoch(model, data, None).map_err(|e| match e {
            DonnError::Divergence(m) => DonnError::Divergence(format!("epoch {epoch}: {m}")),
            other => other,
        })?;
        log::info!(
            "epoch {epoch}: data {:.6} roughness {:.3} objective {:.6}",
            terms.data,
            terms.roughness,
            terms.objective
        );
        records.push(EpochRecord {
            stage: Stage::Train,
            epoch,
            p: reg.p,
            q: reg.q,
            terms,
        });
    }
    Ok(())
}

/// Runs one rung of the ablation ladder.
///
/// Every mode trains under its own regularizer weights. B, C and D then
/// sparsify and get 2π smoothing; given an init checkpoint they skip
/// training and sparsify that model directly.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    let reg = regularization(cfg);
    let mut model = initial_model(cfg)?;
    let mut records = Vec::new();
    let mut stages = Vec::new();

    if !cfg.mode.sparsifies() || cfg.init_checkpoint.is_none() {
        stages.push(Stage::Train);
        train_epochs(&mut model, train_set, cfg, reg, &mut records)?;
    }

    let mut slr_trace = Vec::new();
    if cfg.mode.sparsifies() {
        stages.push(Stage::Slr);
        let inner = InnerSettings {
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            track_accuracy: true,
        };
        let (sparse, outcome) = slr_sparsify(&model, train_set, &cfg.slr, &reg, inner)?;
        model = sparse;
        for row in &outcome.trace {
            records.push(EpochRecord {
                stage: Stage::Slr,
                epoch: row.k,
                p: reg.p,
                q: reg.q,
                terms: LossTerms {
                    data: f64::NAN,
                    roughness: f64::NAN,
                    intra_block: f64::NAN,
                    objective: row.surrogate,
                },
            });
        }
        if !outcome.finetune.is_empty() {
            stages.push(Stage::Finetune);
        }
        for (epoch, terms) in outcome.finetune.into_iter().enumerate() {
            records.push(EpochRecord {
                stage: Stage::Finetune,
                epoch,
                p: reg.p,
                q: reg.q,
                terms,
            });
        }
        slr_trace = outcome.trace;
    }

    // report and smooth the deployable [0, 2π] form of the masks
    for m in model.masks_mut() {
        m.wrap();
    }
    let accuracy = evaluate(&model, test_set)?;
    let roughness_before = overall_roughness(&model, cfg.neighbors);
    let (smoothed, roughness_after, accuracy_after, smoothing) = if cfg.mode.smooths() {
        stages.push(Stage::Smooth);
        let out = smooth2pi(&model, cfg.neighbors, &cfg.gs, cfg.seed, test_set)?;
        (Some(out.model), Some(out.after), Some(out.accuracy), out.layers)
    } else {
        (None, None, None, Vec::new())
    };

    let report = RunReport {
        mode: cfg.mode,
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        accuracy,
        roughness_before,
        roughness_after,
        accuracy_after,
        loss_curve: records,
        stages,
        slr_trace,
        smoothing,
        config: cfg.clone(),
    };
    Ok(TrainOutput { model, smoothed, report })
}

/// Axis of a hyperparameter sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SparsityRatio,
    P,
    Q,
}

impl std::str::FromStr for SweepAxis {
    type Err = DonnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsity_ratio" | "ratio" => Ok(SweepAxis::SparsityRatio),
            "p" => Ok(SweepAxis::P),
            "q" => Ok(SweepAxis::Q),
            other => Err(DonnError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: Option<f64>,
    pub roughness_before: Option<f64>,
    pub roughness_after: Option<f64>,
    pub error: Option<String>,
}

pub const SWEEP_CSV_HEADER: &str = "value,accuracy,R_before,R_after,error";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            opt(r.accuracy),
            opt(r.roughness_before),
            opt(r.roughness_after),
            err
        ));
    }
    out
}

/// Config for one sweep point.
pub fn sweep_config(base: &TrainConfig, axis: SweepAxis, value: f64) -> TrainConfig {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::SparsityRatio => cfg.slr.sparsity_ratio = value,
        SweepAxis::P => cfg.p = value,
        SweepAxis::Q => cfg.q = value,
    }
    cfg
}

/// One full run per value with the shared seed. Failed runs are recorded
/// in their row and the sweep continues.
pub fn sweep(base: &TrainConfig, axis: SweepAxis, values: &[f64], train_set: &Dataset, test_set: &Dataset) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&value| {
            let cfg = sweep_config(base, axis, value);
            match train(&cfg, train_set, test_set) {
                Ok(out) => SweepRow {
                    value,
                    accuracy: Some(out.report.accuracy),
                    roughness_before: Some(out.report.roughness_before.overall),
                    roughness_after: out.report.roughness_after.map(|r| r.overall),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep value {value} failed: {e}");
                    SweepRow {
                        value,
                        accuracy: None,
                        roughness_before: None,
                        roughness_after: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}
