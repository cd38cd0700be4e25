use log::{debug, info};

use super::config::{DataSource, OptimizerKind, TrainConfig};
use super::metrics::MetricsReport;
use super::model::{CgmclModel, ForwardPass, GraphContext, Objective};
use crate::data::{self, Cohort};
use crate::diffcore::{Adam, AdamHyper, Optimizer, ParamStore, Sgd, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fusion::kl_alignment;
use crate::losses::LossReport;

/// Loads or generates the configured cohort, splits it with `seed` and
/// standardises it on the training rows.
pub fn prepare_cohort(config: &TrainConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let raw = match &config.data {
        DataSource::Synthetic(spec) => data::generate_synthetic(spec)?,
        DataSource::Files(files) => data::load_cohort(
            &files.image,
            &files.clinical,
            &files.labels,
            config.label_column.as_deref(),
        )?,
    };
    let mut cohort = data::split_cohort(&raw, config.train_fraction, seed)?;
    if config.standardize {
        data::standardize(&mut cohort)?;
    }
    Ok(cohort)
}

/// Loss terms and alignment of one epoch, measured before its update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub report: LossReport,
    pub kl_alignment: f64,
}

/// Trained parameters together with the fixed graph context.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: CgmclModel,
    pub store: ParamStore,
    pub context: GraphContext,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn kl_log(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.kl_alignment).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.report.l_total)
    }
}

/// Freshly initialised model and its graph context, before any update.
pub fn initialise(cohort: &Cohort, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let model = CgmclModel::new(
        config,
        cohort.image_features.cols(),
        cohort.clinical_features.cols(),
        cohort.num_classes(),
        &mut store,
        config.seed,
    )?;
    let context = GraphContext::build(cohort, config, &model, &store)?;
    Ok(TrainedModel {
        model,
        store,
        context,
        config: config.clone(),
    })
}

fn check_report(epoch: usize, report: &LossReport, kl: f64) -> Result<()> {
    for (term, value) in report.terms().into_iter().chain([("kl_alignment", kl)]) {
        if !value.is_finite() {
            return Err(Error::Numerical {
                epoch,
                term: term.to_string(),
                value,
            });
        }
    }
    Ok(())
}

/// Full-batch transductive training. Graphs are built once, before the
/// first epoch. With `lr = 0` the parameters are never updated.
pub fn train(cohort: &Cohort, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trained = initialise(cohort, config)?;
    let objective = Objective::from(config);
    let mut optimizer: Option<Box<dyn Optimizer>> = if config.lr == 0.0 {
        None
    } else {
        Some(match config.optimizer {
            OptimizerKind::Adam => Box::new(Adam::new(config.lr, AdamHyper::default())?),
            OptimizerKind::Sgd => Box::new(Sgd::new(config.lr)?),
        })
    };

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut tape = Tape::new();
        let pass = trained
            .model
            .forward(&mut tape, &trained.store, &trained.context, objective)
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Numerical {
                    epoch,
                    term: format!("forward ({op})"),
                    value: f64::NAN,
                },
                other => other,
            })?;
        let kl = kl_alignment(&pass.bundle.z_image, &pass.bundle.z_clinical)?;
        check_report(epoch, &pass.report, kl)?;
        history.push(EpochRecord {
            epoch,
            report: pass.report,
            kl_alignment: kl,
        });
        if epoch == 1 || epoch % 50 == 0 {
            debug!("epoch {epoch}: l_total = {:.6}, kl = {kl:.6}", pass.report.l_total);
        }
        if let Some(opt) = optimizer.as_mut() {
            tape.backward(pass.loss, &mut trained.store)?;
            opt.step(&mut trained.store)?;
        }
    }
    info!(
        "trained {} epochs, final l_total = {:.6}",
        config.epochs,
        history.last().map_or(f64::NAN, |r| r.report.l_total)
    );
    Ok(TrainOutcome { trained, history })
}

impl TrainedModel {
    /// Forward pass at the current parameters, outside any training tape.
    pub fn inspect(&self) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        self.model
            .forward(&mut tape, &self.store, &self.context, Objective::from(&self.config))
    }
}

/// Fused and per-head test metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub fused: MetricsReport,
    pub image: MetricsReport,
    pub clinical: MetricsReport,
    /// Fused class probabilities for every patient.
    pub fused_probs: Tensor,
}

/// Mean of the two heads' softmax outputs.
pub fn fuse_probabilities(image: &Tensor, clinical: &Tensor) -> Result<Tensor> {
    image.zip_map(clinical, |a, b| (a + b) / 2.0)
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let data = rows.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::matrix(rows.len(), t.cols(), data)
}

/// Scores the test split. Prediction is the argmax of the averaged head
/// probabilities; AUC uses the same averaged probabilities.
pub fn evaluate(trained: &TrainedModel, cohort: &Cohort) -> Result<Evaluation> {
    let test = cohort.test_indices();
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let pass = trained.inspect()?;
    let fused_probs = fuse_probabilities(&pass.probs_image, &pass.probs_clinical)?;
    let truth: Vec<usize> = test.iter().map(|&i| cohort.labels[i]).collect();
    let report = |p: &Tensor| MetricsReport::from_probs(&select_rows(p, &test)?, &truth);
    Ok(Evaluation {
        fused: report(&fused_probs)?,
        image: report(&pass.probs_image)?,
        clinical: report(&pass.probs_clinical)?,
        fused_probs,
    })
}

/// Per-patient, per-clinical-feature contribution scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    pub feature_names: Vec<String>,
    pub scores: Tensor,
}

/// Maps a `[n, d_h]` gate to `[n, F]` clinical columns.
///
/// When `map` is `None` the gate already has one column per feature.
/// Otherwise column `f` is the average of the gate weighted by the
/// non-negative row `map[f, ·]`.
pub fn project_gate(gate: &Tensor, map: Option<&Tensor>) -> Result<Tensor> {
    let Some(map) = map else {
        return Ok(gate.clone());
    };
    let (n, dh) = gate.expect_matrix("project_gate")?;
    let (features, mdh) = map.expect_matrix("project_gate")?;
    if dh != mdh {
        return Err(Error::dim("project_gate", format!("gate width {dh} vs map width {mdh}")));
    }
    let mut out = Tensor::zeros(vec![n, features]);
    for f in 0..features {
        let w = map.row(f);
        let total: f64 = w.iter().sum();
        for i in 0..n {
            let v = if total > 0.0 {
                gate.row(i).iter().zip(w).map(|(g, m)| g * m).sum::<f64>() / total
            } else {
                0.0
            };
            out.set(i, f, v);
        }
    }
    Ok(out)
}

/// `X^C ⊙ gate`, with the gate projected to clinical columns when its
/// width differs from the feature count.
pub fn importance_scores(trained: &TrainedModel, cohort: &Cohort) -> Result<ImportanceScores> {
    if trained.model.zeta_clinical.is_none() {
        return Err(Error::Contract(
            "importance scores need the gating module (no_imfes is set)".into(),
        ));
    }
    let pass = trained.inspect()?;
    let gate = pass
        .gate_clinical
        .ok_or_else(|| Error::Contract("clinical gate missing from forward pass".into()))?;
    let x = &trained.context.clinical_raw;
    let features = x.cols();
    let projected = if gate.cols() == features && trained.model.clinical_encoder.is_none() {
        project_gate(&gate, None)?
    } else {
        let map = trained.model.clinical_feature_map(&trained.store)?;
        project_gate(&gate, Some(&map))?
    };
    Ok(ImportanceScores {
        feature_names: cohort.clinical_names.clone(),
        scores: x.zip_map(&projected, |a, b| a * b)?,
    })
}
