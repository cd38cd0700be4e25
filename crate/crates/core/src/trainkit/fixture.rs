//! Small end-to-end fixture for checking gradients of the full objective.

use super::config::{Backbone, DataSource, TrainConfig};
use super::model::Objective;
use super::train::{initialise, prepare_cohort};
use crate::data::SyntheticSpec;
use crate::diffcore::{finite_difference_check, GradCheckReport};
use crate::error::Result;

/// Tiny config: `n` patients, two classes, narrow layers, `k = 2`.
pub fn gradcheck_config(backbone: Backbone, n: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        data: DataSource::Synthetic(SyntheticSpec {
            n,
            num_classes: 2,
            image_dim: 4,
            clinical_dim: 4,
            separation: 2.0,
            seed,
            ..SyntheticSpec::default()
        }),
        train_fraction: 0.75,
        k_image: Some(2),
        k_clinical: Some(2),
        d_image: 3,
        d_h: 3,
        d_c: 3,
        backbone_image: backbone,
        backbone_clinical: backbone,
        seed,
        ..TrainConfig::default()
    }
}

/// Checks every parameter entry of the model built by `config` against
/// central differences of the total loss.
pub fn check_config(config: &TrainConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let cohort = prepare_cohort(config, config.seed)?;
    let mut trained = initialise(&cohort, config)?;
    let objective = Objective::from(config);
    let model = trained.model.clone();
    let ctx = trained.context.clone();
    finite_difference_check(&mut trained.store, h, tol, |tape, store| {
        Ok(model.forward(tape, store, &ctx, objective)?.loss)
    })
}

pub fn gradcheck(backbone: Backbone, n: usize, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    check_config(&gradcheck_config(backbone, n, seed), h, tol)
}
