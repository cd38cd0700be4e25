//! The two-branch cross-graph model and its precomputed graph context.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Backbone, TrainConfig};
use crate::data::Cohort;
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::encoders::{Affine, FeatureEncoder, GatLayer, GcnLayer, GraphLayer, ZetaMlp};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionBundle};
use crate::graphs::{self, ModalGraph, SelfLoopGraph};
use crate::losses::{self, ContrastiveMasks, LossParts, LossReport};

/// Layer layout of the model. Parameter values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct CgmclModel {
    pub image_encoder: FeatureEncoder,
    pub clinical_encoder: Option<FeatureEncoder>,
    pub image_layers: Vec<GraphLayer>,
    pub clinical_layers: Vec<GraphLayer>,
    pub zeta_image: Option<ZetaMlp>,
    pub zeta_clinical: Option<ZetaMlp>,
    pub proj_image: Affine,
    pub proj_clinical: Affine,
    pub head_image: Affine,
    pub head_clinical: Affine,
    pub no_concat: bool,
}

fn graph_stack(
    prefix: &str,
    backbone: Backbone,
    in_dim: usize,
    config: &TrainConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GraphLayer>> {
    let mut layers = Vec::with_capacity(config.graph_layers);
    let mut width = in_dim;
    for l in 0..config.graph_layers {
        let name = format!("{prefix}.{l}");
        let layer = match backbone {
            Backbone::Gat => GraphLayer::Gat(GatLayer::new(&name, width, config.d_h, store, rng)?),
            Backbone::Gcn => GraphLayer::Gcn(GcnLayer::new(&name, width, config.d_h, store, rng)?),
        };
        layers.push(layer);
        width = config.d_h;
    }
    Ok(layers)
}

impl CgmclModel {
    /// Registers freshly initialised parameters for the given raw widths.
    pub fn new(
        config: &TrainConfig,
        image_dim: usize,
        clinical_dim: usize,
        num_classes: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let image_encoder = FeatureEncoder::new("image.encoder", image_dim, config.d_image, store, rng)?;
        let clinical_encoder = config
            .d_clinical
            .map(|d| FeatureEncoder::new("clinical.encoder", clinical_dim, d, store, rng))
            .transpose()?;
        let d_img = config.d_image;
        let d_cli = config.d_clinical.unwrap_or(clinical_dim);

        let image_layers = graph_stack("image.graph", config.backbone_image, d_img, config, store, rng)?;
        let clinical_layers = graph_stack("clinical.graph", config.backbone_clinical, d_cli, config, store, rng)?;

        let cat_w = |raw: usize| if config.no_concat { config.d_h } else { config.d_h + raw };
        let (cat_i, cat_c) = (cat_w(d_img), cat_w(d_cli));
        let (zeta_image, zeta_clinical) = if config.no_imfes {
            (None, None)
        } else {
            (
                Some(ZetaMlp::new("image.zeta", cat_i, config.d_h, config.d_h, store, rng)?),
                Some(ZetaMlp::new("clinical.zeta", cat_c, config.d_h, config.d_h, store, rng)?),
            )
        };
        let proj_image = Affine::new("image.proj", cat_i + config.d_h, config.d_c, store, rng)?;
        let proj_clinical = Affine::new("clinical.proj", cat_c + config.d_h, config.d_c, store, rng)?;
        let head_image = Affine::new("image.head", config.d_c, num_classes, store, rng)?;
        let head_clinical = Affine::new("clinical.head", config.d_c, num_classes, store, rng)?;
        Ok(Self {
            image_encoder,
            clinical_encoder,
            image_layers,
            clinical_layers,
            zeta_image,
            zeta_clinical,
            proj_image,
            proj_clinical,
            head_image,
            head_clinical,
            no_concat: config.no_concat,
        })
    }

    /// Encoded image features `I'` at the current parameters.
    pub fn encode_image(&self, store: &ParamStore, raw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(raw.clone())?;
        let out = self.image_encoder.forward(&mut tape, store, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode_clinical(&self, store: &ParamStore, raw: &Tensor) -> Result<Tensor> {
        match &self.clinical_encoder {
            None => Ok(raw.clone()),
            Some(enc) => {
                let mut tape = Tape::new();
                let x = tape.constant(raw.clone())?;
                let out = enc.forward(&mut tape, store, x)?;
                Ok(tape.value(out).clone())
            }
        }
    }

    /// `[clinical_dim, d_h]` non-negative map from raw clinical columns to
    /// gate columns: the product of absolute first-stage weights.
    pub fn clinical_feature_map(&self, store: &ParamStore) -> Result<Tensor> {
        let abs = |name: &str| -> Result<Tensor> { Ok(store.value(name)?.map(f64::abs)) };
        let graph_w = abs(self.clinical_layers[0].weight())?;
        match &self.clinical_encoder {
            None => Ok(graph_w),
            Some(enc) => abs(&enc.affine.weight)?.matmul(&graph_w),
        }
    }
}

/// Everything fixed before the first epoch: inputs, graphs, masks, labels.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub image_raw: Tensor,
    pub clinical_raw: Tensor,
    pub graph_image: ModalGraph,
    pub graph_clinical: ModalGraph,
    pub loops_image: SelfLoopGraph,
    pub loops_clinical: SelfLoopGraph,
    pub a_hat_image: Tensor,
    pub a_hat_clinical: Tensor,
    pub norm_image: Tensor,
    pub norm_clinical: Tensor,
    pub masks: ContrastiveMasks,
    pub degrees: Vec<f64>,
    pub labels: Vec<usize>,
    pub labels_one_hot: Tensor,
    pub train: Vec<bool>,
}

impl GraphContext {
    /// Builds both KNN graphs once: the image graph on encoder outputs at
    /// the current (initial) parameters, the clinical graph on the clinical
    /// features the graph layer consumes.
    pub fn build(cohort: &Cohort, config: &TrainConfig, model: &CgmclModel, store: &ParamStore) -> Result<Self> {
        cohort.validate()?;
        let n = cohort.n();
        let encoded_image = model.encode_image(store, &cohort.image_features)?;
        let encoded_clinical = model.encode_clinical(store, &cohort.clinical_features)?;
        let k_image = config.k_image.unwrap_or_else(|| graphs::default_k(n));
        let k_clinical = config.k_clinical.unwrap_or_else(|| graphs::default_k(n));
        let graph_image = graphs::knn_build(&encoded_image, k_image)?;
        let graph_clinical = graphs::knn_build(&encoded_clinical, k_clinical)?;
        Self::from_graphs(cohort, config, graph_image, graph_clinical)
    }

    pub fn from_graphs(
        cohort: &Cohort,
        config: &TrainConfig,
        graph_image: ModalGraph,
        graph_clinical: ModalGraph,
    ) -> Result<Self> {
        let loops_image = graphs::with_self_loops(&graph_image);
        let loops_clinical = graphs::with_self_loops(&graph_clinical);
        let masks = losses::build_masks(&loops_image, &loops_clinical)?;
        let degrees = losses::reference_degrees(config.diag_reference, &loops_image, &loops_clinical, &masks);
        Ok(Self {
            image_raw: cohort.image_features.clone(),
            clinical_raw: cohort.clinical_features.clone(),
            a_hat_image: loops_image.to_tensor(),
            a_hat_clinical: loops_clinical.to_tensor(),
            norm_image: graphs::gcn_normalize(&loops_image),
            norm_clinical: graphs::gcn_normalize(&loops_clinical),
            graph_image,
            graph_clinical,
            loops_image,
            loops_clinical,
            masks,
            degrees,
            labels: cohort.labels.clone(),
            labels_one_hot: losses::one_hot(&cohort.labels, cohort.num_classes())?,
            train: cohort.split.clone(),
        })
    }
}

/// Result of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub loss: Var,
    pub report: LossReport,
    pub bundle: FusionBundle,
    pub probs_image: Tensor,
    pub probs_clinical: Tensor,
    /// Clinical gate `ζ(𝓗^C)`; absent when gating is disabled.
    pub gate_clinical: Option<Tensor>,
}

struct Branch {
    h: Var,
    cat: Var,
    e: Var,
    z: Var,
    gate: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn run_branch(
    tape: &mut Tape,
    store: &ParamStore,
    encoded: Var,
    layers: &[GraphLayer],
    a_hat: &Tensor,
    norm: &Tensor,
    zeta: Option<&ZetaMlp>,
    proj: &Affine,
    no_concat: bool,
) -> Result<Branch> {
    let norm = tape.constant(norm.clone())?;
    let mut h = encoded;
    for layer in layers {
        h = layer.forward(tape, store, h, a_hat, norm)?;
    }
    let cat = if no_concat {
        h
    } else {
        fusion::concat_with_raw(tape, h, encoded)?
    };
    let (e, gate) = match zeta {
        Some(mlp) => {
            let gate = mlp.forward(tape, store, cat)?;
            if tape.value(gate).shape() != tape.value(h).shape() {
                return Err(Error::Config("gate width differs from encoder width".into()));
            }
            (tape.mul(h, gate)?, Some(gate))
        }
        None => (h, None),
    };
    let z = fusion::branch_embed(tape, store, cat, e, proj)?;
    Ok(Branch { h, cat, e, z, gate })
}

/// Scalar settings of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub mode: losses::LossMode,
    pub rule: losses::PositiveRule,
}

impl From<&TrainConfig> for Objective {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta: c.beta,
            delta: c.delta,
            epsilon: c.epsilon,
            mode: c.loss_mode,
            rule: c.positive_rule,
        }
    }
}

impl CgmclModel {
    /// Records the full forward pass and objective on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &GraphContext,
        objective: Objective,
    ) -> Result<ForwardPass> {
        let image_raw = tape.constant(ctx.image_raw.clone())?;
        let clinical_raw = tape.constant(ctx.clinical_raw.clone())?;
        let image_enc = self.image_encoder.forward(tape, store, image_raw)?;
        let clinical_enc = match &self.clinical_encoder {
            Some(enc) => enc.forward(tape, store, clinical_raw)?,
            None => clinical_raw,
        };

        let img = run_branch(
            tape,
            store,
            image_enc,
            &self.image_layers,
            &ctx.a_hat_image,
            &ctx.norm_image,
            self.zeta_image.as_ref(),
            &self.proj_image,
            self.no_concat,
        )?;
        let cli = run_branch(
            tape,
            store,
            clinical_enc,
            &self.clinical_layers,
            &ctx.a_hat_clinical,
            &ctx.norm_clinical,
            self.zeta_clinical.as_ref(),
            &self.proj_clinical,
            self.no_concat,
        )?;

        let z_shared = fusion::shared_space(tape, img.z, cli.z)?;
        let s = fusion::similarity_matrix(tape, z_shared)?;

        let heads = losses::ce_heads(
            tape,
            store,
            img.z,
            cli.z,
            (&self.head_image, &self.head_clinical),
            &ctx.labels_one_hot,
            &ctx.train,
        )?;
        let (p, neg) = losses::contrastive_scores(
            tape,
            s,
            &ctx.masks,
            &ctx.labels,
            &ctx.train,
            objective.delta,
            objective.rule,
        )?;
        let contrastive = losses::contrastive_loss(tape, p, neg, &ctx.train, objective.epsilon)?;
        let l_diag = losses::diag_loss(tape, s, &ctx.degrees, &ctx.train)?;
        let parts = LossParts {
            l_image: heads.l_image,
            l_clinical: heads.l_clinical,
            contrastive,
            l_diag,
        };
        let (loss, report) = losses::total_loss(tape, &parts, objective.beta, objective.delta, objective.mode)?;

        let v = |var: Var| tape.value(var).clone();
        let bundle = FusionBundle {
            h_image: v(img.h),
            h_clinical: v(cli.h),
            cat_image: v(img.cat),
            cat_clinical: v(cli.cat),
            e_image: v(img.e),
            e_clinical: v(cli.e),
            z_image: v(img.z),
            z_clinical: v(cli.z),
            z_shared: v(z_shared),
            similarity: v(s),
        };
        Ok(ForwardPass {
            loss,
            report,
            bundle,
            probs_image: heads.probs_image,
            probs_clinical: heads.probs_clinical,
            gate_clinical: cli.gate.map(v),
        })
    }
}
