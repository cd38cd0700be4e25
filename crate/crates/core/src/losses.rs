//! The combined training objective: graph-derived contrastive masks,
//! positive/negative similarity scores with a hinge margin, two
//! cross-entropy heads, the diagonal regulariser and their weighting.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::encoders::Affine;
use crate::error::{Error, Result};
use crate::graphs::SelfLoopGraph;

/// Which loss terms enter the optimised total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `l_image + l_clinical`.
    CeOnly,
    /// `l_image + l_clinical + l_contrastive`, unweighted.
    CePlusContrastive,
    /// `(1-β)(l_image + l_clinical) + β·l_contrastive + l_diag`.
    #[default]
    Full,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::CeOnly => "ce_only",
            LossMode::CePlusContrastive => "ce_plus_contrastive",
            LossMode::Full => "full",
        }
    }
}

/// Graph whose self-loop degrees form the diagonal target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagReference {
    #[default]
    Union,
    Image,
    Clinical,
}

/// How node `j` is judged positive for anchor `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveRule {
    /// `class(j) == class(i)`.
    #[default]
    SameClass,
    /// `class(j) == 0`, i.e. the first one-hot column, independent of `i`.
    FirstColumn,
}

/// Positive and negative pair masks. They may overlap where an edge
/// exists in exactly one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveMasks {
    pub d_pos: Tensor,
    pub d_neg: Tensor,
}

impl ContrastiveMasks {
    pub fn n(&self) -> usize {
        self.d_pos.rows()
    }
}

/// `Θ(a) = 1` iff `a > 0`.
fn threshold(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `d_pos = Θ(Â_I + Â_C)`, `d_neg = Θ((1 - Â_I) + (1 - Â_C))` with a zero
/// diagonal.
pub fn build_masks(a_image: &SelfLoopGraph, a_clinical: &SelfLoopGraph) -> Result<ContrastiveMasks> {
    let n = a_image.n();
    if a_clinical.n() != n {
        return Err(Error::dim(
            "build_masks",
            format!("graphs have {} and {} nodes", n, a_clinical.n()),
        ));
    }
    let ai = a_image.to_tensor();
    let ac = a_clinical.to_tensor();
    let d_pos = ai.zip_map(&ac, |x, y| threshold(x + y))?;
    let mut d_neg = ai.zip_map(&ac, |x, y| threshold((1.0 - x) + (1.0 - y)))?;
    for i in 0..n {
        d_neg.set(i, i, 0.0);
    }
    Ok(ContrastiveMasks { d_pos, d_neg })
}

/// Per-node targets for the diagonal loss.
pub fn reference_degrees(
    reference: DiagReference,
    a_image: &SelfLoopGraph,
    a_clinical: &SelfLoopGraph,
    masks: &ContrastiveMasks,
) -> Vec<f64> {
    match reference {
        DiagReference::Union => (0..masks.n())
            .map(|i| masks.d_pos.row(i).iter().sum())
            .collect(),
        DiagReference::Image => a_image.degree().iter().map(|&d| d as f64).collect(),
        DiagReference::Clinical => a_clinical.degree().iter().map(|&d| d as f64).collect(),
    }
}

fn positive_indicator(rule: PositiveRule, labels: &[usize], i: usize, j: usize) -> bool {
    match rule {
        PositiveRule::SameClass => labels[i] == labels[j],
        PositiveRule::FirstColumn => labels[j] == 0,
    }
}

fn check_nodes(op: &'static str, n: usize, labels: &[usize], train: &[bool]) -> Result<()> {
    if labels.len() != n || train.len() != n {
        return Err(Error::dim(
            op,
            format!(
                "{} labels and {} train flags for {n} nodes",
                labels.len(),
                train.len()
            ),
        ));
    }
    Ok(())
}

/// Per-node positive and negative scores, both `[n, 1]`.
///
/// `P_i = Σ_j S⁺_ij · pos(i, j)` and
/// `N_i = Σ_j max(S⁻_ij - δ, 0)² · (1 - pos(i, j))`, with `j` restricted to
/// training nodes. Rows of non-training anchors are zero.
pub fn contrastive_scores(
    tape: &mut Tape,
    s: Var,
    masks: &ContrastiveMasks,
    labels: &[usize],
    train: &[bool],
    delta: f64,
    rule: PositiveRule,
) -> Result<(Var, Var)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Config(format!("margin delta must be positive, got {delta}")));
    }
    let n = masks.n();
    tape.value(s).expect_same_shape(&masks.d_pos, "contrastive_scores")?;
    check_nodes("contrastive_scores", n, labels, train)?;

    let mut pos_w = Tensor::zeros(vec![n, n]);
    let mut neg_w = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if !(train[i] && train[j]) {
                continue;
            }
            if positive_indicator(rule, labels, i, j) {
                pos_w.set(i, j, masks.d_pos.get(i, j));
            } else {
                neg_w.set(i, j, 1.0);
            }
        }
    }
    let pos_w = tape.constant(pos_w)?;
    let neg_w = tape.constant(neg_w)?;
    let d_neg = tape.constant(masks.d_neg.clone())?;

    let s_pos = tape.mul(s, pos_w)?;
    let p = tape.row_sum(s_pos)?;

    let s_neg = tape.mul(s, d_neg)?;
    let floor = tape.max_const(s_neg, delta)?;
    let hinge = tape.add_scalar(floor, -delta)?;
    let sq = tape.square(hinge)?;
    let weighted = tape.mul(sq, neg_w)?;
    let neg = tape.row_sum(weighted)?;
    Ok((p, neg))
}

/// Scalar contrastive terms `(l_pos, l_neg, l_contrastive)`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerms {
    pub l_pos: Var,
    pub l_neg: Var,
    pub l_contrastive: Var,
}

/// `l_pos = -Σ_i log(P_i + ε)`, `l_neg = -Σ_i log(N_i + ε)` over training
/// anchors.
pub fn contrastive_loss(
    tape: &mut Tape,
    p: Var,
    neg: Var,
    train: &[bool],
    epsilon: f64,
) -> Result<ContrastiveTerms> {
    let n = tape.value(p).rows();
    if train.len() != n {
        return Err(Error::dim("contrastive_loss", "train mask length"));
    }
    let select = Tensor::matrix(n, 1, train.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect())?;
    let select = tape.constant(select)?;
    let neg_log_sum = |tape: &mut Tape, v: Var| -> Result<Var> {
        let l = tape.log_guarded(v, epsilon)?;
        let l = tape.mul(l, select)?;
        let s = tape.sum(l)?;
        tape.scale(s, -1.0)
    };
    let l_pos = neg_log_sum(tape, p)?;
    let l_neg = neg_log_sum(tape, neg)?;
    let l_contrastive = tape.add(l_pos, l_neg)?;
    Ok(ContrastiveTerms {
        l_pos,
        l_neg,
        l_contrastive,
    })
}

/// One-hot `[n, classes]` label matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::Data(format!("label {c} out of range for {classes} classes")));
        }
        t.set(i, c, 1.0);
    }
    Ok(t)
}

fn check_one_hot(y: &Tensor) -> Result<()> {
    let (rows, _) = y.expect_matrix("ce_heads")?;
    for i in 0..rows {
        let row = y.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Data(format!("label row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Output of the two classification heads.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub l_image: Var,
    pub l_clinical: Var,
    pub probs_image: Tensor,
    pub probs_clinical: Tensor,
}

/// Summed cross-entropy of `softmax(Z · W + b)` for each branch, over
/// training rows only. Probabilities are returned for every row.
pub fn ce_heads(
    tape: &mut Tape,
    store: &ParamStore,
    z_image: Var,
    z_clinical: Var,
    heads: (&Affine, &Affine),
    labels_one_hot: &Tensor,
    train: &[bool],
) -> Result<HeadOutputs> {
    check_one_hot(labels_one_hot)?;
    let n = labels_one_hot.rows();
    if train.len() != n || tape.value(z_image).rows() != n {
        return Err(Error::dim("ce_heads", "label, train mask and embedding rows differ"));
    }
    let mut target = labels_one_hot.clone();
    for (i, &t) in train.iter().enumerate() {
        if !t {
            for j in 0..target.cols() {
                target.set(i, j, 0.0);
            }
        }
    }
    let target = tape.constant(target)?;
    let head = |tape: &mut Tape, z: Var, affine: &Affine| -> Result<(Var, Tensor)> {
        let logits = affine.forward(tape, store, z)?;
        let log_probs = tape.log_softmax(logits)?;
        let picked = tape.mul(log_probs, target)?;
        let total = tape.sum(picked)?;
        let loss = tape.scale(total, -1.0)?;
        Ok((loss, tape.value(log_probs).map(f64::exp)))
    };
    let (l_image, probs_image) = head(tape, z_image, heads.0)?;
    let (l_clinical, probs_clinical) = head(tape, z_clinical, heads.1)?;
    Ok(HeadOutputs {
        l_image,
        l_clinical,
        probs_image,
        probs_clinical,
    })
}

/// `(1/n_train) Σ_{i,j} (S_ij - D_ii)²` over training pairs.
pub fn diag_loss(tape: &mut Tape, s: Var, degrees: &[f64], train: &[bool]) -> Result<Var> {
    let (n, m) = tape.value(s).expect_matrix("diag_loss")?;
    if n != m || degrees.len() != n || train.len() != n {
        return Err(Error::dim("diag_loss", "similarity, degrees and train mask sizes differ"));
    }
    let n_train = train.iter().filter(|&&t| t).count();
    if n_train == 0 {
        return Err(Error::Data("no training nodes".into()));
    }
    let mut target = Tensor::zeros(vec![n, n]);
    let mut weight = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            target.set(i, j, degrees[i]);
            if train[i] && train[j] {
                weight.set(i, j, 1.0);
            }
        }
    }
    let target = tape.constant(target)?;
    let weight = tape.constant(weight)?;
    let diff = tape.sub(s, target)?;
    let sq = tape.square(diff)?;
    let masked = tape.mul(sq, weight)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / n_train as f64)
}

/// Every loss term of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_image: f64,
    pub l_clinical: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_contrastive: f64,
    pub l_diag: f64,
    pub l_total: f64,
    pub beta: f64,
    pub delta: f64,
    pub mode: LossMode,
}

impl LossReport {
    /// Total recomputed from the stored parts, in the same operation order
    /// as the tape.
    pub fn recompute_total(&self) -> f64 {
        combine(
            self.mode,
            self.beta,
            self.l_image,
            self.l_clinical,
            self.l_contrastive,
            self.l_diag,
        )
    }

    /// Name and value of every term, for diagnostics.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("l_image", self.l_image),
            ("l_clinical", self.l_clinical),
            ("l_pos", self.l_pos),
            ("l_neg", self.l_neg),
            ("l_contrastive", self.l_contrastive),
            ("l_diag", self.l_diag),
            ("l_total", self.l_total),
        ]
    }
}

fn combine(mode: LossMode, beta: f64, l_i: f64, l_c: f64, l_con: f64, l_diag: f64) -> f64 {
    match mode {
        LossMode::CeOnly => l_i + l_c,
        LossMode::CePlusContrastive => (l_i + l_c) + l_con,
        LossMode::Full => ((1.0 - beta) * (l_i + l_c) + beta * l_con) + l_diag,
    }
}

/// Tape handles of the loss terms that feed [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_image: Var,
    pub l_clinical: Var,
    pub contrastive: ContrastiveTerms,
    pub l_diag: Var,
}

pub fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")))
    }
}

/// Records the weighted total and returns it with a full report.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossParts,
    beta: f64,
    delta: f64,
    mode: LossMode,
) -> Result<(Var, LossReport)> {
    check_beta(beta)?;
    let ce = tape.add(parts.l_image, parts.l_clinical)?;
    let total = match mode {
        LossMode::CeOnly => ce,
        LossMode::CePlusContrastive => tape.add(ce, parts.contrastive.l_contrastive)?,
        LossMode::Full => {
            let weighted_ce = tape.scale(ce, 1.0 - beta)?;
            let weighted_con = tape.scale(parts.contrastive.l_contrastive, beta)?;
            let sum = tape.add(weighted_ce, weighted_con)?;
            tape.add(sum, parts.l_diag)?
        }
    };
    let report = LossReport {
        l_image: tape.scalar(parts.l_image)?,
        l_clinical: tape.scalar(parts.l_clinical)?,
        l_pos: tape.scalar(parts.contrastive.l_pos)?,
        l_neg: tape.scalar(parts.contrastive.l_neg)?,
        l_contrastive: tape.scalar(parts.contrastive.l_contrastive)?,
        l_diag: tape.scalar(parts.l_diag)?,
        l_total: tape.scalar(total)?,
        beta,
        delta,
        mode,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{with_self_loops, ModalGraph};

    fn graph(n: usize, edges: &[(usize, usize)]) -> SelfLoopGraph {
        with_self_loops(&ModalGraph::from_edges(n, edges).unwrap())
    }

    #[test]
    fn masks_without_edges() {
        let m = build_masks(&graph(3, &[]), &graph(3, &[])).unwrap();
        assert_eq!(m.d_pos, Tensor::identity(3));
        let expected = Tensor::ones(vec![3, 3]).zip_map(&Tensor::identity(3), |a, b| a - b).unwrap();
        assert_eq!(m.d_neg, expected);
    }

    #[test]
    fn masks_complete_graphs() {
        let all = [(0, 1), (0, 2), (1, 2)];
        let m = build_masks(&graph(3, &all), &graph(3, &all)).unwrap();
        assert_eq!(m.d_pos, Tensor::ones(vec![3, 3]));
        assert_eq!(m.d_neg, Tensor::zeros(vec![3, 3]));
    }

    #[test]
    fn masks_size_mismatch() {
        assert!(matches!(
            build_masks(&graph(3, &[]), &graph(2, &[])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn inactive_hinge_gives_zero_negative_scores() {
        let masks = build_masks(&graph(3, &[]), &graph(3, &[])).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::filled(vec![3, 3], 0.2)).unwrap();
        let (_, neg) = contrastive_scores(&mut tape, s, &masks, &[0, 1, 0], &[true; 3], 0.5, PositiveRule::SameClass)
            .unwrap();
        assert!(tape.value(neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_positive_mask_picks_diagonal() {
        let masks = build_masks(&graph(3, &[]), &graph(3, &[])).unwrap();
        let s_val = Tensor::from_rows(&[vec![2.0, 0.1, 0.3], vec![0.1, 3.0, 0.2], vec![0.3, 0.2, 5.0]]).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(s_val).unwrap();
        let (p, _) = contrastive_scores(&mut tape, s, &masks, &[0, 1, 1], &[true; 3], 0.5, PositiveRule::SameClass)
            .unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 3.0, 5.0]);
    }

    #[test]
    fn nonpositive_delta_rejected() {
        let masks = build_masks(&graph(2, &[]), &graph(2, &[])).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(contrastive_scores(&mut tape, s, &masks, &[0, 1], &[true; 2], 0.0, PositiveRule::SameClass).is_err());
    }

    #[test]
    fn contrastive_loss_edge_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::filled(vec![3, 1], 1.0 - 1e-8)).unwrap();
        let n = tape.constant(Tensor::zeros(vec![1, 1])).unwrap();
        let terms = contrastive_loss(&mut tape, p, p, &[true; 3], 1e-8).unwrap();
        assert!(tape.scalar(terms.l_pos).unwrap().abs() < 1e-12);
        let terms = contrastive_loss(&mut tape, n, n, &[true], 1e-8).unwrap();
        let l_neg = tape.scalar(terms.l_neg).unwrap();
        assert!((l_neg - 18.420680743952367).abs() < 1e-12);
    }

    #[test]
    fn negative_score_is_clamped_with_warning() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::filled(vec![2, 1], -1.0)).unwrap();
        let terms = contrastive_loss(&mut tape, p, p, &[true; 2], 1e-8).unwrap();
        assert!((tape.scalar(terms.l_pos).unwrap() - 2.0 * 18.420680743952367).abs() < 1e-9);
        assert_eq!(tape.clamp_warnings(), 4);
    }

    #[test]
    fn ce_heads_reject_non_one_hot() {
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let hi = Affine::new("hi", 2, 2, &mut store, &mut rng).unwrap();
        let hc = Affine::new("hc", 2, 2, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::ones(vec![2, 2])).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            ce_heads(&mut tape, &store, z, z, (&hi, &hc), &y, &[true; 2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn ce_uniform_logits_is_n_ln2() {
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let hi = Affine::new("hi", 2, 2, &mut store, &mut rng).unwrap();
        let hc = Affine::new("hc", 2, 2, &mut store, &mut rng).unwrap();
        for h in [&hi, &hc] {
            store.set_value(&h.weight, Tensor::zeros(vec![2, 2])).unwrap();
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::ones(vec![5, 2])).unwrap();
        let y = one_hot(&[0, 1, 1, 0, 1], 2).unwrap();
        let out = ce_heads(&mut tape, &store, z, z, (&hi, &hc), &y, &[true; 5]).unwrap();
        let expected = 5.0 * std::f64::consts::LN_2;
        assert!((tape.scalar(out.l_image).unwrap() - expected).abs() < 1e-12);
        assert!((tape.scalar(out.l_clinical).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_perfect_logits_near_zero() {
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let hi = Affine::new("hi", 2, 2, &mut store, &mut rng).unwrap();
        let hc = Affine::new("hc", 2, 2, &mut store, &mut rng).unwrap();
        for h in [&hi, &hc] {
            store.set_value(&h.weight, Tensor::identity(2)).unwrap();
        }
        let y = one_hot(&[0, 1, 1], 2).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(y.map(|v| v * 1e3)).unwrap();
        let out = ce_heads(&mut tape, &store, z, z, (&hi, &hc), &y, &[true; 3]).unwrap();
        assert!(tape.scalar(out.l_image).unwrap() < 1e-12);
    }

    #[test]
    fn diag_loss_scalar_and_constant_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[vec![2.0]]).unwrap()).unwrap();
        let l = diag_loss(&mut tape, s, &[1.0], &[true]).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), 1.0);

        let s = tape
            .constant(Tensor::from_rows(&[vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap())
            .unwrap();
        let l = diag_loss(&mut tape, s, &[2.0, 3.0], &[true; 2]).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn beta_out_of_range_is_config_error() {
        assert!(matches!(check_beta(1.5), Err(Error::Config(_))));
        assert!(matches!(check_beta(-0.1), Err(Error::Config(_))));
        assert!(check_beta(0.0).is_ok() && check_beta(1.0).is_ok());
    }
}
