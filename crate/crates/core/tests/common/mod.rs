#![allow(clippy::needless_range_loop)]
//! Independent scalar oracles shared by the integration tests. Nothing
//! here calls into the library's numeric code paths.
#![allow(dead_code)]

use serde::Deserialize;

/// Symmetric-OR k-nearest-neighbour adjacency by exhaustive search.
/// Ties in squared distance go to the lower index.
pub fn brute_knn(points: &[Vec<f64>], k: usize) -> Vec<Vec<bool>> {
    let n = points.len();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            adj[i][j] = true;
            adj[j][i] = true;
        }
    }
    adj
}

/// Dense boolean adjacency with self-loops from an undirected edge list.
pub fn dense_with_loops(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut a = vec![vec![false; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(i, j) in edges {
        a[i][j] = true;
        a[j][i] = true;
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOracle {
    pub p: Vec<f64>,
    pub n: Vec<f64>,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_diag: f64,
    pub l_image: f64,
    pub l_clinical: f64,
}

impl LossOracle {
    pub fn l_contrastive(&self) -> f64 {
        self.l_pos + self.l_neg
    }

    pub fn total(&self, beta: f64) -> f64 {
        (1.0 - beta) * (self.l_image + self.l_clinical) + beta * self.l_contrastive() + self.l_diag
    }
}

fn cross_entropy(logits: &[Vec<f64>], labels: &[usize], train: &[bool]) -> f64 {
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        if !train[i] {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total -= row[labels[i]] - m - z.ln();
    }
    total
}

/// Positive/negative scores, contrastive, diagonal and cross-entropy terms
/// by direct double loops over node pairs.
#[allow(clippy::too_many_arguments)]
pub fn loss_oracle(
    s: &[Vec<f64>],
    a_image: &[Vec<bool>],
    a_clinical: &[Vec<bool>],
    labels: &[usize],
    train: &[bool],
    delta: f64,
    eps: f64,
    logits: (&[Vec<f64>], &[Vec<f64>]),
) -> LossOracle {
    let n = s.len();
    let mut p = vec![0.0; n];
    let mut neg = vec![0.0; n];
    let mut degree = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let either = a_image[i][j] || a_clinical[i][j];
            let missing_somewhere = !a_image[i][j] || !a_clinical[i][j];
            if either {
                degree[i] += 1.0;
            }
            if !(train[i] && train[j]) {
                continue;
            }
            if labels[i] == labels[j] {
                if either {
                    p[i] += s[i][j];
                }
            } else if i != j && missing_somewhere && s[i][j] > delta {
                neg[i] += (s[i][j] - delta).powi(2);
            }
        }
    }
    let mut l_pos = 0.0;
    let mut l_neg = 0.0;
    for i in 0..n {
        if train[i] {
            l_pos -= (p[i] + eps).ln();
            l_neg -= (neg[i] + eps).ln();
        }
    }
    let n_train = train.iter().filter(|&&t| t).count() as f64;
    let mut diag = 0.0;
    for i in 0..n {
        for j in 0..n {
            if train[i] && train[j] {
                diag += (s[i][j] - degree[i]).powi(2);
            }
        }
    }
    LossOracle {
        p,
        n: neg,
        l_pos,
        l_neg,
        l_diag: diag / n_train,
        l_image: cross_entropy(logits.0, labels, train),
        l_clinical: cross_entropy(logits.1, labels, train),
    }
}

#[derive(Debug, Deserialize)]
pub struct LossFixture {
    pub similarity: Vec<Vec<f64>>,
    pub image_edges: Vec<(usize, usize)>,
    pub clinical_edges: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub train: Vec<bool>,
    pub logits_image: Vec<Vec<f64>>,
    pub logits_clinical: Vec<Vec<f64>>,
    pub delta: f64,
    pub epsilon: f64,
    pub beta: f64,
}

pub fn loss_fixture() -> LossFixture {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/loss4.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// The library's view of the fixture: scores and a full report.
pub fn library_losses(
    fx: &LossFixture,
    beta: f64,
    mode: cgmcl::losses::LossMode,
) -> (Vec<f64>, Vec<f64>, cgmcl::losses::LossReport) {
    use cgmcl::diffcore::{Tape, Tensor};
    use cgmcl::graphs::{with_self_loops, ModalGraph};
    use cgmcl::losses::*;

    let n = fx.labels.len();
    let gi = with_self_loops(&ModalGraph::from_edges(n, &fx.image_edges).unwrap());
    let gc = with_self_loops(&ModalGraph::from_edges(n, &fx.clinical_edges).unwrap());
    let masks = build_masks(&gi, &gc).unwrap();
    let degrees = reference_degrees(DiagReference::Union, &gi, &gc, &masks);
    let classes = fx.logits_image[0].len();
    let y = one_hot(&fx.labels, classes).unwrap();

    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(&fx.similarity).unwrap()).unwrap();
    let (p, neg) = contrastive_scores(&mut tape, s, &masks, &fx.labels, &fx.train, fx.delta, PositiveRule::SameClass).unwrap();
    let contrastive = contrastive_loss(&mut tape, p, neg, &fx.train, fx.epsilon).unwrap();
    let l_diag = diag_loss(&mut tape, s, &degrees, &fx.train).unwrap();

    let mut weight = y.clone();
    for i in 0..n {
        if !fx.train[i] {
            for c in 0..classes {
                weight.set(i, c, 0.0);
            }
        }
    }
    let mut ce = |logits: &[Vec<f64>]| {
        let z = tape.constant(Tensor::from_rows(logits).unwrap()).unwrap();
        let ls = tape.log_softmax(z).unwrap();
        let w = tape.constant(weight.clone()).unwrap();
        let picked = tape.mul(ls, w).unwrap();
        let total = tape.sum(picked).unwrap();
        tape.scale(total, -1.0).unwrap()
    };
    let l_image = ce(&fx.logits_image);
    let l_clinical = ce(&fx.logits_clinical);
    let parts = LossParts { l_image, l_clinical, contrastive, l_diag };
    let (total, report) = total_loss(&mut tape, &parts, beta, fx.delta, mode).unwrap();
    assert_eq!(tape.scalar(total).unwrap().to_bits(), report.l_total.to_bits());
    (tape.value(p).data().to_vec(), tape.value(neg).data().to_vec(), report)
}

pub fn fixture_oracle(fx: &LossFixture) -> LossOracle {
    let n = fx.labels.len();
    loss_oracle(
        &fx.similarity,
        &dense_with_loops(n, &fx.image_edges),
        &dense_with_loops(n, &fx.clinical_edges),
        &fx.labels,
        &fx.train,
        fx.delta,
        fx.epsilon,
        (&fx.logits_image, &fx.logits_clinical),
    )
}

/// Every `(image edge, clinical edge)` combination for one off-diagonal
/// pair, with the expected `(d_pos, d_neg)` under the strict threshold.
pub const MASK_TRUTH_TABLE: [(bool, bool, f64, f64); 4] = [
    (true, true, 1.0, 0.0),
    (true, false, 1.0, 1.0),
    (false, true, 1.0, 1.0),
    (false, false, 0.0, 1.0),
];
