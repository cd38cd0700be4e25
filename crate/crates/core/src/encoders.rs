//! Per-modality encoders: the affine feature extractor, graph layers and
//! the gating MLP.
//!
//! Layers only hold parameter names and widths; values live in a
//! [`ParamStore`]. All forward passes take the store explicitly, so the
//! same layer can run on a training tape or on a frozen snapshot.

use rand::Rng;

use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphs::SelfLoopGraph;

/// Slope of the leaky-relu used on attention logits.
pub const LEAKY_SLOPE: f64 = 0.01;

/// `x · W + b` with `W: [in, out]` and `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new<R: Rng>(
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.insert_uniform(&weight, in_dim, out_dim, in_dim, rng)?;
        store.insert(&bias, Tensor::zeros(vec![1, out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_width(tape.value(x), self.in_dim, "affine")?;
        let w = tape.param(store, &self.weight)?;
        let b = tape.param(store, &self.bias)?;
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

fn check_width(x: &Tensor, expected: usize, op: &'static str) -> Result<()> {
    let (_, cols) = x.expect_matrix(op)?;
    if cols != expected {
        return Err(Error::dim(
            op,
            format!("input has {cols} columns, layer expects {expected}"),
        ));
    }
    Ok(())
}

/// Stand-in for a CNN feature extractor: `tanh(raw · W_e + b_e)` over
/// precomputed per-patient feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder {
    pub affine: Affine,
}

impl FeatureEncoder {
    pub fn new<R: Rng>(
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            affine: Affine::new(prefix, in_dim, out_dim, store, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, raw: Var) -> Result<Var> {
        if tape.value(raw).cols() != self.affine.in_dim {
            return Err(Error::Config(format!(
                "feature encoder expects {} input columns, got {}",
                self.affine.in_dim,
                tape.value(raw).cols()
            )));
        }
        let z = self.affine.forward(tape, store, raw)?;
        tape.tanh(z)
    }
}

/// Single-head graph attention layer.
///
/// The pairwise logit is `leaky_relu(a_src · W x_i + a_dst · W x_j)`, which
/// is the concatenated form `a · [W x_i || W x_j]` split in two halves.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayer {
    pub weight: String,
    pub attn_src: String,
    pub attn_dst: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub leaky_slope: f64,
}

impl GatLayer {
    pub fn new<R: Rng>(
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let attn_src = format!("{prefix}.attn_src");
        let attn_dst = format!("{prefix}.attn_dst");
        store.insert_uniform(&weight, in_dim, out_dim, in_dim, rng)?;
        store.insert_uniform(&attn_src, out_dim, 1, 2 * out_dim, rng)?;
        store.insert_uniform(&attn_dst, out_dim, 1, 2 * out_dim, rng)?;
        Ok(Self {
            weight,
            attn_src,
            attn_dst,
            in_dim,
            out_dim,
            leaky_slope: LEAKY_SLOPE,
        })
    }

    /// Records `(W x, leaky-relu logits)` for all node pairs, unmasked.
    fn record_logits(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        check_width(tape.value(x), self.in_dim, "gat")?;
        let n = tape.value(x).rows();
        let w = tape.param(store, &self.weight)?;
        let a_src = tape.param(store, &self.attn_src)?;
        let a_dst = tape.param(store, &self.attn_dst)?;
        let wx = tape.matmul(x, w)?;
        let src = tape.matmul(wx, a_src)?;
        let dst = tape.matmul(wx, a_dst)?;
        let ones_row = tape.constant(Tensor::ones(vec![1, n]))?;
        let ones_col = tape.constant(Tensor::ones(vec![n, 1]))?;
        let src_pairs = tape.matmul(src, ones_row)?;
        let dst_t = tape.transpose(dst)?;
        let dst_pairs = tape.matmul(ones_col, dst_t)?;
        let raw = tape.add(src_pairs, dst_pairs)?;
        let logits = tape.leaky_relu(raw, self.leaky_slope)?;
        Ok((wx, logits))
    }

    /// Records attention weights `α` (rows sum to one over `Â`).
    pub fn attention_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        a_hat: &Tensor,
    ) -> Result<(Var, Var)> {
        let (wx, logits) = self.record_logits(tape, store, x)?;
        let alpha = tape.masked_softmax(logits, a_hat)?;
        Ok((wx, alpha))
    }

    /// `tanh(α · W X)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, a_hat: &Tensor) -> Result<Var> {
        let (wx, alpha) = self.attention_on_tape(tape, store, x, a_hat)?;
        let agg = tape.matmul(alpha, wx)?;
        tape.tanh(agg)
    }

    /// Attention logits over `𝒩(i) ∪ {i}`, with `-inf` everywhere else.
    pub fn attention_logits(&self, store: &ParamStore, x: &Tensor, g: &SelfLoopGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (_, logits) = self.record_logits(&mut tape, store, xv)?;
        let mut out = tape.value(logits).clone();
        let n = g.n();
        for i in 0..n {
            for j in 0..n {
                if !g.has_edge(i, j) {
                    out.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        Ok(out)
    }

    /// Normalised attention coefficients for inspection.
    pub fn attention(&self, store: &ParamStore, x: &Tensor, g: &SelfLoopGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (_, alpha) = self.attention_on_tape(&mut tape, store, xv, &g.to_tensor())?;
        Ok(tape.value(alpha).clone())
    }
}

/// GCN layer `tanh(Â_norm · X · W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnLayer {
    pub fn new<R: Rng>(
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        store.insert_uniform(&weight, in_dim, out_dim, in_dim, rng)?;
        Ok(Self {
            weight,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, norm_adj: Var) -> Result<Var> {
        check_width(tape.value(x), self.in_dim, "gcn")?;
        let w = tape.param(store, &self.weight)?;
        let ax = tape.matmul(norm_adj, x)?;
        let axw = tape.matmul(ax, w)?;
        tape.tanh(axw)
    }
}

/// Graph layer of either backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphLayer {
    Gat(GatLayer),
    Gcn(GcnLayer),
}

impl GraphLayer {
    pub fn out_dim(&self) -> usize {
        match self {
            GraphLayer::Gat(l) => l.out_dim,
            GraphLayer::Gcn(l) => l.out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            GraphLayer::Gat(l) => l.in_dim,
            GraphLayer::Gcn(l) => l.in_dim,
        }
    }

    /// First weight matrix, `[in_dim, out_dim]`.
    pub fn weight(&self) -> &str {
        match self {
            GraphLayer::Gat(l) => &l.weight,
            GraphLayer::Gcn(l) => &l.weight,
        }
    }

    /// `a_hat` is the self-loop adjacency (GAT), `norm_adj` its
    /// normalised form (GCN).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        a_hat: &Tensor,
        norm_adj: Var,
    ) -> Result<Var> {
        match self {
            GraphLayer::Gat(l) => l.forward(tape, store, x, a_hat),
            GraphLayer::Gcn(l) => l.forward(tape, store, x, norm_adj),
        }
    }
}

/// Two-layer gating MLP: `sigmoid(tanh(x W1 + b1) W2 + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZetaMlp {
    pub hidden: Affine,
    pub output: Affine,
}

impl ZetaMlp {
    pub fn new<R: Rng>(
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Affine::new(&format!("{prefix}.hidden"), in_dim, hidden_dim, store, rng)?,
            output: Affine::new(&format!("{prefix}.output"), hidden_dim, out_dim, store, rng)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.tanh(h)?;
        let o = self.output.forward(tape, store, h)?;
        tape.sigmoid(o)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graphs::{gcn_normalize, with_self_loops, ModalGraph};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn feature_encoder_identity_weights_give_tanh() {
        let mut store = ParamStore::new();
        let enc = FeatureEncoder::new("enc", 3, 3, &mut store, &mut rng()).unwrap();
        store.set_value(&enc.affine.weight, Tensor::identity(3)).unwrap();
        let raw = Tensor::from_rows(&[vec![0.5, -0.25, 0.9], vec![-0.7, 0.1, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(raw.clone()).unwrap();
        let out = enc.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(out), &raw.map(f64::tanh));
    }

    #[test]
    fn feature_encoder_zero_weights_give_zero_rows() {
        let mut store = ParamStore::new();
        let enc = FeatureEncoder::new("enc", 2, 4, &mut store, &mut rng()).unwrap();
        store.set_value(&enc.affine.weight, Tensor::zeros(vec![2, 4])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![3, 2])).unwrap();
        let out = enc.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_encoder_width_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let enc = FeatureEncoder::new("enc", 2, 4, &mut store, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![3, 5])).unwrap();
        assert!(matches!(enc.forward(&mut tape, &store, x), Err(Error::Config(_))));
    }

    #[test]
    fn zero_attention_vector_gives_zero_logits() {
        let mut store = ParamStore::new();
        let gat = GatLayer::new("gat", 2, 3, &mut store, &mut rng()).unwrap();
        store.set_value(&gat.attn_src, Tensor::zeros(vec![3, 1])).unwrap();
        store.set_value(&gat.attn_dst, Tensor::zeros(vec![3, 1])).unwrap();
        let g = with_self_loops(&ModalGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap());
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]]).unwrap();
        let logits = gat.attention_logits(&store, &x, &g).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if g.has_edge(i, j) {
                    assert_eq!(logits.get(i, j), 0.0);
                } else {
                    assert_eq!(logits.get(i, j), f64::NEG_INFINITY);
                }
            }
        }
        let alpha = gat.attention(&store, &x, &g).unwrap();
        assert!((alpha.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((alpha.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_features_give_identical_logits_per_row() {
        let mut store = ParamStore::new();
        let gat = GatLayer::new("gat", 2, 3, &mut store, &mut rng()).unwrap();
        let g = with_self_loops(&ModalGraph::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap());
        let x = Tensor::from_rows(&vec![vec![0.4, -1.2]; 4]).unwrap();
        let logits = gat.attention_logits(&store, &x, &g).unwrap();
        let row0: Vec<f64> = logits.row(0).to_vec();
        assert!(row0.iter().all(|&v| v == row0[0]));
    }

    #[test]
    fn single_node_gat_is_tanh_of_projection() {
        let mut store = ParamStore::new();
        let gat = GatLayer::new("gat", 2, 2, &mut store, &mut rng()).unwrap();
        let g = with_self_loops(&ModalGraph::from_edges(1, &[]).unwrap());
        let x = Tensor::from_rows(&[vec![0.3, -0.8]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let h = gat.forward(&mut tape, &store, xv, &g.to_tensor()).unwrap();
        let expected = x.matmul(store.value(&gat.weight).unwrap()).unwrap().map(f64::tanh);
        assert_eq!(tape.value(h), &expected);
    }

    #[test]
    fn missing_self_loop_is_contract_error() {
        let mut store = ParamStore::new();
        let gat = GatLayer::new("gat", 1, 1, &mut store, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![2, 1])).unwrap();
        let adj = ModalGraph::from_edges(2, &[]).unwrap().to_tensor();
        assert!(matches!(
            gat.forward(&mut tape, &store, x, &adj),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gcn_identity_adjacency_is_per_node_tanh() {
        let mut store = ParamStore::new();
        let gcn = GcnLayer::new("gcn", 2, 3, &mut store, &mut rng()).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -0.5]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let adj = tape.constant(Tensor::identity(2)).unwrap();
        let h = gcn.forward(&mut tape, &store, xv, adj).unwrap();
        let expected = x.matmul(store.value(&gcn.weight).unwrap()).unwrap().map(f64::tanh);
        assert_eq!(tape.value(h), &expected);
    }

    #[test]
    fn gcn_uniform_pair_rows_equal() {
        let mut store = ParamStore::new();
        let gcn = GcnLayer::new("gcn", 2, 3, &mut store, &mut rng()).unwrap();
        let g = with_self_loops(&ModalGraph::from_edges(2, &[(0, 1)]).unwrap());
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap()).unwrap();
        let adj = tape.constant(gcn_normalize(&g)).unwrap();
        let h = gcn.forward(&mut tape, &store, xv, adj).unwrap();
        assert_eq!(tape.value(h).row(0), tape.value(h).row(1));
    }

    #[test]
    fn zeta_zero_weights_output_half() {
        let mut store = ParamStore::new();
        let mlp = ZetaMlp::new("zeta", 4, 3, 3, &mut store, &mut rng()).unwrap();
        for name in [&mlp.hidden.weight, &mlp.output.weight] {
            let shape = store.value(name).unwrap().shape().to_vec();
            store.set_value(name, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![2, 4])).unwrap();
        let out = mlp.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zeta_large_bias_saturates() {
        let mut store = ParamStore::new();
        let mlp = ZetaMlp::new("zeta", 2, 2, 2, &mut store, &mut rng()).unwrap();
        store.set_value(&mlp.output.bias, Tensor::filled(vec![1, 2], 50.0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![3, 2])).unwrap();
        let out = mlp.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v > 1.0 - 1e-12 && v <= 1.0));
    }
}
