//! Reverse-mode tape over dense matrices.
//!
//! Every primitive appends one record holding its output value and the
//! handles of its inputs, so records are topologically ordered by
//! construction. [`Tape::backward`] walks the records once, in reverse.
//!
//! Backward does not consume the tape. Calling it twice without a new
//! forward pass overwrites the store's gradients with identical values.

use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    LogGuarded(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    MaskedSoftmax(Var, Tensor),
    LogSoftmax(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    MaxConst(Var, f64),
    Square(Var),
}

#[derive(Clone, Debug)]
struct Record {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
    /// Running hash of which side of a kink every non-smooth element fell on.
    branch_signature: u64,
    clamp_warnings: usize,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            branch_signature: FNV_OFFSET,
            clamp_warnings: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Identifies the branch taken at every leaky-relu and max element.
    /// Two evaluations with different signatures straddle a kink.
    pub fn branch_signature(&self) -> u64 {
        self.branch_signature
    }

    /// Number of guarded-log inputs that had to be clamped.
    pub fn clamp_warnings(&self) -> usize {
        self.clamp_warnings
    }

    fn mix_branch(&mut self, bit: bool) {
        self.branch_signature ^= u64::from(bit) + 1;
        self.branch_signature = self.branch_signature.wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.records.push(Record { value, op });
        Ok(Var(self.records.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// Records the current value of a stored parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.push(value, Op::Param(name.to_string()), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Concatenation along the last (column) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        self.push(out, Op::ConcatCols(a, b), "concat")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a `[1, cols]` row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(a).expect_matrix("add_bias")?;
        let b = self.value(bias);
        if b.shape() != [1, c] {
            return Err(Error::dim(
                "add_bias",
                format!("bias shape {:?} does not match [1, {}]", b.shape(), c),
            ));
        }
        let av = self.value(a).data();
        let bv = b.data();
        let data = (0..r * c).map(|idx| av[idx] + bv[idx % c]).collect();
        let out = Tensor::matrix(r, c, data)?;
        self.push(out, Op::AddBias(a, bias), "add_bias")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    /// `ln(x + eps)`. Inputs with `x + eps <= 0` are clamped to `ln(eps)`,
    /// get zero gradient and count as a clamp warning.
    pub fn log_guarded(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Domain {
                op: "log_guarded",
                detail: format!("epsilon must be positive, got {eps}"),
            });
        }
        let clamped = self
            .value(a)
            .data()
            .iter()
            .filter(|&&x| x + eps <= 0.0)
            .count();
        if clamped > 0 {
            log::warn!("guarded log clamped {clamped} non-positive input(s) to epsilon");
            self.clamp_warnings += clamped;
        }
        let out = self.value(a).map(|x| {
            let shifted = x + eps;
            if shifted <= 0.0 {
                eps.ln()
            } else {
                shifted.ln()
            }
        });
        self.push(out, Op::LogGuarded(a, eps), "log_guarded")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let input = self.value(a).clone();
        for &x in input.data() {
            self.mix_branch(x > 0.0);
        }
        let out = input.map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    /// Row-wise softmax restricted to entries where `mask` is non-zero.
    /// Masked-out entries receive an additive `-inf` before exponentiation,
    /// so they come out as exact zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.expect_matrix("masked_softmax")?;
        x.expect_same_shape(mask, "masked_softmax")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let m = mask.row(i);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "softmax row {i} has an empty support (isolated node without self-loop?)"
                )));
            }
            let mut total = 0.0;
            for j in 0..c {
                let shifted = if m[j] != 0.0 { row[j] - max } else { f64::NEG_INFINITY };
                let e = shifted.exp();
                out[i * c + j] = e;
                total += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= total;
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        self.push(out, Op::MaskedSoftmax(a, mask.clone()), "masked_softmax")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mask = Tensor::ones(self.value(a).shape().to_vec());
        self.masked_softmax(a, &mask)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.expect_matrix("log_softmax")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        self.push(out, Op::LogSoftmax(a), "log_softmax")
    }

    /// `[rows, cols] -> [rows, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, _) = x.expect_matrix("row_sum")?;
        let data = (0..r).map(|i| x.row(i).iter().sum()).collect();
        let out = Tensor::matrix(r, 1, data)?;
        self.push(out, Op::RowSum(a), "row_sum")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let out = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(out, Op::Mean(a), "mean")
    }

    /// Elementwise `max(x, c)`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let input = self.value(a).clone();
        for &x in input.data() {
            self.mix_branch(x > c);
        }
        let out = input.map(|x| x.max(c));
        self.push(out, Op::MaxConst(a, c), "max_const")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    /// Reverse pass from a scalar `loss`, without touching any store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        let mut grads = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let rec = &self.records[idx];
            match &rec.op {
                Op::Constant => {}
                Op::Param(name) => match grads.by_param.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.by_param.insert(name.clone(), g);
                    }
                },
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut adj, *a, g.matmul(&bv.transpose()?)?);
                    accumulate(&mut adj, *b, av.transpose()?.matmul(&g)?);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()?),
                Op::ConcatCols(a, b) => {
                    let c1 = self.value(*a).cols();
                    let c2 = self.value(*b).cols();
                    let r = g.rows();
                    let mut ga = Vec::with_capacity(r * c1);
                    let mut gb = Vec::with_capacity(r * c2);
                    for i in 0..r {
                        let row = g.row(i);
                        ga.extend_from_slice(&row[..c1]);
                        gb.extend_from_slice(&row[c1..]);
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(r, c1, ga)?);
                    accumulate(&mut adj, *b, Tensor::matrix(r, c2, gb)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|v| -v));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |gv, bv| gv * bv)?;
                    let gb = g.zip_map(self.value(*a), |gv, av| gv * av)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adj, *bias, Tensor::matrix(1, c, gb)?);
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, f) => accumulate(&mut adj, *a, g.map(|v| v * f)),
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::Exp(a) => {
                    let ga = g.zip_map(&rec.value, |gv, y| gv * y)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv / x)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::LogGuarded(a, eps) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| {
                        let shifted = x + eps;
                        if shifted <= 0.0 {
                            0.0
                        } else {
                            gv / shifted
                        }
                    })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&rec.value, |gv, y| gv * y * (1.0 - y))?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&rec.value, |gv, y| gv * (1.0 - y * y))?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { gv * slope })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::MaskedSoftmax(a, mask) => {
                    let y = &rec.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            if mask.get(i, j) != 0.0 {
                                ga[i * c + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::LogSoftmax(a) => {
                    let y = &rec.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let gsum: f64 = g.row(i).iter().sum();
                        for j in 0..c {
                            ga[i * c + j] = g.get(i, j) - y.get(i, j).exp() * gsum;
                        }
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::RowSum(a) => {
                    let x = self.value(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let data = (0..r * c).map(|idx| g.data()[idx / c]).collect();
                    accumulate(&mut adj, *a, Tensor::matrix(r, c, data)?);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut adj, *a, Tensor::filled(self.value(*a).shape().to_vec(), gv));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = g.data()[0] / x.numel() as f64;
                    accumulate(&mut adj, *a, Tensor::filled(x.shape().to_vec(), gv));
                }
                Op::MaxConst(a, c) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > *c { gv } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)?;
                    accumulate(&mut adj, *a, ga);
                }
            }
        }
        Ok(grads)
    }

    /// Overwrites every gradient in `store` with `d loss / d param`.
    /// Parameters that the loss does not depend on get zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        store.zero_grad();
        for (name, g) in grads.iter() {
            store.set_grad(name, g.clone())?;
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
