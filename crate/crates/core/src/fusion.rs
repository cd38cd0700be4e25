//! Cross-graph fusion: concatenation with encoder features, gated scaling,
//! branch projection, the shared sigmoid space and the patient similarity
//! matrix.

use std::io::Write;
use std::path::Path;

use crate::diffcore::{sigmoid, ParamStore, Tape, Tensor, Var};
use crate::encoders::{Affine, ZetaMlp};
use crate::error::{Error, Result};

/// Log guard shared by every logarithm in the objective.
pub const EPSILON: f64 = 1e-8;

/// Plain values of every intermediate in one fused forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBundle {
    pub h_image: Tensor,
    pub h_clinical: Tensor,
    pub cat_image: Tensor,
    pub cat_clinical: Tensor,
    pub e_image: Tensor,
    pub e_clinical: Tensor,
    pub z_image: Tensor,
    pub z_clinical: Tensor,
    pub z_shared: Tensor,
    pub similarity: Tensor,
}

/// `[h | raw]`. A zero-width `raw` returns `h` itself.
pub fn concat_with_raw(tape: &mut Tape, h: Var, raw: Var) -> Result<Var> {
    let (hr, _) = tape.value(h).expect_matrix("concat_with_raw")?;
    let (rr, rc) = tape.value(raw).expect_matrix("concat_with_raw")?;
    if hr != rr {
        return Err(Error::dim(
            "concat_with_raw",
            format!("row counts {hr} and {rr} differ"),
        ));
    }
    if rc == 0 {
        return Ok(h);
    }
    tape.concat_cols(h, raw)
}

/// `E = H ⊙ ζ(cat)`.
pub fn imfes(tape: &mut Tape, store: &ParamStore, h: Var, cat: Var, mlp: &ZetaMlp) -> Result<Var> {
    let gate = mlp.forward(tape, store, cat)?;
    if tape.value(gate).shape() != tape.value(h).shape() {
        return Err(Error::Config(format!(
            "gate output {:?} does not match encoder output {:?}",
            tape.value(gate).shape(),
            tape.value(h).shape()
        )));
    }
    tape.mul(h, gate)
}

/// `tanh([cat | E] · W_p + b_p)`.
pub fn branch_embed(tape: &mut Tape, store: &ParamStore, cat: Var, e: Var, proj: &Affine) -> Result<Var> {
    let joined = tape.concat_cols(cat, e)?;
    let z = proj.forward(tape, store, joined)?;
    tape.tanh(z)
}

/// `sigmoid(Z_I + Z_C)`.
pub fn shared_space(tape: &mut Tape, z_image: Var, z_clinical: Var) -> Result<Var> {
    let sum = tape.add(z_image, z_clinical)?;
    tape.sigmoid(sum)
}

/// `S = Z Zᵀ`.
pub fn similarity_matrix(tape: &mut Tape, z: Var) -> Result<Var> {
    let zt = tape.transpose(z)?;
    tape.matmul(z, zt)
}

/// Mean element-wise Bernoulli KL divergence `KL(σ(Z_I) ‖ σ(Z_C))`.
pub fn kl_alignment(z_image: &Tensor, z_clinical: &Tensor) -> Result<f64> {
    z_image.expect_same_shape(z_clinical, "kl_alignment")?;
    if z_image.numel() == 0 {
        return Ok(0.0);
    }
    let total: f64 = z_image
        .data()
        .iter()
        .zip(z_clinical.data())
        .map(|(&a, &b)| bernoulli_kl(sigmoid(a), sigmoid(b)))
        .sum();
    Ok(total / z_image.numel() as f64)
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let kl = p * ((p + EPSILON) / (q + EPSILON)).ln()
        + (1.0 - p) * ((1.0 - p + EPSILON) / (1.0 - q + EPSILON)).ln();
    // the guard can push an exact zero a few ulps negative
    kl.max(0.0)
}

/// Writes `patient_id,dim_0..dim_{d-1}` followed by one row per patient.
pub fn write_embeddings<W: Write>(out: W, patient_ids: &[String], z: &Tensor) -> Result<()> {
    let (rows, cols) = z.expect_matrix("write_embeddings")?;
    if rows != patient_ids.len() {
        return Err(Error::dim(
            "write_embeddings",
            format!("{rows} rows but {} patient ids", patient_ids.len()),
        ));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["patient_id".to_string()];
    header.extend((0..cols).map(|d| format!("dim_{d}")));
    w.write_record(&header)?;
    for (i, id) in patient_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(z.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<embeddings>", e))?;
    Ok(())
}

pub fn save_embeddings(path: &Path, patient_ids: &[String], z: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(file, patient_ids, z)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn constant(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[vec![1.0]]);
        let raw = constant(&mut tape, &[vec![2.0, 3.0]]);
        let out = concat_with_raw(&mut tape, h, raw).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0]);

        let empty = tape.constant(Tensor::zeros(vec![1, 0])).unwrap();
        let same = concat_with_raw(&mut tape, h, empty).unwrap();
        assert_eq!(tape.value(same), tape.value(h));

        let two_rows = constant(&mut tape, &[vec![1.0], vec![2.0]]);
        assert!(matches!(
            concat_with_raw(&mut tape, h, two_rows),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn imfes_half_gate_halves() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = ZetaMlp::new("zeta", 3, 2, 2, &mut store, &mut rng).unwrap();
        store.set_value(&mlp.output.weight, Tensor::zeros(vec![2, 2])).unwrap();
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[vec![0.4, -0.6], vec![1.0, 0.2]]);
        let cat = constant(&mut tape, &[vec![0.4, -0.6, 3.0], vec![1.0, 0.2, -1.0]]);
        let e = imfes(&mut tape, &store, h, cat, &mlp).unwrap();
        assert_eq!(tape.value(e), &tape.value(h).map(|v| v / 2.0));
    }

    #[test]
    fn imfes_saturated_gate_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = ZetaMlp::new("zeta", 2, 2, 2, &mut store, &mut rng).unwrap();
        store.set_value(&mlp.output.weight, Tensor::zeros(vec![2, 2])).unwrap();
        store.set_value(&mlp.output.bias, Tensor::filled(vec![1, 2], 60.0)).unwrap();
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[vec![0.4, -0.6]]);
        let e = imfes(&mut tape, &store, h, h, &mlp).unwrap();
        assert_eq!(tape.value(e), tape.value(h));
    }

    #[test]
    fn imfes_gate_shape_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = ZetaMlp::new("zeta", 2, 2, 3, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[vec![0.4, -0.6]]);
        assert!(matches!(imfes(&mut tape, &store, h, h, &mlp), Err(Error::Config(_))));
    }

    #[test]
    fn branch_embed_zero_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = Affine::new("proj", 3, 4, &mut store, &mut rng).unwrap();
        store.set_value(&proj.weight, Tensor::zeros(vec![3, 4])).unwrap();
        let mut tape = Tape::new();
        let cat = constant(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let e = constant(&mut tape, &[vec![5.0], vec![6.0]]);
        let z = branch_embed(&mut tape, &store, cat, e, &proj).unwrap();
        assert_eq!(tape.value(z), &Tensor::zeros(vec![2, 4]));
    }

    #[test]
    fn shared_space_cases() {
        let mut tape = Tape::new();
        let a = constant(&mut tape, &[vec![1.5, -2.0], vec![0.3, 9.0]]);
        let neg_a = tape.scale(a, -1.0).unwrap();
        let z = shared_space(&mut tape, a, neg_a).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.5));

        let big = constant(&mut tape, &[vec![40.0, 40.0]]);
        let z = shared_space(&mut tape, big, big).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v > 1.0 - 1e-15));

        let b = constant(&mut tape, &[vec![0.7, 0.1], vec![-0.2, 0.4]]);
        let ab = shared_space(&mut tape, a, b).unwrap();
        let ba = shared_space(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));
    }

    #[test]
    fn similarity_simple_cases() {
        let mut tape = Tape::new();
        let ortho = constant(&mut tape, &[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let s = similarity_matrix(&mut tape, ortho).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 4.0]);

        let same = constant(&mut tape, &vec![vec![0.5, 0.25]; 3]);
        let s = similarity_matrix(&mut tape, same).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.3125));
    }

    #[test]
    fn kl_identical_is_zero() {
        let z = Tensor::from_rows(&[vec![0.3, -2.0], vec![5.0, 0.0]]).unwrap();
        assert_eq!(kl_alignment(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn embeddings_csv_layout() {
        let z = Tensor::from_rows(&[vec![0.5, 0.25], vec![1.0, 0.0]]).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &["a".into(), "b".into()], &z).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "patient_id,dim_0,dim_1\na,0.5,0.25\nb,1,0\n"
        );
    }
}
