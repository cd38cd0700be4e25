//! Cohort schema, CSV ingestion, synthetic cohorts and stratified splits.
//!
//! All three input files are comma-separated UTF-8 with a mandatory header
//! row and a `patient_id` key column:
//!
//! - image features: `patient_id,f_0,...,f_{D-1}`
//! - clinical features: `patient_id,<named columns>`
//! - labels: `patient_id,<one or more label columns>`

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const ID_COLUMN: &str = "patient_id";

/// Row-aligned multimodal patient data.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub patient_ids: Vec<String>,
    pub image_features: Tensor,
    pub image_names: Vec<String>,
    pub clinical_features: Tensor,
    pub clinical_names: Vec<String>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// `true` for training patients.
    pub split: Vec<bool>,
}

impl Cohort {
    pub fn n(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i]).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.split[i]).collect()
    }

    /// Checks row alignment, label range, finiteness and training coverage
    /// of every class.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.image_features.rows() != n
            || self.clinical_features.rows() != n
            || self.labels.len() != n
            || self.split.len() != n
        {
            return Err(Error::Data("cohort arrays are not row-aligned".into()));
        }
        if self.image_features.cols() != self.image_names.len()
            || self.clinical_features.cols() != self.clinical_names.len()
        {
            return Err(Error::Data("feature names do not match feature widths".into()));
        }
        if !self.image_features.all_finite() || !self.clinical_features.all_finite() {
            return Err(Error::Data("cohort contains non-finite features".into()));
        }
        let mut seen = vec![false; self.num_classes()];
        for (i, &c) in self.labels.iter().enumerate() {
            if c >= seen.len() {
                return Err(Error::Data(format!("label {c} of patient {i} out of range")));
            }
            if self.split[i] {
                seen[c] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "class `{}` has no training patients",
                self.class_names[c]
            )));
        }
        Ok(())
    }
}

struct Table {
    file: String,
    columns: Vec<String>,
    rows: BTreeMap<String, Vec<String>>,
}

fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{file}: {other:?}")),
        })?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some(ID_COLUMN) {
        return Err(Error::Data(format!(
            "{file}: first column must be `{ID_COLUMN}`"
        )));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows = BTreeMap::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let id = record.get(0).unwrap_or_default().to_string();
        let values: Vec<String> = record.iter().skip(1).map(str::to_string).collect();
        if values.len() != columns.len() {
            return Err(Error::Parse {
                file: file.clone(),
                row: row_idx + 1,
                column: ID_COLUMN.into(),
                detail: format!("expected {} fields, found {}", columns.len(), values.len()),
            });
        }
        if rows.insert(id.clone(), values).is_some() {
            return Err(Error::Data(format!("{file}: duplicate patient id `{id}`")));
        }
    }
    Ok(Table {
        file,
        columns,
        rows,
    })
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.to_ascii_lowercase().as_str(), "" | "na" | "nan" | "null")
}

fn numeric_matrix(table: &Table, ids: &[String]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ids.len() * table.columns.len());
    let mut missing = Vec::new();
    for (row, id) in ids.iter().enumerate() {
        for (col, cell) in table.rows[id].iter().enumerate() {
            if is_missing(cell) {
                missing.push(format!("{id}:{}", table.columns[col]));
                data.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                file: table.file.clone(),
                row: row + 1,
                column: table.columns[col].clone(),
                detail: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                missing.push(format!("{id}:{}", table.columns[col]));
            }
            data.push(v);
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: missing or non-finite values at {}",
            table.file,
            missing.join(", ")
        )));
    }
    Tensor::matrix(ids.len(), table.columns.len(), data)
}

/// Reads the three cohort files and inner-joins them on `patient_id`.
///
/// Rows are ordered by ascending id (numerically when every id is an
/// integer). Features are left unstandardised and every patient is marked
/// as training; see [`split_cohort`] and [`standardize`].
pub fn load_cohort(
    image_csv: &Path,
    clinical_csv: &Path,
    labels_csv: &Path,
    label_column: Option<&str>,
) -> Result<Cohort> {
    let image = read_table(image_csv)?;
    let clinical = read_table(clinical_csv)?;
    let labels = read_table(labels_csv)?;

    let keys = |t: &Table| t.rows.keys().cloned().collect::<BTreeSet<_>>();
    let (ki, kc, kl) = (keys(&image), keys(&clinical), keys(&labels));
    let common: BTreeSet<String> = ki.intersection(&kc).cloned().collect::<BTreeSet<_>>()
        .intersection(&kl)
        .cloned()
        .collect();
    let orphans: BTreeSet<String> = ki
        .iter()
        .chain(&kc)
        .chain(&kl)
        .filter(|id| !common.contains(*id))
        .cloned()
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Join {
            orphans: orphans.into_iter().collect(),
        });
    }
    let mut ids: Vec<String> = common.into_iter().collect();
    ids.sort_by(|a, b| id_order(a, b));
    if ids.is_empty() {
        return Err(Error::Data("no patients after joining".into()));
    }

    let label_idx = match label_column {
        Some(name) => labels
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("label column `{name}` not found")))?,
        None if labels.columns.len() == 1 => 0,
        None => {
            return Err(Error::Config(format!(
                "labels file has columns {:?}; choose one with label_column",
                labels.columns
            )))
        }
    };
    let raw_labels: Vec<&str> = ids
        .iter()
        .map(|id| labels.rows[id][label_idx].as_str())
        .collect();
    if let Some(pos) = raw_labels.iter().position(|l| is_missing(l)) {
        return Err(Error::Data(format!("patient `{}` has no label", ids[pos])));
    }
    let mut class_names: Vec<String> = raw_labels
        .iter()
        .map(|s| s.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    class_names.sort_by(|a, b| id_order(a, b));
    let label_ids = raw_labels
        .iter()
        .map(|l| class_names.iter().position(|c| c == l).expect("collected above"))
        .collect();

    let cohort = Cohort {
        image_features: numeric_matrix(&image, &ids)?,
        image_names: image.columns,
        clinical_features: numeric_matrix(&clinical, &ids)?,
        clinical_names: clinical.columns,
        labels: label_ids,
        class_names,
        split: vec![true; ids.len()],
        patient_ids: ids,
    };
    cohort.validate()?;
    Ok(cohort)
}

fn write_table(path: &Path, names: &[String], ids: &[String], cells: impl Fn(usize) -> Vec<String>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let mut header = vec![ID_COLUMN.to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(cells(i));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// File names used by [`write_cohort`].
pub const IMAGE_FILE: &str = "image.csv";
pub const CLINICAL_FILE: &str = "clinical.csv";
pub const LABELS_FILE: &str = "labels.csv";

/// Writes `image.csv`, `clinical.csv` and `labels.csv` (label column
/// `label`) into `dir`. Values use the shortest round-trip representation.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fmt_row = |t: &Tensor, i: usize| t.row(i).iter().map(f64::to_string).collect();
    write_table(&dir.join(IMAGE_FILE), &cohort.image_names, &cohort.patient_ids, |i| {
        fmt_row(&cohort.image_features, i)
    })?;
    write_table(&dir.join(CLINICAL_FILE), &cohort.clinical_names, &cohort.patient_ids, |i| {
        fmt_row(&cohort.clinical_features, i)
    })?;
    write_table(&dir.join(LABELS_FILE), &["label".to_string()], &cohort.patient_ids, |i| {
        vec![cohort.class_names[cohort.labels[i]].clone()]
    })
}

/// Parameters of a synthetic two-modality cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub num_classes: usize,
    /// Image feature width.
    pub image_dim: usize,
    /// Clinical feature width.
    pub clinical_dim: usize,
    /// Norm of each class mean in feature space.
    pub separation: f64,
    /// Share of the class signal (and per-patient latent) common to both
    /// modalities, in `[0, 1]`.
    pub modality_correlation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 200,
            num_classes: 2,
            image_dim: 16,
            clinical_dim: 12,
            separation: 4.0,
            modality_correlation: 0.5,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

/// Width of the latent space shared by both modalities.
const SHARED_LATENT_DIM: usize = 4;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.n < 4 * self.num_classes {
            return Err(Error::Config(format!(
                "n = {} is below 4 patients per class",
                self.n
            )));
        }
        if self.image_dim < SHARED_LATENT_DIM || self.clinical_dim < SHARED_LATENT_DIM {
            return Err(Error::Config(format!(
                "feature widths must be at least {SHARED_LATENT_DIM}"
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_correlation) {
            return Err(Error::Config("modality_correlation must lie in [0, 1]".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// `dim × SHARED_LATENT_DIM` matrix with orthonormal columns, column-major.
fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(SHARED_LATENT_DIM);
    while basis.len() < SHARED_LATENT_DIM {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let v = unit(v);
        if v.iter().any(|x| *x != 0.0) {
            basis.push(v);
        }
    }
    basis
}

fn embed(basis: &[Vec<f64>], latent: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (col, &z) in basis.iter().zip(latent) {
        out.iter_mut().zip(col).for_each(|(o, c)| *o += z * c);
    }
    out
}

/// Generates a balanced synthetic cohort.
///
/// Each class `k` owns a unit latent direction `s_k` shared by both
/// modalities and a private unit direction per modality. With correlation
/// `ρ`, the image mean is
/// `separation · (√ρ · P_I s_k + √(1-ρ) · t_k^I)` where `P_I` embeds the
/// latent space with orthonormal columns; the clinical mean is built the
/// same way. Every patient adds a shared latent jitter `√ρ · P η_i` and
/// isotropic noise, both with standard deviation `noise_scale`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, f, c) = (spec.image_dim, spec.clinical_dim, spec.num_classes);
    let rho = spec.modality_correlation;
    let (shared_w, private_w) = (rho.sqrt(), (1.0 - rho).sqrt());

    let basis_i = orthonormal_basis(&mut rng, d);
    let basis_c = orthonormal_basis(&mut rng, f);
    let mut means_i = Vec::with_capacity(c);
    let mut means_c = Vec::with_capacity(c);
    for _ in 0..c {
        let shared = unit(gaussian_vec(&mut rng, SHARED_LATENT_DIM));
        let priv_i = unit(gaussian_vec(&mut rng, d));
        let priv_c = unit(gaussian_vec(&mut rng, f));
        let mix = |basis: &[Vec<f64>], private: &[f64], dim: usize| -> Vec<f64> {
            embed(basis, &shared, dim)
                .iter()
                .zip(private)
                .map(|(s, p)| spec.separation * (shared_w * s + private_w * p))
                .collect()
        };
        means_i.push(mix(&basis_i, &priv_i, d));
        means_c.push(mix(&basis_c, &priv_c, f));
    }

    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let mut image = Vec::with_capacity(spec.n * d);
    let mut clinical = Vec::with_capacity(spec.n * f);
    for &k in &labels {
        let eta: Vec<f64> = gaussian_vec(&mut rng, SHARED_LATENT_DIM)
            .into_iter()
            .map(|v| v * spec.noise_scale * shared_w)
            .collect();
        let jitter_i = embed(&basis_i, &eta, d);
        let jitter_c = embed(&basis_c, &eta, f);
        for (m, j) in means_i[k].iter().zip(&jitter_i) {
            let e: f64 = StandardNormal.sample(&mut rng);
            image.push(m + j + spec.noise_scale * e);
        }
        for (m, j) in means_c[k].iter().zip(&jitter_c) {
            let e: f64 = StandardNormal.sample(&mut rng);
            clinical.push(m + j + spec.noise_scale * e);
        }
    }

    let cohort = Cohort {
        patient_ids: (0..spec.n).map(|i| i.to_string()).collect(),
        image_features: Tensor::matrix(spec.n, d, image)?,
        image_names: (0..d).map(|j| format!("f_{j}")).collect(),
        clinical_features: Tensor::matrix(spec.n, f, clinical)?,
        clinical_names: (0..f).map(|j| format!("c_{j}")).collect(),
        labels,
        class_names: (0..c).map(|k| k.to_string()).collect(),
        split: vec![true; spec.n],
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Stratified train/test assignment.
///
/// The training total is `round(fraction · n)`, shared out across classes
/// by largest remainder (ties to the lower class id); every class keeps at
/// least one patient on each side.
pub fn split_cohort(cohort: &Cohort, train_fraction: f64, seed: u64) -> Result<Cohort> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let classes = cohort.num_classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in cohort.labels.iter().enumerate() {
        members[c].push(i);
    }
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(Error::Stratification(format!(
            "class `{}` has {} member(s); at least 2 are needed",
            cohort.class_names[c],
            m.len()
        )));
    }

    let target = (train_fraction * cohort.n() as f64).round() as usize;
    let exact: Vec<f64> = members.iter().map(|m| train_fraction * m.len() as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = counts.iter().sum();
    for &c in order.iter().cycle().take(classes * 2) {
        if assigned >= target {
            break;
        }
        if counts[c] < members[c].len() - 1 {
            counts[c] += 1;
            assigned += 1;
        }
    }
    for (c, count) in counts.iter_mut().enumerate() {
        *count = (*count).clamp(1, members[c].len() - 1);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = vec![false; cohort.n()];
    for (c, m) in members.iter().enumerate() {
        let mut shuffled = m.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..counts[c]] {
            split[i] = true;
        }
    }
    let mut out = cohort.clone();
    out.split = split;
    out.validate()?;
    Ok(out)
}

/// Per-column z-score parameters estimated on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub image_mean: Vec<f64>,
    pub image_std: Vec<f64>,
    pub clinical_mean: Vec<f64>,
    pub clinical_std: Vec<f64>,
}

fn column_stats(t: &Tensor, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let cols = t.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; cols];
    for &i in rows {
        mean.iter_mut().zip(t.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for &i in rows {
        for (j, v) in t.row(i).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    // population std; constant columns are only centred
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn apply(t: &mut Tensor, mean: &[f64], std: &[f64]) {
    let cols = t.cols();
    for (idx, v) in t.data_mut().iter_mut().enumerate() {
        let j = idx % cols;
        *v = (*v - mean[j]) / std[j];
    }
}

/// Z-scores both feature matrices in place with training-split statistics.
pub fn standardize(cohort: &mut Cohort) -> Result<Standardization> {
    let train = cohort.train_indices();
    if train.is_empty() {
        return Err(Error::Data("cannot standardise without training patients".into()));
    }
    let (image_mean, image_std) = column_stats(&cohort.image_features, &train);
    let (clinical_mean, clinical_std) = column_stats(&cohort.clinical_features, &train);
    apply(&mut cohort.image_features, &image_mean, &image_std);
    apply(&mut cohort.clinical_features, &clinical_mean, &clinical_std);
    Ok(Standardization {
        image_mean,
        image_std,
        clinical_mean,
        clinical_std,
    })
}
