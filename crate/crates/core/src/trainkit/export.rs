//! Run artifacts: loss logs, metrics, embeddings, importance scores and a
//! binary parameter snapshot.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::config::TrainConfig;
use super::train::{
    evaluate, importance_scores, initialise, prepare_cohort, EpochRecord, Evaluation, ImportanceScores,
    TrainOutcome, TrainedModel,
};
use crate::data::Cohort;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::fusion::write_embeddings;

pub const LOSSES_FILE: &str = "losses.csv";
pub const KL_FILE: &str = "kl.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.json";

pub const LOSS_HEADER: [&str; 9] = [
    "epoch",
    "l_image",
    "l_clinical",
    "l_pos",
    "l_neg",
    "l_contrastive",
    "l_diag",
    "l_total",
    "kl_alignment",
];

const PARAMS_MAGIC: &[u8; 8] = b"CGMCLPRM";
const PARAMS_VERSION: u32 = 1;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_losses<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_HEADER)?;
    for r in history {
        let l = &r.report;
        let row = [
            l.l_image,
            l.l_clinical,
            l.l_pos,
            l.l_neg,
            l.l_contrastive,
            l.l_diag,
            l.l_total,
            r.kl_alignment,
        ];
        let mut rec = vec![r.epoch.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<losses>", e))?;
    Ok(())
}

pub fn write_kl<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "kl_alignment"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.kl_alignment.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<kl>", e))?;
    Ok(())
}

/// One row per scope (`fused`, `image`, `clinical`).
pub fn write_metrics<W: Write>(eval: &Evaluation, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scope", "acc", "sen", "spe", "ppv", "npv", "auc"])?;
    for (scope, m) in [("fused", &eval.fused), ("image", &eval.image), ("clinical", &eval.clinical)] {
        let mut rec = vec![scope.to_string()];
        rec.extend(m.values().iter().map(|(_, v)| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn write_importance<W: Write>(patient_ids: &[String], scores: &ImportanceScores, out: W) -> Result<()> {
    let s = &scores.scores;
    if s.rows() != patient_ids.len() || s.cols() != scores.feature_names.len() {
        return Err(Error::dim("write_importance", "score shape does not match ids and names"));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["patient_id".to_string()];
    header.extend(scores.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in patient_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(s.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<importance>", e))?;
    Ok(())
}

/// Serialises every parameter as `name, shape, little-endian f64 data`,
/// in name order.
pub fn write_params<W: Write>(store: &ParamStore, mut out: W) -> std::io::Result<()> {
    out.write_all(PARAMS_MAGIC)?;
    out.write_all(&PARAMS_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, param) in store.iter() {
        let value = param.value();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &d in value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in value.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()
}

fn take<const N: usize>(buf: &mut &[u8]) -> Result<[u8; N]> {
    if buf.len() < N {
        return Err(Error::Data("parameter file is truncated".into()));
    }
    let (head, rest) = buf.split_at(N);
    *buf = rest;
    Ok(head.try_into().expect("length checked"))
}

pub fn read_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut buf = bytes;
    if &take::<8>(&mut buf)? != PARAMS_MAGIC {
        return Err(Error::Data("not a parameter file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf)?);
    if version != PARAMS_VERSION {
        return Err(Error::Data(format!("unsupported parameter file version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut buf)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut buf)?) as usize;
        if buf.len() < len {
            return Err(Error::Data("parameter file is truncated".into()));
        }
        let name = std::str::from_utf8(&buf[..len])
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
            .to_string();
        buf = &buf[len..];
        let rank = u32::from_le_bytes(take(&mut buf)?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(take(&mut buf)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if buf.len() < numel * 8 {
            return Err(Error::Data("parameter file is truncated".into()));
        }
        let data = (0..numel)
            .map(|_| Ok(f64::from_le_bytes(take(&mut buf)?)))
            .collect::<Result<Vec<_>>>()?;
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if !buf.is_empty() {
        return Err(Error::Data("trailing bytes after parameters".into()));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    write_params(store, create(path)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_params(&bytes)
}

/// Copies `loaded` into `target`, requiring identical names and shapes.
pub fn restore_params(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    let expected: Vec<&str> = target.names().collect();
    let found: Vec<&str> = loaded.names().collect();
    if expected != found {
        return Err(Error::Contract(format!(
            "parameter names differ from the model built by this config: expected {expected:?}, found {found:?}"
        )));
    }
    let names: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
    for name in names {
        target.set_value(&name, loaded.value(&name)?.clone())?;
    }
    Ok(())
}

/// Rebuilds the model a config trained: same cohort split, same initial
/// parameters and hence the same graphs, then swaps in saved parameters.
pub fn load_trained(config: &TrainConfig, params: &Path) -> Result<(TrainedModel, Cohort)> {
    let cohort = prepare_cohort(config, config.seed)?;
    let mut trained = initialise(&cohort, config)?;
    restore_params(&mut trained.store, &load_params(params)?)?;
    Ok((trained, cohort))
}

/// Writes every artifact of a finished run into `dir`.
pub fn export_run(dir: &Path, outcome: &TrainOutcome, eval: &Evaluation, cohort: &Cohort) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trained = &outcome.trained;
    write_losses(&outcome.history, create(&dir.join(LOSSES_FILE))?)?;
    write_kl(&outcome.history, create(&dir.join(KL_FILE))?)?;
    write_metrics(eval, create(&dir.join(METRICS_FILE))?)?;

    let pass = trained.inspect()?;
    let ids = &cohort.patient_ids;
    for (scope, z) in [
        ("shared", &pass.bundle.z_shared),
        ("image", &pass.bundle.z_image),
        ("clinical", &pass.bundle.z_clinical),
    ] {
        write_embeddings(create(&dir.join(format!("embeddings_{scope}.csv")))?, ids, z)?;
    }
    if trained.model.zeta_clinical.is_some() {
        let scores = importance_scores(trained, cohort)?;
        write_importance(ids, &scores, create(&dir.join(IMPORTANCE_FILE))?)?;
    }
    trained.context.graph_image.save_edge_list(&dir.join("graph_image.txt"))?;
    trained.context.graph_clinical.save_edge_list(&dir.join("graph_clinical.txt"))?;
    save_params(&trained.store, &dir.join(PARAMS_FILE))?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, trained.config.to_json()).map_err(|e| Error::io(config_path, e))?;
    Ok(())
}

/// Evaluates a saved parameter file under `config`.
pub fn evaluate_saved(config: &TrainConfig, params: &Path) -> Result<Evaluation> {
    let (trained, cohort) = load_trained(config, params)?;
    evaluate(&trained, &cohort)
}
