//! Cohort manifests: one CSV row per patient plus one matrix file per
//! observed modality, named `<patient_id>_<I|R|T>.emb` in the data directory.

use std::fs;
use std::path::{Path, PathBuf};

use protomiss_core::cohort::{Cohort, CohortStats, Embedding, Modality, ModalityDims, Outcome, PatientRecord};
use serde::{Deserialize, Serialize};

use crate::embfile::{self, Dtype};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const DATA_DIR: &str = "data";

/// A manifest row. `site`, `pfi_time` and `pfi_censored` are optional extras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub patient_id: String,
    pub time_months: f64,
    pub censored: u8,
    #[serde(rename = "has_I")]
    pub has_i: u8,
    #[serde(rename = "has_R")]
    pub has_r: u8,
    #[serde(rename = "has_T")]
    pub has_t: u8,
    #[serde(default)]
    pub site: u32,
    #[serde(default)]
    pub pfi_time: Option<f64>,
    #[serde(default)]
    pub pfi_censored: Option<u8>,
}

fn flag(v: u8, what: &str, id: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(CliError::Config(format!("patient {}: {} must be 0 or 1, got {}", id, what, v))),
    }
}

pub fn embedding_path(data_dir: &Path, id: &str, m: Modality) -> PathBuf {
    data_dir.join(format!("{}_{}.emb", id, m.code()))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("patient id {:?} is not a safe file stem", id)))
    }
}

/// Reads a manifest and the matrices next to it. A modality counts as
/// observed exactly when its file exists; a patient with no file at all is an
/// error.
pub fn load_embeddings(manifest: &Path, data_dir: &Path) -> Result<Cohort> {
    let file = fs::File::open(manifest).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingFile(manifest.to_path_buf()),
        _ => CliError::io(manifest, e),
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut patients = Vec::new();
    let mut dims: [Option<ModalityDims>; 3] = [None; 3];
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        check_id(&row.patient_id)?;
        for (v, what) in [(row.has_i, "has_I"), (row.has_r, "has_R"), (row.has_t, "has_T")] {
            flag(v, what, &row.patient_id)?;
        }
        let mut embeddings: [Option<Embedding>; 3] = [None, None, None];
        for m in Modality::ALL {
            let path = embedding_path(data_dir, &row.patient_id, m);
            if !path.exists() {
                continue;
            }
            let t = embfile::read(&path)?;
            if t.ndim() != 2 {
                return Err(CliError::Format { path, offset: 9, msg: format!("expected a rank-2 matrix, got shape {:?}", t.shape()) });
            }
            let d = &mut dims[m.index()];
            match d {
                None => *d = Some(ModalityDims { len: t.rows(), dim: t.cols() }),
                Some(d) => {
                    if d.dim != t.cols() {
                        return Err(protomiss_core::Error::DimMismatch(format!(
                            "{}: width {} but earlier {} files have width {}",
                            path.display(),
                            t.cols(),
                            m.name(),
                            d.dim
                        ))
                        .into());
                    }
                    d.len = d.len.max(t.rows());
                }
            }
            embeddings[m.index()] = Some(Embedding::new(t)?);
        }
        if embeddings.iter().all(Option::is_none) {
            return Err(CliError::MissingFile(embedding_path(data_dir, &row.patient_id, Modality::Image)));
        }
        let pfi = match (row.pfi_time, row.pfi_censored) {
            (Some(t), Some(c)) => Some(Outcome { time_months: t, censored: flag(c, "pfi_censored", &row.patient_id)? }),
            (None, None) => None,
            _ => return Err(CliError::Config(format!("patient {}: pfi_time and pfi_censored must be given together", row.patient_id))),
        };
        patients.push(PatientRecord {
            survival: Outcome { time_months: row.time_months, censored: flag(row.censored, "censored", &row.patient_id)? },
            id: row.patient_id,
            embeddings,
            pfi,
            site: row.site,
        });
    }
    let dims = dims.map(|d| d.unwrap_or(ModalityDims { len: 0, dim: 0 }));
    if patients.is_empty() {
        return Err(CliError::Config(format!("{} lists no patients", manifest.display())));
    }
    Ok(Cohort::new(patients, dims)?)
}

pub fn rows(cohort: &Cohort) -> Vec<Row> {
    cohort
        .patients
        .iter()
        .map(|p| {
            let a = p.availability();
            Row {
                patient_id: p.id.clone(),
                time_months: p.survival.time_months,
                censored: p.survival.censored as u8,
                has_i: a.has(Modality::Image) as u8,
                has_r: a.has(Modality::Rna) as u8,
                has_t: a.has(Modality::Text) as u8,
                site: p.site,
                pfi_time: p.pfi.map(|o| o.time_months),
                pfi_censored: p.pfi.map(|o| o.censored as u8),
            }
        })
        .collect()
}

/// Writes `dir/manifest.csv` and `dir/data/*.emb` in f64.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    let data = dir.join(DATA_DIR);
    fs::create_dir_all(&data).map_err(|e| CliError::io(&data, e))?;
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path)?;
    for r in rows(cohort) {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    for p in &cohort.patients {
        check_id(&p.id)?;
        for m in Modality::ALL {
            if let Some(e) = p.embedding(m) {
                embfile::write(&embedding_path(&data, &p.id, m), &e.matrix, Dtype::F64)?;
            }
        }
    }
    Ok(())
}

/// Loads a cohort written by [`write_cohort`].
pub fn load_dir(dir: &Path) -> Result<Cohort> {
    load_embeddings(&dir.join(MANIFEST), &dir.join(DATA_DIR))
}

pub fn write_stats(stats: &CohortStats, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "n_trimodal", "os_events", "os_censored", "os", "mortality_3y_pos", "mortality_3y_neg", "recurrence_3y_pos", "recurrence_3y_neg"])?;
    w.write_record([
        stats.n.to_string(),
        stats.n_trimodal.to_string(),
        stats.os_events.to_string(),
        stats.os_censored.to_string(),
        format!("{} / {}", stats.os_events, stats.os_censored),
        stats.mortality_pos.to_string(),
        stats.mortality_neg.to_string(),
        stats.recurrence_pos.to_string(),
        stats.recurrence_neg.to_string(),
    ])?;
    w.flush().map_err(|e| CliError::io(path, e))
}
