//! On-disk formats: dataset and basis tables (delimited text), versioned
//! checksummed model artifacts, simulation truth, predictions, fit reports
//! and metric summaries (JSON).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{orthonormalize_basis, EmbeddingBasis};
use crate::benchmark::{results_tsv, BenchmarkResult};
use crate::error::{Result, ScoreError};
use crate::model::{ConstraintSpec, Dataset, ModelParams};
use crate::predict::Prediction;
use crate::simulate::{SimConfig, SimTruth};
use crate::supervised::FitReport;

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const TRUTH_FORMAT_VERSION: u32 = 1;

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn rows_to_mat(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(ScoreError::Parse(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ScoreError::Parse(format!("{what}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

// ---------------------------------------------------------------------------
// Dataset

/// Writes the dataset as delimited text: header `id,u1..ur,y,x1..xp`, one
/// subject per row, empty label cell for unlabeled subjects.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let r = data.n_covariates();
    let p = data.n_codes();
    let mut header = vec!["id".to_string()];
    for k in 1..=r {
        header.push(format!("u{k}"));
    }
    header.push("y".into());
    for j in 1..=p {
        header.push(format!("x{j}"));
    }
    wtr.write_record(&header).map_err(csv_err)?;
    for i in 0..data.n_subjects() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(data.ids()[i].clone());
        for k in 0..r {
            rec.push(format!("{}", data.covariates()[(k, i)]));
        }
        rec.push(match data.label(i) {
            Some(y) => format!("{y}"),
            None => String::new(),
        });
        for j in 0..p {
            rec.push(format!("{}", data.counts()[(j, i)] as u64));
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> ScoreError {
    ScoreError::Parse(format!("csv: {e}"))
}

/// Reads a dataset written by [`save_dataset`] (or by hand in the same
/// layout). Row/column positions in schema errors are 1-based data
/// coordinates (the header is row 0).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() < 3 || header.get(0) != Some("id") {
        return Err(ScoreError::Schema {
            row: 0,
            col: 0,
            msg: "expected header starting with 'id'".into(),
        });
    }
    let mut r = 0usize;
    let mut idx = 1usize;
    while idx < header.len() && header.get(idx) == Some(format!("u{}", r + 1).as_str()) {
        r += 1;
        idx += 1;
    }
    if header.get(idx) != Some("y") {
        return Err(ScoreError::Schema {
            row: 0,
            col: idx,
            msg: "expected label column 'y' after covariates".into(),
        });
    }
    idx += 1;
    let p = header.len() - idx;
    if p == 0 {
        return Err(ScoreError::Schema {
            row: 0,
            col: idx,
            msg: "expected at least one count column".into(),
        });
    }
    for j in 0..p {
        if header.get(idx + j) != Some(format!("x{}", j + 1).as_str()) {
            return Err(ScoreError::Schema {
                row: 0,
                col: idx + j,
                msg: format!("expected count column 'x{}'", j + 1),
            });
        }
    }

    let mut ids = Vec::new();
    let mut covars: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(csv_err)?;
        if record.len() != header.len() {
            return Err(ScoreError::Schema {
                row,
                col: record.len(),
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let id = record.get(0).unwrap_or("").to_string();
        if !seen.insert(id.clone()) {
            return Err(ScoreError::Schema {
                row,
                col: 0,
                msg: format!("duplicate subject id '{id}'"),
            });
        }
        ids.push(id);
        for k in 0..r {
            let cell = record.get(1 + k).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| ScoreError::Schema {
                row,
                col: 1 + k,
                msg: format!("covariate cell '{cell}' is not a number"),
            })?;
            covars.push(v);
        }
        let ycell = record.get(1 + r).unwrap_or("");
        labels.push(match ycell {
            "" => None,
            "0" => Some(0u8),
            "1" => Some(1u8),
            other => {
                return Err(ScoreError::Schema {
                    row,
                    col: 1 + r,
                    msg: format!("label cell '{other}' must be empty, 0 or 1"),
                })
            }
        });
        for j in 0..p {
            let cell = record.get(2 + r + j).unwrap_or("");
            let v: u64 = cell.parse().map_err(|_| ScoreError::Schema {
                row,
                col: 2 + r + j,
                msg: format!("count cell '{cell}' is not a nonnegative integer"),
            })?;
            counts.push(v as f64);
        }
    }
    let n = ids.len();
    if n == 0 {
        return Err(ScoreError::InsufficientData("dataset has no subjects".into()));
    }
    // Cells were pushed row-wise; rebuild column-major subject matrices.
    let counts = DMatrix::from_fn(p, n, |j, i| counts[i * p + j]);
    let covariates = DMatrix::from_fn(r, n, |k, i| covars[i * r + k]);
    Dataset::new(ids, counts, covariates, labels)
}

// ---------------------------------------------------------------------------
// Basis

/// Writes the basis as a headerless delimited numeric matrix (p rows, q
/// columns).
pub fn save_basis(basis: &EmbeddingBasis, path: &Path) -> Result<()> {
    save_matrix(basis.matrix(), path)
}

/// Writes an arbitrary matrix in the basis file layout.
pub fn save_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a p×q numeric matrix and normalizes it onto the basis convention;
/// arbitrary pretrained embeddings are accepted as long as they have full
/// column rank and q < p.
pub fn load_basis(path: &Path) -> Result<EmbeddingBasis> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col_idx, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| ScoreError::Schema {
                row: row_idx + 1,
                col: col_idx,
                msg: format!("basis cell '{cell}' is not a number"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    let raw = rows_to_mat(&rows, "basis")?;
    orthonormalize_basis(&raw)
}

// ---------------------------------------------------------------------------
// Model artifact

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelArtifact {
    format_version: u32,
    codes: usize,
    latent: usize,
    covariates: usize,
    effects: Vec<Vec<f64>>,
    latent_cov: Vec<Vec<f64>>,
    logit_coef: Vec<f64>,
    constraints: ConstraintSpec,
    #[serde(default)]
    checksum: String,
}

fn artifact_checksum(artifact: &ModelArtifact) -> String {
    let mut stripped = artifact.clone();
    stripped.checksum = String::new();
    let payload = serde_json::to_string(&stripped).expect("artifact serializes");
    let digest = Sha256::digest(payload.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// A loaded model artifact.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub theta: ModelParams,
    pub constraints: ConstraintSpec,
    /// Number of codes (p) the model was fit with; checked against the
    /// basis and dataset at prediction time.
    pub codes: usize,
}

/// Writes the fitted parameters with dimensions, constraint constants, a
/// format version and a content checksum.
pub fn save_model(
    theta: &ModelParams,
    constraints: &ConstraintSpec,
    codes: usize,
    path: &Path,
) -> Result<()> {
    theta.validate()?;
    let mut artifact = ModelArtifact {
        format_version: MODEL_FORMAT_VERSION,
        codes,
        latent: theta.q(),
        covariates: theta.r(),
        effects: mat_to_rows(&theta.effects),
        latent_cov: mat_to_rows(&theta.latent_cov),
        logit_coef: theta.logit_coef.iter().copied().collect(),
        constraints: *constraints,
        checksum: String::new(),
    };
    artifact.checksum = artifact_checksum(&artifact);
    fs::write(path, serde_json::to_string_pretty(&artifact).expect("serializes"))?;
    Ok(())
}

/// Reads a model artifact, verifying format version, checksum, and shape
/// consistency.
pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path)?;
    let artifact: ModelArtifact =
        serde_json::from_str(&text).map_err(|e| ScoreError::Parse(format!("model: {e}")))?;
    if artifact.format_version != MODEL_FORMAT_VERSION {
        return Err(ScoreError::VersionMismatch {
            found: artifact.format_version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    if artifact.checksum != artifact_checksum(&artifact) {
        return Err(ScoreError::ChecksumMismatch);
    }
    let effects = rows_to_mat(&artifact.effects, "effects")?;
    let latent_cov = rows_to_mat(&artifact.latent_cov, "latent_cov")?;
    let logit_coef = DVector::from_vec(artifact.logit_coef.clone());
    if effects.nrows() != artifact.latent
        || effects.ncols() != artifact.covariates + 2
        || artifact.latent >= artifact.codes
    {
        return Err(ScoreError::DimensionMismatch(
            "model artifact dimensions are inconsistent".into(),
        ));
    }
    let theta = ModelParams::new(effects, latent_cov, logit_coef)?;
    artifact.constraints.validate()?;
    Ok(ModelFile { theta, constraints: artifact.constraints, codes: artifact.codes })
}

// ---------------------------------------------------------------------------
// Simulation truth

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthArtifact {
    format_version: u32,
    config: SimConfig,
    effects: Vec<Vec<f64>>,
    latent_cov: Vec<Vec<f64>>,
    logit_coef: Vec<f64>,
    /// Subjects as rows, q columns.
    xi_bar: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    labels_full: Vec<u8>,
    hidden: Option<Vec<u8>>,
}

/// Ground truth loaded back from disk (without the basis, which lives in
/// its own file).
#[derive(Debug, Clone)]
pub struct TruthFile {
    pub theta0: ModelParams,
    pub xi_bar: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub labels_full: Vec<u8>,
    pub hidden: Option<Vec<u8>>,
    pub config: SimConfig,
}

pub fn save_truth(truth: &SimTruth, path: &Path) -> Result<()> {
    let artifact = TruthArtifact {
        format_version: TRUTH_FORMAT_VERSION,
        config: truth.config,
        effects: mat_to_rows(&truth.theta0.effects),
        latent_cov: mat_to_rows(&truth.theta0.latent_cov),
        logit_coef: truth.theta0.logit_coef.iter().copied().collect(),
        xi_bar: mat_to_rows(&truth.xi_bar.transpose()),
        w: mat_to_rows(&truth.w.transpose()),
        labels_full: truth.labels_full.clone(),
        hidden: truth.hidden.clone(),
    };
    fs::write(path, serde_json::to_string(&artifact).expect("serializes"))?;
    Ok(())
}

pub fn load_truth(path: &Path) -> Result<TruthFile> {
    let text = fs::read_to_string(path)?;
    let artifact: TruthArtifact =
        serde_json::from_str(&text).map_err(|e| ScoreError::Parse(format!("truth: {e}")))?;
    if artifact.format_version != TRUTH_FORMAT_VERSION {
        return Err(ScoreError::VersionMismatch {
            found: artifact.format_version,
            expected: TRUTH_FORMAT_VERSION,
        });
    }
    let theta0 = ModelParams::new(
        rows_to_mat(&artifact.effects, "effects")?,
        rows_to_mat(&artifact.latent_cov, "latent_cov")?,
        DVector::from_vec(artifact.logit_coef.clone()),
    )?;
    Ok(TruthFile {
        theta0,
        xi_bar: rows_to_mat(&artifact.xi_bar, "xi_bar")?.transpose(),
        w: rows_to_mat(&artifact.w, "w")?.transpose(),
        labels_full: artifact.labels_full,
        hidden: artifact.hidden,
        config: artifact.config,
    })
}

// ---------------------------------------------------------------------------
// Predictions

/// Writes per-subject predictions: `id,gamma` plus `e1..eq` when
/// `with_embedding` is set.
pub fn save_predictions(
    ids: &[String],
    preds: &[Prediction],
    with_embedding: bool,
    path: &Path,
) -> Result<()> {
    if ids.len() != preds.len() {
        return Err(ScoreError::DimensionMismatch(
            "prediction and id counts disagree".into(),
        ));
    }
    let q = preds.first().map(|p| p.embedding.e.len()).unwrap_or(0);
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "gamma".to_string()];
    if with_embedding {
        for k in 1..=q {
            header.push(format!("e{k}"));
        }
    }
    wtr.write_record(&header).map_err(csv_err)?;
    for (id, pred) in ids.iter().zip(preds) {
        let mut rec = vec![id.clone(), format!("{}", pred.gamma)];
        if with_embedding {
            for k in 0..q {
                rec.push(format!("{}", pred.embedding.e[k]));
            }
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Loaded predictions: ids, phenotype probabilities and, when present, the
/// embedding matrix (subjects as columns).
pub struct PredictionsFile {
    pub ids: Vec<String>,
    pub gamma: Vec<f64>,
    pub embeddings: Option<DMatrix<f64>>,
}

pub fn load_predictions(path: &Path) -> Result<PredictionsFile> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("id") || header.get(1) != Some("gamma") {
        return Err(ScoreError::Schema {
            row: 0,
            col: 0,
            msg: "expected header id,gamma[,e1..]".into(),
        });
    }
    let q = header.len() - 2;
    let mut ids = Vec::new();
    let mut gamma = Vec::new();
    let mut emb: Vec<f64> = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(csv_err)?;
        ids.push(record.get(0).unwrap_or("").to_string());
        gamma.push(parse_cell(&record, 1, row)?);
        for k in 0..q {
            emb.push(parse_cell(&record, 2 + k, row)?);
        }
    }
    let embeddings = if q > 0 {
        let n = ids.len();
        Some(DMatrix::from_fn(q, n, |k, i| emb[i * q + k]))
    } else {
        None
    };
    Ok(PredictionsFile { ids, gamma, embeddings })
}

fn parse_cell(record: &csv::StringRecord, col: usize, row: usize) -> Result<f64> {
    let cell = record.get(col).unwrap_or("");
    cell.parse().map_err(|_| ScoreError::Schema {
        row,
        col,
        msg: format!("cell '{cell}' is not a number"),
    })
}

// ---------------------------------------------------------------------------
// Metrics and fit reports

/// Flat metric summary written by evaluation commands. Absent metrics are
/// omitted from the file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricsFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err_theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prauc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brier: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_scored: Option<usize>,
}

pub fn save_metrics(metrics: &MetricsFile, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(metrics).expect("serializes"))?;
    Ok(())
}

pub fn load_metrics(path: &Path) -> Result<MetricsFile> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ScoreError::Parse(format!("metrics: {e}")))
}

/// Serializable view of a fit report (wall time in seconds; θ lives in the
/// model artifact, not here).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub mode: String,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau_iter: Option<usize>,
    pub objective_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err_trace: Option<Vec<f64>>,
    pub clamp_count: u64,
    pub wall_time_secs: f64,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supervised: Option<Box<ReportFile>>,
}

impl ReportFile {
    pub fn from_report(mode: &str, report: &FitReport, supervised: Option<&FitReport>) -> Self {
        Self {
            mode: mode.to_string(),
            converged: report.converged,
            iterations: report.iterations,
            plateau_iter: report.plateau_iter,
            objective_trace: report.objective_trace.clone(),
            err_trace: report.err_trace.clone(),
            clamp_count: report.clamp_count,
            wall_time_secs: report.wall_time.as_secs_f64(),
            warnings: report.warnings.clone(),
            supervised: supervised
                .map(|s| Box::new(ReportFile::from_report("sup", s, None))),
        }
    }
}

pub fn save_report(report: &ReportFile, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report).expect("serializes"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Benchmark output

/// Writes `summary.json` and `results.tsv` into the given directory.
pub fn save_benchmark(results: &[BenchmarkResult], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(results).expect("serializes"),
    )?;
    fs::write(dir.join("results.tsv"), results_tsv(results))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_dataset, Misspec, SimConfig};

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    fn small_data() -> (Dataset, SimTruth) {
        gen_dataset(&SimConfig {
            labeled: 5,
            total: 12,
            codes: 8,
            latent: 2,
            misspec: Misspec::None,
            zero_inflation: 0.0,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn dataset_roundtrip_identity() {
        let (data, _) = small_data();
        let dir = tmpdir();
        let path = dir.path().join("d.csv");
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.ids(), data.ids());
        assert_eq!(back.counts(), data.counts());
        assert_eq!(back.covariates(), data.covariates());
        assert_eq!(back.labels(), data.labels());
    }

    #[test]
    fn toy_file_with_empty_label() {
        let dir = tmpdir();
        let path = dir.path().join("toy.csv");
        fs::write(&path, "id,u1,y,x1,x2\na,1.5,1,3,0\nb,2.0,,0,4\n").unwrap();
        let data = load_dataset(&path).unwrap();
        assert_eq!(data.n_subjects(), 2);
        assert_eq!(data.n_labeled(), 1);
        assert_eq!(data.label(0), Some(1));
        assert_eq!(data.label(1), None);
    }

    #[test]
    fn fractional_count_cell_is_schema_error() {
        let dir = tmpdir();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "id,u1,y,x1\na,1.0,0,3.5\n").unwrap();
        match load_dataset(&path) {
            Err(ScoreError::Schema { row, col, .. }) => {
                assert_eq!((row, col), (1, 3));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_schema_error() {
        let dir = tmpdir();
        let path = dir.path().join("ragged.csv");
        fs::write(&path, "id,u1,y,x1,x2\na,1.0,0,3\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(ScoreError::Schema { row: 1, .. })));
    }

    #[test]
    fn duplicate_id_is_schema_error() {
        let dir = tmpdir();
        let path = dir.path().join("dup.csv");
        fs::write(&path, "id,u1,y,x1\na,1.0,0,3\na,2.0,1,1\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(ScoreError::Schema { row: 2, .. })));
    }

    #[test]
    fn model_roundtrip_bitwise() {
        let (_, truth) = small_data();
        let dir = tmpdir();
        let path = dir.path().join("m.json");
        save_model(&truth.theta0, &ConstraintSpec::default(), 8, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.theta.effects, truth.theta0.effects);
        assert_eq!(back.theta.latent_cov, truth.theta0.latent_cov);
        assert_eq!(back.theta.logit_coef, truth.theta0.logit_coef);
        assert_eq!(back.codes, 8);
    }

    #[test]
    fn tampered_model_fails_checksum() {
        let (_, truth) = small_data();
        let dir = tmpdir();
        let path = dir.path().join("m.json");
        save_model(&truth.theta0, &ConstraintSpec::default(), 8, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("0.2", "0.3");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_model(&path), Err(ScoreError::ChecksumMismatch)));
    }

    #[test]
    fn wrong_version_rejected() {
        let (_, truth) = small_data();
        let dir = tmpdir();
        let path = dir.path().join("m.json");
        save_model(&truth.theta0, &ConstraintSpec::default(), 8, &path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_model(&path), Err(ScoreError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn basis_load_normalizes() {
        let dir = tmpdir();
        let path = dir.path().join("b.csv");
        // A raw, non-orthonormal basis.
        let raw = DMatrix::from_fn(6, 2, |i, j| (i + j + 1) as f64 + if j == 1 { 0.7 } else { 0.0 });
        save_matrix(&raw, &path).unwrap();
        let basis = load_basis(&path).unwrap();
        let g = basis.matrix().tr_mul(basis.matrix()) * (2.0 / 6.0);
        assert!((g - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn square_basis_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("sq.csv");
        save_matrix(&DMatrix::identity(3, 3), &path).unwrap();
        assert!(matches!(load_basis(&path), Err(ScoreError::DimensionMismatch(_))));
    }

    #[test]
    fn truth_roundtrip() {
        let (_, truth) = small_data();
        let dir = tmpdir();
        let path = dir.path().join("t.json");
        save_truth(&truth, &path).unwrap();
        let back = load_truth(&path).unwrap();
        assert_eq!(back.xi_bar, truth.xi_bar);
        assert_eq!(back.labels_full, truth.labels_full);
        assert_eq!(back.theta0.effects, truth.theta0.effects);
        assert_eq!(back.config, truth.config);
    }

    #[test]
    fn metrics_roundtrip_skips_absent_fields() {
        let dir = tmpdir();
        let path = dir.path().join("metrics.json");
        let metrics = MetricsFile {
            err_b: Some(0.12),
            auc: Some(0.9),
            ..Default::default()
        };
        save_metrics(&metrics, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("cosine"));
        assert_eq!(load_metrics(&path).unwrap(), metrics);
    }
}
