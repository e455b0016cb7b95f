//! Ranking features derived from per-candidate score families.
//!
//! Each family contributes five columns per candidate:
//! `a` the score, `b` the group max, `c` the group mean, `d = a - b` and
//! `e = a - c`. A family that can be missing for some samples also gets an
//! `avail` column (1 present, 0 imputed); imputed cells are zero.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, CANDIDATES_PER_SAMPLE};
use crate::exec::Exec;

pub const STEPS: [&str; 5] = ["a", "b", "c", "d", "e"];
pub const AVAIL: &str = "avail";
pub const IMPUTED: f64 = 0.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("non-finite score in family `{family}` for sample {sample_id}")]
    NonFiniteScore { family: String, sample_id: usize },
    #[error("family `{family}` is misaligned with the dataset: {reason}")]
    GroupMisalignment { family: String, reason: String },
    #[error("feature schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("no feature families selected")]
    NoFamilies,
    #[error("feature file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("feature file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Scores of one scoring system, one entry per dataset sample (in dataset
/// order). `None` marks a sample the family has no evidence for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyScores {
    pub family_id: String,
    pub scores: Vec<Option<Vec<f64>>>,
    /// Always emit an availability column, even when no sample is missing.
    /// Keeps train and test schemas equal for families such as KB lookups.
    pub optional: bool,
}

impl FamilyScores {
    pub fn new(family_id: impl Into<String>, scores: Vec<Option<Vec<f64>>>) -> Self {
        FamilyScores {
            family_id: family_id.into(),
            scores,
            optional: false,
        }
    }

    pub fn optional(mut self, optional: bool) -> Self {
        self.optional = optional;
        self
    }

    pub fn needs_avail(&self) -> bool {
        self.optional || self.scores.iter().any(Option::is_none)
    }
}

/// Steps (a)-(e) for one group of scores.
pub fn extract_family_features(scores: &[f64]) -> Result<Vec<[f64; 5]>, FeatureError> {
    if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
        return Err(FeatureError::NonFiniteScore {
            family: String::new(),
            sample_id: 0,
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(scores.iter().map(|&a| [a, max, mean, a - max, a - mean]).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyColumns {
    pub family_id: String,
    pub avail: bool,
}

/// Column layout of a feature matrix: families in order, five step columns
/// each, followed by that family's availability column when present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub families: Vec<FamilyColumns>,
}

impl FeatureSchema {
    pub fn columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for f in &self.families {
            for step in STEPS {
                cols.push(format!("{}:{step}", f.family_id));
            }
            if f.avail {
                cols.push(format!("{}:{AVAIL}", f.family_id));
            }
        }
        cols
    }

    pub fn n_columns(&self) -> usize {
        self.families.iter().map(|f| 5 + usize::from(f.avail)).sum()
    }

    /// Hex SHA-256 over the column names.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in self.columns() {
            h.update(c.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Row-major candidate features, ten consecutive rows per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub schema: FeatureSchema,
    pub sample_ids: Vec<usize>,
    /// Candidate image ids, one per row.
    pub candidate_ids: Vec<String>,
    pub values: Vec<f64>,
    /// 1 for the gold candidate, 0 otherwise.
    pub labels: Option<Vec<u8>>,
}

impl FeatureMatrix {
    pub fn n_cols(&self) -> usize {
        self.schema.n_columns()
    }

    pub fn n_rows(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn n_groups(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn group_size(&self) -> usize {
        CANDIDATES_PER_SAMPLE
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.n_cols();
        &self.values[r * n..(r + 1) * n]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n_cols() + c]
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.schema.columns().iter().position(|c| c == name)
    }

    pub fn group_rows(&self, g: usize) -> std::ops::Range<usize> {
        g * CANDIDATES_PER_SAMPLE..(g + 1) * CANDIDATES_PER_SAMPLE
    }

    /// CSV with header `sample_id,candidate_id,label,<columns>` and the schema
    /// beside it (see [`schema_path`]). Unlabeled matrices leave `label`
    /// empty. Floats use the shortest round-trip representation.
    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let io_err = |source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        };
        let csv_err = |e: csv::Error| FeatureError::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["sample_id".to_string(), "candidate_id".into(), "label".into()];
        header.extend(self.schema.columns());
        w.write_record(&header).map_err(csv_err)?;
        for r in 0..self.n_rows() {
            let mut rec = vec![
                self.sample_ids[r / CANDIDATES_PER_SAMPLE].to_string(),
                self.candidate_ids[r].clone(),
                self.labels
                    .as_ref()
                    .map(|l| l[r].to_string())
                    .unwrap_or_default(),
            ];
            rec.extend(self.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(io_err)?;
        let schema = serde_json::to_string_pretty(&self.schema).expect("schema serializes");
        fs::write(schema_path(path), schema + "\n").map_err(io_err)
    }

    pub fn read_csv(path: &Path) -> Result<Self, FeatureError> {
        let format = |reason: String| FeatureError::Format {
            path: path.display().to_string(),
            reason,
        };
        let sp = schema_path(path);
        let schema_text = fs::read_to_string(&sp).map_err(|source| FeatureError::Io {
            path: sp.display().to_string(),
            source,
        })?;
        let schema: FeatureSchema =
            serde_json::from_str(&schema_text).map_err(|e| format(e.to_string()))?;
        let mut rdr = csv::Reader::from_path(path).map_err(|e| format(e.to_string()))?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| format(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let columns = schema.columns();
        if header.len() < 3 || header[3..] != columns[..] {
            return Err(FeatureError::SchemaMismatch(format!(
                "{} header does not match its schema",
                path.display()
            )));
        }
        let mut sample_ids = Vec::new();
        let mut candidate_ids = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut labeled = None;
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| format(e.to_string()))?;
            let sid: usize = rec[0]
                .parse()
                .map_err(|_| format(format!("row {}: bad sample_id", r + 1)))?;
            if r % CANDIDATES_PER_SAMPLE == 0 {
                sample_ids.push(sid);
            } else if sample_ids.last() != Some(&sid) {
                return Err(format(format!("row {}: group of sample {sid} is not contiguous", r + 1)));
            }
            candidate_ids.push(rec[1].to_string());
            let has_label = !rec[2].is_empty();
            if *labeled.get_or_insert(has_label) != has_label {
                return Err(format(format!("row {}: labels present on some rows only", r + 1)));
            }
            if has_label {
                labels.push(
                    rec[2]
                        .parse()
                        .map_err(|_| format(format!("row {}: bad label", r + 1)))?,
                );
            }
            for c in 3..rec.len() {
                values.push(
                    rec[c]
                        .parse::<f64>()
                        .map_err(|_| format(format!("row {}: bad value `{}`", r + 1, &rec[c])))?,
                );
            }
        }
        if candidate_ids.len() % CANDIDATES_PER_SAMPLE != 0 {
            return Err(format("row count is not a multiple of the group size".into()));
        }
        Ok(FeatureMatrix {
            schema,
            sample_ids,
            candidate_ids,
            values,
            labels: labeled.unwrap_or(false).then_some(labels),
        })
    }
}

/// `features.csv` -> `features.schema.json`.
pub fn schema_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("schema.json")
}

/// Builds the matrix with a schema derived from the families.
pub fn assemble_matrix(
    families: &[FamilyScores],
    dataset: &Dataset,
    with_labels: bool,
    exec: Exec,
) -> Result<FeatureMatrix, FeatureError> {
    let schema = FeatureSchema {
        families: families
            .iter()
            .map(|f| FamilyColumns {
                family_id: f.family_id.clone(),
                avail: f.needs_avail(),
            })
            .collect(),
    };
    assemble_matrix_for_schema(families, dataset, with_labels, &schema, exec)
}

/// Builds the matrix with a fixed schema, e.g. the one a model was trained
/// on. Families are matched by id; extra families are ignored.
pub fn assemble_matrix_for_schema(
    families: &[FamilyScores],
    dataset: &Dataset,
    with_labels: bool,
    schema: &FeatureSchema,
    exec: Exec,
) -> Result<FeatureMatrix, FeatureError> {
    if schema.families.is_empty() {
        return Err(FeatureError::NoFamilies);
    }
    let by_id: HashMap<&str, &FamilyScores> =
        families.iter().map(|f| (f.family_id.as_str(), f)).collect();
    let mut ordered = Vec::with_capacity(schema.families.len());
    for col in &schema.families {
        let fam = by_id.get(col.family_id.as_str()).ok_or_else(|| {
            FeatureError::SchemaMismatch(format!("family `{}` is not available", col.family_id))
        })?;
        if fam.scores.len() != dataset.len() {
            return Err(FeatureError::GroupMisalignment {
                family: fam.family_id.clone(),
                reason: format!("{} score groups for {} samples", fam.scores.len(), dataset.len()),
            });
        }
        if !col.avail && fam.scores.iter().any(Option::is_none) {
            log::warn!(
                "family `{}` has missing samples but the schema has no availability column; imputing",
                fam.family_id
            );
        }
        ordered.push((*fam, col.avail));
    }
    let labels = if with_labels {
        let mut labels = Vec::with_capacity(dataset.len() * CANDIDATES_PER_SAMPLE);
        for s in &dataset.samples {
            let gold = s.gold_index().ok_or_else(|| {
                FeatureError::SchemaMismatch(format!("sample {} has no gold label", s.sample_id))
            })?;
            labels.extend((0..CANDIDATES_PER_SAMPLE).map(|j| u8::from(j == gold)));
        }
        Some(labels)
    } else {
        None
    };

    let n_cols = schema.n_columns();
    let blocks = exec.map_range(dataset.len(), |i| -> Result<Vec<f64>, FeatureError> {
        let sample = &dataset.samples[i];
        let mut block = vec![0.0; CANDIDATES_PER_SAMPLE * n_cols];
        let mut col = 0;
        for (fam, avail) in &ordered {
            match &fam.scores[i] {
                Some(scores) => {
                    if scores.len() != CANDIDATES_PER_SAMPLE {
                        return Err(FeatureError::GroupMisalignment {
                            family: fam.family_id.clone(),
                            reason: format!(
                                "sample {} has {} scores",
                                sample.sample_id,
                                scores.len()
                            ),
                        });
                    }
                    let rows = extract_family_features(scores).map_err(|_| {
                        FeatureError::NonFiniteScore {
                            family: fam.family_id.clone(),
                            sample_id: sample.sample_id,
                        }
                    })?;
                    for (j, steps) in rows.iter().enumerate() {
                        block[j * n_cols + col..j * n_cols + col + 5].copy_from_slice(steps);
                        if *avail {
                            block[j * n_cols + col + 5] = 1.0;
                        }
                    }
                }
                None => {
                    for j in 0..CANDIDATES_PER_SAMPLE {
                        block[j * n_cols + col..j * n_cols + col + 5].fill(IMPUTED);
                    }
                }
            }
            col += 5 + usize::from(*avail);
        }
        Ok(block)
    });
    let mut values = Vec::with_capacity(dataset.len() * CANDIDATES_PER_SAMPLE * n_cols);
    for b in blocks {
        values.extend(b?);
    }
    Ok(FeatureMatrix {
        schema: schema.clone(),
        sample_ids: dataset.samples.iter().map(|s| s.sample_id).collect(),
        candidate_ids: dataset
            .samples
            .iter()
            .flat_map(|s| s.candidates.iter().cloned())
            .collect(),
        values,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use proptest::prelude::*;

    fn dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let cands: Vec<String> = (0..10).map(|k| format!("s{i}c{k}.jpg")).collect();
                let gold = cands[i % 10].clone();
                Sample::new(i, "w", "w x", cands, Some(gold)).unwrap()
            })
            .collect();
        Dataset {
            split_name: "t".into(),
            samples,
            image_dir: PathBuf::new(),
        }
    }

    fn scores(seed: usize) -> Vec<f64> {
        (0..10).map(|k| ((seed * 7 + k * 13) % 17) as f64 / 10.0).collect()
    }

    #[test]
    fn hand_example() {
        let mut s = vec![0.0; 10];
        s[0] = 0.2;
        s[1] = 0.5;
        s[2] = 0.3;
        let f = extract_family_features(&s).unwrap();
        assert_eq!(f[0][1], 0.5);
        assert!((f[0][2] - 0.1).abs() < 1e-12);
        assert_eq!(f[1][3], 0.0);
        assert!((f[0][4] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_have_zero_differences() {
        let f = extract_family_features(&[0.4; 10]).unwrap();
        assert!(f.iter().all(|r| r[3] == 0.0 && r[4].abs() < 1e-15));
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = [0.1; 10];
        s[3] = f64::NAN;
        assert!(extract_family_features(&s).is_err());
        s[3] = f64::INFINITY;
        assert!(extract_family_features(&s).is_err());
    }

    #[test]
    fn shape_and_labels() {
        let ds = dataset(3);
        let fam = FamilyScores::new("baseline", (0..3).map(|i| Some(scores(i))).collect());
        let m = assemble_matrix(&[fam], &ds, true, Exec::Sequential).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (30, 5));
        let labels = m.labels.as_ref().unwrap();
        assert_eq!(labels.iter().map(|&l| l as usize).sum::<usize>(), 3);
        assert_eq!(labels[2 * 10 + 2], 1);
        assert_eq!(m.candidate_ids[25], "s2c5.jpg");
    }

    #[test]
    fn missing_sample_imputes_and_flags() {
        let ds = dataset(3);
        let base = FamilyScores::new("baseline", (0..3).map(|i| Some(scores(i))).collect());
        let kb = FamilyScores::new("kb:wikidata:cosine", vec![Some(scores(4)), None, Some(scores(5))]);
        let m = assemble_matrix(&[base, kb], &ds, false, Exec::Sequential).unwrap();
        assert_eq!(m.n_cols(), 11);
        let avail = m.column("kb:wikidata:cosine:avail").unwrap();
        for r in m.group_rows(1) {
            assert_eq!(&m.row(r)[5..10], &[0.0; 5]);
            assert_eq!(m.get(r, avail), 0.0);
        }
        for r in m.group_rows(0) {
            assert_eq!(m.get(r, avail), 1.0);
        }
    }

    #[test]
    fn column_count_follows_configuration() {
        let ds = dataset(2);
        let full = |id: &str| FamilyScores::new(id, vec![Some(scores(0)), Some(scores(1))]);
        let mut fams: Vec<FamilyScores> = ["exact", "what_is", "describe", "meaning_of"]
            .iter()
            .map(|t| full(&format!("enhanced:{t}+penalty")))
            .collect();
        fams.push(full("baseline+penalty"));
        fams.push(full("captions:mock:greedy:cosine:t"));
        fams.push(FamilyScores::new("kb:wikipedia:cosine", vec![None, Some(scores(2))]));
        let m = assemble_matrix(&fams, &ds, false, Exec::Sequential).unwrap();
        assert_eq!(m.n_cols(), 5 * 7 + 1);
    }

    #[test]
    fn misalignment_is_reported() {
        let ds = dataset(3);
        let fam = FamilyScores::new("baseline", vec![Some(scores(0))]);
        assert!(matches!(
            assemble_matrix(&[fam], &ds, false, Exec::Sequential),
            Err(FeatureError::GroupMisalignment { .. })
        ));
        let fam = FamilyScores::new("baseline", (0..3).map(|_| Some(vec![0.0; 9])).collect());
        assert!(matches!(
            assemble_matrix(&[fam], &ds, false, Exec::Sequential),
            Err(FeatureError::GroupMisalignment { .. })
        ));
    }

    #[test]
    fn schema_reuse_keeps_avail_column() {
        let ds = dataset(2);
        let train = FamilyScores::new("kb:wikipedia:cosine", vec![None, Some(scores(0))]);
        let m = assemble_matrix(&[train], &ds, true, Exec::Sequential).unwrap();
        let test = FamilyScores::new("kb:wikipedia:cosine", vec![Some(scores(1)), Some(scores(2))]);
        let t = assemble_matrix_for_schema(&[test.clone()], &ds, false, &m.schema, Exec::Sequential).unwrap();
        assert_eq!(t.schema, m.schema);
        assert_eq!(t.schema.fingerprint(), m.schema.fingerprint());
        let mut other = m.schema.clone();
        other.families[0].family_id = "kb:wikidata:cosine".into();
        assert!(matches!(
            assemble_matrix_for_schema(&[test], &ds, false, &other, Exec::Sequential),
            Err(FeatureError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(4);
        let base = FamilyScores::new("baseline", (0..4).map(|i| Some(scores(i))).collect());
        let kb = FamilyScores::new("kb:wikipedia:cosine", vec![None, Some(scores(9)), None, Some(scores(3))]);
        for labels in [true, false] {
            let m = assemble_matrix(&[base.clone(), kb.clone()], &ds, labels, Exec::Sequential).unwrap();
            let path = dir.path().join(format!("f{labels}.csv"));
            m.write_csv(&path).unwrap();
            assert!(schema_path(&path).is_file());
            let header = fs::read_to_string(&path).unwrap();
            assert!(header.starts_with("sample_id,candidate_id,label,baseline:a,baseline:b,"));
            assert_eq!(FeatureMatrix::read_csv(&path).unwrap(), m);
        }
    }

    #[test]
    fn exec_modes_agree() {
        let ds = dataset(40);
        let fam = FamilyScores::new("baseline", (0..40).map(|i| Some(scores(i))).collect());
        let a = assemble_matrix(&[fam.clone()], &ds, true, Exec::Sequential).unwrap();
        let b = assemble_matrix(&[fam], &ds, true, Exec::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn group_identities(s in proptest::collection::vec(-5.0f64..5.0, 10)) {
            let f = extract_family_features(&s).unwrap();
            let max = s.iter().copied().fold(f64::MIN, f64::max);
            let mean = s.iter().sum::<f64>() / 10.0;
            let mut dmax = f64::MIN;
            let mut esum = 0.0;
            for (j, r) in f.iter().enumerate() {
                prop_assert_eq!(r[0], s[j]);
                prop_assert_eq!(r[1], max);
                prop_assert!((r[2] - mean).abs() < 1e-12);
                prop_assert!(r[3] <= 0.0);
                dmax = dmax.max(r[3]);
                esum += r[4];
            }
            prop_assert_eq!(dmax, 0.0);
            prop_assert!(esum.abs() < 1e-9);
        }
    }
}
