//! Loading and validation of VWSD data files.
//!
//! A data file holds one sample per line, `target_word TAB phrase TAB img1 ... TAB img10`.
//! The optional gold file holds one image identifier per line, aligned with
//! the data file by line number.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of candidate images attached to every sample.
pub const CANDIDATES_PER_SAMPLE: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: gold image `{gold}` is not among the candidates")]
    GoldMismatch { line: usize, gold: String },
    #[error("gold file has {gold} lines but data file has {data}")]
    CountMismatch { data: usize, gold: usize },
}

/// One VWSD instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: usize,
    pub target_word: String,
    pub phrase: String,
    pub candidates: Vec<String>,
    pub gold: Option<String>,
}

impl Sample {
    /// Builds a sample, enforcing the candidate and gold invariants.
    pub fn new(
        sample_id: usize,
        target_word: impl Into<String>,
        phrase: impl Into<String>,
        candidates: Vec<String>,
        gold: Option<String>,
    ) -> Result<Self, DatasetError> {
        let line = sample_id + 1;
        if candidates.len() != CANDIDATES_PER_SAMPLE {
            return Err(DatasetError::MalformedLine {
                line,
                reason: format!(
                    "expected {CANDIDATES_PER_SAMPLE} candidates, found {}",
                    candidates.len()
                ),
            });
        }
        let mut seen = HashSet::with_capacity(CANDIDATES_PER_SAMPLE);
        for c in &candidates {
            if c.is_empty() {
                return Err(DatasetError::MalformedLine {
                    line,
                    reason: "empty candidate identifier".into(),
                });
            }
            if !seen.insert(c.as_str()) {
                return Err(DatasetError::MalformedLine {
                    line,
                    reason: format!("duplicate candidate `{c}`"),
                });
            }
        }
        if let Some(g) = &gold {
            if !seen.contains(g.as_str()) {
                return Err(DatasetError::GoldMismatch {
                    line,
                    gold: g.clone(),
                });
            }
        }
        Ok(Sample {
            sample_id,
            target_word: target_word.into(),
            phrase: phrase.into(),
            candidates,
            gold,
        })
    }

    /// Position of the gold image within `candidates`.
    pub fn gold_index(&self) -> Option<usize> {
        let gold = self.gold.as_deref()?;
        self.candidates.iter().position(|c| c == gold)
    }

    /// Whether the phrase contains the target word as a whitespace token.
    pub fn target_in_phrase(&self) -> bool {
        self.phrase
            .split_whitespace()
            .any(|tok| tok == self.target_word)
    }

    /// Renders the sample back into its data-file line (without newline).
    pub fn to_line(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.target_word);
        out.push('\t');
        out.push_str(&self.phrase);
        for c in &self.candidates {
            out.push('\t');
            out.push_str(c);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub split_name: String,
    pub samples: Vec<Sample>,
    pub image_dir: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_gold(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.gold.is_some())
    }

    pub fn image_path(&self, image_id: &str) -> PathBuf {
        self.image_dir.join(image_id)
    }

    /// Every distinct candidate identifier, in first-occurrence order.
    pub fn unique_images(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &self.samples {
            for c in &s.candidates {
                if seen.insert(c.as_str()) {
                    out.push(c.clone());
                }
            }
        }
        out
    }

    pub fn to_data_string(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&s.to_line());
            out.push('\n');
        }
        out
    }

    /// Gold file contents; `None` when any sample lacks gold.
    pub fn to_gold_string(&self) -> Option<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(s.gold.as_deref()?);
            out.push('\n');
        }
        Some(out)
    }
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Splits file contents into lines, dropping the empty tail after a final LF.
fn content_lines(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    while matches!(lines.last(), Some(l) if l.trim().is_empty()) {
        lines.pop();
    }
    lines
}

fn parse_data_line(
    sample_id: usize,
    line: &str,
    gold: Option<String>,
) -> Result<Sample, DatasetError> {
    let fields: Vec<&str> = line.trim_end().split('\t').collect();
    let expected = CANDIDATES_PER_SAMPLE + 2;
    if fields.len() != expected {
        return Err(DatasetError::MalformedLine {
            line: sample_id + 1,
            reason: format!("expected {expected} tab-separated fields, found {}", fields.len()),
        });
    }
    if fields[0].trim().is_empty() || fields[1].trim().is_empty() {
        return Err(DatasetError::MalformedLine {
            line: sample_id + 1,
            reason: "blank target word or phrase".into(),
        });
    }
    let candidates = fields[2..].iter().map(|s| s.to_string()).collect();
    let sample = Sample::new(sample_id, fields[0], fields[1], candidates, gold)?;
    if !sample.target_in_phrase() {
        log::warn!(
            "line {}: target word `{}` is not a token of phrase `{}`",
            sample_id + 1,
            sample.target_word,
            sample.phrase
        );
    }
    Ok(sample)
}

/// Parses data (and optional gold) file contents.
pub fn parse_dataset(
    split_name: impl Into<String>,
    data: &str,
    gold: Option<&str>,
    image_dir: impl Into<PathBuf>,
) -> Result<Dataset, DatasetError> {
    let data_lines = content_lines(data);
    let gold_lines: Option<Vec<String>> =
        gold.map(|g| content_lines(g).iter().map(|l| l.trim().to_string()).collect());
    if let Some(g) = &gold_lines {
        if g.len() != data_lines.len() {
            return Err(DatasetError::CountMismatch {
                data: data_lines.len(),
                gold: g.len(),
            });
        }
    }
    let samples = data_lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let g = gold_lines.as_ref().map(|g| g[i].clone());
            parse_data_line(i, line, g)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        split_name: split_name.into(),
        samples,
        image_dir: image_dir.into(),
    })
}

/// Loads a dataset from disk. The split name is the data file stem.
pub fn load_dataset(
    data_path: &Path,
    gold_path: Option<&Path>,
    image_dir: &Path,
) -> Result<Dataset, DatasetError> {
    let data = read(data_path)?;
    let gold = gold_path.map(read).transpose()?;
    let split_name = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "split".into());
    parse_dataset(split_name, &data, gold.as_deref(), image_dir)
}

/// Candidate identifiers that do not resolve to a file under the image
/// directory, in first-occurrence order. Never fails.
pub fn validate_images(dataset: &Dataset) -> Vec<String> {
    dataset
        .unique_images()
        .into_iter()
        .filter(|id| !dataset.image_path(id).is_file())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(target: &str, phrase: &str, prefix: &str) -> String {
        let mut l = format!("{target}\t{phrase}");
        for k in 0..10 {
            l.push_str(&format!("\t{prefix}{k}.jpg"));
        }
        l
    }

    #[test]
    fn parses_andromeda_line_with_gold() {
        let data = line("andromeda", "andromeda tree", "img") + "\n";
        let ds = parse_dataset("trial", &data, Some("img2.jpg\n"), "/nonexistent").unwrap();
        assert_eq!(ds.len(), 1);
        let s = &ds.samples[0];
        assert_eq!(s.target_word, "andromeda");
        assert_eq!(s.phrase, "andromeda tree");
        assert_eq!(s.gold.as_deref(), Some("img2.jpg"));
        assert_eq!(s.gold_index(), Some(2));
        assert!(s.target_in_phrase());
    }

    #[test]
    fn without_gold_every_sample_lacks_gold() {
        let data = [line("a", "a b", "x"), line("c", "c d", "y")].join("\n");
        let ds = parse_dataset("t", &data, None, "/tmp").unwrap();
        assert!(ds.samples.iter().all(|s| s.gold.is_none()));
        assert!(!ds.has_gold());
    }

    #[test]
    fn wrong_field_count_is_malformed() {
        let err = parse_dataset("t", "a\ta b\timg0.jpg\n", None, "/tmp").unwrap_err();
        assert!(matches!(err, DatasetError::MalformedLine { line: 1, .. }));
    }

    #[test]
    fn duplicate_candidates_are_malformed() {
        let mut l = "a\ta b".to_string();
        for _ in 0..10 {
            l.push_str("\tsame.jpg");
        }
        let err = parse_dataset("t", &l, None, "/tmp").unwrap_err();
        assert!(matches!(err, DatasetError::MalformedLine { .. }));
    }

    #[test]
    fn gold_outside_candidates_is_rejected() {
        let data = line("a", "a b", "img");
        let err = parse_dataset("t", &data, Some("other.jpg"), "/tmp").unwrap_err();
        assert!(matches!(err, DatasetError::GoldMismatch { line: 1, .. }));
    }

    #[test]
    fn gold_count_must_match() {
        let data = [line("a", "a b", "x"), line("c", "c d", "y")].join("\n");
        let err = parse_dataset("t", &data, Some("x1.jpg\n"), "/tmp").unwrap_err();
        assert!(matches!(err, DatasetError::CountMismatch { data: 2, gold: 1 }));
    }

    #[test]
    fn one_word_phrase_loads_with_warning() {
        let data = line("bank", "river", "i");
        let ds = parse_dataset("t", &data, None, "/tmp").unwrap();
        assert!(!ds.samples[0].target_in_phrase());
    }

    #[test]
    fn validate_images_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = line("a", "a b", "img");
        let ds = parse_dataset("t", &data, None, dir.path()).unwrap();
        for k in 0..10 {
            fs::write(dir.path().join(format!("img{k}.jpg")), b"x").unwrap();
        }
        assert!(validate_images(&ds).is_empty());
        fs::remove_file(dir.path().join("img4.jpg")).unwrap();
        assert_eq!(validate_images(&ds), vec!["img4.jpg".to_string()]);

        let gone = Dataset {
            image_dir: dir.path().join("missing"),
            ..ds
        };
        assert_eq!(validate_images(&gone).len(), 10);
    }

    #[test]
    fn load_from_files_uses_stem_as_split() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("test.data.txt");
        let gold_path = dir.path().join("test.gold.txt");
        fs::write(&data_path, line("a", "a b", "img") + "\n").unwrap();
        fs::write(&gold_path, "img9.jpg\n").unwrap();
        let ds = load_dataset(&data_path, Some(&gold_path), dir.path()).unwrap();
        assert_eq!(ds.split_name, "test.data");
        assert_eq!(ds.samples[0].gold_index(), Some(9));
    }

    fn token() -> impl Strategy<Value = String> {
        "[a-z]{1,8}"
    }

    proptest! {
        #[test]
        fn reserialization_is_identical(
            rows in prop::collection::vec((token(), token(), prop::collection::hash_set("[a-z0-9]{1,6}", 10), 0usize..10), 1..20)
        ) {
            let mut data = String::new();
            let mut gold = String::new();
            for (target, ctx, cands, g) in &rows {
                let cands: Vec<String> = cands.iter().map(|c| format!("{c}.jpg")).collect();
                data.push_str(&format!("{target}\t{target} {ctx}\t{}\n", cands.join("\t")));
                gold.push_str(&cands[*g]);
                gold.push('\n');
            }
            let ds = parse_dataset("p", &data, Some(&gold), "/tmp").unwrap();
            prop_assert_eq!(ds.to_data_string(), data);
            prop_assert_eq!(ds.to_gold_string().unwrap(), gold);
            for (i, s) in ds.samples.iter().enumerate() {
                prop_assert_eq!(s.sample_id, i);
                prop_assert_eq!(s.candidates.len(), CANDIDATES_PER_SAMPLE);
                let distinct: HashSet<_> = s.candidates.iter().collect();
                prop_assert_eq!(distinct.len(), CANDIDATES_PER_SAMPLE);
                prop_assert!(s.candidates.contains(s.gold.as_ref().unwrap()));
                prop_assert!(s.target_in_phrase());
            }
        }
    }
}
