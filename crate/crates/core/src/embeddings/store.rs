//! On-disk embedding store.
//!
//! Layout under `root`:
//! - `index.json`: maps `(space_id, kind, key)` to a row of a matrix file
//! - one `<hash>.<kind>.f32` matrix per `(space_id, kind)`: an 8-byte header
//!   (dim then row count, both little-endian `u32`) followed by row-major
//!   little-endian `f32` values.
//!
//! The store has a single writer. Rows are appended to the matrix before
//! the index is replaced through write-temp-then-rename.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Embedding, EmbeddingError, EmbeddingKind};

const INDEX_FILE: &str = "index.json";
const HEADER_LEN: u64 = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpaceIndex {
    space_id: String,
    kind: EmbeddingKind,
    dim: usize,
    file: String,
    keys: BTreeMap<String, usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    spaces: Vec<SpaceIndex>,
}

struct Matrix {
    index: SpaceIndex,
    values: Vec<f32>,
    persisted_rows: usize,
    // lowest row overwritten in place since the last flush
    dirty_from: Option<usize>,
}

impl Matrix {
    fn rows(&self) -> usize {
        self.values.len() / self.index.dim
    }

    fn row(&self, r: usize) -> &[f32] {
        let d = self.index.dim;
        &self.values[r * d..(r + 1) * d]
    }
}

pub struct EmbeddingStore {
    root: PathBuf,
    spaces: HashMap<(String, EmbeddingKind), Matrix>,
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> EmbeddingError {
    EmbeddingError::Store(format!("{}: {e}", path.display()))
}

fn matrix_file_name(space_id: &str, kind: EmbeddingKind) -> String {
    let digest = Sha256::digest(space_id.as_bytes());
    format!("{}.{}.f32", hex::encode(&digest[..8]), kind.as_str())
}

fn read_matrix(path: &Path, dim: usize) -> Result<Vec<f32>, EmbeddingError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| store_err(path, e))?;
    if bytes.len() < HEADER_LEN as usize {
        return Err(store_err(path, "truncated header"));
    }
    let file_dim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if file_dim != dim {
        return Err(store_err(
            path,
            format!("header dim {file_dim} disagrees with index dim {dim}"),
        ));
    }
    let payload = &bytes[HEADER_LEN as usize..];
    if payload.len() < rows * dim * 4 {
        return Err(store_err(path, "payload shorter than header row count"));
    }
    Ok(payload[..rows * dim * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl EmbeddingStore {
    /// Opens (or creates) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, EmbeddingError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| store_err(&root, e))?;
        let index_path = root.join(INDEX_FILE);
        let mut spaces = HashMap::new();
        if index_path.exists() {
            let text = fs::read_to_string(&index_path).map_err(|e| store_err(&index_path, e))?;
            let index: IndexFile =
                serde_json::from_str(&text).map_err(|e| store_err(&index_path, e))?;
            for space in index.spaces {
                let path = root.join(&space.file);
                let values = read_matrix(&path, space.dim)?;
                let rows = values.len() / space.dim;
                if let Some((k, &r)) = space.keys.iter().find(|(_, &r)| r >= rows) {
                    return Err(store_err(&path, format!("key `{k}` points past row {r}")));
                }
                spaces.insert(
                    (space.space_id.clone(), space.kind),
                    Matrix {
                        index: space,
                        values,
                        persisted_rows: rows,
                        dirty_from: None,
                    },
                );
            }
        }
        Ok(EmbeddingStore { root, spaces })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Dimension of a space, if anything has been stored in it.
    pub fn space_dim(&self, space_id: &str) -> Option<usize> {
        self.spaces
            .iter()
            .find(|((s, _), _)| s == space_id)
            .map(|(_, m)| m.index.dim)
    }

    pub fn len(&self, space_id: &str, kind: EmbeddingKind) -> usize {
        self.spaces
            .get(&(space_id.to_string(), kind))
            .map_or(0, |m| m.index.keys.len())
    }

    pub fn contains(&self, space_id: &str, kind: EmbeddingKind, key: &str) -> bool {
        self.spaces
            .get(&(space_id.to_string(), kind))
            .is_some_and(|m| m.index.keys.contains_key(key))
    }

    /// Looks up a stored vector; an unknown key yields `None`.
    pub fn get(&self, space_id: &str, kind: EmbeddingKind, key: &str) -> Option<Embedding> {
        let m = self.spaces.get(&(space_id.to_string(), kind))?;
        let &row = m.index.keys.get(key)?;
        Some(Embedding {
            space_id: space_id.to_string(),
            values: m.row(row).to_vec(),
        })
    }

    /// Stores one vector and persists it immediately.
    pub fn put(
        &mut self,
        kind: EmbeddingKind,
        key: &str,
        embedding: &Embedding,
    ) -> Result<(), EmbeddingError> {
        self.put_many(kind, std::iter::once((key, embedding)))
    }

    /// Stores a batch of vectors with a single index rewrite.
    pub fn put_many<'a, I>(&mut self, kind: EmbeddingKind, items: I) -> Result<(), EmbeddingError>
    where
        I: IntoIterator<Item = (&'a str, &'a Embedding)>,
    {
        let mut touched = Vec::new();
        for (key, emb) in items {
            let space_id = emb.space_id().to_string();
            if let Some(dim) = self.space_dim(&space_id) {
                if dim != emb.dim() {
                    return Err(EmbeddingError::DimMismatch {
                        space_id,
                        expected: dim,
                        actual: emb.dim(),
                    });
                }
            }
            let slot = (space_id.clone(), kind);
            let m = self.spaces.entry(slot.clone()).or_insert_with(|| Matrix {
                index: SpaceIndex {
                    space_id: space_id.clone(),
                    kind,
                    dim: emb.dim(),
                    file: matrix_file_name(&space_id, kind),
                    keys: BTreeMap::new(),
                },
                values: Vec::new(),
                persisted_rows: 0,
                dirty_from: None,
            });
            let dim = m.index.dim;
            match m.index.keys.get(key) {
                Some(&row) => {
                    m.values[row * dim..(row + 1) * dim].copy_from_slice(emb.values());
                    m.dirty_from = Some(m.dirty_from.map_or(row, |d| d.min(row)));
                }
                None => {
                    let row = m.rows();
                    m.values.extend_from_slice(emb.values());
                    m.index.keys.insert(key.to_string(), row);
                }
            }
            if !touched.contains(&slot) {
                touched.push(slot);
            }
        }
        for slot in &touched {
            self.write_matrix(slot)?;
        }
        if !touched.is_empty() {
            self.write_index()?;
        }
        Ok(())
    }

    fn write_matrix(&mut self, slot: &(String, EmbeddingKind)) -> Result<(), EmbeddingError> {
        let m = self.spaces.get_mut(slot).expect("touched slot exists");
        let path = self.root.join(&m.index.file);
        let rows = m.rows();
        let dim = m.index.dim;
        let start = m.dirty_from.unwrap_or(rows).min(m.persisted_rows);
        let mut buf = Vec::with_capacity((rows - start) * dim * 4);
        for v in &m.values[start * dim..] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut header = [0u8; 8];
        header[..4].copy_from_slice(&(dim as u32).to_le_bytes());
        header[4..].copy_from_slice(&(rows as u32).to_le_bytes());
        let io = |r: std::io::Result<()>| r.map_err(|e| store_err(&path, e));
        let mut f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| store_err(&path, e))?;
        io(f.seek(SeekFrom::Start(HEADER_LEN + (start * dim * 4) as u64)).map(|_| ()))?;
        io(f.write_all(&buf))?;
        io(f.seek(SeekFrom::Start(0)).map(|_| ()))?;
        io(f.write_all(&header))?;
        io(f.sync_data())?;
        m.persisted_rows = rows;
        m.dirty_from = None;
        Ok(())
    }

    fn write_index(&self) -> Result<(), EmbeddingError> {
        let mut spaces: Vec<SpaceIndex> = self.spaces.values().map(|m| m.index.clone()).collect();
        spaces.sort_by(|a, b| (&a.space_id, a.kind).cmp(&(&b.space_id, b.kind)));
        let index = IndexFile { version: 1, spaces };
        let path = self.root.join(INDEX_FILE);
        let tmp = self.root.join(format!("{INDEX_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&index).map_err(|e| store_err(&path, e))?;
        fs::write(&tmp, text).map_err(|e| store_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| store_err(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{EmbeddingBackend, MockBackend};

    fn emb(space: &str, v: Vec<f32>) -> Embedding {
        Embedding::new(space, v).unwrap()
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EmbeddingStore::open(dir.path()).unwrap();
        let e = emb("s", vec![0.5, -0.25, 1e-30]);
        store.put(EmbeddingKind::Text, "k", &e).unwrap();
        assert_eq!(store.get("s", EmbeddingKind::Text, "k"), Some(e));
        assert_eq!(store.get("s", EmbeddingKind::Text, "other"), None);
        assert_eq!(store.get("s", EmbeddingKind::Image, "k"), None);
        assert_eq!(store.get("t", EmbeddingKind::Text, "k"), None);
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EmbeddingStore::open(dir.path()).unwrap();
        store.put(EmbeddingKind::Text, "a", &emb("s", vec![1.0, 0.0])).unwrap();
        let err = store
            .put(EmbeddingKind::Image, "b", &emb("s", vec![1.0, 0.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, EmbeddingError::DimMismatch { expected: 2, actual: 3, .. }));
    }

    #[test]
    fn overwrite_keeps_index_unique() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EmbeddingStore::open(dir.path()).unwrap();
        store.put(EmbeddingKind::Text, "a", &emb("s", vec![1.0, 0.0])).unwrap();
        store.put(EmbeddingKind::Text, "a", &emb("s", vec![0.0, 1.0])).unwrap();
        assert_eq!(store.len("s", EmbeddingKind::Text), 1);
        let reopened = EmbeddingStore::open(dir.path()).unwrap();
        assert_eq!(
            reopened.get("s", EmbeddingKind::Text, "a").unwrap().values(),
            &[0.0, 1.0]
        );
    }

    #[test]
    fn ten_thousand_rows_survive_reopen_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let backend = MockBackend::new(11, 24);
        let keys: Vec<String> = (0..10_000).map(|i| format!("text-{i}")).collect();
        let embs: Vec<Embedding> = keys
            .iter()
            .map(|k| emb(backend.space_id(), backend.embed_text(k).unwrap()))
            .collect();
        {
            let mut store = EmbeddingStore::open(dir.path()).unwrap();
            // two batches exercise the append path
            let (a, b) = keys.split_at(6000);
            let (ea, eb) = embs.split_at(6000);
            store
                .put_many(EmbeddingKind::Text, a.iter().map(|s| s.as_str()).zip(ea))
                .unwrap();
            store
                .put_many(EmbeddingKind::Text, b.iter().map(|s| s.as_str()).zip(eb))
                .unwrap();
        }
        let store = EmbeddingStore::open(dir.path()).unwrap();
        assert_eq!(store.len(backend.space_id(), EmbeddingKind::Text), 10_000);
        for (k, e) in keys.iter().zip(&embs) {
            let got = store.get(backend.space_id(), EmbeddingKind::Text, k).unwrap();
            let a: Vec<u32> = got.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = e.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn matrix_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EmbeddingStore::open(dir.path()).unwrap();
        store.put(EmbeddingKind::Image, "a", &emb("s", vec![1.0, 2.0, 3.0])).unwrap();
        store.put(EmbeddingKind::Image, "b", &emb("s", vec![4.0, 5.0, 6.0])).unwrap();
        let path = dir.path().join(matrix_file_name("s", EmbeddingKind::Image));
        let bytes = fs::read(path).unwrap();
        assert_eq!(&bytes[0..4], &3u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 6 * 4);
        assert_eq!(&bytes[8 + 12..8 + 16], &4.0f32.to_le_bytes());
    }
}
