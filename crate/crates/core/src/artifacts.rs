//! Preprocessing artifacts per database: compressed catalog, partition and
//! value index. Each file records the hash of what it was built from and
//! is rebuilt only when that hash changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{ingest_from_database, SchemaCatalog};
use crate::compress::{compress_schema, CompressedCatalog};
use crate::split::{split_schema, SchemaPartition};
use crate::values::{build_index, LshParams, ValueIndex};

pub const COMPRESSED_FILE: &str = "compressed.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const INDEX_FILE: &str = "values.jsonl";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("no database file for {db_id} under {dir}")]
    MissingDatabase { db_id: String, dir: String },
    #[error("no database directory configured")]
    NoDatabaseDir,
    #[error("{db_id}: {message}")]
    Build { db_id: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Finds `<db_id>.sqlite`, `<db_id>.db`, or the same inside `<db_id>/`.
pub fn locate_database(dir: &Path, db_id: &str) -> Option<PathBuf> {
    let candidates = [
        dir.join(format!("{db_id}.sqlite")),
        dir.join(format!("{db_id}.db")),
        dir.join(db_id).join(format!("{db_id}.sqlite")),
        dir.join(db_id).join(format!("{db_id}.db")),
    ];
    candidates.into_iter().find(|p| p.is_file())
}

/// Database ids present in a directory, sorted.
pub fn list_databases(dir: &Path) -> Result<Vec<String>, ArtifactError> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
        let Some(stem) = stem else { continue };
        let is_db = path.is_file() && matches!(path.extension().and_then(|e| e.to_str()), Some("sqlite" | "db"));
        if is_db || (path.is_dir() && locate_database(dir, &stem).is_some()) {
            ids.push(stem);
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn sha256_file(path: &Path) -> Result<String, ArtifactError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_text(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamped<T> {
    source_hash: String,
    artifact: T,
}

fn read_stamped<T: for<'de> Deserialize<'de>>(path: &Path, hash: &str) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    let stamped: Stamped<T> = serde_json::from_str(&text).ok()?;
    (stamped.source_hash == hash).then_some(stamped.artifact)
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ArtifactError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessSettings {
    pub token_budget: usize,
    pub compress: bool,
    pub lsh: LshParams,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        Self {
            token_budget: 10_000,
            compress: true,
            lsh: LshParams::default(),
        }
    }
}

/// Which artifacts were (re)built rather than loaded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuiltFlags {
    pub compressed: bool,
    pub partition: bool,
    pub value_index: bool,
}

#[derive(Debug, Clone)]
pub struct DatabaseArtifacts {
    pub db_id: String,
    pub db_path: PathBuf,
    pub compressed: CompressedCatalog,
    pub partition: SchemaPartition,
    pub index: ValueIndex,
    pub built: BuiltFlags,
}

/// Loads up-to-date artifacts for one database and builds whatever is
/// missing or stale.
pub fn prepare(
    db_id: &str,
    db_path: &Path,
    schema_manifest: Option<&Path>,
    artifact_dir: &Path,
    settings: &PreprocessSettings,
) -> Result<DatabaseArtifacts, ArtifactError> {
    let build_err = |message: String| ArtifactError::Build {
        db_id: db_id.to_string(),
        message,
    };
    let dir = artifact_dir.join(db_id);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let db_hash = sha256_file(db_path)?;
    let manifest_hash = match schema_manifest {
        Some(p) => sha256_file(p)?,
        None => String::new(),
    };
    let mut built = BuiltFlags::default();

    let catalog_hash = sha256_text(&[&db_hash, &manifest_hash, if settings.compress { "compress" } else { "identity" }]);
    let compressed_path = dir.join(COMPRESSED_FILE);
    let mut catalog_cache: Option<SchemaCatalog> = None;
    let compressed = match read_stamped::<CompressedCatalog>(&compressed_path, &catalog_hash) {
        Some(c) => c,
        None => {
            let catalog = match schema_manifest {
                Some(p) => SchemaCatalog::from_manifest_path(p),
                None => ingest_from_database(db_path),
            }
            .map_err(|e| build_err(e.to_string()))?;
            let compressed = if settings.compress {
                compress_schema(&catalog)
            } else {
                CompressedCatalog::identity(catalog.clone())
            };
            let stamped = Stamped {
                source_hash: catalog_hash.clone(),
                artifact: &compressed,
            };
            write_atomic(&compressed_path, &serde_json::to_vec_pretty(&stamped).expect("serializable"))?;
            built.compressed = true;
            catalog_cache = Some(catalog);
            compressed
        }
    };

    let partition_hash = sha256_text(&[&catalog_hash, &settings.token_budget.to_string()]);
    let partition_path = dir.join(PARTITION_FILE);
    let partition = match read_stamped::<SchemaPartition>(&partition_path, &partition_hash) {
        Some(p) => p,
        None => {
            let partition = split_schema(&compressed.catalog, settings.token_budget);
            let stamped = Stamped {
                source_hash: partition_hash,
                artifact: &partition,
            };
            write_atomic(&partition_path, &serde_json::to_vec_pretty(&stamped).expect("serializable"))?;
            built.partition = true;
            partition
        }
    };

    let index_hash = sha256_text(&[&db_hash, &manifest_hash]);
    let index_path = dir.join(INDEX_FILE);
    let existing = ValueIndex::load(&index_path)
        .ok()
        .filter(|i| i.source_hash() == Some(index_hash.as_str()) && i.params() == settings.lsh);
    let index = match existing {
        Some(i) => i,
        None => {
            let catalog = match catalog_cache {
                Some(c) => c,
                None => match schema_manifest {
                    Some(p) => SchemaCatalog::from_manifest_path(p),
                    None => ingest_from_database(db_path),
                }
                .map_err(|e| build_err(e.to_string()))?,
            };
            let mut index = build_index(db_path, &catalog, settings.lsh).map_err(|e| build_err(e.to_string()))?;
            index.set_source_hash(&index_hash);
            let tmp = index_path.with_extension("tmp");
            index.save(&tmp).map_err(|e| build_err(e.to_string()))?;
            std::fs::rename(&tmp, &index_path).map_err(io_err(&index_path))?;
            built.value_index = true;
            index
        }
    };
    if built == BuiltFlags::default() {
        log::info!("{db_id}: artifacts up-to-date");
    }
    Ok(DatabaseArtifacts {
        db_id: db_id.to_string(),
        db_path: db_path.to_path_buf(),
        compressed,
        partition,
        index,
        built,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(dir: &Path) -> PathBuf {
        let p = dir.join("toy.sqlite");
        let c = rusqlite::Connection::open(&p).unwrap();
        c.execute_batch("CREATE TABLE t (id INTEGER PRIMARY KEY, name TEXT); INSERT INTO t VALUES (1, 'alpha'), (2, 'beta');")
            .unwrap();
        p
    }

    #[test]
    fn second_prepare_reuses_everything() {
        let dir = tempfile::tempdir().unwrap();
        let db_path = db(dir.path());
        let out = dir.path().join("artifacts");
        let settings = PreprocessSettings::default();
        let first = prepare("toy", &db_path, None, &out, &settings).unwrap();
        assert_eq!(first.built, BuiltFlags { compressed: true, partition: true, value_index: true });
        for f in [COMPRESSED_FILE, PARTITION_FILE, INDEX_FILE] {
            assert!(out.join("toy").join(f).is_file(), "{f}");
        }
        let second = prepare("toy", &db_path, None, &out, &settings).unwrap();
        assert_eq!(second.built, BuiltFlags::default());
        assert_eq!(second.compressed, first.compressed);
        assert_eq!(second.index.len(), first.index.len());

        let budget = PreprocessSettings { token_budget: 500, ..settings };
        let third = prepare("toy", &db_path, None, &out, &budget).unwrap();
        assert_eq!(third.built, BuiltFlags { compressed: false, partition: true, value_index: false });
    }

    #[test]
    fn missing_index_is_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        let db_path = db(dir.path());
        let out = dir.path().join("artifacts");
        prepare("toy", &db_path, None, &out, &PreprocessSettings::default()).unwrap();
        std::fs::remove_file(out.join("toy").join(INDEX_FILE)).unwrap();
        let again = prepare("toy", &db_path, None, &out, &PreprocessSettings::default()).unwrap();
        assert!(again.built.value_index && !again.built.compressed);
    }

    #[test]
    fn locates_layouts() {
        let dir = tempfile::tempdir().unwrap();
        db(dir.path());
        std::fs::create_dir(dir.path().join("nested")).unwrap();
        std::fs::write(dir.path().join("nested").join("nested.sqlite"), b"").unwrap();
        assert_eq!(list_databases(dir.path()).unwrap(), vec!["nested", "toy"]);
        assert!(locate_database(dir.path(), "missing").is_none());
    }
}
