//! Content-addressed text cache: one file per key, written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FileCache {
    dir: PathBuf,
    suffix: &'static str,
}

impl FileCache {
    /// `suffix` is appended to the hex key, e.g. `.txt` or `.emb.txt`.
    pub fn new(dir: impl Into<PathBuf>, suffix: &'static str) -> Self {
        Self {
            dir: dir.into(),
            suffix,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}{}", self.suffix))
    }

    /// Absent entries (and unreadable ones) come back as `None`.
    pub fn lookup(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.path_for(key)).ok()
    }

    /// Last writer wins; readers never observe a partial file.
    pub fn store(&self, key: &str, text: &str) -> Result<()> {
        write_atomic(&self.path_for(key), text.as_bytes())
    }

    /// Failure diagnostics for `key`, kept next to the entries as `<key>.err`.
    pub fn store_error(&self, key: &str, diagnostics: &str) -> Result<()> {
        write_atomic(&self.dir.join(format!("{key}.err")), diagnostics.as_bytes())
    }

    pub fn clear_error(&self, key: &str) {
        let _ = std::fs::remove_file(self.dir.join(format!("{key}.err")));
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_lookup_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FileCache::new(dir.path().join("asr"), ".txt");
        assert_eq!(cache.lookup("abc"), None);
        cache.store("abc", "the boy steals cookies").unwrap();
        assert_eq!(cache.lookup("abc").as_deref(), Some("the boy steals cookies"));
        cache.store("abc", "second").unwrap();
        assert_eq!(cache.lookup("abc").as_deref(), Some("second"));
        assert!(dir.path().join("asr/abc.txt").exists());
    }

    #[test]
    fn unwritable_dir_fails_on_store() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let cache = FileCache::new(blocker.join("sub"), ".txt");
        assert!(matches!(cache.store("k", "v"), Err(Error::Io { .. })));
    }

    #[test]
    fn concurrent_writers_never_expose_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FileCache::new(dir.path(), ".txt");
        let texts: Vec<String> = (0..8).map(|i| format!("{i}").repeat(100_000)).collect();
        std::thread::scope(|s| {
            for t in &texts {
                let cache = &cache;
                s.spawn(move || cache.store("same", t).unwrap());
            }
            for _ in 0..50 {
                if let Some(seen) = cache.lookup("same") {
                    assert!(texts.contains(&seen));
                }
            }
        });
        assert!(texts.contains(&cache.lookup("same").unwrap()));
    }
}
