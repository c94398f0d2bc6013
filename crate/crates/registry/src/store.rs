//! Blob and manifest storage.
//!
//! On disk every image has its own directory holding `manifest.json` and
//! `blobs/<digest>.disa`. Without a root directory everything stays in
//! memory. Blobs are reference counted, so two variants that happen to
//! emit identical bytes share one blob.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::policy::PoolPolicy;
use crate::variant::Variant;
use helix_core::transforms::PipelineSpec;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    /// Base64 of the base image bytes.
    pub base_image: String,
    pub pipeline: PipelineSpec,
    pub policy: PoolPolicy,
    pub used_seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Default)]
struct Blob {
    bytes: Option<Vec<u8>>,
    refs: u32,
}

#[derive(Debug, Default)]
pub struct Store {
    root: Option<PathBuf>,
    blobs: HashMap<(String, String), Blob>,
}

impl Store {
    pub fn in_memory() -> Store {
        Store::default()
    }

    pub fn on_disk(root: &Path) -> io::Result<Store> {
        fs::create_dir_all(root)?;
        Ok(Store { root: Some(root.to_path_buf()), blobs: HashMap::new() })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn image_dir(&self, image: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(image))
    }

    fn blob_path(&self, image: &str, digest: &str) -> Option<PathBuf> {
        self.image_dir(image).map(|d| d.join("blobs").join(format!("{digest}.disa")))
    }

    pub fn put_blob(&mut self, image: &str, digest: &str, bytes: &[u8]) -> io::Result<()> {
        let key = (image.to_string(), digest.to_string());
        let path = self.blob_path(image, digest);
        let blob = self.blobs.entry(key).or_default();
        if blob.refs == 0 {
            match &path {
                Some(p) => {
                    fs::create_dir_all(p.parent().unwrap())?;
                    write_atomic(p, bytes)?;
                }
                None => blob.bytes = Some(bytes.to_vec()),
            }
        }
        blob.refs += 1;
        Ok(())
    }

    pub fn get_blob(&self, image: &str, digest: &str) -> io::Result<Vec<u8>> {
        let missing = || io::Error::new(io::ErrorKind::NotFound, format!("no blob {digest} for {image}"));
        let blob = self.blobs.get(&(image.to_string(), digest.to_string())).ok_or_else(missing)?;
        match (&blob.bytes, self.blob_path(image, digest)) {
            (Some(b), _) => Ok(b.clone()),
            (None, Some(p)) => fs::read(p),
            (None, None) => Err(missing()),
        }
    }

    /// Drops one reference; the blob is deleted with its last reference.
    pub fn release_blob(&mut self, image: &str, digest: &str) -> io::Result<()> {
        let key = (image.to_string(), digest.to_string());
        let Some(blob) = self.blobs.get_mut(&key) else { return Ok(()) };
        blob.refs = blob.refs.saturating_sub(1);
        if blob.refs == 0 {
            self.blobs.remove(&key);
            if let Some(p) = self.blob_path(image, digest) {
                match fs::remove_file(p) {
                    Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Bytes held by distinct blobs.
    pub fn blob_bytes(&self, image: &str) -> u64 {
        self.blobs
            .iter()
            .filter(|((i, _), _)| i == image)
            .map(|((i, d), b)| match &b.bytes {
                Some(bytes) => bytes.len() as u64,
                None => self.blob_path(i, d).and_then(|p| fs::metadata(p).ok()).map_or(0, |m| m.len()),
            })
            .sum()
    }

    pub fn blob_count(&self, image: &str) -> usize {
        self.blobs.keys().filter(|(i, _)| i == image).count()
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> io::Result<()> {
        let Some(dir) = self.image_dir(&manifest.name) else { return Ok(()) };
        fs::create_dir_all(&dir)?;
        let json = serde_json::to_vec_pretty(manifest).map_err(io::Error::other)?;
        write_atomic(&dir.join("manifest.json"), &json)
    }

    /// Every manifest under the root, in directory order.
    pub fn recover(&mut self) -> io::Result<Vec<Manifest>> {
        let Some(root) = self.root.clone() else { return Ok(Vec::new()) };
        let mut out = Vec::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        for dir in dirs {
            let path = dir.join("manifest.json");
            if !path.is_file() {
                continue;
            }
            let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?).map_err(io::Error::other)?;
            out.push(manifest);
        }
        Ok(out)
    }

    /// Re-registers a blob found on disk during recovery.
    pub fn adopt_blob(&mut self, image: &str, digest: &str) -> bool {
        let exists = self.blob_path(image, digest).is_some_and(|p| p.is_file());
        if exists {
            self.blobs.entry((image.to_string(), digest.to_string())).or_default().refs += 1;
        }
        exists
    }

    /// Removes blob files no recovered variant references.
    pub fn prune_orphans(&self, image: &str) -> io::Result<usize> {
        let Some(dir) = self.image_dir(image).map(|d| d.join("blobs")) else { return Ok(0) };
        if !dir.is_dir() {
            return Ok(0);
        }
        let mut removed = 0;
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let digest = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
            if !self.blobs.contains_key(&(image.to_string(), digest)) {
                fs::remove_file(&path)?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(store: &mut Store) {
        store.put_blob("a", "d1", b"xyz").unwrap();
        store.put_blob("a", "d1", b"xyz").unwrap();
        store.put_blob("a", "d2", b"pq").unwrap();
        assert_eq!(store.get_blob("a", "d1").unwrap(), b"xyz");
        assert_eq!(store.blob_bytes("a"), 5);
        store.release_blob("a", "d1").unwrap();
        assert_eq!(store.get_blob("a", "d1").unwrap(), b"xyz");
        store.release_blob("a", "d1").unwrap();
        assert!(store.get_blob("a", "d1").is_err());
        assert_eq!(store.blob_bytes("a"), 2);
        assert_eq!(store.blob_count("b"), 0);
    }

    #[test]
    fn memory_refcounts() {
        roundtrip(&mut Store::in_memory());
    }

    #[test]
    fn disk_refcounts_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::on_disk(dir.path()).unwrap();
        roundtrip(&mut store);
        assert!(!dir.path().join("a/blobs/d1.disa").exists());
        assert!(dir.path().join("a/blobs/d2.disa").exists());
    }

    #[test]
    fn orphans_are_pruned_on_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::on_disk(dir.path()).unwrap();
        store.put_blob("a", "keep", b"1").unwrap();
        store.put_blob("a", "gone", b"2").unwrap();
        let mut fresh = Store::on_disk(dir.path()).unwrap();
        assert!(fresh.adopt_blob("a", "keep"));
        assert!(!fresh.adopt_blob("a", "never"));
        assert_eq!(fresh.prune_orphans("a").unwrap(), 1);
        assert_eq!(fresh.get_blob("a", "keep").unwrap(), b"1");
    }
}
