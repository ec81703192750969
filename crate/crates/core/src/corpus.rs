//! Corpus discovery, content-hash manifests and remote mirroring.
//!
//! A [`Manifest`] maps every corpus file (relative, forward-slash path) to the
//! SHA-256 of its raw bytes. Comparing the stored manifest with a fresh scan
//! yields a [`ChangeSet`], which decides whether the index is rebuilt.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::time::SystemTime;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

/// File name of the persisted manifest inside the corpus root.
pub const MANIFEST_FILE: &str = ".manifest.json";

/// Suffixes picked up by a scan when nothing else is configured.
pub const DEFAULT_EXTENSIONS: &[&str] = &[".md", ".txt"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus root {path} is not readable: {source}")]
    RootUnreadable { path: PathBuf, source: io::Error },
    #[error("failed to read corpus file {path}: {source}")]
    FileUnreadable { path: String, source: io::Error },
    #[error("manifest is stale: {path} no longer exists under the corpus root")]
    StaleManifest { path: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("failed to write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("remote source unreachable: {0}")]
    Unreachable(String),
    #[error("remote fetch failed for {path}: {reason}")]
    Fetch { path: String, reason: String },
    #[error(transparent)]
    Local(#[from] CorpusError),
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_hex_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Normalizes a relative path to forward-slash form without `.`/`..` segments.
///
/// Returns `None` for absolute paths or paths escaping their root.
pub fn normalize_rel_path(path: &str) -> Option<String> {
    let mut parts: Vec<&str> = Vec::new();
    for seg in path.split(['/', '\\']) {
        match seg {
            "" | "." => continue,
            ".." => {
                parts.pop()?;
            }
            s => parts.push(s),
        }
    }
    if parts.is_empty() || path.starts_with('/') {
        return None;
    }
    Some(parts.join("/"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub generated_at: DateTime<Utc>,
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn empty() -> Self {
        Self {
            generated_at: DateTime::<Utc>::UNIX_EPOCH,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Wire<'a> {
            generated_at: String,
            entries: &'a BTreeMap<String, String>,
        }
        let wire = Wire {
            generated_at: self
                .generated_at
                .to_rfc3339_opts(SecondsFormat::Secs, true),
            entries: &self.entries,
        };
        let mut out = serde_json::to_string_pretty(&wire).expect("manifest serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let manifest: Manifest =
            serde_json::from_str(text).map_err(|e| CorpusError::InvalidManifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        for (path, hash) in &self.entries {
            if normalize_rel_path(path).as_deref() != Some(path.as_str()) {
                return Err(CorpusError::InvalidManifest(format!(
                    "entry key {path:?} is not a normalized relative path"
                )));
            }
            if !is_hex_digest(hash) {
                return Err(CorpusError::InvalidManifest(format!(
                    "entry {path:?} has malformed hash {hash:?}"
                )));
            }
        }
        Ok(())
    }

    /// Loads `<root>/.manifest.json`; a missing file is an empty manifest.
    pub fn load(root: &Path) -> Result<Self, CorpusError> {
        let path = root.join(MANIFEST_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => Self::from_json(&text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::empty()),
            Err(source) => Err(CorpusError::FileUnreadable {
                path: MANIFEST_FILE.to_string(),
                source,
            }),
        }
    }

    /// Writes `<root>/.manifest.json` via a temp file and rename.
    pub fn store(&self, root: &Path) -> Result<(), CorpusError> {
        let path = root.join(MANIFEST_FILE);
        write_atomic(&path, self.to_json().as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp-{:016x}", rand::random::<u64>()));
    let tmp = path.with_file_name(name);
    let err = |source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(err)?;
    }
    fs::write(&tmp, bytes).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub added: BTreeSet<String>,
    pub modified: BTreeSet<String>,
    pub removed: BTreeSet<String>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.modified.is_empty() && self.removed.is_empty()
    }

    pub fn len(&self) -> usize {
        self.added.len() + self.modified.len() + self.removed.len()
    }
}

impl std::fmt::Display for ChangeSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} added, {} modified, {} removed",
            self.added.len(),
            self.modified.len(),
            self.removed.len()
        )?;
        for (tag, set) in [("+", &self.added), ("~", &self.modified), ("-", &self.removed)] {
            for path in set {
                write!(f, "\n  {tag} {path}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    pub relative_path: String,
    pub content_hash: String,
    pub markdown_text: String,
    pub byte_length: usize,
}

fn matches_extension(name: &str, include: &[&str]) -> bool {
    let lower = name.to_ascii_lowercase();
    include
        .iter()
        .any(|ext| lower.ends_with(&ext.to_ascii_lowercase()))
}

fn relative_key(root: &Path, path: &Path) -> Option<String> {
    let rel = path.strip_prefix(root).ok()?;
    let mut parts = Vec::new();
    for comp in rel.components() {
        match comp {
            Component::Normal(s) => parts.push(s.to_string_lossy().into_owned()),
            _ => return None,
        }
    }
    normalize_rel_path(&parts.join("/"))
}

/// Hashes every matching file under `root` (recursively, dotfiles skipped).
///
/// `generated_at` is the newest modification time among the scanned files, so
/// scanning an untouched directory twice serializes identically.
pub fn scan_corpus(root: &Path, include: &[&str]) -> Result<Manifest, CorpusError> {
    let meta = fs::metadata(root).map_err(|source| CorpusError::RootUnreadable {
        path: root.to_path_buf(),
        source,
    })?;
    if !meta.is_dir() {
        return Err(CorpusError::RootUnreadable {
            path: root.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotADirectory, "not a directory"),
        });
    }

    let mut entries = BTreeMap::new();
    let mut newest = SystemTime::UNIX_EPOCH;
    let walker = WalkDir::new(root)
        .follow_links(true)
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'));
    for entry in walker {
        let entry = entry.map_err(|e| {
            let path = e
                .path()
                .and_then(|p| relative_key(root, p))
                .unwrap_or_else(|| root.display().to_string());
            let source = e
                .into_io_error()
                .unwrap_or_else(|| io::Error::other("directory walk failed"));
            if path == root.display().to_string() {
                CorpusError::RootUnreadable {
                    path: root.to_path_buf(),
                    source,
                }
            } else {
                CorpusError::FileUnreadable { path, source }
            }
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        if !matches_extension(&name, include) {
            continue;
        }
        let Some(key) = relative_key(root, entry.path()) else {
            continue;
        };
        let bytes = fs::read(entry.path()).map_err(|source| CorpusError::FileUnreadable {
            path: key.clone(),
            source,
        })?;
        if let Some(modified) = entry.metadata().ok().and_then(|m| m.modified().ok()) {
            newest = newest.max(modified);
        }
        entries.insert(key, sha256_hex(&bytes));
    }

    let generated_at: DateTime<Utc> = newest.into();
    Ok(Manifest {
        generated_at: DateTime::from_timestamp(generated_at.timestamp(), 0)
            .unwrap_or(DateTime::<Utc>::UNIX_EPOCH),
        entries,
    })
}

pub fn diff_manifests(old: &Manifest, new: &Manifest) -> ChangeSet {
    let mut changes = ChangeSet::default();
    for (path, hash) in &new.entries {
        match old.entries.get(path) {
            None => {
                changes.added.insert(path.clone());
            }
            Some(prev) if prev != hash => {
                changes.modified.insert(path.clone());
            }
            Some(_) => {}
        }
    }
    for path in old.entries.keys() {
        if !new.entries.contains_key(path) {
            changes.removed.insert(path.clone());
        }
    }
    changes
}

/// First level-1 ATX heading outside fenced code, else `None`.
pub(crate) fn first_h1(text: &str) -> Option<String> {
    let mut fence: Option<(char, usize)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(f) = crate::chunker::fence_marker(trimmed) {
            fence = match fence {
                None => Some(f),
                Some((c, n)) if f.0 == c && f.1 >= n && crate::chunker::is_closing_fence(trimmed) => {
                    None
                }
                open => open,
            };
            continue;
        }
        if fence.is_some() {
            continue;
        }
        if let Some((1, title)) = crate::chunker::atx_heading(line) {
            if !title.is_empty() {
                return Some(title);
            }
        }
    }
    None
}

fn file_stem(rel: &str) -> String {
    let name = rel.rsplit('/').next().unwrap_or(rel);
    match name.rfind('.') {
        Some(idx) if idx > 0 => name[..idx].to_string(),
        _ => name.to_string(),
    }
}

/// Reads every manifest entry as a [`SourceDocument`], ordered by path.
pub fn load_documents(root: &Path, manifest: &Manifest) -> Result<Vec<SourceDocument>, CorpusError> {
    let mut docs = Vec::with_capacity(manifest.len());
    for rel in manifest.entries.keys() {
        let bytes = match fs::read(root.join(rel)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CorpusError::StaleManifest { path: rel.clone() })
            }
            Err(source) => {
                return Err(CorpusError::FileUnreadable {
                    path: rel.clone(),
                    source,
                })
            }
        };
        let markdown_text = String::from_utf8_lossy(&bytes).into_owned();
        let title = first_h1(&markdown_text).unwrap_or_else(|| file_stem(rel));
        docs.push(SourceDocument {
            doc_id: rel.clone(),
            title,
            relative_path: rel.clone(),
            content_hash: sha256_hex(&bytes),
            markdown_text,
            byte_length: bytes.len(),
        });
    }
    Ok(docs)
}

/// A place documents are mirrored from.
pub trait RemoteSource: Send + Sync {
    /// Path → content hash for everything the remote offers.
    fn list(&self) -> Result<BTreeMap<String, String>, SyncError>;
    fn fetch(&self, path: &str) -> Result<Vec<u8>, SyncError>;
}

/// Mirrors another local directory (a mounted share, a checkout, ...).
#[derive(Debug, Clone)]
pub struct LocalDirSource {
    root: PathBuf,
    include: Vec<String>,
}

impl LocalDirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            include: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_extensions(mut self, include: &[&str]) -> Self {
        self.include = include.iter().map(|s| s.to_string()).collect();
        self
    }
}

impl RemoteSource for LocalDirSource {
    fn list(&self) -> Result<BTreeMap<String, String>, SyncError> {
        let include: Vec<&str> = self.include.iter().map(String::as_str).collect();
        scan_corpus(&self.root, &include)
            .map(|m| m.entries)
            .map_err(|e| SyncError::Unreachable(e.to_string()))
    }

    fn fetch(&self, path: &str) -> Result<Vec<u8>, SyncError> {
        let rel = normalize_rel_path(path).ok_or_else(|| SyncError::Fetch {
            path: path.to_string(),
            reason: "invalid path".into(),
        })?;
        fs::read(self.root.join(rel)).map_err(|e| SyncError::Fetch {
            path: path.to_string(),
            reason: e.to_string(),
        })
    }
}

/// Makes `root` mirror `source`. Everything is fetched before the first local
/// write, so an unreachable remote leaves the local tree untouched.
pub fn sync_remote(
    source: &dyn RemoteSource,
    root: &Path,
    include: &[&str],
) -> Result<ChangeSet, SyncError> {
    let remote = source.list()?;
    fs::create_dir_all(root).map_err(|source| CorpusError::Write {
        path: root.to_path_buf(),
        source,
    })?;
    let local = scan_corpus(root, include)?;

    let mut remote_manifest = Manifest::empty();
    for (path, hash) in remote {
        let Some(key) = normalize_rel_path(&path) else {
            return Err(SyncError::Fetch {
                path,
                reason: "remote path escapes the corpus root".into(),
            });
        };
        if key.split('/').any(|seg| seg.starts_with('.')) {
            continue;
        }
        remote_manifest.entries.insert(key, hash);
    }
    let changes = diff_manifests(&local, &remote_manifest);
    if changes.is_empty() {
        return Ok(changes);
    }

    let mut downloads = Vec::new();
    for path in changes.added.iter().chain(&changes.modified) {
        let bytes = source.fetch(path)?;
        let expected = &remote_manifest.entries[path];
        if &sha256_hex(&bytes) != expected {
            return Err(SyncError::Fetch {
                path: path.clone(),
                reason: "content hash does not match the remote listing".into(),
            });
        }
        downloads.push((path.clone(), bytes));
    }
    for (path, bytes) in downloads {
        write_atomic(&root.join(&path), &bytes)?;
    }
    for path in &changes.removed {
        let full = root.join(path);
        match fs::remove_file(&full) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(source) => return Err(CorpusError::Write { path: full, source }.into()),
        }
    }
    Ok(changes)
}
