//! Dataset manifests: the CSV index of labelled images and its validation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{ClassLabel, TaskKind};

pub const MANIFEST_HEADER: [&str; 5] = ["id", "path", "label", "source", "sha256"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Path as written in the manifest, relative to the manifest directory
    /// unless absolute.
    pub path: PathBuf,
    /// Source (four-way) label. Binary manifests keep it so folds can stay
    /// stratified over the original classes.
    pub label: ClassLabel,
    pub source: String,
    /// SHA-256 of the file contents.
    pub content_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub task: TaskKind,
    pub version: String,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let version = manifest_digest(&records);
        Ok(Self {
            records,
            task: TaskKind::Multiclass,
            version,
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Counts per task class, keyed by class name, in code order.
    pub fn class_counts(&self) -> BTreeMap<usize, (String, usize)> {
        let mut out: BTreeMap<usize, (String, usize)> = self
            .task
            .class_names()
            .into_iter()
            .enumerate()
            .map(|(code, name)| (code, (name.to_string(), 0)))
            .collect();
        for r in &self.records {
            out.get_mut(&self.task.code_of(r.label)).expect("code in range").1 += 1;
        }
        out
    }

    /// Counts per source label, regardless of task.
    pub fn source_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut out: BTreeMap<ClassLabel, usize> = ClassLabel::ALL.iter().map(|&l| (l, 0)).collect();
        for r in &self.records {
            *out.get_mut(&r.label).expect("all labels present") += 1;
        }
        out
    }

    /// Target code of a record under the manifest's task.
    pub fn target(&self, record: &ImageRecord) -> usize {
        self.task.code_of(record.label)
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Serialize to the manifest CSV format.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(MANIFEST_HEADER).map_err(wrap)?;
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                &r.path.to_string_lossy(),
                r.label.name(),
                r.source.as_str(),
                &hex::encode(r.content_hash),
            ])
            .map_err(wrap)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn manifest_digest(records: &[ImageRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update([0]);
        h.update(r.label.name().as_bytes());
        h.update(r.content_hash);
    }
    hex::encode(&h.finalize()[..8])
}

pub fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Parse a manifest CSV. Image files are not touched.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root)
}

pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = rdr.records();
    let row_err = |line: u64, message: String| Error::ManifestRow { line, message };

    match rows.next() {
        None => return Err(row_err(1, "missing header".into())),
        Some(header) => {
            let header = header.map_err(|e| row_err(1, e.to_string()))?;
            let names: Vec<String> = header.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
            if names != MANIFEST_HEADER {
                return Err(row_err(
                    1,
                    format!("expected header {:?}, found {:?}", MANIFEST_HEADER.join(","), names.join(",")),
                ));
            }
        }
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            row_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if row.len() != MANIFEST_HEADER.len() {
            return Err(row_err(line, format!("expected 5 fields, found {}", row.len())));
        }
        let id = row[0].trim();
        if id.is_empty() {
            return Err(row_err(line, "empty id".into()));
        }
        let label: ClassLabel = row[2].parse().map_err(|e: Error| row_err(line, e.to_string()))?;
        let digest = hex::decode(row[4].trim())
            .ok()
            .and_then(|v| <[u8; 32]>::try_from(v).ok())
            .ok_or_else(|| row_err(line, format!("sha256 must be 64 hex digits, got {:?}", &row[4])))?;
        records.push(ImageRecord {
            id: id.to_string(),
            path: PathBuf::from(row[1].trim()),
            label,
            source: row[3].trim().to_string(),
            content_hash: digest,
        });
    }
    DatasetManifest::new(records, root)
}

/// Build a manifest from a directory laid out as `<root>/<class>/<image>`.
/// Class folder names are matched case-insensitively.
pub fn scan_image_folder(root: impl AsRef<Path>, source: &str) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut records = Vec::new();
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    dirs.sort_by_key(|e| e.file_name());
    for dir in dirs {
        let Ok(label) = dir.file_name().to_string_lossy().parse::<ClassLabel>() else {
            continue;
        };
        let mut files: Vec<_> = fs::read_dir(dir.path())
            .map_err(|e| Error::io(dir.path(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
            let stem = file.file_stem().unwrap_or_default().to_string_lossy();
            records.push(ImageRecord {
                id: format!("{}_{}", label.name().to_ascii_lowercase(), stem),
                path: rel,
                label,
                source: source.to_string(),
                content_hash: sha256_bytes(&bytes),
            });
        }
    }
    DatasetManifest::new(records, root)
}

/// Binary view of a manifest: Mpox stays code 0, everything else becomes
/// Others (code 1). Source labels are kept on the records.
pub fn relabel_binary(manifest: &DatasetManifest) -> DatasetManifest {
    DatasetManifest {
        task: TaskKind::Binary,
        ..manifest.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub details: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Run every integrity check. Failures are report entries, never errors.
///
/// Checks: `file_existence`, `decodability`, `hash_integrity` (declared
/// digest matches the file), `hash_uniqueness` (no two byte-identical
/// files) and `class_balance` (equal count for every source class).
pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut missing = Vec::new();
    let mut undecodable = Vec::new();
    let mut mismatched = Vec::new();
    let mut by_hash: HashMap<[u8; 32], Vec<&str>> = HashMap::new();

    for r in &manifest.records {
        let path = manifest.resolve(r);
        match fs::read(&path) {
            Err(_) => missing.push(format!("{}: {} not found", r.id, path.display())),
            Ok(bytes) => {
                if image::load_from_memory(&bytes).is_err() {
                    undecodable.push(format!("{}: {} does not decode as an image", r.id, path.display()));
                }
                let actual = sha256_bytes(&bytes);
                if actual != r.content_hash {
                    mismatched.push(format!(
                        "{}: declared {} but file hashes to {}",
                        r.id,
                        hex::encode(r.content_hash),
                        hex::encode(actual)
                    ));
                }
                by_hash.entry(actual).or_default().push(&r.id);
            }
        }
    }

    let mut duplicates: Vec<String> = by_hash
        .values()
        .filter(|ids| ids.len() > 1)
        .map(|ids| format!("identical contents: {}", ids.join(", ")))
        .collect();
    duplicates.sort();

    let counts = manifest.source_counts();
    let total = manifest.len();
    let n_classes = ClassLabel::ALL.len();
    let unbalanced: Vec<String> = counts
        .iter()
        .filter(|(_, &n)| n * n_classes != total)
        .map(|(l, n)| format!("{l}: {n} records (expected {})", total as f64 / n_classes as f64))
        .collect();

    let mk = |name: &str, details: Vec<String>| CheckResult {
        name: name.to_string(),
        passed: details.is_empty(),
        details,
    };
    let checks = vec![
        mk("file_existence", missing),
        mk("decodability", undecodable),
        mk("hash_integrity", mismatched),
        mk("hash_uniqueness", duplicates),
        mk("class_balance", unbalanced),
    ];
    let passed = checks.iter().all(|c| c.passed);
    ValidationReport { checks, passed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hash_hex(i: usize) -> String {
        hex::encode(sha256_bytes(i.to_string().as_bytes()))
    }

    fn mcsi_like_csv() -> String {
        let mut s = String::from("id,path,label,source,sha256\n");
        let mut i = 0;
        for l in ClassLabel::ALL {
            for j in 0..100 {
                s.push_str(&format!("{}{j:03},{l}/{j}.jpg,{l},test,{}\n", l.name().to_lowercase(), hash_hex(i)));
                i += 1;
            }
        }
        s
    }

    #[test]
    fn mcsi_sized_manifest_counts() {
        let m = parse_manifest(&mcsi_like_csv(), ".").unwrap();
        assert_eq!(m.len(), 400);
        let counts = m.class_counts();
        assert_eq!(
            counts.values().map(|(n, c)| (n.as_str(), *c)).collect::<Vec<_>>(),
            [("Acne", 100), ("Chickenpox", 100), ("Mpox", 100), ("Healthy", 100)]
        );
    }

    #[test]
    fn header_only_is_empty() {
        let m = parse_manifest("id,path,label,source,sha256\n", ".").unwrap();
        assert!(m.is_empty());
        assert!(m.class_counts().values().all(|(_, c)| *c == 0));
    }

    #[test]
    fn duplicate_id_named() {
        let csv = format!(
            "id,path,label,source,sha256\nm001,a.jpg,Mpox,x,{}\nm001,b.jpg,Acne,x,{}\n",
            hash_hex(1),
            hash_hex(2)
        );
        match parse_manifest(&csv, ".") {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "m001"),
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = format!(
            "id,path,label,source,sha256\na,a.jpg,Mpox,x,{}\nb,b.jpg,Measles,x,{}\n",
            hash_hex(1),
            hash_hex(2)
        );
        match parse_manifest(&csv, ".") {
            Err(Error::ManifestRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected row error, got {other:?}"),
        }
        let short = "id,path,label,source,sha256\na,a.jpg,Mpox\n";
        assert!(matches!(parse_manifest(short, "."), Err(Error::ManifestRow { line: 2, .. })));
        let bad_hash = "id,path,label,source,sha256\na,a.jpg,Mpox,x,abc\n";
        assert!(matches!(parse_manifest(bad_hash, "."), Err(Error::ManifestRow { line: 2, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_manifest("/nonexistent/manifest.csv"), Err(Error::Io { .. })));
    }

    #[test]
    fn relabel_binary_counts() {
        let m = parse_manifest(&mcsi_like_csv(), ".").unwrap();
        let b = relabel_binary(&m);
        let counts: Vec<usize> = b.class_counts().values().map(|(_, c)| *c).collect();
        assert_eq!(counts, [100, 300]);
        assert_eq!(b.source_counts(), m.source_counts());
    }

    #[test]
    fn relabel_without_mpox() {
        let mut m = parse_manifest(&mcsi_like_csv(), ".").unwrap();
        m.records.retain(|r| r.label != ClassLabel::Mpox);
        let extra: Vec<ImageRecord> = m.records[..100]
            .iter()
            .cloned()
            .map(|mut r| {
                r.id.push_str("_dup");
                r
            })
            .collect();
        m.records.extend(extra);
        let b = relabel_binary(&m);
        let counts: Vec<usize> = b.class_counts().values().map(|(_, c)| *c).collect();
        assert_eq!(counts, [0, 400]);
    }

    #[test]
    fn csv_round_trip() {
        let m = parse_manifest(&mcsi_like_csv(), ".").unwrap();
        let again = parse_manifest(&m.to_csv().unwrap(), ".").unwrap();
        assert_eq!(m.records, again.records);
    }
}
