//! Labeled contract dataset: JSONL manifest ingest and stratified splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("unknown label {label:?} on manifest line {line}")]
    UnknownLabel { line: usize, label: String },
    #[error("unknown provenance {provenance:?} on manifest line {line}")]
    UnknownProvenance { line: usize, provenance: String },
    #[error("duplicate id {id:?} on manifest line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("invalid bytecode on manifest line {line}: {reason}")]
    InvalidBytecode { line: usize, reason: String },
    #[error("class {label} has {count} record(s); at least 2 are needed to split")]
    ClassTooSmall { label: Label, count: usize },
    #[error("test fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Vulnerability class. Discriminants are the model's output indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Arithmetic = 0,
    Reentrancy = 1,
    Clean = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Arithmetic, Label::Reentrancy, Label::Clean];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Arithmetic => "arithmetic",
            Label::Reentrancy => "reentrancy",
            Label::Clean => "clean",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "arithmetic" => Ok(Label::Arithmetic),
            "reentrancy" | "re-entrancy" => Ok(Label::Reentrancy),
            "clean" => Ok(Label::Clean),
            _ => Err(()),
        }
    }
}

/// Where a contract came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Curated,
    #[serde(rename = "solidifi")]
    SolidiFI,
    Wild,
    Local,
}

impl FromStr for Provenance {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "curated" => Ok(Provenance::Curated),
            "solidifi" => Ok(Provenance::SolidiFI),
            "wild" => Ok(Provenance::Wild),
            "local" => Ok(Provenance::Local),
            _ => Err(()),
        }
    }
}

/// Validates and normalizes hex bytecode: strips `0x`, lowercases, checks
/// characters and even length.
pub fn normalize_bytecode(raw: &str) -> Result<String, String> {
    let trimmed = raw.trim();
    let body = trimmed.strip_prefix("0x").or_else(|| trimmed.strip_prefix("0X")).unwrap_or(trimmed);
    if let Some((i, c)) = body.char_indices().find(|(_, c)| !c.is_ascii_hexdigit()) {
        return Err(format!("non-hex character {c:?} at position {i}"));
    }
    if !body.len().is_multiple_of(2) {
        return Err(format!("odd hex length {}", body.len()));
    }
    Ok(body.to_ascii_lowercase())
}

/// One labeled contract.
#[derive(Debug)]
pub struct ContractRecord {
    pub id: String,
    pub source_path: PathBuf,
    pub label: Label,
    /// Runtime bytecode, lowercase hex without prefix.
    pub bytecode: Option<String>,
    pub provenance: Provenance,
    source_text: OnceLock<String>,
}

impl Clone for ContractRecord {
    fn clone(&self) -> Self {
        let source_text = OnceLock::new();
        if let Some(text) = self.source_text.get() {
            let _ = source_text.set(text.clone());
        }
        Self {
            id: self.id.clone(),
            source_path: self.source_path.clone(),
            label: self.label,
            bytecode: self.bytecode.clone(),
            provenance: self.provenance,
            source_text,
        }
    }
}

impl ContractRecord {
    pub fn new(
        id: impl Into<String>,
        source_path: impl Into<PathBuf>,
        label: Label,
        bytecode: Option<String>,
        provenance: Provenance,
    ) -> Self {
        Self {
            id: id.into(),
            source_path: source_path.into(),
            label,
            bytecode,
            provenance,
            source_text: OnceLock::new(),
        }
    }

    /// A record whose source is already in memory.
    pub fn with_source(mut self, text: impl Into<String>) -> Self {
        self.source_text = OnceLock::from(text.into());
        self
    }

    /// Source text, read from disk on first access.
    pub fn source_text(&self) -> Result<&str, CorpusError> {
        if let Some(text) = self.source_text.get() {
            return Ok(text);
        }
        let bytes = fs::read(&self.source_path)
            .map_err(|source| CorpusError::Io { path: self.source_path.clone(), source })?;
        let text = String::from_utf8_lossy(&bytes).into_owned();
        Ok(self.source_text.get_or_init(|| text))
    }
}

#[derive(Deserialize)]
struct ManifestLine {
    id: String,
    source_path: String,
    label: String,
    provenance: String,
    #[serde(default)]
    bytecode: Option<String>,
}

/// Reads a JSONL manifest. Blank lines are skipped; relative `source_path`
/// values resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ContractRecord>, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(BufReader::new(file), &base).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io { path: path.to_path_buf(), source },
        other => other,
    })
}

pub fn parse_manifest(reader: impl BufRead, base_dir: &Path) -> Result<Vec<ContractRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io { path: base_dir.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedManifest { line: line_no, reason: e.to_string() })?;
        if raw.id.is_empty() {
            return Err(CorpusError::MalformedManifest { line: line_no, reason: "empty id".into() });
        }
        let label = raw
            .label
            .parse::<Label>()
            .map_err(|_| CorpusError::UnknownLabel { line: line_no, label: raw.label.clone() })?;
        let provenance = raw
            .provenance
            .parse::<Provenance>()
            .map_err(|_| CorpusError::UnknownProvenance { line: line_no, provenance: raw.provenance.clone() })?;
        let bytecode = match raw.bytecode.as_deref() {
            None => None,
            Some(b) if b.trim().is_empty() => None,
            Some(b) => Some(
                normalize_bytecode(b).map_err(|reason| CorpusError::InvalidBytecode { line: line_no, reason })?,
            ),
        };
        if !seen.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId { line: line_no, id: raw.id });
        }
        let source_path = {
            let p = PathBuf::from(&raw.source_path);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        records.push(ContractRecord::new(raw.id, source_path, label, bytecode, provenance));
    }
    Ok(records)
}

/// Count of records per class, in [`Label::ALL`] order.
pub fn class_histogram(records: &[ContractRecord]) -> BTreeMap<Label, usize> {
    let mut hist: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
    for r in records {
        *hist.entry(r.label).or_default() += 1;
    }
    hist
}

/// Train/test partition of record ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub test_fraction: f64,
}

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Per-class test quotas by largest remainder, so the total is
/// `round(n · fraction)` while each class stays within one sample of its
/// proportional share. Every class keeps at least one record on each side.
fn test_quotas(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target_total = (total as f64 * fraction).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let remaining = target_total.saturating_sub(quotas.iter().sum());
    for &i in order.iter().take(remaining) {
        quotas[i] += 1;
    }
    for (q, &c) in quotas.iter_mut().zip(counts) {
        *q = (*q).clamp(1, c - 1);
    }
    quotas
}

/// Deterministic stratified split. Within each class, ids are sorted, shuffled
/// with a ChaCha8 generator seeded from `seed`, and the first quota go to test.
pub fn stratified_split(records: &[ContractRecord], test_fraction: f64, seed: u64) -> Result<DatasetSplit, CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(test_fraction));
    }
    let mut by_class: BTreeMap<Label, Vec<&str>> = Label::ALL.iter().map(|&l| (l, Vec::new())).collect();
    for r in records {
        by_class.entry(r.label).or_default().push(&r.id);
    }
    for (&label, ids) in &by_class {
        if ids.len() < 2 {
            return Err(CorpusError::ClassTooSmall { label, count: ids.len() });
        }
    }
    let counts: Vec<usize> = by_class.values().map(Vec::len).collect();
    let quotas = test_quotas(&counts, test_fraction);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ids, quota) in by_class.into_values().zip(quotas) {
        let mut ids: Vec<&str> = ids;
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        test.extend(ids[..quota].iter().map(|s| s.to_string()));
        train.extend(ids[quota..].iter().map(|s| s.to_string()));
    }
    Ok(DatasetSplit { train, test, seed, test_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<Vec<ContractRecord>, CorpusError> {
        parse_manifest(Cursor::new(text), Path::new("/data"))
    }

    fn records(counts: [usize; 3]) -> Vec<ContractRecord> {
        let mut out = Vec::new();
        for (label, n) in Label::ALL.into_iter().zip(counts) {
            for i in 0..n {
                out.push(ContractRecord::new(format!("{label}-{i:04}"), "x.sol", label, None, Provenance::Local));
            }
        }
        out
    }

    #[test]
    fn three_lines_one_per_class() {
        let text = r#"{"id":"a","source_path":"a.sol","label":"arithmetic","provenance":"curated"}
{"id":"b","source_path":"b.sol","label":"reentrancy","provenance":"solidifi","bytecode":"0x6001"}
{"id":"c","source_path":"/abs/c.sol","label":"clean","provenance":"wild"}
"#;
        let recs = parse(text).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs.iter().map(|r| r.label).collect::<Vec<_>>(), Label::ALL.to_vec());
        assert_eq!(recs[0].source_path, PathBuf::from("/data/a.sol"));
        assert_eq!(recs[1].bytecode.as_deref(), Some("6001"));
        assert_eq!(recs[2].source_path, PathBuf::from("/abs/c.sol"));
        assert_eq!(recs[1].provenance, Provenance::SolidiFI);
    }

    #[test]
    fn unknown_label_names_the_line() {
        let text = "{\"id\":\"a\",\"source_path\":\"a.sol\",\"label\":\"clean\",\"provenance\":\"local\"}\n\
                    {\"id\":\"b\",\"source_path\":\"b.sol\",\"label\":\"Overflow\",\"provenance\":\"local\"}\n";
        match parse(text) {
            Err(CorpusError::UnknownLabel { line: 2, label }) => assert_eq!(label, "Overflow"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_lines() {
        let err = parse("{\"id\":\"a\",\n").unwrap_err();
        assert!(matches!(err, CorpusError::MalformedManifest { line: 1, .. }), "{err}");
        let dup = "{\"id\":\"a\",\"source_path\":\"a\",\"label\":\"clean\",\"provenance\":\"local\"}\n\n\
                   {\"id\":\"a\",\"source_path\":\"b\",\"label\":\"clean\",\"provenance\":\"local\"}\n";
        assert!(matches!(parse(dup).unwrap_err(), CorpusError::DuplicateId { line: 3, .. }));
        let bad_hex = "{\"id\":\"a\",\"source_path\":\"a\",\"label\":\"clean\",\"provenance\":\"local\",\"bytecode\":\"0x600\"}";
        assert!(matches!(parse(bad_hex).unwrap_err(), CorpusError::InvalidBytecode { line: 1, .. }));
    }

    #[test]
    fn bytecode_is_normalized() {
        assert_eq!(normalize_bytecode("0xAbCd").unwrap(), "abcd");
        assert_eq!(normalize_bytecode("").unwrap(), "");
        assert!(normalize_bytecode("zz").is_err());
    }

    #[test]
    fn full_corpus_split_has_354_test_records() {
        let recs = records([631, 591, 547]);
        let split = stratified_split(&recs, DEFAULT_TEST_FRACTION, 7).unwrap();
        assert!(split.test.len().abs_diff(354) <= 1, "{}", split.test.len());
        assert_eq!(split.train.len() + split.test.len(), 1769);
    }

    #[test]
    fn split_is_deterministic() {
        let recs = records([4, 3, 3]);
        let a = stratified_split(&recs, 0.5, 1).unwrap();
        let b = stratified_split(&recs, 0.5, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn one_third_of_nine_balanced_is_one_per_class() {
        let recs = records([3, 3, 3]);
        let split = stratified_split(&recs, 1.0 / 3.0, 5).unwrap();
        assert_eq!(split.test.len(), 3);
        for label in Label::ALL {
            let prefix = format!("{label}-");
            assert_eq!(split.test.iter().filter(|id| id.starts_with(&prefix)).count(), 1);
        }
    }

    #[test]
    fn tiny_class_rejected() {
        let recs = records([3, 1, 3]);
        assert!(matches!(
            stratified_split(&recs, 0.2, 0),
            Err(CorpusError::ClassTooSmall { label: Label::Reentrancy, count: 1 })
        ));
        assert!(matches!(stratified_split(&records([3, 3, 3]), 1.0, 0), Err(CorpusError::InvalidFraction(_))));
    }

    #[test]
    fn lazy_source_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.sol");
        fs::write(&p, "contract C {}").unwrap();
        let r = ContractRecord::new("c", &p, Label::Clean, None, Provenance::Local);
        assert_eq!(r.source_text().unwrap(), "contract C {}");
        fs::remove_file(&p).unwrap();
        assert_eq!(r.clone().source_text().unwrap(), "contract C {}");
    }
}
