//! Append-only persistence: the generation corpus (JSON lines), the
//! embedding sidecar (binary), and the observation table (CSV).
//!
//! # Corpus
//!
//! UTF-8, one JSON object per line. The first line is a header
//! `{"kind":"corpus","schema_version":1}`; every following line is a
//! [`GenerationRecord`]. A torn final line (crash mid-append) is skipped
//! with a warning, and truncated away the next time the file is opened for
//! appending.
//!
//! # Embedding sidecar
//!
//! ```text
//! hbaudit-embeddings 1\n
//! dim <d>\n
//! count <n>\n
//! <key 0>\n ... <key n-1>\n        (GenerationKey text form)
//! end\n
//! <n * d little-endian f32, row-major, row i belongs to key i>
//! ```
//!
//! # Observation table
//!
//! CSV with header `cosine_raw,cosine_std,race,gender,pair_id,knob,setting`;
//! `pair_id` is written `lo-hi`. Floats use shortest round-trip form.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{GenerationKey, Setting};
use crate::genclient::GenerationRecord;
use crate::simengine::{PairId, SimilarityObservation};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;
pub const EMBEDDING_MAGIC: &str = "hbaudit-embeddings 1";
pub const OBSERVATION_HEADER: &str = "cosine_raw,cosine_std,race,gender,pair_id,knob,setting";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: schema_version {found} (expected {expected})")]
    SchemaVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: missing or malformed header")]
    BadHeader { path: PathBuf },
    #[error("{path}: duplicate key {key}")]
    DuplicateKey { path: PathBuf, key: GenerationKey },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Serialize(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    kind: String,
    schema_version: u32,
}

fn corpus_header() -> String {
    serde_json::to_string(&CorpusHeader { kind: "corpus".into(), schema_version: CORPUS_SCHEMA_VERSION }).unwrap()
}

fn check_header(path: &Path, line: &str) -> Result<(), StoreError> {
    let header: CorpusHeader =
        serde_json::from_str(line.trim_end()).map_err(|_| StoreError::BadHeader { path: path.to_path_buf() })?;
    if header.kind != "corpus" {
        return Err(StoreError::BadHeader { path: path.to_path_buf() });
    }
    if header.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion {
            path: path.to_path_buf(),
            found: header.schema_version,
            expected: CORPUS_SCHEMA_VERSION,
        });
    }
    Ok(())
}

/// Single writer for a corpus file.
pub struct CorpusWriter {
    path: PathBuf,
    file: File,
}

impl CorpusWriter {
    /// Create the file with a header, or reopen an existing one after
    /// checking its header and dropping any torn final line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file = OpenOptions::new().read(true).create(true).append(true).open(path).map_err(io_err(path))?;
        let len = file.metadata().map_err(io_err(path))?.len();
        if len == 0 {
            file.write_all(format!("{}\n", corpus_header()).as_bytes()).map_err(io_err(path))?;
        } else {
            let mut first = String::new();
            BufReader::new(&file).read_line(&mut first).map_err(io_err(path))?;
            check_header(path, &first)?;
            let keep = last_newline_end(&mut file).map_err(io_err(path))?;
            if keep < len {
                warn!("{}: dropping {} bytes of torn trailing record", path.display(), len - keep);
                file.set_len(keep).map_err(io_err(path))?;
            }
        }
        Ok(CorpusWriter { path: path.to_path_buf(), file })
    }

    /// One `write` per record, so concurrent readers only ever see whole
    /// lines or a torn tail.
    pub fn append(&mut self, record: &GenerationRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(record).map_err(|e| StoreError::Serialize(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        self.file.sync_data().map_err(io_err(&self.path))
    }
}

/// Offset just past the last `\n` in the file.
fn last_newline_end(file: &mut File) -> io::Result<u64> {
    let len = file.metadata()?.len();
    let mut pos = len;
    let mut buf = [0u8; 4096];
    while pos > 0 {
        let n = buf.len().min(pos as usize);
        pos -= n as u64;
        file.seek(SeekFrom::Start(pos))?;
        file.read_exact(&mut buf[..n])?;
        if let Some(i) = buf[..n].iter().rposition(|&b| b == b'\n') {
            return Ok(pos + i as u64 + 1);
        }
    }
    Ok(0)
}

#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub records: Vec<GenerationRecord>,
    pub warnings: Vec<String>,
}

/// Read a corpus, skipping (and reporting) unparsable lines.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<LoadedCorpus, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let text = String::from_utf8_lossy(&bytes);
    let mut out = LoadedCorpus::default();
    let mut lines = text.split_inclusive('\n');
    match lines.next() {
        None => return Ok(out),
        Some(first) => check_header(path, first)?,
    }
    let mut seen = HashSet::new();
    for (i, raw) in lines.enumerate() {
        let lineno = i + 2;
        let complete = raw.ends_with('\n');
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GenerationRecord>(line) {
            Ok(rec) => {
                if !seen.insert(rec.key()) {
                    return Err(StoreError::DuplicateKey { path: path.to_path_buf(), key: rec.key() });
                }
                out.records.push(rec);
            }
            Err(e) if !complete => {
                out.warnings.push(format!("{}:{lineno}: truncated trailing record ({e})", path.display()))
            }
            Err(e) => out.warnings.push(format!("{}:{lineno}: skipped corrupt record ({e})", path.display())),
        }
    }
    Ok(out)
}

/// Keys already persisted; empty when the corpus does not exist yet.
pub fn existing_keys(path: impl AsRef<Path>) -> Result<HashSet<GenerationKey>, StoreError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(HashSet::new());
    }
    Ok(load_corpus(path)?.records.iter().map(GenerationRecord::key).collect())
}

/// Plain JSON-lines log without header or key checks (failure reports).
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), StoreError> {
    let path = path.as_ref();
    let mut line = serde_json::to_string(value).map_err(|e| StoreError::Serialize(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(line.as_bytes()).map_err(io_err(path))
}

/// Write through a temp file in the same directory and rename into place.
pub fn write_atomic<F>(path: impl AsRef<Path>, fill: F) -> Result<(), StoreError>
where
    F: FnOnce(&mut BufWriter<File>) -> io::Result<()>,
{
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    fill(&mut w).map_err(io_err(&tmp))?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Row-major block of equal-dimension vectors with their keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub keys: Vec<GenerationKey>,
    pub values: Vec<f32>,
}

impl EmbeddingSet {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<(), StoreError> {
    assert_eq!(set.values.len(), set.keys.len() * set.dim, "embedding block shape");
    write_atomic(path, |w| {
        writeln!(w, "{EMBEDDING_MAGIC}")?;
        writeln!(w, "dim {}", set.dim)?;
        writeln!(w, "count {}", set.keys.len())?;
        for k in &set.keys {
            writeln!(w, "{k}")?;
        }
        writeln!(w, "end")?;
        for v in &set.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet, StoreError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut lineno = 0usize;
    let mut next_line = |r: &mut BufReader<File>| -> Result<String, StoreError> {
        let mut s = String::new();
        r.read_line(&mut s).map_err(io_err(path))?;
        lineno += 1;
        if !s.ends_with('\n') {
            return Err(StoreError::Malformed { path: path.into(), line: lineno, msg: "unexpected end of header".into() });
        }
        s.pop();
        Ok(s)
    };
    if next_line(&mut r)? != EMBEDDING_MAGIC {
        return Err(StoreError::BadHeader { path: path.to_path_buf() });
    }
    let field = |s: String, name: &str| -> Result<usize, StoreError> {
        s.strip_prefix(name)
            .and_then(|v| v.trim().parse().ok())
            .ok_or(StoreError::BadHeader { path: path.to_path_buf() })
    };
    let dim = field(next_line(&mut r)?, "dim ")?;
    let count = field(next_line(&mut r)?, "count ")?;
    let mut keys = Vec::with_capacity(count);
    for _ in 0..count {
        let s = next_line(&mut r)?;
        let key = s.parse().map_err(|e: crate::design::ParseKeyError| StoreError::Malformed {
            path: path.into(),
            line: keys.len() + 4,
            msg: e.to_string(),
        })?;
        keys.push(key);
    }
    if next_line(&mut r)? != "end" {
        return Err(StoreError::BadHeader { path: path.to_path_buf() });
    }
    let mut raw = Vec::with_capacity(count * dim * 4);
    r.read_to_end(&mut raw).map_err(io_err(path))?;
    if raw.len() != count * dim * 4 {
        return Err(StoreError::Malformed {
            path: path.into(),
            line: 0,
            msg: format!("payload has {} bytes, expected {}", raw.len(), count * dim * 4),
        });
    }
    let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(EmbeddingSet { dim, keys, values })
}

/// Append one observation row (no header) to `out`.
pub fn write_observation_row(out: &mut Vec<u8>, obs: &SimilarityObservation) {
    // Writing into a Vec cannot fail.
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{}",
        obs.cosine_raw, obs.cosine_std, obs.race, obs.gender, obs.pair_id, obs.knob, obs.setting
    );
}

pub fn write_observations(path: impl AsRef<Path>, rows: &[SimilarityObservation]) -> Result<(), StoreError> {
    write_atomic(path, |w| {
        writeln!(w, "{OBSERVATION_HEADER}")?;
        let mut buf = Vec::with_capacity(96);
        for obs in rows {
            buf.clear();
            write_observation_row(&mut buf, obs);
            w.write_all(&buf)?;
        }
        Ok(())
    })
}

/// Streaming reader over an observation table.
pub struct ObservationReader {
    path: PathBuf,
    reader: csv::Reader<File>,
    record: csv::ByteRecord,
    line: usize,
}

impl ObservationReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(io_err(&path))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).buffer_capacity(1 << 20).from_reader(file);
        let header = reader
            .byte_headers()
            .map_err(|e| StoreError::Malformed { path: path.clone(), line: 1, msg: e.to_string() })?;
        if header.as_slice() != OBSERVATION_HEADER.replace(',', "").as_bytes() || header.len() != 7 {
            return Err(StoreError::BadHeader { path });
        }
        Ok(ObservationReader { path, reader, record: csv::ByteRecord::new(), line: 1 })
    }

    fn parse(&self) -> Result<SimilarityObservation, String> {
        let f = |i: usize| std::str::from_utf8(&self.record[i]).map_err(|e| e.to_string());
        let num = |i: usize| -> Result<f64, String> { f(i)?.parse::<f64>().map_err(|e| format!("column {i}: {e}")) };
        Ok(SimilarityObservation {
            cosine_raw: num(0)?,
            cosine_std: num(1)?,
            race: f(2)?.parse().map_err(|e: crate::design::ParseLevelError| e.to_string())?,
            gender: f(3)?.parse().map_err(|e: crate::design::ParseLevelError| e.to_string())?,
            pair_id: f(4)?.parse()?,
            knob: f(5)?.parse().map_err(|e: crate::design::ParseLevelError| e.to_string())?,
            setting: Setting::new(num(6)?),
        })
    }
}

impl Iterator for ObservationReader {
    type Item = Result<SimilarityObservation, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.reader.read_byte_record(&mut self.record) {
            Ok(false) => None,
            Ok(true) => {
                self.line += 1;
                Some(self.parse().map_err(|msg| StoreError::Malformed { path: self.path.clone(), line: self.line, msg }))
            }
            Err(e) => Some(Err(StoreError::Malformed { path: self.path.clone(), line: self.line + 1, msg: e.to_string() })),
        }
    }
}

pub fn read_observations(path: impl AsRef<Path>) -> Result<Vec<SimilarityObservation>, StoreError> {
    ObservationReader::open(path)?.collect()
}

impl std::str::FromStr for PairId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once('-').ok_or_else(|| format!("malformed pair_id {s:?}"))?;
        let a = a.parse().map_err(|_| format!("malformed pair_id {s:?}"))?;
        let b = b.parse().map_err(|_| format!("malformed pair_id {s:?}"))?;
        Ok(PairId::new(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{Gender, Knob, Race, Stimulus};
    use crate::genclient::{BackendKind, GenerationRequest, GenerationStatus};
    use chrono::{DateTime, Utc};

    fn record(set_id: u32, replicate: u32, text: &str) -> GenerationRecord {
        let req = GenerationRequest {
            stimulus: Stimulus::new(set_id, Race::Black, Gender::Woman),
            knob: Knob::Temperature,
            setting: Setting::new(0.5),
            replicate_index: replicate,
            temperature: 0.5,
            top_p: 1.0,
            system_prompt: "sys".into(),
            user_prompt: "user".into(),
            max_tokens: 150,
            seed: Some(3),
        };
        GenerationRecord::new(req, text.into(), BackendKind::Simulated, "sim", DateTime::<Utc>::UNIX_EPOCH, GenerationStatus::Ok)
    }

    #[test]
    fn append_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut w = CorpusWriter::open(&path).unwrap();
        for i in 0..3000 {
            w.append(&record(1 + i / 50, i % 50, &format!("story {i} — ünïcødé ✓"))).unwrap();
        }
        drop(w);
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.records.len(), 3000);
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.records[7], record(1, 7, "story 7 — ünïcødé ✓"));
        assert_eq!(existing_keys(&path).unwrap().len(), 3000);
    }

    #[test]
    fn torn_tail_is_reported_then_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut w = CorpusWriter::open(&path).unwrap();
        for i in 0..5 {
            w.append(&record(1, i, "text")).unwrap();
        }
        drop(w);
        let len = fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 20).unwrap();
        drop(f);

        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.records.len(), 4);
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("truncated"));

        let mut w = CorpusWriter::open(&path).unwrap();
        w.append(&record(1, 4, "text")).unwrap();
        drop(w);
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.records.len(), 5);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn duplicate_key_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut w = CorpusWriter::open(&path).unwrap();
        w.append(&record(2, 9, "a")).unwrap();
        w.append(&record(2, 9, "b")).unwrap();
        drop(w);
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("2|Black|Woman|temperature|0.5|9"), "{err}");
    }

    #[test]
    fn schema_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        fs::write(&path, "{\"kind\":\"corpus\",\"schema_version\":99}\n").unwrap();
        assert!(matches!(load_corpus(&path), Err(StoreError::SchemaVersion { found: 99, .. })));
        assert!(matches!(CorpusWriter::open(&path), Err(StoreError::SchemaVersion { .. })));
    }

    #[test]
    fn corrupt_middle_line_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut w = CorpusWriter::open(&path).unwrap();
        w.append(&record(1, 0, "a")).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{not json}\n").unwrap();
        drop(f);
        let mut w = CorpusWriter::open(&path).unwrap();
        w.append(&record(1, 1, "b")).unwrap();
        drop(w);
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        assert!(matches!(CorpusWriter::open(blocker.join("corpus.jsonl")), Err(StoreError::Io { .. })));
    }

    #[test]
    fn embedding_sidecar_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let keys = vec![record(1, 0, "").key(), record(1, 1, "").key()];
        let set = EmbeddingSet { dim: 2, keys, values: vec![1.0, -2.5, 0.25, 3.0] };
        write_embeddings(&path, &set).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = "hbaudit-embeddings 1\ndim 2\ncount 2\n1|Black|Woman|temperature|0.5|0\n1|Black|Woman|temperature|0.5|1\nend\n";
        assert_eq!(&bytes[..header.len()], header.as_bytes());
        assert_eq!(&bytes[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), header.len() + 16);
        assert_eq!(read_embeddings(&path).unwrap(), set);
    }

    #[test]
    fn observation_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let rows = vec![
            SimilarityObservation {
                cosine_raw: 0.1 + 0.2,
                cosine_std: -1.234567890123e-5,
                race: Race::White,
                gender: Gender::Man,
                pair_id: PairId::new(7, 3),
                knob: Knob::TopP,
                setting: Setting::new(0.2),
            },
        ];
        write_observations(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("cosine_raw,cosine_std,race,gender,pair_id,knob,setting\n"));
        assert!(text.contains(",White,Man,3-7,top_p,0.2\n"));
        assert_eq!(read_observations(&path).unwrap(), rows);
    }
}
