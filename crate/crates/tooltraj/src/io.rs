//! Line-delimited JSON input and output.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use tooltraj_core::corpus::TextSegment;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("read error in {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("write error in {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: corrupt record: {detail}")]
    Corrupt { path: PathBuf, line: usize, detail: String },
}

/// Counters for lines the loader skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub loaded: usize,
    pub missing_text: usize,
    pub malformed: usize,
}

/// Streaming reader of text segments from a JSONL file.
pub struct SegmentReader<R> {
    lines: io::Lines<R>,
    path: PathBuf,
    source: String,
    text_field: String,
    id_field: String,
    line_no: usize,
    remaining: Option<usize>,
    pub stats: LoadStats,
}

/// Opens `path` for streaming. Lines lacking a string `text_field` are
/// skipped and counted; ids default to `<source>:<line>` where source is
/// the file stem.
pub fn load_segments(
    path: &Path,
    text_field: &str,
    id_field: &str,
    limit: Option<usize>,
) -> Result<SegmentReader<BufReader<File>>, IoError> {
    let file = File::open(path).map_err(|source| IoError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    Ok(SegmentReader::new(
        BufReader::new(file),
        path,
        source,
        text_field,
        id_field,
        limit,
    ))
}

impl<R: BufRead> SegmentReader<R> {
    pub fn new(
        reader: R,
        path: &Path,
        source: impl Into<String>,
        text_field: &str,
        id_field: &str,
        limit: Option<usize>,
    ) -> Self {
        SegmentReader {
            lines: reader.lines(),
            path: path.to_path_buf(),
            source: source.into(),
            text_field: text_field.into(),
            id_field: id_field.into(),
            line_no: 0,
            remaining: limit,
            stats: LoadStats::default(),
        }
    }

    fn segment_from(&mut self, line: &str) -> Option<TextSegment> {
        let Ok(Value::Object(record)) = serde_json::from_str::<Value>(line) else {
            log::warn!("{}:{}: not a JSON object, skipped", self.path.display(), self.line_no);
            self.stats.malformed += 1;
            return None;
        };
        let id = match record.get(&self.id_field) {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("{}:{}", self.source, self.line_no),
        };
        let text = record.get(&self.text_field).and_then(Value::as_str);
        match text.and_then(|t| TextSegment::new(id, t, self.source.clone())) {
            Some(seg) => Some(seg),
            None => {
                log::warn!(
                    "{}:{}: no usable `{}` field, skipped",
                    self.path.display(),
                    self.line_no,
                    self.text_field
                );
                self.stats.missing_text += 1;
                None
            }
        }
    }
}

impl<R: BufRead> Iterator for SegmentReader<R> {
    type Item = Result<TextSegment, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == Some(0) {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(source) => {
                    return Some(Err(IoError::Read {
                        path: self.path.clone(),
                        source,
                    }))
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(seg) = self.segment_from(&line) {
                self.stats.loaded += 1;
                if let Some(r) = self.remaining.as_mut() {
                    *r -= 1;
                }
                return Some(Ok(seg));
            }
        }
    }
}

/// Reads every record of a JSONL file. With `tolerate_torn_tail`, an
/// unparseable final line lacking its newline is ignored (an interrupted
/// append); any other bad line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, tolerate_torn_tail: bool) -> Result<Vec<T>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) => {
                let torn = tolerate_torn_tail && !complete && i + 1 == lines.len();
                if torn {
                    log::warn!("{}: ignoring torn final line", path.display());
                    break;
                }
                return Err(IoError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Writes `records` as JSONL, replacing the file.
pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let werr = |source| IoError::Write {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(werr)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| werr(e.into()))?;
        w.write_all(b"\n").map_err(werr)?;
    }
    w.flush().map_err(werr)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Append-only JSONL file shared between workers. Each record is written
/// with a single `write_all` of one complete line.
pub struct Appender {
    path: PathBuf,
    file: Mutex<File>,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Self, IoError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| IoError::Open {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Appender {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), IoError> {
        let mut line = serde_json::to_vec(record).expect("serializable");
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(&line).map_err(|source| IoError::Write {
            path: self.path.clone(),
            source,
        })
    }
}
