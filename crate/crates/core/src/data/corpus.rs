use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal that separates the answer from the passage in question-generation inputs.
pub const SEP_MARKER: &str = "[SEP]";

/// Largest tolerated fraction of malformed records.
pub const MALFORMED_LIMIT: f64 = 0.10;

/// A document (empty target) or an input/target pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub input: String,
    #[serde(default)]
    pub target: String,
}

impl RawExample {
    pub fn document(text: impl Into<String>) -> Self {
        Self { input: text.into(), target: String::new() }
    }

    pub fn pair(input: impl Into<String>, target: impl Into<String>) -> Self {
        Self { input: input.into(), target: target.into() }
    }

    /// Question-generation example with input `answer [SEP] passage`.
    pub fn qg(answer: &str, passage: &str, question: impl Into<String>) -> Self {
        Self { input: format!("{answer} {SEP_MARKER} {passage}"), target: question.into() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One document per line.
    #[default]
    Plain,
    /// One JSON object per line with `input` and optional `target` strings.
    Records,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "text" => Ok(Self::Plain),
            "records" | "jsonl" => Ok(Self::Records),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// Streaming reader over a corpus. Blank lines are ignored; lines that are
/// not valid UTF-8 or not well-formed records are counted and skipped. Once
/// the input is exhausted the reader yields a final error if more than
/// [`MALFORMED_LIMIT`] of the records were malformed.
pub struct CorpusReader<R> {
    reader: R,
    format: CorpusFormat,
    source: PathBuf,
    buf: Vec<u8>,
    records: usize,
    malformed: usize,
    finished: bool,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, format: CorpusFormat, source: impl Into<PathBuf>) -> Self {
        Self { reader, format, source: source.into(), buf: Vec::new(), records: 0, malformed: 0, finished: false }
    }

    /// Records seen so far, malformed ones included.
    pub fn records(&self) -> usize {
        self.records
    }

    pub fn malformed(&self) -> usize {
        self.malformed
    }

    fn parse(&self, line: &str) -> Option<RawExample> {
        match self.format {
            CorpusFormat::Plain => Some(RawExample::document(line)),
            CorpusFormat::Records => {
                let ex: RawExample = serde_json::from_str(line).ok()?;
                (!ex.input.trim().is_empty()).then_some(ex)
            }
        }
    }

    fn finish(&mut self) -> Option<Result<RawExample>> {
        self.finished = true;
        if self.records == 0 {
            log::warn!("{}: corpus is empty", self.source.display());
            return None;
        }
        if self.malformed > 0 {
            log::warn!("{}: skipped {} of {} malformed records", self.source.display(), self.malformed, self.records);
        }
        if self.malformed as f64 > MALFORMED_LIMIT * self.records as f64 {
            return Some(Err(Error::TooManyMalformed { skipped: self.malformed, total: self.records }));
        }
        None
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<RawExample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Err(e) => {
                    self.finished = true;
                    return Some(Err(Error::io(&self.source, e)));
                }
                Ok(0) => return self.finish(),
                Ok(_) => {}
            }
            let Ok(line) = std::str::from_utf8(&self.buf) else {
                self.records += 1;
                self.malformed += 1;
                continue;
            };
            let line = line.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            self.records += 1;
            match self.parse(line) {
                Some(ex) => return Some(Ok(ex)),
                None => self.malformed += 1,
            }
        }
    }
}

/// Opens `path` as a streaming corpus.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<CorpusReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(CorpusReader::new(BufReader::new(file), format, path))
}

/// Reads a whole corpus into memory.
pub fn read_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<RawExample>> {
    load_corpus(path, format)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn reader(text: &[u8], format: CorpusFormat) -> CorpusReader<Cursor<Vec<u8>>> {
        CorpusReader::new(Cursor::new(text.to_vec()), format, "mem")
    }

    #[test]
    fn empty_input_yields_nothing() {
        let mut r = reader(b"", CorpusFormat::Plain);
        assert!(r.next().is_none());
        assert!(r.next().is_none());
    }

    #[test]
    fn plain_lines() {
        let got: Vec<_> = reader(b"one\ntwo words\r\n\nthree\n", CorpusFormat::Plain).collect::<Result<_>>().unwrap();
        assert_eq!(got, vec![RawExample::document("one"), RawExample::document("two words"), RawExample::document("three")]);
    }

    #[test]
    fn one_corrupt_record_in_a_hundred() {
        let mut text = String::new();
        for i in 0..100 {
            if i == 37 {
                text.push_str("{\"input\": \"broken\n");
            } else {
                text.push_str(&format!("{{\"input\": \"in {i}\", \"target\": \"out {i}\"}}\n"));
            }
        }
        let mut r = reader(text.as_bytes(), CorpusFormat::Records);
        let got: Vec<_> = r.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(got.len(), 99);
        assert_eq!(r.malformed(), 1);
        assert_eq!(r.records(), 100);
        assert_eq!(got[0], RawExample::pair("in 0", "out 0"));
    }

    #[test]
    fn too_many_malformed_is_an_error() {
        let mut text = Vec::new();
        for i in 0..20 {
            if i % 4 == 0 {
                text.extend_from_slice(b"\xff\xfe not utf8\n");
            } else {
                text.extend_from_slice(format!("{{\"input\": \"x{i}\"}}\n").as_bytes());
            }
        }
        let results: Vec<_> = reader(&text, CorpusFormat::Records).collect();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 15);
        assert!(matches!(results.last(), Some(Err(Error::TooManyMalformed { skipped: 5, total: 20 }))));
    }

    #[test]
    fn records_need_nonempty_input() {
        let mut r = reader(b"{\"input\": \"\", \"target\": \"t\"}\n{\"input\": \"a\"}\n", CorpusFormat::Records);
        assert_eq!(r.next().unwrap().unwrap(), RawExample::document("a"));
        assert_eq!(r.malformed(), 1);
    }

    #[test]
    fn qg_input_layout() {
        let ex = RawExample::qg("Paris", "France's capital is Paris", "What is the capital?");
        assert_eq!(ex.input, "Paris [SEP] France's capital is Paris");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_corpus(Path::new("/nonexistent/corpus.txt"), CorpusFormat::Plain), Err(Error::Io { .. })));
    }
}
