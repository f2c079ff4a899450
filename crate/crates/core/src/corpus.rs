//! Caption corpora in JSON Lines form and summary-paragraph extraction.
//!
//! One record per line: `{"id": str, "caption": str, "tags": [str]?,
//! "duration_seconds": number?}`. Loading is lazy and never silently drops a
//! line: each malformed line surfaces as a [`LineError`] carrying its 1-based
//! line number, and callers usually collect those into a load report.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::TagList;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<TagList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_seconds: Option<f64>,
}

/// One entry of a load report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub error: String,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    caption: Option<String>,
    #[serde(default)]
    tags: Option<Vec<String>>,
    #[serde(default)]
    duration_seconds: Option<f64>,
}

/// Lazy record iterator over any line source.
pub struct RecordStream<R> {
    lines: Lines<R>,
    line_no: usize,
    seen: HashSet<String>,
}

impl<R: BufRead> RecordStream<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            seen: HashSet::new(),
        }
    }

    fn parse_line(&mut self, text: &str) -> Result<CaptionRecord, String> {
        let raw: RawRecord = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
        let id = match raw.id {
            Some(id) if !id.trim().is_empty() => id,
            Some(_) => return Err("empty \"id\"".into()),
            None => return Err("missing \"id\"".into()),
        };
        let caption = match raw.caption {
            Some(c) if !c.trim().is_empty() => c,
            Some(_) => return Err("empty \"caption\"".into()),
            None => return Err("missing \"caption\"".into()),
        };
        let tags = raw
            .tags
            .map(TagList::new)
            .transpose()
            .map_err(|e| format!("invalid \"tags\": {e}"))?;
        if let Some(d) = raw.duration_seconds {
            if !(d.is_finite() && d >= 0.0) {
                return Err(format!("invalid \"duration_seconds\": {d}"));
            }
        }
        if !self.seen.insert(id.clone()) {
            return Err(format!("duplicate id {id:?}"));
        }
        Ok(CaptionRecord {
            id,
            caption,
            tags,
            duration_seconds: raw.duration_seconds,
        })
    }
}

impl<R: BufRead> Iterator for RecordStream<R> {
    type Item = Result<CaptionRecord, LineError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line_no = self.line_no;
            let text = match line {
                Ok(text) => text,
                Err(e) => {
                    return Some(Err(LineError {
                        line: line_no,
                        error: format!("read error: {e}"),
                    }))
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            return Some(self.parse_line(&text).map_err(|error| LineError {
                line: line_no,
                error,
            }));
        }
    }
}

/// Opens a JSONL corpus for streaming. Blank lines are skipped.
pub fn load_records(path: impl AsRef<Path>) -> Result<RecordStream<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(RecordStream::new(BufReader::new(file)))
}

/// Drains a corpus into its records and the per-line load report.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<(Vec<CaptionRecord>, Vec<LineError>)> {
    let mut records = Vec::new();
    let mut report = Vec::new();
    for item in load_records(path)? {
        match item {
            Ok(r) => records.push(r),
            Err(e) => report.push(e),
        }
    }
    Ok((records, report))
}

/// Returns the paragraph that serves as caption-level text supervision.
///
/// Paragraphs are separated by one or more whitespace-only lines. The last
/// paragraph opening with "In summary" (case-insensitive, after any leading
/// quote or markdown characters) wins. Captions that break paragraphs with
/// single newlines are handled next: the last line opening with "In summary"
/// is returned together with the rest of its block. Otherwise the last
/// paragraph is returned. The result is always a trimmed substring of
/// `caption`, and applying the function to its own output is a no-op.
pub fn extract_summary(caption: &str) -> &str {
    let paragraphs = paragraphs(caption);
    if let Some(p) = paragraphs.iter().rev().find(|p| opens_with_summary(p)) {
        return p;
    }
    for p in paragraphs.iter().rev() {
        let mut start = None;
        let mut offset = 0;
        for line in p.split_inclusive('\n') {
            if opens_with_summary(line) {
                start = Some(offset);
            }
            offset += line.len();
        }
        if let Some(s) = start {
            return p[s..].trim();
        }
    }
    paragraphs.last().copied().unwrap_or_else(|| caption.trim())
}

fn paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push(text[s..end].trim());
            }
        } else {
            start.get_or_insert(line_start);
            end = offset;
        }
    }
    if let Some(s) = start {
        out.push(text[s..end].trim());
    }
    out
}

fn opens_with_summary(paragraph: &str) -> bool {
    let body = paragraph.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '"' | '\'' | '*' | '_' | '#' | '>' | '`' | '-' | '“' | '‘' | '«')
    });
    body.get(..10)
        .is_some_and(|head| head.eq_ignore_ascii_case("in summary"))
}
