//! JSON-lines news and impression records.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// One raw news article; `body` may be empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawNews {
    pub news_id: String,
    pub title: String,
    pub body: String,
    pub category: String,
    pub subcategory: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub news_id: String,
    pub clicked: u8,
}

/// One user session: browsed history plus shown candidates with click labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Impression {
    pub impression_id: String,
    pub user_id: String,
    pub history: Vec<String>,
    pub candidates: Vec<Candidate>,
    pub timestamp: u64,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = fs::File::open(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let file = fs::File::create(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("serialization cannot fail");
        writeln!(w, "{line}").map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    }
    Ok(())
}

pub fn read_news(path: &Path) -> Result<Vec<RawNews>, DataError> {
    read_jsonl(path)
}

pub fn write_news(path: &Path, news: &[RawNews]) -> Result<(), DataError> {
    write_jsonl(path, news)
}

pub fn read_impressions(path: &Path) -> Result<Vec<Impression>, DataError> {
    read_jsonl(path)
}

pub fn write_impressions(path: &Path, impressions: &[Impression]) -> Result<(), DataError> {
    write_jsonl(path, impressions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn news_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("news.jsonl");
        let news = vec![RawNews {
            news_id: "n1".into(),
            title: "Hello".into(),
            body: "".into(),
            category: "sports".into(),
            subcategory: "nba".into(),
        }];
        write_news(&path, &news).unwrap();
        let back = read_news(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].news_id, "n1");
    }

    #[test]
    fn parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"news_id\": \"n1\", \"title\": \"t\", \"body\": \"\", \"category\": \"c\", \"subcategory\": \"s\"}\nnot json\n").unwrap();
        match read_news(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
