//! JSON-lines corpus files.
//!
//! One object per line with the fields `statement`, `solution`, and the
//! optional `labels`, `answer`, `task`. Records are written with fields in that
//! order and absent optionals omitted, so loading then saving a file written
//! by [`save_corpus`] reproduces it byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::{MathText, Tokenizer, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub statement: String,
    pub solution: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

impl CorpusRecord {
    pub fn new(statement: impl Into<String>, solution: impl Into<String>) -> Self {
        CorpusRecord {
            statement: statement.into(),
            solution: solution.into(),
            labels: None,
            answer: None,
            task: None,
        }
    }

    pub fn to_text(&self, tokenizer: &Tokenizer, vocab: &Vocabulary) -> Result<MathText> {
        tokenizer.tokenize_problem(&self.statement, &self.solution, vocab)
    }
}

/// Parses and validates every line; blank lines are skipped.
pub fn parse_corpus(reader: impl BufRead, tokenizer: &Tokenizer) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_record(&record, tokenizer).map_err(|message| CoreError::Validation {
            line: line_no,
            message,
        })?;
        out.push(record);
    }
    Ok(out)
}

fn validate_record(record: &CorpusRecord, tokenizer: &Tokenizer) -> std::result::Result<(), String> {
    if record.statement.trim().is_empty() {
        return Err("empty statement".to_string());
    }
    let vocab = Vocabulary::new();
    let text = tokenizer
        .tokenize_problem(&record.statement, &record.solution, &vocab)
        .map_err(|e| e.to_string())?;
    text.validate()
}

pub fn load_corpus(path: impl AsRef<Path>, tokenizer: &Tokenizer) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path)?;
    parse_corpus(BufReader::new(file), tokenizer)
}

pub fn write_corpus(mut writer: impl Write, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    write_corpus(BufWriter::new(File::create(path)?), records)
}

/// Vocabulary over statements then solutions, in order of first appearance.
pub fn build_vocabulary(records: &[CorpusRecord], tokenizer: &Tokenizer) -> Result<Vocabulary> {
    let mut vocab = Vocabulary::new();
    for r in records {
        vocab.observe(tokenizer, &r.statement)?;
        vocab.observe(tokenizer, &r.solution)?;
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_valid_lines() {
        let data = "{\"statement\":\"a\",\"solution\":\"b .\"}\n\
                    {\"statement\":\"$x$\",\"solution\":\"\",\"task\":\"t\"}\n\
                    {\"statement\":\"c\",\"solution\":\"d\",\"labels\":[\"l\"],\"answer\":\"3\"}\n";
        let recs = parse_corpus(data.as_bytes(), &Tokenizer::default()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].labels.as_deref(), Some(&["l".to_string()][..]));
    }

    #[test]
    fn errors_name_the_line() {
        let data = "{\"statement\":\"a\",\"solution\":\"b\"}\n{\"statement\":\"a $x\",\"solution\":\"b\"}\n";
        match parse_corpus(data.as_bytes(), &Tokenizer::default()) {
            Err(CoreError::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let data = "{\"statement\":\"a\",\"solution\":\"b\"}\n\n{oops\n";
        match parse_corpus(data.as_bytes(), &Tokenizer::default()) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let data = "{\"statement\":\" \",\"solution\":\"b\"}\n";
        assert!(matches!(
            parse_corpus(data.as_bytes(), &Tokenizer::default()),
            Err(CoreError::Validation { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_field_rejected() {
        let data = "{\"statement\":\"a\",\"solution\":\"b\",\"extra\":1}\n";
        assert!(matches!(
            parse_corpus(data.as_bytes(), &Tokenizer::default()),
            Err(CoreError::Parse { line: 1, .. })
        ));
    }
}
