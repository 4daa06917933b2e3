use std::fs;
use std::path::Path;

use super::corpus::{Corpus, Sample};
use crate::error::{Error, Result};

pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for s in &corpus.samples {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Data(format!("cannot encode sample {}: {e}", s.id)))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a whole JSON Lines document; any bad line fails the whole load.
pub fn corpus_from_str(text: &str) -> Result<Corpus> {
    let mut samples = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Corpus::default());
    }
    for (i, line) in body.split('\n').enumerate() {
        let line_no = i + 1;
        let sample: Sample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if sample.label != sample.manipulation.label() {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "label {:?} contradicts manipulation {:?}",
                    sample.label, sample.manipulation
                ),
            });
        }
        samples.push(sample);
    }
    Ok(Corpus { samples })
}

pub fn serialize_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, corpus_to_string(corpus)?).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    corpus_from_str(&text)
}
