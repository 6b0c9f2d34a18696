use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tsv::{check_field, Table};
use crate::error::{Error, Result};
use crate::textenc::normalize_words;

/// One reader's fixation sequence over one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeRecord {
    pub sentence_id: String,
    pub reader_id: String,
    pub text: String,
    pub fixations: Vec<usize>,
}

impl GazeRecord {
    pub fn n_words(&self) -> usize {
        normalize_words(&self.text).len()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.n_words();
        if self.fixations.is_empty() {
            return Err(Error::Empty(format!(
                "record {}/{} has no fixations",
                self.sentence_id, self.reader_id
            )));
        }
        if let Some(&f) = self.fixations.iter().find(|&&f| f >= w) {
            return Err(Error::FixationOutOfRange {
                index: f,
                words: w,
                context: format!("record {}/{}", self.sentence_id, self.reader_id),
            });
        }
        Ok(())
    }
}

pub const GAZE_HEADER: &str = "sentence_id\treader_id\ttext\tfixations";

pub fn parse_gaze_corpus(path: &str, text: &str) -> Result<Vec<GazeRecord>> {
    let t = Table::parse(path, text)?;
    let sid = t.require("sentence_id")?;
    let rid = t.require("reader_id")?;
    let txt = t.require("text")?;
    let fix = t.require("fixations")?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, f) in &t.rows {
        let fixations = f[fix]
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| t.err(*line, format!("bad fixation list {:?}: {e}", f[fix])))?;
        let r = GazeRecord {
            sentence_id: f[sid].clone(),
            reader_id: f[rid].clone(),
            text: f[txt].clone(),
            fixations,
        };
        r.validate().map_err(|e| t.err(*line, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn load_gaze_corpus(path: &Path) -> Result<Vec<GazeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gaze_corpus(&path.display().to_string(), &text)
}

pub fn gaze_corpus_to_string(records: &[GazeRecord]) -> Result<String> {
    let mut s = String::from(GAZE_HEADER);
    s.push('\n');
    for r in records {
        for (v, what) in [
            (&r.sentence_id, "sentence_id"),
            (&r.reader_id, "reader_id"),
            (&r.text, "text"),
        ] {
            check_field(v, what)?;
        }
        let fix: Vec<String> = r.fixations.iter().map(usize::to_string).collect();
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            r.sentence_id,
            r.reader_id,
            r.text,
            fix.join(" ")
        )
        .unwrap();
    }
    Ok(s)
}

pub fn write_gaze_corpus(path: &Path, records: &[GazeRecord]) -> Result<()> {
    std::fs::write(path, gaze_corpus_to_string(records)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row() {
        let r = parse_gaze_corpus(
            "t",
            "sentence_id\treader_id\ttext\tfixations\ns1\tr1\tthe cat sat\t0 1 2\n",
        )
        .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].fixations, vec![0, 1, 2]);
    }

    #[test]
    fn out_of_range_fixation_names_the_record() {
        let e = parse_gaze_corpus(
            "t",
            "sentence_id\treader_id\ttext\tfixations\ns9\tr2\tthe cat sat\t0 5\n",
        )
        .unwrap_err()
        .to_string();
        assert!(e.contains("t:2") && e.contains("s9/r2"), "{e}");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let e = parse_gaze_corpus(
            "g.tsv",
            "sentence_id\treader_id\ttext\tfixations\ns\tr\ta b\t0\ns\tr\tx\n",
        )
        .unwrap_err()
        .to_string();
        assert!(e.starts_with("g.tsv:3:"), "{e}");
        assert!(parse_gaze_corpus("g", "a\tb\n1\t2\n").is_err());
        assert!(
            parse_gaze_corpus("g", "sentence_id\treader_id\ttext\tfixations\ns\tr\ta\tx\n")
                .is_err()
        );
    }

    #[test]
    fn write_read_round_trip() {
        let recs = vec![
            GazeRecord {
                sentence_id: "a".into(),
                reader_id: "r1".into(),
                text: "one two three".into(),
                fixations: vec![0, 2, 1, 2],
            },
            GazeRecord {
                sentence_id: "b".into(),
                reader_id: "r2".into(),
                text: "four".into(),
                fixations: vec![0],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.tsv");
        write_gaze_corpus(&p, &recs).unwrap();
        assert_eq!(load_gaze_corpus(&p).unwrap(), recs);
    }
}
