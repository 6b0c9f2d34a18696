//! Minimal tab-separated reader: a header row, no quoting.

use crate::error::{Error, Result};

pub(crate) struct Table {
    pub path: String,
    pub header: Vec<String>,
    /// `(1-based line number, fields)`.
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    pub fn parse(path: &str, text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            msg: "missing header".into(),
        })?;
        let header: Vec<String> = head.split('\t').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, l) in lines {
            let fields: Vec<String> = l.split('\t').map(String::from).collect();
            if fields.len() != header.len() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: format!("expected {} fields, found {}", header.len(), fields.len()),
                });
            }
            rows.push((i + 1, fields));
        }
        Ok(Self {
            path: path.into(),
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.column(name).ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            line: 1,
            msg: format!("missing column {name:?}"),
        })
    }

    pub fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }
}

/// Reject characters that would break the format.
pub(crate) fn check_field(s: &str, what: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Config(format!(
            "{what} contains a tab or newline: {s:?}"
        )));
    }
    Ok(())
}
