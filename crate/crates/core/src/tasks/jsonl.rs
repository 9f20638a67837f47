//! Loader for user-provided symbol-level episodes.
//!
//! One JSON object per line, either a bare labelled example
//!
//! ```json
//! {"input": [3, 5], "label": 17}
//! ```
//!
//! which becomes an episode with no demonstrations, or a full episode
//!
//! ```json
//! {"demos": [{"input": [3], "label": 17}], "query": [3], "gold": 17}
//! ```
//!
//! Blank lines are skipped. Ids are validated against the vocabulary size.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::episode::{Demo, Episode};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum Line {
    Full {
        demos: Vec<DemoLine>,
        query: Vec<usize>,
        gold: usize,
    },
    Single {
        input: Vec<usize>,
        label: usize,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoLine {
    input: Vec<usize>,
    label: usize,
}

pub fn load_jsonl(path: impl AsRef<Path>, vocab_size: usize) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(path, &text, vocab_size)
}

pub(crate) fn parse_jsonl(path: &Path, text: &str, vocab_size: usize) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Jsonl {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let parsed: Line = serde_json::from_str(raw).map_err(|e| {
            err(format!(
                "expected {{\"input\", \"label\"}} or {{\"demos\", \"query\", \"gold\"}} object ({e})"
            ))
        })?;
        let check = |what: &str, id: usize| {
            if id >= vocab_size {
                Err(err(format!("{what} {id} out of range for vocab size {vocab_size}")))
            } else {
                Ok(())
            }
        };
        let episode = match parsed {
            Line::Single { input, label } => Episode {
                demonstrations: Vec::new(),
                query: input,
                gold: label,
                mapping_seed: 0,
            },
            Line::Full { demos, query, gold } => Episode {
                demonstrations: demos
                    .into_iter()
                    .map(|d| Demo {
                        input: d.input,
                        label: d.label,
                    })
                    .collect(),
                query,
                gold,
                mapping_seed: 0,
            },
        };
        if episode.query.is_empty() {
            return Err(err("empty input pattern".into()));
        }
        for &t in &episode.query {
            check("input id", t)?;
        }
        check("label", episode.gold)?;
        for d in &episode.demonstrations {
            if d.input.is_empty() {
                return Err(err("empty demonstration input".into()));
            }
            for &t in &d.input {
                check("input id", t)?;
            }
            check("label", d.label)?;
        }
        out.push(episode);
    }
    Ok(out)
}
