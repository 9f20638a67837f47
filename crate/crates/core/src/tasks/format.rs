use std::ops::Range;

use super::episode::{Demo, Episode, TaskConfig};
use crate::error::{Error, Result};

fn check_len(tokens: Vec<usize>, max_seq_len: usize) -> Result<Vec<usize>> {
    if tokens.len() > max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "formatted prompt has {} tokens, max_seq_len is {}",
            tokens.len(),
            max_seq_len
        )));
    }
    Ok(tokens)
}

/// `d₁ → y₁ ; d₂ → y₂ ; … ; query →`
pub fn format_icl_prompt(cfg: &TaskConfig, e: &Episode, max_seq_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(cfg.icl_prompt_len(e.demonstrations.len()));
    for d in &e.demonstrations {
        out.extend_from_slice(&d.input);
        out.push(cfg.arrow());
        out.push(d.label);
        out.push(cfg.delimiter());
    }
    out.extend_from_slice(&e.query);
    out.push(cfg.arrow());
    check_len(out, max_seq_len)
}

/// `query →`
pub fn format_zsl_prompt(cfg: &TaskConfig, e: &Episode, max_seq_len: usize) -> Result<Vec<usize>> {
    let mut out = e.query.clone();
    out.push(cfg.arrow());
    check_len(out, max_seq_len)
}

/// A single demonstration as a finetuning sequence: `input → label`.
///
/// The label is predicted at the arrow, the second-to-last position.
pub fn format_demo(cfg: &TaskConfig, d: &Demo) -> Vec<usize> {
    let mut out = d.input.clone();
    out.push(cfg.arrow());
    out.push(d.label);
    out
}

/// Positions of the query and its arrow inside the ICL prompt.
pub fn test_span(cfg: &TaskConfig, e: &Episode) -> Range<usize> {
    let end = cfg.icl_prompt_len(e.demonstrations.len());
    end - e.query.len() - 1..end
}

/// Human-readable rendering: `s3 → L1 ; s7 →`.
pub fn detokenize(cfg: &TaskConfig, tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| {
            if t < cfg.n_input_symbols {
                format!("s{t}")
            } else if cfg.is_label(t) {
                format!("L{}", t - cfg.n_input_symbols)
            } else if t == cfg.arrow() {
                "→".to_string()
            } else if t == cfg.delimiter() {
                ";".to_string()
            } else {
                format!("<{t}>")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses a rendering produced by [`detokenize`] back into token ids.
pub fn tokenize(cfg: &TaskConfig, text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            let bad = || Error::InvalidArgument(format!("unknown token {w:?}"));
            match w {
                "→" => Ok(cfg.arrow()),
                ";" => Ok(cfg.delimiter()),
                _ => {
                    if let Some(n) = w.strip_prefix('s') {
                        let v: usize = n.parse().map_err(|_| bad())?;
                        (v < cfg.n_input_symbols).then_some(v).ok_or_else(bad)
                    } else if let Some(n) = w.strip_prefix('L') {
                        let v: usize = n.parse().map_err(|_| bad())?;
                        (v < cfg.n_labels).then(|| cfg.label_token(v)).ok_or_else(bad)
                    } else {
                        Err(bad())
                    }
                }
            }
        })
        .collect()
}

/// Recovers demonstrations and query from an ICL prompt.
pub fn parse_icl_prompt(cfg: &TaskConfig, tokens: &[usize]) -> Result<(Vec<Demo>, Vec<usize>)> {
    let bad = |msg: &str| Error::InvalidArgument(format!("malformed ICL prompt: {msg}"));
    let (last, body) = tokens.split_last().ok_or_else(|| bad("empty"))?;
    if *last != cfg.arrow() {
        return Err(bad("must end with the separator"));
    }
    let mut segments: Vec<&[usize]> = body.split(|&t| t == cfg.delimiter()).collect();
    let query = segments.pop().ok_or_else(|| bad("missing query"))?.to_vec();
    let demos = segments
        .into_iter()
        .map(|seg| match seg {
            [input @ .., arrow, label] if *arrow == cfg.arrow() && cfg.is_label(*label) => Ok(Demo {
                input: input.to_vec(),
                label: *label,
            }),
            _ => Err(bad("demonstration is not `input → label`")),
        })
        .collect::<Result<_>>()?;
    Ok((demos, query))
}
