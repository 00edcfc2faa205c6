//! Architecture grammar, e.g. `Conv([50-500,50]*20), MP, FC` or
//! `Conv([10]*25), MP, Conv([10]*50), MP, FC(256), FC`.
//!
//! `MP` after a bank with several window sizes is max-over-time pooling
//! (the maps differ in length); after a single-window bank it is window-2
//! local pooling. `MOT` and `MP(2)` force either reading. `FC(n)` is a
//! hidden rectified layer; the closing `FC` is the two-class output.

use crate::error::{Error, Result};

pub const PRESETS: [(&str, &str); 6] = [
    ("FCNN-Small", "Conv([50-500,50]*20), MP, FC"),
    ("FCNN-Medium", "Conv([25-500,25]*30), MP, FC"),
    ("FCNN-Large", "Conv([20-600,20]*50), MP, FC"),
    ("FCNN-Reduced", "Conv([50-150,50]*8), MP, FC"),
    ("DCNN-Shallow", "Conv([10]*25), MP, Conv([10]*50), MP, FC(256), FC"),
    (
        "DCNN-Deep",
        "Conv([10]*25), MP, Conv([10]*50), MP, Conv([10]*50), MP, FC(256), FC",
    ),
];

/// Resolves a preset name (case-insensitive) to its architecture text;
/// anything else is returned unchanged.
pub fn resolve(config: &str) -> &str {
    let trimmed = config.trim();
    PRESETS
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(trimmed))
        .map_or(trimmed, |(_, text)| text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pool {
    Local,
    OverTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Window of every filter, grouped window-major.
    Conv(Vec<usize>),
    Pool(Pool),
    Hidden(usize),
    Output,
}

fn malformed(token: &str, why: &str) -> Error {
    Error::Config(format!("`{token}`: {why}"))
}

/// Splits on commas outside brackets and parentheses.
fn top_level_tokens(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for ch in text.chars() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return Err(Error::Config(format!("unbalanced brackets in `{text}`")));
        }
        if ch == ',' && depth == 0 {
            tokens.push(std::mem::take(&mut current));
        } else if !ch.is_whitespace() {
            current.push(ch);
        }
    }
    if depth != 0 {
        return Err(Error::Config(format!("unbalanced brackets in `{text}`")));
    }
    tokens.push(current);
    Ok(tokens)
}

fn parse_usize(s: &str, token: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| malformed(token, &format!("`{s}` is not a positive integer")))
        .and_then(|v| if v == 0 { Err(malformed(token, "zero size")) } else { Ok(v) })
}

/// `[lo-hi,step]*k`, `[w]*k` or `[w*k]`.
fn parse_conv(body: &str, token: &str) -> Result<Vec<usize>> {
    let (range, count) = if let Some((inner, k)) = body.strip_prefix('[').and_then(|b| b.split_once("]*")) {
        (inner.to_string(), parse_usize(k, token)?)
    } else if let Some(inner) = body.strip_prefix('[').and_then(|b| b.strip_suffix(']')) {
        let (w, k) = inner.split_once('*').ok_or_else(|| malformed(token, "missing filter count"))?;
        (w.to_string(), parse_usize(k, token)?)
    } else {
        return Err(malformed(token, "expected `[windows]*count`"));
    };
    let windows: Vec<usize> = match range.split_once(',') {
        Some((span, step)) => {
            let (lo, hi) = span.split_once('-').ok_or_else(|| malformed(token, "expected `lo-hi,step`"))?;
            let (lo, hi, step) = (parse_usize(lo, token)?, parse_usize(hi, token)?, parse_usize(step, token)?);
            if hi < lo {
                return Err(malformed(token, "empty window range"));
            }
            (lo..=hi).step_by(step).collect()
        }
        None => vec![parse_usize(&range, token)?],
    };
    Ok(windows
        .iter()
        .flat_map(|&w| std::iter::repeat_n(w, count))
        .collect())
}

pub fn parse(config: &str) -> Result<Vec<LayerSpec>> {
    let text = resolve(config);
    let mut specs = Vec::new();
    let mut last_windows: Option<Vec<usize>> = None;
    for token in top_level_tokens(text)? {
        let spec = if let Some(body) = token.strip_prefix("Conv(").and_then(|t| t.strip_suffix(')')) {
            let windows = parse_conv(body, &token)?;
            last_windows = Some(windows.clone());
            LayerSpec::Conv(windows)
        } else if token == "MP" {
            let windows = last_windows.as_ref().ok_or_else(|| malformed(&token, "pooling before any convolution"))?;
            if windows.iter().any(|&w| w != windows[0]) {
                LayerSpec::Pool(Pool::OverTime)
            } else {
                LayerSpec::Pool(Pool::Local)
            }
        } else if token == "MP(2)" {
            LayerSpec::Pool(Pool::Local)
        } else if token == "MOT" {
            LayerSpec::Pool(Pool::OverTime)
        } else if token == "FC" {
            LayerSpec::Output
        } else if let Some(n) = token.strip_prefix("FC(").and_then(|t| t.strip_suffix(')')) {
            LayerSpec::Hidden(parse_usize(n, &token)?)
        } else {
            return Err(malformed(&token, "unknown layer"));
        };
        if matches!(specs.last(), Some(LayerSpec::Output)) {
            return Err(malformed(&token, "layers after the output layer"));
        }
        specs.push(spec);
    }
    if specs.last() != Some(&LayerSpec::Output) {
        return Err(Error::Config(format!("`{text}` must end with the output layer `FC`")));
    }
    if !matches!(specs.first(), Some(LayerSpec::Conv(_))) {
        return Err(Error::Config(format!("`{text}` must start with a convolution")));
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filters(specs: &[LayerSpec]) -> usize {
        specs
            .iter()
            .map(|s| if let LayerSpec::Conv(w) = s { w.len() } else { 0 })
            .sum()
    }

    #[test]
    fn preset_filter_counts() {
        for (name, expected) in [
            ("FCNN-Small", 200),
            ("FCNN-Medium", 600),
            ("FCNN-Large", 1500),
            ("DCNN-Shallow", 75),
            ("DCNN-Deep", 125),
            ("FCNN-Reduced", 24),
        ] {
            assert_eq!(filters(&parse(name).unwrap()), expected, "{name}");
        }
    }

    #[test]
    fn grammar_variants() {
        assert_eq!(parse("Conv([10*3]), MP, FC").unwrap(), parse("Conv([10]*3), MP(2), FC").unwrap());
        assert_eq!(parse("Conv([5-15,5]*1), MP, FC").unwrap()[1], LayerSpec::Pool(Pool::OverTime));
        assert_eq!(parse("Conv([10]*2), MOT, FC").unwrap()[1], LayerSpec::Pool(Pool::OverTime));
        let small = parse("fcnn-small").unwrap();
        assert_eq!(small[0], LayerSpec::Conv((1..=10).flat_map(|i| [50 * i; 20]).collect()));
    }

    #[test]
    fn malformed_configs() {
        for bad in [
            "",
            "Conv([10]*2), MP",
            "MP, FC",
            "Conv([10]*2), FC, FC",
            "Conv([10-5,1]*2), FC",
            "Conv([10]*0), FC",
            "Conv([10]*2, FC",
            "Conv([10]*2), Pool, FC",
        ] {
            assert!(parse(bad).is_err(), "{bad}");
        }
    }
}
