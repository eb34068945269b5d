//! Completion parsing: decision line, reasoning points and yes/no probes.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Classification read from the first line of a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "0")]
    Bad,
    #[serde(rename = "1")]
    Good,
    #[serde(rename = "invalid")]
    Invalid,
}

impl Decision {
    pub fn is_valid(self) -> bool {
        self != Decision::Invalid
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningPoint {
    /// 1-based.
    pub index: usize,
    pub text: String,
}

/// One model output for a case at a given round (0 = initial generation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub case_id: String,
    pub round: u32,
    pub decision: Decision,
    pub points: Vec<ReasoningPoint>,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Generation {
    pub fn point(&self, index: usize) -> Option<&ReasoningPoint> {
        self.points.get(index.checked_sub(1)?).filter(|p| p.index == index)
    }

    /// All reasoning points joined by a single space.
    pub fn reasoning_text(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.points.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&p.text);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeAnswer {
    /// The context implies the point: no hallucination flag.
    Yes,
    /// The context does not imply the point: flag it.
    No,
    Unparseable,
}

fn classify_line(line: &str) -> Decision {
    let lower = line.to_lowercase();
    match (lower.contains("good credit"), lower.contains("bad credit")) {
        (true, false) => Decision::Good,
        (false, true) => Decision::Bad,
        _ => Decision::Invalid,
    }
}

fn remove_decision_phrase(line: &str) -> String {
    let lower = line.to_lowercase();
    let phrase = ["good credit", "bad credit"].into_iter().find_map(|p| lower.find(p).map(|at| (at, p.len())));
    match phrase {
        // lowercasing can shift byte offsets for non-ASCII text; fall back to nothing
        Some((at, len)) if lower.len() == line.len() => {
            let rest = &line[at + len..];
            rest.trim_start_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_string()
        }
        _ => String::new(),
    }
}

/// Split a completion into its decision and reasoning points.
///
/// The decision comes from the first non-empty line only. When it holds both
/// or neither label the generation is `Invalid`. Reasoning is everything
/// after that line, falling back to the remainder of the first line, and a
/// valid decision with no reasoning at all is also `Invalid`.
pub fn parse_generation(raw: &str, case_id: &str, round: u32) -> Generation {
    let mut first = "";
    let mut rest = "";
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        if line.trim().is_empty() {
            offset += line.len();
            continue;
        }
        first = line.trim_end_matches(['\n', '\r']);
        rest = &raw[offset + line.len()..];
        break;
    }

    let mut decision = classify_line(first);
    let mut points = segment_reasoning(rest);
    if points.is_empty() && decision.is_valid() {
        points = segment_reasoning(&remove_decision_phrase(first));
        if points.is_empty() {
            decision = Decision::Invalid;
        }
    }
    Generation { case_id: case_id.to_string(), round, decision, points, raw: raw.to_string(), note: None }
}

fn is_enumeration_marker(s: &str) -> bool {
    let s = s.trim();
    if matches!(s, "-" | "*" | "•" | "–") {
        return true;
    }
    let digits = s.trim_end_matches(['.', ')', ':']);
    digits.len() < s.len() && !digits.is_empty() && digits.len() <= 3 && digits.chars().all(|c| c.is_ascii_digit())
}

fn strip_leading_markers(mut s: &str) -> &str {
    loop {
        let t = s.trim_start();
        let token_end = t.find(char::is_whitespace).unwrap_or(t.len());
        let token = &t[..token_end];
        if !token.is_empty() && token_end < t.len() && is_enumeration_marker(token) {
            s = &t[token_end..];
            continue;
        }
        // markers glued to text, e.g. "-Low savings" or "•Low"
        if let Some(stripped) = t.strip_prefix(['-', '•', '*']) {
            s = stripped;
            continue;
        }
        return t;
    }
}

/// Reasoning text to ordered points: sentence boundaries (`. `, `! `, `? `),
/// semicolons and line breaks end a point; enumeration markers are removed.
pub fn segment_reasoning(text: &str) -> Vec<ReasoningPoint> {
    let mut segments: Vec<&str> = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = match c {
            '\n' | '\r' => Some(i),
            ';' => Some(i + 1),
            '.' | '!' | '?' => match chars.peek() {
                None => Some(i + 1),
                Some((_, next)) if next.is_whitespace() => Some(i + 1),
                _ => None,
            },
            _ => None,
        };
        if let Some(end) = end {
            segments.push(&text[start..end]);
            start = if c == '\n' || c == '\r' { i + 1 } else { end };
        }
    }
    segments.push(&text[start..]);

    segments
        .into_iter()
        .filter(|s| !is_enumeration_marker(s))
        .map(strip_leading_markers)
        .map(str::trim)
        .filter(|s| !s.is_empty() && s.chars().any(char::is_alphanumeric))
        .enumerate()
        .map(|(i, s)| ReasoningPoint { index: i + 1, text: s.to_string() })
        .collect()
}

/// Read a yes/no probe answer from its first token.
pub fn parse_yes_no(raw: &str) -> ProbeAnswer {
    let token = raw
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .find(|t| !t.is_empty())
        .unwrap_or("");
    if token.eq_ignore_ascii_case("yes") {
        ProbeAnswer::Yes
    } else if token.eq_ignore_ascii_case("no") {
        ProbeAnswer::No
    } else {
        ProbeAnswer::Unparseable
    }
}
