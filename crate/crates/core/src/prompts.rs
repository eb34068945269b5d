//! Prompt templates for generation, per-point probing and refinement.
//!
//! Templates are plain text with `{NAME}` placeholders and can be replaced
//! at runtime. Substitution is single-pass, so placeholder-like text inside
//! a substituted value is never expanded again.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GENERATION_TEMPLATE: &str = "Assess the creditworthiness of a customer using the following attributes for financial status. Respond with the final decision of either 'good credit' or 'bad credit' in the first line. Respond with the reasoning on the final decision in the second line. And the attributes are as follows: {X}. Response: ";

pub const FEEDBACK_PROBE_TEMPLATE: &str = "{X}. Question: does this imply {Y_i}? Yes or No? Response: ";

/// Previous-turn context: the case attributes and the latest response only.
pub const ROUND_CONTEXT_TEMPLATE: &str = "{X}\n{Y}\n";

/// `{CONTEXT}` is the rendered [`ROUND_CONTEXT_TEMPLATE`].
pub const REFINEMENT_TEMPLATE: &str = "{CONTEXT}Your previous response contains the following factual errors: {F}. These errors does not match the given attributes. Based on the feedback, improve your decision and reasoning. Response: ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("{kind:?} template is missing placeholder {placeholder}")]
    MissingPlaceholder { kind: TemplateKind, placeholder: &'static str },
    #[error("{kind:?} template uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { kind: TemplateKind, name: String },
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("refinement needs at least one flagged point")]
    NoFlaggedPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Generation,
    FeedbackProbe,
    RoundContext,
    Refinement,
}

impl TemplateKind {
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::Generation => &["X"],
            TemplateKind::FeedbackProbe => &["X", "Y_i"],
            TemplateKind::RoundContext => &["X", "Y"],
            TemplateKind::Refinement => &["CONTEXT", "F"],
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Generation => "generation.txt",
            TemplateKind::FeedbackProbe => "feedback_probe.txt",
            TemplateKind::RoundContext => "round_context.txt",
            TemplateKind::Refinement => "refinement.txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    text: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// Parse `text`, requiring every placeholder of `kind` to appear and no
    /// other `{NAME}` marker to be present.
    pub fn new(kind: TemplateKind, text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        let names = kind.placeholders();
        let mut pieces = Vec::new();
        let mut seen = alloc::vec![false; names.len()];
        let mut literal = String::new();
        let mut rest = text.as_str();
        while let Some(open) = rest.find('{') {
            literal.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let slot = after.find('}').and_then(|close| {
                let name = &after[..close];
                names.iter().position(|n| *n == name).map(|i| (i, close))
            });
            match slot {
                Some((i, close)) => {
                    if !literal.is_empty() {
                        pieces.push(Piece::Literal(core::mem::take(&mut literal)));
                    }
                    pieces.push(Piece::Slot(i));
                    seen[i] = true;
                    rest = &after[close + 1..];
                }
                None => {
                    if let Some(close) = after.find('}') {
                        let name = &after[..close];
                        if is_placeholder_name(name) {
                            return Err(PromptError::UnknownPlaceholder { kind, name: name.to_string() });
                        }
                    }
                    literal.push('{');
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            pieces.push(Piece::Literal(literal));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(PromptError::MissingPlaceholder { kind, placeholder: names[i] });
        }
        Ok(Self { kind, text, pieces })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// `values` are given in the order of [`TemplateKind::placeholders`].
    fn fill(&self, values: &[&str]) -> String {
        debug_assert_eq!(values.len(), self.kind.placeholders().len());
        let mut out = String::with_capacity(self.text.len() + values.iter().map(|v| v.len()).sum::<usize>());
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(i) => out.push_str(values[*i]),
            }
        }
        out
    }
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_uppercase() || c == '_' || c.is_ascii_lowercase())
        && name.chars().next().is_some_and(|c| c.is_ascii_uppercase())
}

/// Join flagged points for `{F}`: a single point verbatim, several points as
/// newline-separated `- ` bullets.
pub fn join_flagged(points: &[String]) -> String {
    match points {
        [one] => one.clone(),
        many => {
            let mut out = String::new();
            for p in many {
                out.push_str("\n- ");
                out.push_str(p);
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub generation: PromptTemplate,
    pub feedback_probe: PromptTemplate,
    pub round_context: PromptTemplate,
    pub refinement: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            generation: PromptTemplate::new(TemplateKind::Generation, GENERATION_TEMPLATE).unwrap(),
            feedback_probe: PromptTemplate::new(TemplateKind::FeedbackProbe, FEEDBACK_PROBE_TEMPLATE).unwrap(),
            round_context: PromptTemplate::new(TemplateKind::RoundContext, ROUND_CONTEXT_TEMPLATE).unwrap(),
            refinement: PromptTemplate::new(TemplateKind::Refinement, REFINEMENT_TEMPLATE).unwrap(),
        }
    }
}

impl PromptSet {
    pub fn render_generation(&self, x: &str) -> Result<String, PromptError> {
        if x.is_empty() {
            return Err(PromptError::EmptyInput("attributes"));
        }
        Ok(self.generation.fill(&[x]))
    }

    pub fn render_feedback_probe(&self, x: &str, point: &str) -> Result<String, PromptError> {
        if x.is_empty() {
            return Err(PromptError::EmptyInput("attributes"));
        }
        if point.is_empty() {
            return Err(PromptError::EmptyInput("reasoning point"));
        }
        Ok(self.feedback_probe.fill(&[x, point]))
    }

    /// Context carried into a refinement round: the original attributes and
    /// the latest response. Earlier responses and feedback are never included.
    pub fn build_round_context(&self, x: &str, latest_response: &str) -> String {
        self.round_context.fill(&[x, latest_response])
    }

    pub fn render_refinement(&self, x: &str, y_raw: &str, flagged: &[String]) -> Result<String, PromptError> {
        if flagged.is_empty() {
            return Err(PromptError::NoFlaggedPoints);
        }
        let context = self.build_round_context(x, y_raw);
        Ok(self.refinement.fill(&[&context, &join_flagged(flagged)]))
    }
}
