//! Names of experimental arms as stored in the run directory.

use factcheck_core::{FeedbackSource, Granularity};

use crate::config::RunConfig;

/// Round-0 generations shared by every arm.
pub const INITIAL: &str = "initial";
/// Multi-round refinement series.
pub const ROUNDS: &str = "rounds";

/// A feedback channel; each verifier scorer is its own channel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channel {
    Oracle,
    Verifier(String),
    SelfReflection,
    FinetunedSlm,
}

impl Channel {
    pub fn label(&self) -> String {
        match self {
            Channel::Oracle => "oracle".into(),
            Channel::Verifier(id) => format!("verifier:{id}"),
            Channel::SelfReflection => "self_reflection".into(),
            Channel::FinetunedSlm => "finetuned_slm".into(),
        }
    }

    pub fn source(&self) -> FeedbackSource {
        match self {
            Channel::Oracle => FeedbackSource::Oracle,
            Channel::Verifier(_) => FeedbackSource::Verifier,
            Channel::SelfReflection => FeedbackSource::SelfReflection,
            Channel::FinetunedSlm => FeedbackSource::FinetunedSlm,
        }
    }
}

pub fn granularity_label(g: Granularity) -> &'static str {
    match g {
        Granularity::SinglePoint => "single_point",
        Granularity::EntireContent => "entire_content",
    }
}

/// Configured channels, in source order, verifiers expanded per scorer.
pub fn channels(cfg: &RunConfig) -> Vec<Channel> {
    let mut out = Vec::new();
    for s in &cfg.experiment.sources {
        match s {
            FeedbackSource::Oracle => out.push(Channel::Oracle),
            FeedbackSource::Verifier => out.extend(cfg.scorers.iter().map(|sc| Channel::Verifier(sc.id.clone()))),
            FeedbackSource::SelfReflection => out.push(Channel::SelfReflection),
            FeedbackSource::FinetunedSlm => out.push(Channel::FinetunedSlm),
        }
    }
    out
}

pub fn adapt(channel: &Channel, granularity: Granularity) -> String {
    format!("adapt/{}/{}", channel.label(), granularity_label(granularity))
}

/// Channels named on the command line. `verifier` alone expands to every scorer.
pub fn parse_channels(labels: &[String], cfg: &RunConfig) -> Result<Vec<Channel>, String> {
    let mut out = Vec::new();
    for l in labels {
        match l.as_str() {
            "oracle" => out.push(Channel::Oracle),
            "self_reflection" => out.push(Channel::SelfReflection),
            "finetuned_slm" => out.push(Channel::FinetunedSlm),
            "verifier" => out.extend(cfg.scorers.iter().map(|s| Channel::Verifier(s.id.clone()))),
            other => match other.strip_prefix("verifier:") {
                Some(id) if cfg.scorers.iter().any(|s| s.id == id) => out.push(Channel::Verifier(id.into())),
                Some(id) => return Err(format!("no scorer with id {id:?}")),
                None => return Err(format!("unknown feedback channel {other:?}")),
            },
        }
    }
    Ok(out)
}
