//! Versioned system-prompt policy: persona, numbered guidelines, forbidden
//! content categories, required directives and canned replies.

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GUIDELINE_COUNT: usize = 7;
pub const FORBIDDEN_COUNT: usize = 11;
pub const REQUIRED_COUNT: usize = 7;

pub const FORBIDDEN_HEADER: &str = "FORBIDDEN CONTENT";
pub const REQUIRED_HEADER: &str = "REQUIRED APPROACH";

const DEFAULT_POLICY: &str = include_str!("../../policy/default_policy.json");

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot read policy file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("policy is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("policy must have exactly {expected} {field}, found {found}")]
    Count {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("policy field {0} is empty")]
    Empty(String),
    #[error("forbidden category {label:?} has an invalid pattern: {source}")]
    Pattern { label: String, source: regex::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForbiddenCategory {
    pub label: String,
    pub description: String,
    /// Regexes redacted from final answers as a mechanical backstop.
    #[serde(default)]
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeniedTopic {
    pub label: String,
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyFile {
    #[serde(default)]
    version: String,
    persona: String,
    guidelines: Vec<String>,
    forbidden: Vec<ForbiddenCategory>,
    required: Vec<String>,
    refusal_text: String,
    #[serde(default)]
    off_topic_text: Option<String>,
    #[serde(default)]
    degraded_text: Option<String>,
    #[serde(default)]
    failure_text: Option<String>,
    #[serde(default)]
    allowed_topics: Vec<String>,
    #[serde(default)]
    denied_topics: Vec<DeniedTopic>,
}

#[derive(Debug, Clone)]
pub struct PolicyPrompt {
    pub version: String,
    pub persona: String,
    pub guidelines: Vec<String>,
    pub forbidden: Vec<ForbiddenCategory>,
    pub required: Vec<String>,
    pub refusal_text: String,
    pub off_topic_text: String,
    pub degraded_text: String,
    pub failure_text: String,
    pub allowed_topics: Vec<String>,
    pub denied_topics: Vec<DeniedTopic>,
    screens: Vec<(String, Regex)>,
}

fn require_count(field: &'static str, expected: usize, found: usize) -> Result<(), PolicyError> {
    if found == expected {
        Ok(())
    } else {
        Err(PolicyError::Count {
            field,
            expected,
            found,
        })
    }
}

fn require_text(field: &str, text: &str) -> Result<(), PolicyError> {
    if text.trim().is_empty() {
        Err(PolicyError::Empty(field.to_string()))
    } else {
        Ok(())
    }
}

impl PolicyPrompt {
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile = serde_json::from_str(text)?;
        require_count("guidelines", GUIDELINE_COUNT, file.guidelines.len())?;
        require_count("forbidden categories", FORBIDDEN_COUNT, file.forbidden.len())?;
        require_count("required directives", REQUIRED_COUNT, file.required.len())?;
        require_text("persona", &file.persona)?;
        require_text("refusal_text", &file.refusal_text)?;
        for (i, g) in file.guidelines.iter().enumerate() {
            require_text(&format!("guidelines[{i}]"), g)?;
        }
        for (i, r) in file.required.iter().enumerate() {
            require_text(&format!("required[{i}]"), r)?;
        }
        let mut screens = Vec::new();
        for cat in &file.forbidden {
            require_text("forbidden.label", &cat.label)?;
            for pattern in &cat.patterns {
                let re = Regex::new(pattern).map_err(|source| PolicyError::Pattern {
                    label: cat.label.clone(),
                    source,
                })?;
                screens.push((cat.label.clone(), re));
            }
        }
        let denied_topics = if file.denied_topics.is_empty() {
            vec![DeniedTopic {
                label: "unrelated-spam".into(),
                description: "anything unrelated to the archive".into(),
            }]
        } else {
            file.denied_topics
        };
        Ok(Self {
            off_topic_text: file.off_topic_text.unwrap_or_else(|| file.refusal_text.clone()),
            degraded_text: file.degraded_text.unwrap_or_else(|| {
                "The help desk is temporarily unavailable. Please try again shortly.".into()
            }),
            failure_text: file
                .failure_text
                .unwrap_or_else(|| "The answer could not be generated. Please try again.".into()),
            version: file.version,
            persona: file.persona,
            guidelines: file.guidelines,
            forbidden: file.forbidden,
            required: file.required,
            refusal_text: file.refusal_text,
            allowed_topics: file.allowed_topics,
            denied_topics,
            screens,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The policy shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_POLICY).expect("built-in policy is valid")
    }

    pub fn builtin_json() -> &'static str {
        DEFAULT_POLICY
    }

    /// Persona, guidelines, forbidden and required blocks (everything except
    /// the retrieved context).
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(self.persona.trim());
        out.push_str("\n\nGUIDELINES:\n");
        for (i, g) in self.guidelines.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, g.trim()));
        }
        out.push_str(&format!("\n{FORBIDDEN_HEADER}:\nNever include any of the following in a response.\n"));
        for (i, cat) in self.forbidden.iter().enumerate() {
            out.push_str(&format!("{}. {}: {}\n", i + 1, cat.label, cat.description.trim()));
        }
        out.push_str(&format!("\n{REQUIRED_HEADER}:\n"));
        for (i, r) in self.required.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, r.trim()));
        }
        out.push_str("\nOUT-OF-SCOPE WORDING:\n");
        out.push_str(self.refusal_text.trim());
        out.push('\n');
        out
    }

    /// Redacts hard-pattern matches; returns the screened text and the
    /// number of redactions.
    pub fn screen(&self, text: &str) -> (String, usize) {
        let mut out = text.to_string();
        let mut hits = 0;
        for (_, re) in &self.screens {
            let n = re.find_iter(&out).count();
            if n > 0 {
                hits += n;
                out = re.replace_all(&out, "[redacted]").into_owned();
            }
        }
        (out, hits)
    }
}
