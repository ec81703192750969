//! Inline `[Source: <title>]` citation extraction.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::vecstore::ScoredChunk;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Citation {
    pub doc_id: String,
    pub source_title: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CitationReport {
    pub citations: Vec<Citation>,
    /// Titles cited in the text that were not among the retrieved chunks.
    pub dropped: Vec<String>,
}

fn citation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[Source:\s*([^\]\n]+?)\s*\]").expect("valid regex"))
}

/// Citations in first-mention order, restricted to retrieved documents.
pub fn extract_citations(text: &str, retrieved: &[ScoredChunk]) -> CitationReport {
    let mut report = CitationReport::default();
    let mut seen = HashSet::new();
    for cap in citation_re().captures_iter(text) {
        let title = cap[1].trim();
        match retrieved.iter().find(|c| c.chunk.source_title == title) {
            Some(hit) => {
                if seen.insert(hit.chunk.doc_id.clone()) {
                    report.citations.push(Citation {
                        doc_id: hit.chunk.doc_id.clone(),
                        source_title: hit.chunk.source_title.clone(),
                    });
                }
            }
            None => report.dropped.push(title.to_string()),
        }
    }
    report
}
