//! Two-stage document chunking.
//!
//! Stage one cuts a document at ATX headings into [`Segment`]s, tracking the
//! heading path. Stage two bounds each segment by size with a recursive
//! separator split: cut at the coarsest separator present, re-split oversized
//! fragments with the next finer one, then greedily merge fragments into
//! pieces of at most `chunk_size` characters, seeding each new piece with up
//! to `chunk_overlap` characters of trailing fragments from the previous one.
//! Text containing none of the separators falls back to a fixed sliding
//! window with stride `chunk_size - chunk_overlap`.
//!
//! Every piece is a slice of its segment, so chunk text never spans two
//! segments. All sizes are counted in Unicode scalar values.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceDocument;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub section_path: Vec<String>,
    pub doc_id: String,
    pub start_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: String,
    pub doc_id: String,
    pub seq: usize,
    pub text: String,
    pub char_count: usize,
    pub section_path: Vec<String>,
    pub source_title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkConfig {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub separators: Vec<String>,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_size: 2000,
            chunk_overlap: 400,
            separators: ["\n\n", "\n", ". ", " "].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkConfigError {
    #[error("chunk_size must be positive")]
    ZeroSize,
    #[error("chunk_overlap ({overlap}) must be smaller than chunk_size ({size})")]
    OverlapTooLarge { size: usize, overlap: usize },
    #[error("separator list must be non-empty and contain no empty separators")]
    BadSeparators,
}

impl ChunkConfig {
    pub fn new(chunk_size: usize, chunk_overlap: usize) -> Result<Self, ChunkConfigError> {
        let cfg = Self {
            chunk_size,
            chunk_overlap,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ChunkConfigError> {
        if self.chunk_size == 0 {
            return Err(ChunkConfigError::ZeroSize);
        }
        if self.chunk_overlap >= self.chunk_size {
            return Err(ChunkConfigError::OverlapTooLarge {
                size: self.chunk_size,
                overlap: self.chunk_overlap,
            });
        }
        if self.separators.is_empty() || self.separators.iter().any(String::is_empty) {
            return Err(ChunkConfigError::BadSeparators);
        }
        Ok(())
    }
}

/// Opening/closing code fence marker: fence char and run length.
pub(crate) fn fence_marker(trimmed: &str) -> Option<(char, usize)> {
    let c = trimmed.chars().next()?;
    if c != '`' && c != '~' {
        return None;
    }
    let run = trimmed.chars().take_while(|&x| x == c).count();
    (run >= 3).then_some((c, run))
}

pub(crate) fn is_closing_fence(trimmed: &str) -> bool {
    let Some((c, _)) = fence_marker(trimmed) else {
        return false;
    };
    trimmed.trim_end().chars().all(|x| x == c)
}

/// Parses an ATX heading line into (level, heading text).
pub(crate) fn atx_heading(line: &str) -> Option<(usize, String)> {
    let line = line.trim_end_matches(['\n', '\r']);
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let level = rest.bytes().take_while(|&b| b == b'#').count();
    if !(1..=6).contains(&level) {
        return None;
    }
    let after = &rest[level..];
    if !after.is_empty() && !after.starts_with([' ', '\t']) {
        return None;
    }
    let mut title = after.trim();
    // optional closing sequence: a run of '#' preceded by whitespace
    let stripped = title.trim_end_matches('#');
    if stripped.is_empty() {
        title = "";
    } else if stripped.len() != title.len() && stripped.ends_with([' ', '\t']) {
        title = stripped.trim_end();
    }
    Some((level, title.to_string()))
}

struct OpenSegment {
    body: String,
    start_offset: usize,
    path: Vec<String>,
}

fn flush(open: &mut OpenSegment, doc_id: &str, out: &mut Vec<Segment>) {
    let body = std::mem::take(&mut open.body);
    // drop leading blank lines, keep indentation of the first content line
    let mut lead_bytes = 0;
    for line in body.split_inclusive('\n') {
        if line.trim().is_empty() {
            lead_bytes += line.len();
        } else {
            break;
        }
    }
    let text = body[lead_bytes..].trim_end();
    if text.is_empty() {
        return;
    }
    out.push(Segment {
        text: text.to_string(),
        section_path: open.path.clone(),
        doc_id: doc_id.to_string(),
        start_offset: open.start_offset + body[..lead_bytes].chars().count(),
    });
}

/// Stage one: cut a document at ATX headings outside fenced code blocks.
pub fn split_markdown(doc: &SourceDocument) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut headings: [Option<String>; 6] = Default::default();
    let mut fence: Option<(char, usize)> = None;
    let mut open = OpenSegment {
        body: String::new(),
        start_offset: 0,
        path: Vec::new(),
    };
    let mut offset = 0usize;

    for line in doc.markdown_text.split_inclusive('\n') {
        let line_chars = line.chars().count();
        let trimmed = line.trim_start();
        let mut boundary = None;
        if let Some(marker) = fence_marker(trimmed) {
            fence = match fence {
                None => Some(marker),
                Some((c, n)) if marker.0 == c && marker.1 >= n && is_closing_fence(trimmed) => None,
                still_open => still_open,
            };
        } else if fence.is_none() {
            boundary = atx_heading(line);
        }

        match boundary {
            Some((level, title)) => {
                flush(&mut open, &doc.doc_id, &mut segments);
                headings[level - 1] = Some(title);
                for deeper in headings.iter_mut().skip(level) {
                    *deeper = None;
                }
                open.path = headings
                    .iter()
                    .flatten()
                    .filter(|h| !h.is_empty())
                    .cloned()
                    .collect();
                open.start_offset = offset + line_chars;
            }
            None => open.body.push_str(line),
        }
        offset += line_chars;
    }
    flush(&mut open, &doc.doc_id, &mut segments);
    segments
}

fn char_len(text: &str, range: &Range<usize>) -> usize {
    text[range.clone()].chars().count()
}

fn sliding_window(text: &str, range: Range<usize>, cfg: &ChunkConfig, out: &mut Vec<Range<usize>>) {
    let slice = &text[range.clone()];
    let mut bounds: Vec<usize> = slice.char_indices().map(|(i, _)| range.start + i).collect();
    bounds.push(range.end);
    let n = bounds.len() - 1;
    let stride = cfg.chunk_size - cfg.chunk_overlap;
    let mut start = 0;
    loop {
        let end = (start + cfg.chunk_size).min(n);
        out.push(bounds[start]..bounds[end]);
        if end == n {
            break;
        }
        start += stride;
    }
}

fn merge(text: &str, fragments: &[Range<usize>], cfg: &ChunkConfig, out: &mut Vec<Range<usize>>) {
    let mut window: VecDeque<(Range<usize>, usize)> = VecDeque::new();
    let mut total = 0usize;
    for frag in fragments {
        let len = char_len(text, frag);
        if total + len > cfg.chunk_size && !window.is_empty() {
            out.push(window.front().unwrap().0.start..window.back().unwrap().0.end);
            while total > cfg.chunk_overlap || (total + len > cfg.chunk_size && total > 0) {
                let (_, dropped) = window.pop_front().unwrap();
                total -= dropped;
            }
        }
        window.push_back((frag.clone(), len));
        total += len;
    }
    if let (Some(first), Some(last)) = (window.front(), window.back()) {
        out.push(first.0.start..last.0.end);
    }
}

fn split_range(
    text: &str,
    range: Range<usize>,
    separators: &[String],
    cfg: &ChunkConfig,
    out: &mut Vec<Range<usize>>,
) {
    if char_len(text, &range) <= cfg.chunk_size {
        out.push(range);
        return;
    }
    let slice = &text[range.clone()];
    let Some(idx) = separators.iter().position(|s| slice.contains(s.as_str())) else {
        sliding_window(text, range, cfg, out);
        return;
    };
    let sep = separators[idx].as_str();
    let finer = &separators[idx + 1..];

    // separators stay attached to the end of the fragment they terminate
    let mut fragments = Vec::new();
    let mut start = range.start;
    for (pos, _) in slice.match_indices(sep) {
        let end = range.start + pos + sep.len();
        if end > start {
            fragments.push(start..end);
        }
        start = end;
    }
    if start < range.end {
        fragments.push(start..range.end);
    }

    let mut fitting = Vec::new();
    for frag in fragments {
        if char_len(text, &frag) <= cfg.chunk_size {
            fitting.push(frag);
        } else {
            merge(text, &fitting, cfg, out);
            fitting.clear();
            split_range(text, frag, finer, cfg, out);
        }
    }
    merge(text, &fitting, cfg, out);
}

/// Stage two as byte ranges into `text`, whitespace-trimmed, empties dropped.
pub fn split_recursive_spans(text: &str, cfg: &ChunkConfig) -> Vec<Range<usize>> {
    let mut raw = Vec::new();
    if !text.is_empty() {
        split_range(text, 0..text.len(), &cfg.separators, cfg, &mut raw);
    }
    raw.into_iter()
        .filter_map(|r| {
            let piece = &text[r.clone()];
            let lead = piece.len() - piece.trim_start().len();
            let trimmed = piece.trim();
            (!trimmed.is_empty()).then(|| r.start + lead..r.start + lead + trimmed.len())
        })
        .collect()
}

pub fn split_recursive(text: &str, cfg: &ChunkConfig) -> Vec<String> {
    split_recursive_spans(text, cfg)
        .into_iter()
        .map(|r| text[r].to_string())
        .collect()
}

pub fn chunk_document(doc: &SourceDocument, cfg: &ChunkConfig) -> Vec<ChunkRecord> {
    let mut chunks = Vec::new();
    for segment in split_markdown(doc) {
        for piece in split_recursive(&segment.text, cfg) {
            let seq = chunks.len();
            chunks.push(ChunkRecord {
                chunk_id: format!("{}#{}", doc.doc_id, seq),
                doc_id: doc.doc_id.clone(),
                seq,
                char_count: piece.chars().count(),
                text: piece,
                section_path: segment.section_path.clone(),
                source_title: doc.title.clone(),
            });
        }
    }
    chunks
}
