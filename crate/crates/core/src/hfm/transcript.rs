//! Tagged dialogue transcripts: parsing, validation and canonical serialization.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Think,
    Search,
    Result,
    Answer,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [SegmentKind::Think, SegmentKind::Search, SegmentKind::Result, SegmentKind::Answer];

    pub fn tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "think",
            SegmentKind::Search => "search",
            SegmentKind::Result => "result",
            SegmentKind::Answer => "Answer",
        }
    }

    fn open(self) -> String {
        format!("<{}>", self.tag())
    }

    fn close(self) -> String {
        format!("</{}>", self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Self { kind, text: text.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTranscript {
    /// Impasse context shown to the policy; not part of the tagged body.
    pub prompt: String,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    UnclosedTag,
    InterleavedTags,
    UnmatchedClose,
    StrayText,
    ResultWithoutSearch,
    SearchWithoutResult,
    ContentAfterAnswer,
    InvalidUtf8,
}

impl Violation {
    pub fn name(self) -> &'static str {
        match self {
            Violation::UnclosedTag => "unclosed_tag",
            Violation::InterleavedTags => "interleaved_tags",
            Violation::UnmatchedClose => "unmatched_close",
            Violation::StrayText => "stray_text",
            Violation::ResultWithoutSearch => "result_without_search",
            Violation::SearchWithoutResult => "search_without_result",
            Violation::ContentAfterAnswer => "content_after_answer",
            Violation::InvalidUtf8 => "invalid_utf8",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `position` is a byte offset into the input, or a segment index for
/// [`validate_segments`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{violation} at {position}")]
pub struct ParseError {
    pub position: usize,
    pub violation: Violation,
}

fn err(position: usize, violation: Violation) -> ParseError {
    ParseError { position, violation }
}

/// Next opening or closing tag of any kind at or after `from`.
fn next_tag(text: &str, from: usize) -> Option<(usize, SegmentKind, bool, usize)> {
    let mut best: Option<(usize, SegmentKind, bool, usize)> = None;
    for kind in SegmentKind::ALL {
        for (closing, pat) in [(false, kind.open()), (true, kind.close())] {
            if let Some(i) = text[from..].find(&pat) {
                let at = from + i;
                if best.is_none_or(|b| at < b.0) {
                    best = Some((at, kind, closing, pat.len()));
                }
            }
        }
    }
    best
}

pub fn parse_transcript(text: &str) -> Result<DialogueTranscript, ParseError> {
    let mut segments = vec![];
    let mut pos = 0;
    loop {
        let Some((at, kind, closing, len)) = next_tag(text, pos) else {
            if let Some(off) = text[pos..].find(|c: char| !c.is_whitespace()) {
                return Err(err(pos + off, Violation::StrayText));
            }
            break;
        };
        if let Some(off) = text[pos..at].find(|c: char| !c.is_whitespace()) {
            return Err(err(pos + off, Violation::StrayText));
        }
        if closing {
            return Err(err(at, Violation::UnmatchedClose));
        }
        let body_start = at + len;
        let close = kind.close();
        let Some(end) = text[body_start..].find(&close).map(|i| body_start + i) else {
            return Err(err(at, Violation::UnclosedTag));
        };
        if let Some((inner, ..)) = next_tag(text, body_start).filter(|t| t.0 < end) {
            return Err(err(inner, Violation::InterleavedTags));
        }
        segments.push((at, Segment::new(kind, &text[body_start..end])));
        pos = end + close.len();
    }
    check(segments.iter().map(|(p, s)| (*p, s.kind)))?;
    Ok(DialogueTranscript { prompt: String::new(), segments: segments.into_iter().map(|(_, s)| s).collect() })
}

/// Byte-level entry point; never panics.
pub fn parse_transcript_bytes(bytes: &[u8]) -> Result<DialogueTranscript, ParseError> {
    match std::str::from_utf8(bytes) {
        Ok(s) => parse_transcript(s),
        Err(e) => Err(err(e.valid_up_to(), Violation::InvalidUtf8)),
    }
}

fn check(kinds: impl Iterator<Item = (usize, SegmentKind)>) -> Result<(), ParseError> {
    let mut prev: Option<(usize, SegmentKind)> = None;
    for (pos, kind) in kinds {
        match (prev.map(|p| p.1), kind) {
            (Some(SegmentKind::Answer), _) => return Err(err(pos, Violation::ContentAfterAnswer)),
            (Some(SegmentKind::Search), k) if k != SegmentKind::Result => {
                return Err(err(prev.unwrap().0, Violation::SearchWithoutResult))
            }
            (p, SegmentKind::Result) if p != Some(SegmentKind::Search) => {
                return Err(err(pos, Violation::ResultWithoutSearch))
            }
            _ => {}
        }
        prev = Some((pos, kind));
    }
    match prev {
        Some((pos, SegmentKind::Search)) => Err(err(pos, Violation::SearchWithoutResult)),
        _ => Ok(()),
    }
}

/// Segment-grammar check on an in-memory transcript.
pub fn validate_segments(segments: &[Segment]) -> Result<(), ParseError> {
    for (i, s) in segments.iter().enumerate() {
        if next_tag(&s.text, 0).is_some() {
            return Err(err(i, Violation::InterleavedTags));
        }
    }
    check(segments.iter().enumerate().map(|(i, s)| (i, s.kind)))
}

/// Makes arbitrary text safe to embed in a segment.
pub fn sanitize(text: &str) -> String {
    text.replace('<', "&lt;")
}

impl DialogueTranscript {
    /// Canonical form: one segment per line, text verbatim.
    pub fn serialize(&self) -> String {
        serialize_segments(&self.segments)
    }

    pub fn count(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|s| s.kind == kind).count()
    }

    pub fn answer(&self) -> Option<&str> {
        self.segments.iter().find(|s| s.kind == SegmentKind::Answer).map(|s| s.text.as_str())
    }
}

pub fn serialize_segments(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| format!("<{t}>{}</{t}>", s.text, t = s.kind.tag()))
        .collect::<Vec<_>>()
        .join("\n")
}
