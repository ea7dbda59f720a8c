//! Tag-structured help dialogue: transcripts, the parametric dialogue policy,
//! and the loop that queries an expert and synthesizes corrective guidance.

mod dialogue;
mod policy;
mod transcript;

pub use dialogue::{
    compose_answer, parse_query, run_dialogue, validate_answer, AnswerStyle, DialogueError, DialogueInput, DialogueOutcome,
    ExpertBackend, ExpertResponse, ImpasseContext, ExpertTimeout, Query, SynthesizedPlan, ValidationGap, ValidationReport,
};
pub use policy::{
    dot, is_non_answer, log_probs, probs, trajectory_grad_log_prob, trajectory_log_prob, Decode, DialogueAction, DialogueLimits,
    DialoguePolicy, DialogueState, PolicyError, Slot, StepRecord, FEATURE_DIM, NO_RESPONSE, UNKNOWN,
};
pub use transcript::{
    parse_transcript, parse_transcript_bytes, sanitize, serialize_segments, validate_segments, DialogueTranscript, ParseError,
    Segment, SegmentKind, Violation,
};
