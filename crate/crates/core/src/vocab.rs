//! Reserved token ids shared by the data generator, embedder and matcher.

pub const QUERY_OPEN: u32 = 0;
pub const QUERY_CLOSE: u32 = 1;
pub const DOC_OPEN: u32 = 2;
pub const DOC_CLOSE: u32 = 3;
pub const FEAT_START: u32 = 4;
pub const FEAT_END: u32 = 5;
pub const ANSWER: u32 = 6;
pub const YES: u32 = 7;
pub const NO: u32 = 8;

// chat template
pub const SYSTEM: u32 = 9;
pub const USER: u32 = 10;
pub const ASSISTANT: u32 = 11;

/// Stand-in for the textual matching instruction.
pub const MATCH_PROMPT: u32 = 12;
/// Task instruction prefixed to every query.
pub const QUERY_TASK: u32 = 13;

/// Quantization levels per projected coordinate.
pub const LEVELS: u32 = 64;
pub const QUERY_TEXT_BASE: u32 = 64;
pub const DOC_TEXT_BASE: u32 = QUERY_TEXT_BASE + LEVELS;

/// Smallest vocabulary that holds every reserved id.
pub const MIN_VOCAB: usize = (DOC_TEXT_BASE + LEVELS) as usize;

/// Instruction prefix of the matching prompt.
pub const MATCH_PROMPT_TOKENS: [u32; 3] = [SYSTEM, USER, MATCH_PROMPT];
