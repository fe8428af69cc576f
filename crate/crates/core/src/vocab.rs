//! Shared vocabulary layout for the synthetic joint source/target vocabulary.
//!
//! Ids 0..4 are reserved; content tokens start at [`FIRST_CONTENT`]. One
//! embedding table serves both languages; the decoder is told which task it
//! is doing by the BOS tag the target sequence starts with.

/// Padding token.
pub const PAD: usize = 0;
/// End of sequence.
pub const EOS: usize = 1;
/// Source-language tag; starts transcripts, so it also selects the ASR task.
pub const BOS_SRC: usize = 2;
/// Target-language tag; starts translations (ST and MT tasks).
pub const BOS_TGT: usize = 3;
/// First non-reserved token id.
pub const FIRST_CONTENT: usize = 4;

pub fn is_special(id: usize) -> bool {
    id < FIRST_CONTENT
}

/// Content tokens available in a vocabulary of the given size.
pub fn content_range(vocab_size: usize) -> std::ops::Range<usize> {
    FIRST_CONTENT..vocab_size
}
