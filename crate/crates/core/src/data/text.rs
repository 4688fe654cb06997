//! Grapheme codec for CTC targets: 26 lowercase letters plus space, blank = 0.

use crate::error::{invalid, Result};

pub const BLANK: u32 = 0;
pub const SPACE: u32 = 27;
/// Vocabulary size including the blank symbol.
pub const VOCAB_SIZE: usize = 28;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GraphemeIds(Vec<u32>);

impl GraphemeIds {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Wraps raw ids, rejecting blanks and out-of-range values.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(invalid!("grapheme sequence is empty"));
        }
        if let Some(bad) = ids
            .iter()
            .find(|&&i| i == BLANK || i as usize >= VOCAB_SIZE)
        {
            return Err(invalid!(
                "grapheme id {bad} outside [1, {}]",
                VOCAB_SIZE - 1
            ));
        }
        Ok(Self(ids))
    }
}

pub fn char_to_id(c: char) -> Option<u32> {
    match c {
        'a'..='z' => Some(c as u32 - 'a' as u32 + 1),
        ' ' => Some(SPACE),
        _ => None,
    }
}

pub fn id_to_char(id: u32) -> Option<char> {
    match id {
        1..=26 => char::from_u32('a' as u32 + id - 1),
        SPACE => Some(' '),
        _ => None,
    }
}

/// Encodes a transcript. Uppercase letters are lowered; anything else outside
/// the alphabet is an error, as is an empty transcript.
pub fn encode_transcript(text: &str) -> Result<GraphemeIds> {
    if text.is_empty() {
        return Err(invalid!("empty transcript"));
    }
    let ids = text
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            char_to_id(c)
                .ok_or_else(|| invalid!("character {c:?} is outside the grapheme alphabet"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphemeIds(ids))
}

pub fn decode_graphemes(ids: &GraphemeIds) -> String {
    ids.0.iter().filter_map(|&i| id_to_char(i)).collect()
}

/// Decodes raw ids, silently skipping blanks and unknown ids.
pub fn decode_ids(ids: &[u32]) -> String {
    ids.iter().filter_map(|&i| id_to_char(i)).collect()
}

/// True when every character is in the alphabet (lowercase only) and the text is nonempty.
pub fn is_valid_transcript(text: &str) -> bool {
    !text.is_empty() && text.chars().all(|c| char_to_id(c).is_some())
}
