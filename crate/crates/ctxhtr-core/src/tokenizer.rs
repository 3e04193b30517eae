//! Context-relative tokenization.
//!
//! Characters are not predicted as fixed classes. Instead, each distinct
//! character seen in the context transcriptions is assigned a relative token
//! `<t_i>` in order of first occurrence, and query characters absent from the
//! context map to a dedicated `<ooc>` token. The bijective character/token
//! table lives in [`ContextMapping`]; predictions are decoded back through it.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Default number of relative tokens reserved in the vocabulary.
pub const DEFAULT_CAPACITY: usize = 120;

/// Placeholder character used when rendering `<ooc>` in human-readable output.
pub const OOC_PLACEHOLDER: char = '*';

/// One decoder symbol. Relative indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Pad,
    Start,
    Sep,
    End,
    Ooc,
    Rel(u16),
}

impl Token {
    /// Stable vocabulary id. Relative tokens occupy ids `5..5+capacity`.
    pub fn id(self) -> usize {
        match self {
            Token::Pad => 0,
            Token::Start => 1,
            Token::Sep => 2,
            Token::End => 3,
            Token::Ooc => 4,
            Token::Rel(i) => 4 + i as usize,
        }
    }

    /// Inverse of [`Token::id`] for ids below `5 + capacity`.
    pub fn from_id(id: usize, capacity: usize) -> Option<Token> {
        match id {
            0 => Some(Token::Pad),
            1 => Some(Token::Start),
            2 => Some(Token::Sep),
            3 => Some(Token::End),
            4 => Some(Token::Ooc),
            i if i <= 4 + capacity => Some(Token::Rel((i - 4) as u16)),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => write!(f, "<pad>"),
            Token::Start => write!(f, "<start>"),
            Token::Sep => write!(f, "<sep>"),
            Token::End => write!(f, "<end>"),
            Token::Ooc => write!(f, "<ooc>"),
            Token::Rel(i) => write!(f, "<t_{i}>"),
        }
    }
}

/// A sequence of decoder symbols.
pub type TokenSequence = Vec<Token>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    /// The context contains more distinct characters than the vocabulary
    /// reserves relative tokens for.
    #[error("context holds {distinct} distinct characters, capacity is {capacity}")]
    DistinctCharOverflow { distinct: usize, capacity: usize },
    /// A relative token outside the active mapping (or a structural token in
    /// a position that cannot be decoded) was encountered.
    #[error("token {0} is outside the active mapping")]
    UnknownToken(Token),
    /// A character that is not part of the mapping was found where the
    /// mapping is required to cover it.
    #[error("character {0:?} is not in the mapping")]
    CharNotInMapping(char),
}

/// Bijective table between context characters and relative tokens.
///
/// Index `i` is assigned to the i-th distinct character encountered when
/// scanning the context transcriptions in their given order, left to right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextMapping {
    chars: Vec<char>,
    index: HashMap<char, u16>,
    capacity: usize,
}

impl ContextMapping {
    /// Number of distinct characters in the mapping.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Relative token for `c`, if the character is in context.
    pub fn token_for(&self, c: char) -> Option<Token> {
        self.index.get(&c).map(|&i| Token::Rel(i))
    }

    /// Character for a 1-based relative index.
    pub fn char_for(&self, rel: u16) -> Option<char> {
        if rel == 0 {
            return None;
        }
        self.chars.get(rel as usize - 1).copied()
    }

    /// Characters in first-occurrence order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// The distinct relative tokens of this mapping, `<t_1>..<t_n>`.
    pub fn token_set(&self) -> Vec<Token> {
        (1..=self.chars.len() as u16).map(Token::Rel).collect()
    }
}

/// Builds the first-occurrence mapping from the context transcriptions.
pub fn build_mapping(
    context_transcriptions: &[impl AsRef<str>],
    capacity: usize,
) -> Result<ContextMapping, TokenizerError> {
    let mut chars = Vec::new();
    let mut index = HashMap::new();
    for line in context_transcriptions {
        for c in line.as_ref().chars() {
            if !index.contains_key(&c) {
                let i = chars.len() + 1;
                if i > capacity {
                    // Count the remaining distinct characters for the report.
                    let mut seen: Vec<char> = chars.clone();
                    for l in context_transcriptions {
                        for c2 in l.as_ref().chars() {
                            if !seen.contains(&c2) {
                                seen.push(c2);
                            }
                        }
                    }
                    return Err(TokenizerError::DistinctCharOverflow {
                        distinct: seen.len(),
                        capacity,
                    });
                }
                index.insert(c, i as u16);
                chars.push(c);
            }
        }
    }
    Ok(ContextMapping { chars, index, capacity })
}

/// Encodes a query transcription as relative tokens with a trailing `<end>`.
///
/// Characters absent from the mapping become `<ooc>`. Output length is always
/// `query.chars().count() + 1`.
pub fn encode_target(query_transcription: &str, mapping: &ContextMapping) -> TokenSequence {
    let mut out: TokenSequence = query_transcription
        .chars()
        .map(|c| mapping.token_for(c).unwrap_or(Token::Ooc))
        .collect();
    out.push(Token::End);
    out
}

/// Decodes predicted tokens back to characters through the mapping.
///
/// Decoding stops at the first `<end>` or `<pad>`. `<ooc>` renders as
/// `ooc_placeholder`. Relative tokens beyond the mapping, or structural
/// `<sep>`/`<start>` tokens, are rejected.
pub fn decode_tokens(
    tokens: &[Token],
    mapping: &ContextMapping,
    ooc_placeholder: char,
) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &t in tokens {
        match t {
            Token::End | Token::Pad => break,
            Token::Ooc => out.push(ooc_placeholder),
            Token::Rel(i) => match mapping.char_for(i) {
                Some(c) => out.push(c),
                None => return Err(TokenizerError::UnknownToken(t)),
            },
            Token::Sep | Token::Start => return Err(TokenizerError::UnknownToken(t)),
        }
    }
    Ok(out)
}

/// Builds the decoder conditioning prefix from the context transcriptions.
///
/// Each line is encoded with its relative tokens; lines are separated by
/// `<sep>` (between lines only, no trailing separator) and the prefix ends
/// with a single `<start>` that opens query generation.
pub fn context_prefix(
    mapping: &ContextMapping,
    context_transcriptions: &[impl AsRef<str>],
) -> Result<TokenSequence, TokenizerError> {
    let mut out = Vec::new();
    for (li, line) in context_transcriptions.iter().enumerate() {
        if li > 0 {
            out.push(Token::Sep);
        }
        for c in line.as_ref().chars() {
            match mapping.token_for(c) {
                Some(t) => out.push(t),
                None => return Err(TokenizerError::CharNotInMapping(c)),
            }
        }
    }
    out.push(Token::Start);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mapping_of(lines: &[&str]) -> ContextMapping {
        build_mapping(lines, DEFAULT_CAPACITY).unwrap()
    }

    #[test]
    fn fourth_distinct_character_gets_t4() {
        // 'a' is the fourth distinct character of the context.
        let m = mapping_of(&["stra ange"]);
        assert_eq!(m.token_for('a'), Some(Token::Rel(4)));
    }

    #[test]
    fn first_occurrence_scan_order() {
        let m = mapping_of(&["bad"]);
        assert_eq!(m.token_for('b'), Some(Token::Rel(1)));
        assert_eq!(m.token_for('a'), Some(Token::Rel(2)));
        assert_eq!(m.token_for('d'), Some(Token::Rel(3)));
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn empty_context_gives_empty_mapping() {
        let m = mapping_of(&[""]);
        assert_eq!(m.len(), 0);
        assert!(m.is_empty());
    }

    #[test]
    fn overflow_reports_distinct_count() {
        let err = build_mapping(&["abcd"], 3).unwrap_err();
        assert_eq!(err, TokenizerError::DistinctCharOverflow { distinct: 4, capacity: 3 });
    }

    #[test]
    fn encode_target_per_character_lookup() {
        let m = mapping_of(&["bad"]);
        assert_eq!(
            encode_target("dab", &m),
            vec![Token::Rel(3), Token::Rel(2), Token::Rel(1), Token::End]
        );
    }

    #[test]
    fn encode_target_absent_character_is_ooc() {
        let m = mapping_of(&["bad"]);
        assert_eq!(
            encode_target("bed", &m),
            vec![Token::Rel(1), Token::Ooc, Token::Rel(3), Token::End]
        );
    }

    #[test]
    fn encode_target_empty_query() {
        let m = mapping_of(&["bad"]);
        assert_eq!(encode_target("", &m), vec![Token::End]);
    }

    #[test]
    fn decode_inverse_lookup() {
        let m = mapping_of(&["bad"]);
        let s = decode_tokens(
            &[Token::Rel(3), Token::Rel(2), Token::Rel(1), Token::End],
            &m,
            OOC_PLACEHOLDER,
        )
        .unwrap();
        assert_eq!(s, "dab");
    }

    #[test]
    fn decode_ooc_renders_placeholder() {
        let m = mapping_of(&["bad"]);
        let s = decode_tokens(&[Token::Ooc, Token::End], &m, OOC_PLACEHOLDER).unwrap();
        assert_eq!(s, "*");
    }

    #[test]
    fn decode_rejects_out_of_mapping_relative_token() {
        let m = mapping_of(&["bad"]);
        let err = decode_tokens(&[Token::Rel(9)], &m, '*').unwrap_err();
        assert_eq!(err, TokenizerError::UnknownToken(Token::Rel(9)));
    }

    #[test]
    fn decode_rejects_structural_tokens() {
        let m = mapping_of(&["bad"]);
        assert!(decode_tokens(&[Token::Sep], &m, '*').is_err());
        assert!(decode_tokens(&[Token::Start], &m, '*').is_err());
    }

    #[test]
    fn decode_stops_at_end_and_pad() {
        let m = mapping_of(&["bad"]);
        let s = decode_tokens(
            &[Token::Rel(1), Token::End, Token::Rel(2)],
            &m,
            '*',
        )
        .unwrap();
        assert_eq!(s, "b");
        let s = decode_tokens(&[Token::Rel(1), Token::Pad, Token::Rel(2)], &m, '*').unwrap();
        assert_eq!(s, "b");
    }

    #[test]
    fn prefix_layout_sep_between_lines_then_start() {
        let m = mapping_of(&["ab", "ba"]);
        assert_eq!(
            context_prefix(&m, &["ab", "ba"]).unwrap(),
            vec![Token::Rel(1), Token::Rel(2), Token::Sep, Token::Rel(2), Token::Rel(1), Token::Start]
        );
    }

    #[test]
    fn prefix_single_line_has_no_sep() {
        let m = mapping_of(&["bad"]);
        assert_eq!(
            context_prefix(&m, &["bad"]).unwrap(),
            vec![Token::Rel(1), Token::Rel(2), Token::Rel(3), Token::Start]
        );
    }

    #[test]
    fn prefix_single_empty_line_is_just_start() {
        let m = mapping_of(&[""]);
        assert_eq!(context_prefix(&m, &[""]).unwrap(), vec![Token::Start]);
    }

    #[test]
    fn prefix_empty_lines_still_separated() {
        let m = mapping_of(&["", "a"]);
        assert_eq!(
            context_prefix(&m, &["", "a"]).unwrap(),
            vec![Token::Sep, Token::Rel(1), Token::Start]
        );
    }

    #[test]
    fn token_id_round_trip() {
        for t in [Token::Pad, Token::Start, Token::Sep, Token::End, Token::Ooc, Token::Rel(1), Token::Rel(120)] {
            assert_eq!(Token::from_id(t.id(), 120), Some(t));
        }
        assert_eq!(Token::from_id(4 + 121, 120), None);
    }

    proptest! {
        #[test]
        fn mapping_is_a_bijection(lines in proptest::collection::vec("[a-h ]{0,12}", 0..5)) {
            let m = build_mapping(&lines, DEFAULT_CAPACITY).unwrap();
            // token_to_char ∘ char_to_token = identity on the context alphabet
            for &c in m.chars() {
                let t = m.token_for(c).unwrap();
                let Token::Rel(i) = t else { panic!("non-relative token") };
                prop_assert_eq!(m.char_for(i), Some(c));
            }
            // indices are exactly 1..n with no gaps
            let n = m.len() as u16;
            for i in 1..=n {
                prop_assert!(m.char_for(i).is_some());
            }
            prop_assert_eq!(m.char_for(n + 1), None);
        }

        #[test]
        fn round_trip_with_placeholder(
            lines in proptest::collection::vec("[a-h ]{0,12}", 0..5),
            query in "[a-j ]{0,16}",
        ) {
            let m = build_mapping(&lines, DEFAULT_CAPACITY).unwrap();
            let decoded = decode_tokens(&encode_target(&query, &m), &m, OOC_PLACEHOLDER).unwrap();
            let expect: String = query
                .chars()
                .map(|c| if m.token_for(c).is_some() { c } else { OOC_PLACEHOLDER })
                .collect();
            prop_assert_eq!(decoded, expect);
        }

        #[test]
        fn ooc_positions_invariant_under_context_permutation(
            lines in proptest::collection::vec("[a-h ]{0,12}", 1..5),
            query in "[a-j ]{0,16}",
            rot in 0usize..5,
        ) {
            let mut permuted = lines.clone();
            permuted.rotate_left(rot % lines.len().max(1));
            let m1 = build_mapping(&lines, DEFAULT_CAPACITY).unwrap();
            let m2 = build_mapping(&permuted, DEFAULT_CAPACITY).unwrap();
            let ooc1: Vec<bool> = encode_target(&query, &m1).iter().map(|t| *t == Token::Ooc).collect();
            let ooc2: Vec<bool> = encode_target(&query, &m2).iter().map(|t| *t == Token::Ooc).collect();
            prop_assert_eq!(ooc1, ooc2);
        }
    }
}
