//! Tokenization and keyword helpers shared by every stage.
//!
//! One tokenizer is used for prompt budgeting, attention scoring, similarity
//! and BLEU/Distinct: every CJK character is a token on its own, and every
//! maximal run of other non-whitespace characters is one word.

use unicode_normalization::UnicodeNormalization;

/// Returns true for Han ideographs, kana and hangul syllables.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF     // hiragana, katakana
        | 0x3400..=0x4DBF   // CJK ext A
        | 0x4E00..=0x9FFF   // CJK unified
        | 0xAC00..=0xD7AF   // hangul syllables
        | 0xF900..=0xFAFF   // compatibility ideographs
        | 0x20000..=0x2FA1F // ext B..F, compat supplement
    )
}

/// Splits text into tokens: CJK characters individually, everything else on whitespace.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_cjk(c) {
            if let Some(start) = word_start.take() {
                tokens.push(&text[start..i]);
            }
            if is_cjk(c) {
                tokens.push(&text[i..i + c.len_utf8()]);
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(start) = word_start {
        tokens.push(&text[start..]);
    }
    tokens
}

/// Number of tokens in `text` under [`tokenize`].
pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

/// Canonical form used for keyword comparison: NFC, trimmed, Latin lowercased.
pub fn normalize_keyword(keyword: &str) -> String {
    keyword
        .trim()
        .nfc()
        .map(|c| if c.is_ascii_alphabetic() || is_latin(c) { c.to_lowercase().next().unwrap_or(c) } else { c })
        .collect()
}

fn is_latin(c: char) -> bool {
    matches!(c as u32, 0x00C0..=0x024F | 0x1E00..=0x1EFF)
}

/// Parses an LLM reply as a keyword list. Accepts `,` `，` `、` and newlines
/// as delimiters, strips list bullets, drops empties and dedups on the
/// normalized form while keeping the first surface form.
pub fn parse_keyword_list(reply: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for raw in reply.split([',', '，', '、', '\n', '\r']) {
        let item = raw
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim();
        if item.is_empty() {
            continue;
        }
        if seen.insert(normalize_keyword(item)) {
            out.push(item.to_string());
        }
    }
    out
}
