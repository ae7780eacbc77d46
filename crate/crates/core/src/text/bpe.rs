//! Byte-level BPE tokenizer compatible with the CLIP text encoder.
//!
//! The vocabulary is rebuilt from the released merges file: 256 byte symbols,
//! the same symbols with an end-of-word marker, one entry per merge, then the
//! start/end-of-text specials.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};

const END_OF_WORD: &str = "</w>";
const SOT: &str = "<start_of_text>";
const EOT: &str = "<end_of_text>";
/// Merges used by the 49408-entry vocabulary.
pub const MERGE_COUNT: usize = 49152 - 256 - 2;

/// Fixed-length id sequence fed to the text encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<i64>,
    pub eot_position: usize,
}

impl TokenSequence {
    pub fn sot_position(&self) -> usize {
        0
    }
}

pub struct BpeTokenizer {
    encoder: HashMap<String, i64>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    sot: i64,
    eot: i64,
}

impl std::fmt::Debug for BpeTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BpeTokenizer")
            .field("vocab_size", &self.encoder.len())
            .finish()
    }
}

/// Reversible byte → printable-char table used by GPT-2 style BPE.
fn bytes_to_unicode() -> Vec<(u8, char)> {
    let mut bytes: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars = bytes.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !bytes.contains(&b) {
            bytes.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    bytes
        .into_iter()
        .zip(chars)
        .map(|(b, c)| (b as u8, char::from_u32(c).expect("valid code point")))
        .collect()
}

impl BpeTokenizer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Tokenizer(format!("{}: {e}", path.display())))?;
        Self::from_merges(&text)
    }

    /// Build from merges text (optional `#version` header, one `a b` pair per line).
    pub fn from_merges(text: &str) -> Result<Self> {
        let merges: Vec<(String, String)> = text
            .lines()
            .enumerate()
            .filter(|(i, l)| !(*i == 0 && l.contains("#version")))
            .map(|(_, l)| l)
            .filter(|l| !l.trim().is_empty())
            .take(MERGE_COUNT)
            .map(|line| {
                let mut parts = line.split_whitespace();
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) => Ok((a.to_owned(), b.to_owned())),
                    _ => Err(Error::Tokenizer(format!("malformed merge line `{line}`"))),
                }
            })
            .collect::<Result<_>>()?;
        if merges.is_empty() {
            return Err(Error::Tokenizer("merges file is empty".into()));
        }

        let table = bytes_to_unicode();
        let mut byte_encoder = ['\0'; 256];
        for &(b, c) in &table {
            byte_encoder[b as usize] = c;
        }
        let mut vocab: Vec<String> = table.iter().map(|&(_, c)| c.to_string()).collect();
        vocab.extend(table.iter().map(|&(_, c)| format!("{c}{END_OF_WORD}")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push(SOT.to_owned());
        vocab.push(EOT.to_owned());

        let encoder: HashMap<String, i64> = vocab
            .into_iter()
            .enumerate()
            .map(|(i, tok)| (tok, i as i64))
            .collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern = Regex::new(
            r"(?i)<start_of_text>|<end_of_text>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");

        Ok(Self {
            sot: encoder[SOT],
            eot: encoder[EOT],
            encoder,
            ranks,
            byte_encoder,
            pattern,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    pub fn sot_id(&self) -> i64 {
        self.sot
    }

    pub fn eot_id(&self) -> i64 {
        self.eot
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        if token == SOT || token == EOT {
            return vec![token.to_owned()];
        }
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str(END_OF_WORD);
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w[0].clone(), w[1].clone()))
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// BPE ids for `text` without start/end markers.
    pub fn encode(&self, text: &str) -> Result<Vec<i64>> {
        let cleaned = clean_text(text);
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let piece: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for sub in self.bpe(&piece) {
                let id = self
                    .encoder
                    .get(&sub)
                    .ok_or_else(|| Error::Tokenizer(format!("symbol `{sub}` missing from vocabulary")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    /// `[SOT] ids [EOT] 0…` of exactly `context_length` entries; long inputs
    /// are truncated so the end-of-text id always fits.
    pub fn tokenize(&self, text: &str, context_length: usize) -> Result<TokenSequence> {
        if context_length < 2 {
            return Err(Error::Tokenizer(format!(
                "context length {context_length} cannot hold start and end markers"
            )));
        }
        let mut ids = Vec::with_capacity(context_length);
        ids.push(self.sot);
        ids.extend(self.encode(text)?);
        ids.push(self.eot);
        if ids.len() > context_length {
            ids.truncate(context_length);
            ids[context_length - 1] = self.eot;
        }
        let eot_position = ids.len() - 1;
        ids.resize(context_length, 0);
        Ok(TokenSequence { ids, eot_position })
    }
}

/// Unescape HTML entities (applied twice), collapse whitespace, lowercase.
pub fn clean_text(text: &str) -> String {
    let unescaped = html_unescape(&html_unescape(text));
    let collapsed = unescaped.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.to_lowercase()
}

fn html_unescape(text: &str) -> String {
    if !text.contains('&') {
        return text.to_owned();
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        match decode_entity(rest) {
            Some((ch, used)) => {
                out.push(ch);
                rest = &rest[used..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn decode_entity(s: &str) -> Option<(char, usize)> {
    let end = s.find(';')?;
    let body = &s[1..end];
    let ch = if let Some(num) = body.strip_prefix('#') {
        let code = match num.strip_prefix(['x', 'X']) {
            Some(hexnum) => u32::from_str_radix(hexnum, 16).ok()?,
            None => num.parse().ok()?,
        };
        char::from_u32(code)?
    } else {
        match body {
            "amp" => '&',
            "lt" => '<',
            "gt" => '>',
            "quot" => '"',
            "apos" => '\'',
            "nbsp" => '\u{a0}',
            _ => return None,
        }
    };
    Some((ch, end + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BpeTokenizer {
        BpeTokenizer::from_merges("#version: 0.2\nd o\ndo g</w>\n").unwrap()
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let table = bytes_to_unicode();
        assert_eq!(table.len(), 256);
        let mut chars: Vec<char> = table.iter().map(|&(_, c)| c).collect();
        chars.sort();
        chars.dedup();
        assert_eq!(chars.len(), 256);
        assert_eq!(table[0], (b'!', '!'));
    }

    #[test]
    fn vocabulary_layout() {
        let t = tiny();
        assert_eq!(t.vocab_size(), 512 + 2 + 2);
        assert_eq!(t.sot_id(), 514);
        assert_eq!(t.eot_id(), 515);
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let t = tiny();
        assert_eq!(t.bpe("dog"), vec!["dog</w>"]);
        assert_eq!(t.bpe("dot"), vec!["do", "t</w>"]);
    }

    #[test]
    fn empty_text_is_sot_eot_then_padding() {
        let t = tiny();
        let seq = t.tokenize("", 8).unwrap();
        assert_eq!(seq.ids, vec![514, 515, 0, 0, 0, 0, 0, 0]);
        assert_eq!(seq.eot_position, 1);
    }

    #[test]
    fn long_text_truncates_to_context_length() {
        let t = tiny();
        let text = vec!["dog"; 500].join(" ");
        let seq = t.tokenize(&text, 77).unwrap();
        assert_eq!(seq.ids.len(), 77);
        assert_eq!(*seq.ids.last().unwrap(), t.eot_id());
        assert_eq!(seq.eot_position, 76);
        assert_eq!(seq.ids.iter().filter(|&&i| i == t.eot_id()).count(), 1);
    }

    #[test]
    fn cleaning() {
        assert_eq!(clean_text("  A  Photo\tof &amp;amp; Dog "), "a photo of & dog");
        assert_eq!(clean_text("&#65;&#x42; &bogus;"), "ab &bogus;");
    }

    #[test]
    fn malformed_merges_are_rejected() {
        assert!(BpeTokenizer::from_merges("").is_err());
        assert!(BpeTokenizer::from_merges("a b c\n").is_err());
    }
}
