//! Byte-level BPE. The base alphabet is the 256 byte values, so every byte
//! string encodes without an unknown token. Merges never cross chunk
//! boundaries produced by [`pretokenize`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

const FORMAT: &str = "ponderlm-bpe";
const VERSION: u32 = 1;
pub const PAUSE_TEXT: &str = "<pause>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    vocab: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    format: String,
    version: u32,
    merges: Vec<(u32, u32)>,
    specials: Specials,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Specials {
    pause: u32,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Newline,
    Other,
}

fn class(b: u8) -> Class {
    match b {
        b'a'..=b'z' | b'A'..=b'Z' | 0x80..=0xff => Class::Letter,
        b'0'..=b'9' => Class::Digit,
        b' ' => Class::Space,
        b'\n' | b'\r' | b'\t' => Class::Newline,
        _ => Class::Other,
    }
}

/// Split text into merge domains: letter runs (with one leading space
/// attached), single digits, single punctuation bytes, and whitespace runs.
pub fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let start = i;
        let mut c = class(text[i]);
        if c == Class::Space && i + 1 < text.len() {
            let next = class(text[i + 1]);
            if !matches!(next, Class::Space | Class::Newline) {
                i += 1;
                c = next;
            }
        }
        match c {
            Class::Letter => {
                i += 1;
                while i < text.len() && class(text[i]) == Class::Letter {
                    i += 1;
                }
            }
            Class::Digit | Class::Other => i += 1,
            Class::Space | Class::Newline => {
                while i < text.len() && class(text[i]) == c {
                    i += 1;
                }
            }
        }
        out.push(&text[start..i]);
    }
    out
}

fn merge_pair(word: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < word.len() {
        if r + 1 < word.len() && (word[r], word[r + 1]) == pair {
            word[w] = id;
            r += 2;
        } else {
            word[w] = word[r];
            r += 1;
        }
        w += 1;
    }
    word.truncate(w);
}

/// Learn merges until the vocabulary reaches `vocab_size` or no adjacent
/// pair remains. The most frequent pair wins; ties go to the smaller pair.
pub fn train_bpe(corpus: &[u8], vocab_size: usize) -> Result<Tokenizer> {
    if vocab_size <= 256 {
        return Err(Error::Config(format!(
            "tokenizer vocab_size must exceed the 256-byte base alphabet, got {vocab_size}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyInput("tokenizer corpus"));
    }
    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    for chunk in pretokenize(corpus) {
        *counts.entry(chunk).or_default() += 1;
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
        .collect();
    words.sort();

    let mut tok = Tokenizer::bytes_only();
    while tok.vocab.len() < vocab_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += c;
            }
        }
        let Some((&best, _)) = pairs
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        else {
            break;
        };
        let id = tok.push_merge(best);
        for (w, _) in words.iter_mut() {
            if w.len() > 1 {
                merge_pair(w, best, id);
            }
        }
    }
    if tok.vocab.len() < vocab_size {
        log::warn!(
            "corpus supports only {} tokens; requested {vocab_size}",
            tok.vocab.len()
        );
    }
    Ok(tok)
}

impl Tokenizer {
    fn bytes_only() -> Self {
        Self {
            merges: Vec::new(),
            vocab: (0..=255u8).map(|b| vec![b]).collect(),
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.vocab.len() as u32;
        let mut bytes = self.vocab[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.vocab[pair.1 as usize]);
        self.vocab.push(bytes);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        id
    }

    pub fn from_merges(merges: &[(u32, u32)]) -> Result<Self> {
        let mut tok = Self::bytes_only();
        for &(a, b) in merges {
            let n = tok.vocab.len() as u32;
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "merge ({a}, {b}) refers to an id not yet defined (vocab {n})"
                )));
            }
            if tok.ranks.contains_key(&(a, b)) {
                return Err(Error::Validation(format!("duplicate merge ({a}, {b})")));
            }
            tok.push_merge((a, b));
        }
        Ok(tok)
    }

    /// Number of ordinary tokens; ids are dense in `[0, vocab_size)`.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// The pause special sits just past the ordinary vocabulary, matching the
    /// extra embedding row the pause baseline appends.
    pub fn pause_id(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: usize) -> Option<&[u8]> {
        self.vocab.get(id).map(Vec::as_slice)
    }

    /// Human-readable form of one token (lossy UTF-8).
    pub fn token_text(&self, id: usize) -> String {
        if id == self.pause_id() {
            return PAUSE_TEXT.to_string();
        }
        match self.token_bytes(id) {
            Some(b) => String::from_utf8_lossy(b).into_owned(),
            None => format!("<invalid:{id}>"),
        }
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut word: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_pair(&mut word, pair, 256 + rank);
        }
        out.extend_from_slice(&word);
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut cache: HashMap<&[u8], Vec<u32>> = HashMap::new();
        let mut out = Vec::with_capacity(text.len() / 3);
        for chunk in pretokenize(text) {
            let ids = cache.entry(chunk).or_insert_with(|| {
                let mut v = Vec::new();
                self.encode_chunk(chunk, &mut v);
                v
            });
            out.extend_from_slice(ids);
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.vocab.get(id as usize).ok_or(Error::InvalidToken {
                id: id as usize,
                vocab_size: self.vocab.len(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            format: FORMAT.into(),
            version: VERSION,
            merges: self.merges.clone(),
            specials: Specials {
                pause: self.pause_id() as u32,
            },
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Format {
                path: path.into(),
                reason: format!(
                    "expected {FORMAT} v{VERSION}, found {} v{}",
                    file.format, file.version
                ),
            });
        }
        let tok = Self::from_merges(&file.merges)?;
        if file.specials.pause as usize != tok.pause_id() {
            return Err(Error::Validation(format!(
                "pause id {} does not follow the {}-token vocabulary",
                file.specials.pause,
                tok.vocab_size()
            )));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Content hash of the serialized form; stored in checkpoints.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}
