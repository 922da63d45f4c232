//! Text ingestion: JSONL datasets, a code-aware tokenizer, vocabularies and
//! the id sequences consumed by the encoders.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a code snippet. A dataset pair's id doubles as the id of its
/// gold code in the codebase.
pub type CodeId = u64;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Query,
    Code,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPair {
    pub id: CodeId,
    pub query: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub kind: TokenKind,
}

/// Token ids for one query or code after truncation. Never contains PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IdSequence {
    pub ids: Vec<u32>,
    pub kind: TokenKind,
}

impl IdSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Truncation lengths per sequence kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLimits {
    pub query: usize,
    pub code: usize,
}

impl Default for SequenceLimits {
    fn default() -> Self {
        Self {
            query: 64,
            code: 128,
        }
    }
}

impl SequenceLimits {
    pub fn for_kind(&self, kind: TokenKind) -> usize {
        match kind {
            TokenKind::Query => self.query,
            TokenKind::Code => self.code,
        }
    }
}

/// Splits `text` into lowercase word fragments.
///
/// Any non-alphanumeric character separates tokens (this covers whitespace,
/// punctuation and the underscores of snake_case), and a lowercase letter
/// followed by an uppercase one starts a new token.
pub fn tokenize(text: &str, kind: TokenKind) -> Result<TokenSequence> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut prev_lower = false;
    for ch in text.chars() {
        if !ch.is_alphanumeric() {
            flush(&mut current, &mut tokens);
            prev_lower = false;
            continue;
        }
        if prev_lower && ch.is_uppercase() {
            flush(&mut current, &mut tokens);
        }
        current.push(ch);
        prev_lower = ch.is_lowercase();
    }
    flush(&mut current, &mut tokens);
    if tokens.is_empty() {
        return Err(Error::EmptyAfterTokenize);
    }
    Ok(TokenSequence { tokens, kind })
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if current.is_empty() {
        return;
    }
    // Lowercasing can introduce combining marks (e.g. 'İ') and leaves some
    // uppercase letters unchanged, so both splitting rules run again.
    let lowered = current.to_lowercase();
    let mut piece = String::new();
    let mut prev_lower = false;
    for ch in lowered.chars() {
        if !ch.is_alphanumeric() || (prev_lower && ch.is_uppercase()) {
            if !piece.is_empty() {
                tokens.push(std::mem::take(&mut piece));
            }
        }
        if ch.is_alphanumeric() {
            piece.push(ch);
        }
        prev_lower = ch.is_lowercase();
    }
    if !piece.is_empty() {
        tokens.push(piece);
    }
    current.clear();
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_freq: usize,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn from_ordered(min_freq: usize, ordered: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        tokens.extend(ordered);
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if lookup.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self {
            tokens,
            lookup,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            min_freq: self.min_freq,
            tokens: self.tokens[RESERVED_TOKENS.len()..].to_vec(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        Self::from_ordered(file.min_freq, file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Builds a vocabulary from every token seen at least `min_freq` times.
/// Ids after the reserved block go by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<'a, I>(corpus: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a TokenSequence>,
{
    if min_freq == 0 {
        return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpus {
        for tok in &seq.tokens {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(tok, n)| n >= min_freq && !RESERVED_TOKENS.contains(&tok))
        .collect();
    kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_ordered(min_freq, kept.into_iter().map(|(t, _)| t.to_owned()).collect())
}

/// Maps tokens to ids (unknown tokens become UNK) and truncates to the limit
/// for the sequence kind.
pub fn encode_ids(seq: &TokenSequence, vocab: &Vocabulary, limits: &SequenceLimits) -> IdSequence {
    let limit = limits.for_kind(seq.kind);
    let ids = seq
        .tokens
        .iter()
        .take(limit)
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .collect();
    IdSequence {
        ids,
        kind: seq.kind,
    }
}

/// Tokenize and encode in one step.
pub fn text_to_ids(
    text: &str,
    kind: TokenKind,
    vocab: &Vocabulary,
    limits: &SequenceLimits,
) -> Result<IdSequence> {
    Ok(encode_ids(&tokenize(text, kind)?, vocab, limits))
}

/// Field layout of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// `{"id": int, "query": string, "code": string}` per line.
    #[default]
    Native,
    /// CodeSearchNet-style lines. The query comes from `docstring_tokens`
    /// (or `docstring`), the code from `code_tokens` (or `code`), and the id
    /// from `idx`, falling back to the 0-based line index.
    Csn,
}

#[derive(Deserialize)]
struct NativeLine {
    id: CodeId,
    query: Option<String>,
    code: String,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csn_field(value: &serde_json::Value, tokens_key: &str, text_key: &str) -> Option<String> {
    if let Some(toks) = value.get(tokens_key).and_then(|v| v.as_array()) {
        let joined: Vec<&str> = toks.iter().filter_map(|t| t.as_str()).collect();
        return Some(joined.join(" "));
    }
    value.get(text_key).and_then(|v| v.as_str()).map(str::to_owned)
}

fn read_lines(
    path: &Path,
    format: DatasetFormat,
    require_query: bool,
) -> Result<Vec<(CodeId, Option<String>, String)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, query, code) = match format {
            DatasetFormat::Native => {
                let parsed: NativeLine =
                    serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
                (parsed.id, parsed.query, parsed.code)
            }
            DatasetFormat::Csn => {
                let value: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
                let id = match value.get("idx") {
                    Some(v) => v
                        .as_u64()
                        .ok_or_else(|| parse_err(path, lineno, "`idx` is not a non-negative integer"))?,
                    None => idx as CodeId,
                };
                let code = csn_field(&value, "code_tokens", "code")
                    .ok_or_else(|| parse_err(path, lineno, "missing field `code`"))?;
                (id, csn_field(&value, "docstring_tokens", "docstring"), code)
            }
        };
        if code.trim().is_empty() {
            return Err(parse_err(path, lineno, "empty `code`"));
        }
        match &query {
            Some(q) if q.trim().is_empty() => return Err(parse_err(path, lineno, "empty `query`")),
            None if require_query => return Err(parse_err(path, lineno, "missing field `query`")),
            _ => {}
        }
        if !seen.insert(id) {
            return Err(parse_err(path, lineno, format!("duplicate id {id}")));
        }
        out.push((id, query, code));
    }
    Ok(out)
}

/// Reads query/code pairs in file order.
pub fn load_dataset(path: &Path) -> Result<Vec<RawPair>> {
    load_dataset_with(path, DatasetFormat::Native)
}

pub fn load_dataset_with(path: &Path, format: DatasetFormat) -> Result<Vec<RawPair>> {
    Ok(read_lines(path, format, true)?
        .into_iter()
        .map(|(id, query, code)| RawPair {
            id,
            query: query.unwrap_or_default(),
            code,
        })
        .collect())
}

/// Reads `(id, code)` entries; the `query` field is optional here.
pub fn load_codebase(path: &Path) -> Result<Vec<(CodeId, String)>> {
    load_codebase_with(path, DatasetFormat::Native)
}

pub fn load_codebase_with(path: &Path, format: DatasetFormat) -> Result<Vec<(CodeId, String)>> {
    Ok(read_lines(path, format, false)?
        .into_iter()
        .map(|(id, _, code)| (id, code))
        .collect())
}

pub fn write_dataset(path: &Path, pairs: &[RawPair]) -> Result<()> {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&serde_json::to_string(pair)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_codebase(path: &Path, codes: &[(CodeId, String)]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: CodeId,
        code: &'a str,
    }
    let mut out = String::new();
    for (id, code) in codes {
        out.push_str(&serde_json::to_string(&Line { id: *id, code })?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
