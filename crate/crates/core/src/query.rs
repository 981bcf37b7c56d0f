//! Query construction: category names pass through, captions are reduced to
//! their rarest noun phrase.
//!
//! Tagging is lexicon driven (unknown words are nouns) and chunking follows
//! the grammar `DET? (ADJ|NUM)* NOUN+`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tag {
    Noun,
    Adj,
    Num,
    Det,
    Other,
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NOUN" => Ok(Tag::Noun),
            "ADJ" => Ok(Tag::Adj),
            "NUM" => Ok(Tag::Num),
            "DET" => Ok(Tag::Det),
            "OTHER" => Ok(Tag::Other),
            other => Err(Error::invalid(format!("unknown POS tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedToken {
    pub surface: String,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounPhrase {
    pub tokens: Vec<TaggedToken>,
    pub normalized: String,
}

impl NounPhrase {
    fn new(tokens: &[TaggedToken]) -> Self {
        let normalized = tokens
            .iter()
            .map(|t| t.surface.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        NounPhrase {
            tokens: tokens.to_vec(),
            normalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Category,
    Caption,
}

impl FromStr for TextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(TextKind::Category),
            "caption" => Ok(TextKind::Caption),
            other => Err(Error::invalid(format!("unknown text kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    Category,
    CaptionNp,
    CaptionFallback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub text: String,
    pub origin: QueryOrigin,
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Token → POS tag map loaded from `token<TAB>TAG` lines.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    tags: HashMap<String, Tag>,
}

impl Lexicon {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Tag)>,
        S: AsRef<str>,
    {
        Lexicon {
            tags: pairs
                .into_iter()
                .map(|(s, t)| (s.as_ref().to_lowercase(), t))
                .collect(),
        }
    }

    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut tags = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message,
            };
            let (token, tag) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>TAG".into()))?;
            let tag: Tag = tag.trim().parse().map_err(|e: Error| parse_err(e.to_string()))?;
            tags.insert(token.trim().to_lowercase(), tag);
        }
        Ok(Lexicon { tags })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    pub fn tag(&self, token: &str) -> Tag {
        self.tags.get(token).copied().unwrap_or(Tag::Noun)
    }
}

/// Lowercase whitespace tokenization with per-token punctuation trimming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn pos_tag<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Vec<TaggedToken> {
    tokens
        .iter()
        .map(|t| TaggedToken {
            surface: t.as_ref().to_string(),
            tag: lexicon.tag(t.as_ref()),
        })
        .collect()
}

/// Length of a `DET? (ADJ|NUM)* NOUN+` match starting at `start`, plus the
/// offset where the noun run begins.
fn match_at(tagged: &[TaggedToken], start: usize) -> Option<(usize, usize)> {
    let mut i = start;
    if tagged.get(i).map(|t| t.tag) == Some(Tag::Det) {
        i += 1;
    }
    while matches!(tagged.get(i).map(|t| t.tag), Some(Tag::Adj | Tag::Num)) {
        i += 1;
    }
    let head_start = i;
    while tagged.get(i).map(|t| t.tag) == Some(Tag::Noun) {
        i += 1;
    }
    (i > head_start).then_some((i, head_start))
}

pub fn chunk_noun_phrases(tagged: &[TaggedToken]) -> Vec<NounPhrase> {
    let mut phrases: Vec<NounPhrase> = Vec::new();
    let mut push = |p: NounPhrase| {
        if !phrases.iter().any(|q| q.normalized == p.normalized) {
            phrases.push(p);
        }
    };
    let mut i = 0;
    while i < tagged.len() {
        match match_at(tagged, i) {
            Some((end, head_start)) => {
                push(NounPhrase::new(&tagged[i..end]));
                if head_start > i {
                    push(NounPhrase::new(&tagged[head_start..end]));
                }
                i = end;
            }
            None => i += 1,
        }
    }
    phrases
}

pub fn noun_phrases(text: &str, lexicon: &Lexicon) -> Vec<NounPhrase> {
    chunk_noun_phrases(&pos_tag(&tokenize(text), lexicon))
}

/// Per-occurrence noun-phrase counts over a caption corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<String, u64>,
    pub total_docs: u64,
}

#[derive(Serialize, Deserialize)]
struct PhraseCount {
    phrase: String,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    total_docs: u64,
}

impl FrequencyTable {
    pub fn count(&self, phrase: &str) -> u64 {
        self.counts.get(phrase).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Add one caption's phrases. Every chunked phrase occurrence counts once.
    pub fn add_caption(&mut self, caption: &str, lexicon: &Lexicon) {
        let tagged = pos_tag(&tokenize(caption), lexicon);
        let mut i = 0;
        while i < tagged.len() {
            match match_at(&tagged, i) {
                Some((end, head_start)) => {
                    *self
                        .counts
                        .entry(NounPhrase::new(&tagged[i..end]).normalized)
                        .or_default() += 1;
                    if head_start > i {
                        *self
                            .counts
                            .entry(NounPhrase::new(&tagged[head_start..end]).normalized)
                            .or_default() += 1;
                    }
                    i = end;
                }
                None => i += 1,
            }
        }
        self.total_docs += 1;
    }

    /// Shard merge by count addition.
    pub fn merge(&mut self, other: &FrequencyTable) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_default() += v;
        }
        self.total_docs += other.total_docs;
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        serde_json::to_writer(
            &mut buf,
            &TableHeader {
                total_docs: self.total_docs,
            },
        )?;
        buf.push(b'\n');
        for (phrase, &count) in &self.counts {
            serde_json::to_writer(
                &mut buf,
                &PhraseCount {
                    phrase: phrase.clone(),
                    count,
                },
            )?;
            buf.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = FrequencyTable::default();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            };
            if idx == 0 {
                table.total_docs = serde_json::from_str::<TableHeader>(&line)
                    .map_err(parse_err)?
                    .total_docs;
                continue;
            }
            let pc: PhraseCount = serde_json::from_str(&line).map_err(parse_err)?;
            if pc.count == 0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!("phrase '{}' has zero count", pc.phrase),
                });
            }
            table.counts.insert(pc.phrase, pc.count);
        }
        Ok(table)
    }
}

pub fn build_frequency_table<I, S>(corpus: I, lexicon: &Lexicon) -> Result<FrequencyTable>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut table = FrequencyTable::default();
    for caption in corpus {
        table.add_caption(caption.as_ref(), lexicon);
    }
    if table.total_docs == 0 {
        return Err(Error::invalid("frequency table needs a non-empty corpus"));
    }
    Ok(table)
}

/// Pick the query for a language description.
///
/// Captions choose the noun phrase with the smallest corpus count; ties go to
/// the phrase with more tokens, then to the lexicographically smaller one.
pub fn construct_query(
    text: &str,
    kind: TextKind,
    freq: &FrequencyTable,
    lexicon: &Lexicon,
) -> Result<Query> {
    let normalized = text.trim().to_lowercase();
    if normalized.is_empty() {
        return Err(Error::invalid("cannot build a query from empty text"));
    }
    if kind == TextKind::Category {
        return Ok(Query {
            text: normalized,
            origin: QueryOrigin::Category,
        });
    }
    let best = noun_phrases(&normalized, lexicon).into_iter().min_by(|a, b| {
        freq.count(&a.normalized)
            .cmp(&freq.count(&b.normalized))
            .then(b.tokens.len().cmp(&a.tokens.len()))
            .then(a.normalized.cmp(&b.normalized))
    });
    Ok(match best {
        Some(np) => Query {
            text: np.normalized,
            origin: QueryOrigin::CaptionNp,
        },
        None => Query {
            text: normalized,
            origin: QueryOrigin::CaptionFallback,
        },
    })
}
