//! External knowledge sources: WordNet and Wiktionary snapshots.
//!
//! Both knowledge bases are ingested from JSONL snapshot files and are
//! immutable once loaded, so a `KnowledgeStore` can be shared freely across
//! threads. Word-sense ambiguity is resolved the simple way: the first synset
//! listed for a lemma and the first sense of a dictionary entry win.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hard cap on the number of synsets visited along a hypernym path.
pub const MAX_HYPERNYM_HOPS: usize = 32;

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "my",
    "your", "his", "her", "its", "our", "their",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KnowledgeSource {
    #[serde(rename = "wn_hier")]
    WordNetHierarchy,
    #[serde(rename = "wn_def")]
    WordNetDefinition,
    #[serde(rename = "wiki_def")]
    WiktionaryDefinition,
}

impl KnowledgeSource {
    pub const ALL: [KnowledgeSource; 3] = [
        KnowledgeSource::WordNetHierarchy,
        KnowledgeSource::WordNetDefinition,
        KnowledgeSource::WiktionaryDefinition,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            KnowledgeSource::WordNetHierarchy => "wn_hier",
            KnowledgeSource::WordNetDefinition => "wn_def",
            KnowledgeSource::WiktionaryDefinition => "wiki_def",
        }
    }
}

impl fmt::Display for KnowledgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KnowledgeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wn_hier" => Ok(KnowledgeSource::WordNetHierarchy),
            "wn_def" => Ok(KnowledgeSource::WordNetDefinition),
            "wiki_def" => Ok(KnowledgeSource::WiktionaryDefinition),
            other => Err(Error::invalid(format!(
                "unknown knowledge source '{other}' (expected wn_hier, wn_def or wiki_def)"
            ))),
        }
    }
}

/// A retrieved piece of knowledge for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub query: String,
    pub source: KnowledgeSource,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynsetRecord {
    pub id: String,
    pub lemmas: Vec<String>,
    pub definition: String,
    pub hypernym_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub term: String,
    pub senses: Vec<String>,
}

/// Lowercase and collapse internal whitespace.
pub fn normalize_query(query: &str) -> String {
    query
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn head_noun(normalized: &str) -> Option<&str> {
    normalized.rsplit(' ').next().filter(|s| !s.is_empty())
}

fn strip_determiner(normalized: &str) -> Option<&str> {
    let (first, rest) = normalized.split_once(' ')?;
    DETERMINERS.contains(&first).then_some(rest)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_snapshot(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse JSONL into records, reporting the 1-based line of the first bad line.
fn parse_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// In-memory WordNet noun graph.
#[derive(Debug, Clone)]
pub struct WordNetGraph {
    synsets: Vec<SynsetRecord>,
    by_id: HashMap<String, usize>,
    by_lemma: HashMap<String, usize>,
    digest: String,
}

pub fn load_wordnet_snapshot(path: impl AsRef<Path>) -> Result<WordNetGraph> {
    let path = path.as_ref();
    let bytes = read_snapshot(path)?;
    let records: Vec<SynsetRecord> = parse_jsonl(&bytes, path)?;
    for (i, r) in records.iter().enumerate() {
        if r.lemmas.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("synset '{}' has no lemmas", r.id),
            });
        }
    }
    WordNetGraph::build(records, sha256_hex(&bytes))
}

impl WordNetGraph {
    pub fn from_records(records: Vec<SynsetRecord>) -> Result<Self> {
        let mut hasher = Sha256::new();
        for r in &records {
            hasher.update(serde_json::to_vec(r)?);
            hasher.update(b"\n");
        }
        if let Some(r) = records.iter().find(|r| r.lemmas.is_empty()) {
            return Err(Error::Load(format!("synset '{}' has no lemmas", r.id)));
        }
        Self::build(records, hex::encode(hasher.finalize()))
    }

    fn build(mut synsets: Vec<SynsetRecord>, digest: String) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(synsets.len());
        let mut by_lemma = HashMap::new();
        for (idx, s) in synsets.iter_mut().enumerate() {
            if by_id.insert(s.id.clone(), idx).is_some() {
                return Err(Error::Load(format!("duplicate synset id '{}'", s.id)));
            }
            for lemma in s.lemmas.iter_mut() {
                *lemma = lemma.to_lowercase();
                by_lemma.entry(lemma.clone()).or_insert(idx);
            }
        }
        for s in &synsets {
            if let Some(missing) = s.hypernym_ids.iter().find(|h| !by_id.contains_key(*h)) {
                return Err(Error::Load(format!(
                    "synset '{}' references unknown hypernym id '{missing}'",
                    s.id
                )));
            }
        }
        Ok(WordNetGraph {
            synsets,
            by_id,
            by_lemma,
            digest,
        })
    }

    pub fn len(&self) -> usize {
        self.synsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synsets.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn synset(&self, id: &str) -> Option<&SynsetRecord> {
        self.by_id.get(id).map(|&i| &self.synsets[i])
    }

    /// Locate the synset for a query: exact lemma, else the head noun.
    pub fn locate(&self, query: &str) -> Option<&SynsetRecord> {
        let normalized = normalize_query(query);
        let exact = normalized.replace(' ', "_");
        self.by_lemma
            .get(&exact)
            .or_else(|| head_noun(&normalized).and_then(|h| self.by_lemma.get(h)))
            .map(|&i| &self.synsets[i])
    }

    /// First-lemma names along the first-hypernym path up to a root.
    pub fn wn_hierarchy(&self, query: &str) -> Result<Option<KnowledgeItem>> {
        let Some(start) = self.locate(query) else {
            return Ok(None);
        };
        let mut names = Vec::new();
        let mut seen = HashSet::new();
        let mut current = start;
        loop {
            if names.len() == MAX_HYPERNYM_HOPS || !seen.insert(current.id.as_str()) {
                return Err(Error::HypernymCycle {
                    start: start.id.clone(),
                    limit: MAX_HYPERNYM_HOPS,
                });
            }
            names.push(current.lemmas[0].as_str());
            match current.hypernym_ids.first() {
                Some(parent) => current = &self.synsets[self.by_id[parent]],
                None => break,
            }
        }
        Ok(Some(KnowledgeItem {
            query: normalize_query(query),
            source: KnowledgeSource::WordNetHierarchy,
            text: names.join(", "),
        }))
    }

    pub fn wn_definition(&self, query: &str) -> Option<KnowledgeItem> {
        let synset = self.locate(query)?;
        (!synset.definition.is_empty()).then(|| KnowledgeItem {
            query: normalize_query(query),
            source: KnowledgeSource::WordNetDefinition,
            text: synset.definition.clone(),
        })
    }
}

/// Wiktionary-style dictionary keyed by lowercase term.
#[derive(Debug, Clone)]
pub struct Dictionary {
    entries: Vec<DictionaryEntry>,
    by_term: HashMap<String, usize>,
    digest: String,
}

pub fn load_wiktionary_snapshot(path: impl AsRef<Path>) -> Result<Dictionary> {
    let path = path.as_ref();
    let bytes = read_snapshot(path)?;
    let entries: Vec<DictionaryEntry> = parse_jsonl(&bytes, path)?;
    for (i, e) in entries.iter().enumerate() {
        if e.senses.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("entry '{}' has no senses", e.term),
            });
        }
    }
    Dictionary::build(entries, sha256_hex(&bytes))
}

impl Dictionary {
    pub fn from_entries(entries: Vec<DictionaryEntry>) -> Result<Self> {
        let mut hasher = Sha256::new();
        for e in &entries {
            hasher.update(serde_json::to_vec(e)?);
            hasher.update(b"\n");
        }
        if let Some(e) = entries.iter().find(|e| e.senses.is_empty()) {
            return Err(Error::Load(format!("entry '{}' has no senses", e.term)));
        }
        Self::build(entries, hex::encode(hasher.finalize()))
    }

    fn build(mut entries: Vec<DictionaryEntry>, digest: String) -> Result<Self> {
        let mut by_term = HashMap::with_capacity(entries.len());
        for (idx, e) in entries.iter_mut().enumerate() {
            e.term = normalize_query(&e.term);
            if by_term.insert(e.term.clone(), idx).is_some() {
                return Err(Error::Load(format!("duplicate dictionary term '{}'", e.term)));
            }
        }
        Ok(Dictionary {
            entries,
            by_term,
            digest,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn entries(&self) -> &[DictionaryEntry] {
        &self.entries
    }

    fn entry(&self, term: &str) -> Option<&DictionaryEntry> {
        self.by_term.get(term).map(|&i| &self.entries[i])
    }

    /// First sense via exact phrase, then determiner-stripped phrase, then head noun.
    pub fn wiki_definition(&self, query: &str) -> Option<KnowledgeItem> {
        let normalized = normalize_query(query);
        let entry = self
            .entry(&normalized)
            .or_else(|| strip_determiner(&normalized).and_then(|s| self.entry(s)))
            .or_else(|| head_noun(&normalized).and_then(|h| self.entry(h)))?;
        Some(KnowledgeItem {
            query: normalized,
            source: KnowledgeSource::WiktionaryDefinition,
            text: entry.senses[0].clone(),
        })
    }
}

/// The three knowledge sources behind one handle. An absent snapshot behaves
/// like an empty knowledge base.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeStore {
    pub wordnet: Option<WordNetGraph>,
    pub dictionary: Option<Dictionary>,
}

impl KnowledgeStore {
    pub fn new(wordnet: Option<WordNetGraph>, dictionary: Option<Dictionary>) -> Self {
        KnowledgeStore {
            wordnet,
            dictionary,
        }
    }

    pub fn load(wordnet: Option<&Path>, wiktionary: Option<&Path>) -> Result<Self> {
        Ok(KnowledgeStore {
            wordnet: wordnet.map(load_wordnet_snapshot).transpose()?,
            dictionary: wiktionary.map(load_wiktionary_snapshot).transpose()?,
        })
    }

    pub fn retrieve(&self, query: &str, source: &KnowledgeSource) -> Result<Option<KnowledgeItem>> {
        Ok(match source {
            KnowledgeSource::WordNetHierarchy => match &self.wordnet {
                Some(g) => g.wn_hierarchy(query)?,
                None => None,
            },
            KnowledgeSource::WordNetDefinition => {
                self.wordnet.as_ref().and_then(|g| g.wn_definition(query))
            }
            KnowledgeSource::WiktionaryDefinition => {
                self.dictionary.as_ref().and_then(|d| d.wiki_definition(query))
            }
        })
    }

    pub fn provenance(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        if let Some(g) = &self.wordnet {
            out.insert("wordnet".to_string(), g.digest().to_string());
        }
        if let Some(d) = &self.dictionary {
            out.insert("wiktionary".to_string(), d.digest().to_string());
        }
        out
    }
}

/// Fraction of queries for which `source` yields a non-empty item.
pub fn knowledge_coverage<S: AsRef<str>>(
    queries: &[S],
    store: &KnowledgeStore,
    source: &KnowledgeSource,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("knowledge coverage needs at least one query"));
    }
    let mut hits = 0usize;
    for q in queries {
        if store.retrieve(q.as_ref(), source)?.is_some() {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheLookup {
    NotQueried,
    Miss,
    Hit(KnowledgeItem),
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    snapshots: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    query: String,
    source: KnowledgeSource,
    text: Option<String>,
}

/// Memoized retrievals, persisted as JSONL with a digest header line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeCache {
    pub provenance: BTreeMap<String, String>,
    entries: BTreeMap<(String, KnowledgeSource), Option<String>>,
}

impl KnowledgeCache {
    pub fn for_store(store: &KnowledgeStore) -> Self {
        KnowledgeCache {
            provenance: store.provenance(),
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, query: &str, source: &KnowledgeSource) -> CacheLookup {
        let key = (normalize_query(query), source.clone());
        match self.entries.get(&key) {
            None => CacheLookup::NotQueried,
            Some(None) => CacheLookup::Miss,
            Some(Some(text)) => CacheLookup::Hit(KnowledgeItem {
                query: key.0,
                source: key.1,
                text: text.clone(),
            }),
        }
    }

    pub fn retrieve(
        &mut self,
        store: &KnowledgeStore,
        query: &str,
        source: &KnowledgeSource,
    ) -> Result<Option<KnowledgeItem>> {
        match self.lookup(query, source) {
            CacheLookup::Hit(item) => return Ok(Some(item)),
            CacheLookup::Miss => return Ok(None),
            CacheLookup::NotQueried => {}
        }
        let item = store.retrieve(query, source)?;
        self.entries.insert(
            (normalize_query(query), source.clone()),
            item.as_ref().map(|i| i.text.clone()),
        );
        Ok(item)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CacheHeader {
            snapshots: self.provenance.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(|e| Error::io("<cache>", e))?;
        for ((query, source), text) in &self.entries {
            let line = CacheLine {
                query: query.clone(),
                source: source.clone(),
                text: text.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io("<cache>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: Read>(r: R, origin: &Path) -> Result<Self> {
        let mut lines = BufReader::new(r).lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: PathBuf::from(origin),
            line,
            message,
        };
        let header: CacheHeader = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(origin, e))?;
                serde_json::from_str(&line).map_err(|e| parse_err(1, e.to_string()))?
            }
            None => return Err(parse_err(1, "missing cache header".into())),
        };
        let mut entries = BTreeMap::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CacheLine =
                serde_json::from_str(&line).map_err(|e| parse_err(idx + 1, e.to_string()))?;
            entries.insert((normalize_query(&l.query), l.source), l.text);
        }
        Ok(KnowledgeCache {
            provenance: header.snapshots,
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(file, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synset(id: &str, lemma: &str, def: &str, parent: Option<&str>) -> SynsetRecord {
        SynsetRecord {
            id: id.into(),
            lemmas: vec![lemma.into()],
            definition: def.into(),
            hypernym_ids: parent.into_iter().map(String::from).collect(),
        }
    }

    fn boxer_graph() -> WordNetGraph {
        WordNetGraph::from_records(vec![
            synset("n1", "entity", "that which exists", None),
            synset("n2", "physical_entity", "an entity that has physical existence", Some("n1")),
            synset("n3", "causal_agent", "any entity that produces an effect", Some("n2")),
            synset("n4", "person", "a human being", Some("n3")),
            synset("n5", "combatant", "someone who fights", Some("n4")),
            synset("n6", "boxer", "someone who fights with his fists for sport", Some("n5")),
        ])
        .unwrap()
    }

    #[test]
    fn hierarchy_walks_first_hypernyms() {
        let g = boxer_graph();
        let item = g.wn_hierarchy("Boxer").unwrap().unwrap();
        assert_eq!(
            item.text,
            "boxer, combatant, person, causal_agent, physical_entity, entity"
        );
        assert_eq!(g.wn_hierarchy("entity").unwrap().unwrap().text, "entity");
        assert!(g.wn_hierarchy("zzzunknown").unwrap().is_none());
    }

    #[test]
    fn multiword_lemma_and_head_fallback() {
        let g = boxer_graph();
        assert_eq!(g.locate("causal agent").unwrap().id, "n3");
        assert_eq!(g.locate("professional boxer").unwrap().id, "n6");
    }

    #[test]
    fn cycle_is_an_error() {
        let g = WordNetGraph::from_records(vec![
            synset("a", "alpha", "first", Some("b")),
            synset("b", "beta", "second", Some("a")),
        ])
        .unwrap();
        assert!(matches!(
            g.wn_hierarchy("alpha"),
            Err(Error::HypernymCycle { .. })
        ));
        // definitions never traverse, so they still resolve
        assert_eq!(g.wn_definition("beta").unwrap().text, "second");
    }

    #[test]
    fn long_acyclic_chain_is_capped() {
        let records = (0..40)
            .map(|i| {
                let parent = (i > 0).then(|| format!("s{}", i - 1));
                synset(&format!("s{i}"), &format!("w{i}"), "d", parent.as_deref())
            })
            .collect();
        let g = WordNetGraph::from_records(records).unwrap();
        assert!(g.wn_hierarchy("w31").unwrap().is_some());
        assert!(g.wn_hierarchy("w32").is_err());
    }

    #[test]
    fn dangling_hypernym_rejected() {
        let err = WordNetGraph::from_records(vec![synset("a", "alpha", "x", Some("nope"))])
            .unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn first_listed_synset_wins() {
        let g = WordNetGraph::from_records(vec![
            synset("a", "bank", "sloping land", None),
            synset("b", "bank", "financial institution", None),
        ])
        .unwrap();
        assert_eq!(g.wn_definition("bank").unwrap().text, "sloping land");
    }

    #[test]
    fn wiki_lookup_chain() {
        let d = Dictionary::from_entries(vec![
            DictionaryEntry {
                term: "crowd".into(),
                senses: vec!["a group of people".into(), "second sense".into()],
            },
            DictionaryEntry {
                term: "boxer".into(),
                senses: vec!["a participant (fighter) in a boxing match".into()],
            },
        ])
        .unwrap();
        assert_eq!(d.wiki_definition("the crowd").unwrap().text, "a group of people");
        assert_eq!(
            d.wiki_definition("professional boxer").unwrap().text,
            "a participant (fighter) in a boxing match"
        );
        assert!(d.wiki_definition("zzzunknown").is_none());
    }

    #[test]
    fn coverage_counts_hits() {
        let store = KnowledgeStore::new(Some(boxer_graph()), None);
        let cov = knowledge_coverage(
            &["boxer", "zzzunknown"],
            &store,
            &KnowledgeSource::WordNetDefinition,
        )
        .unwrap();
        assert_eq!(cov, 0.5);
        let empty: [&str; 0] = [];
        assert!(knowledge_coverage(&empty, &store, &KnowledgeSource::WordNetDefinition).is_err());
        // no dictionary loaded behaves as an empty knowledge base
        let none = knowledge_coverage(&["boxer"], &store, &KnowledgeSource::WiktionaryDefinition);
        assert_eq!(none.unwrap(), 0.0);
    }

    #[test]
    fn cache_distinguishes_miss_from_unqueried() {
        let store = KnowledgeStore::new(Some(boxer_graph()), None);
        let mut cache = KnowledgeCache::for_store(&store);
        let src = KnowledgeSource::WordNetDefinition;
        assert_eq!(cache.lookup("zzz", &src), CacheLookup::NotQueried);
        assert!(cache.retrieve(&store, "zzz", &src).unwrap().is_none());
        assert_eq!(cache.lookup("zzz", &src), CacheLookup::Miss);

        cache.retrieve(&store, "boxer", &src).unwrap();
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        let back = KnowledgeCache::read_from(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, cache);
    }

    #[test]
    fn source_names_round_trip() {
        for s in KnowledgeSource::ALL {
            assert_eq!(s.as_str().parse::<KnowledgeSource>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
    }
}
