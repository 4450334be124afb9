//! Item catalog, tokenizer and the prefix trie used for constrained decoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;
pub type ItemId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const PAD: TokenId = 3;
const SPECIALS: [&str; 4] = ["<BOS>", "<EOS>", "<SEP>", "<PAD>"];

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("catalog has no titles")]
    Empty,
    #[error("title {index} is empty")]
    EmptyTitle { index: usize },
    #[error("titles {first} and {second} are duplicates")]
    DuplicateTitle { first: usize, second: usize },
    #[error("title {index} contains reserved token {token}")]
    ReservedToken { index: usize, token: String },
    #[error("prefix {prefix:?} is not a path in the trie")]
    PrefixNotInTrie { prefix: Vec<TokenId> },
    #[error("token sequence {tokens:?} is not a catalog item")]
    NotAnItem { tokens: Vec<TokenId> },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("catalog file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenization {
    #[default]
    Character,
    WhitespaceWord,
}

impl Tokenization {
    fn split(self, text: &str) -> Vec<String> {
        match self {
            Tokenization::Character => text.chars().map(String::from).collect(),
            Tokenization::WhitespaceWord => text.split_whitespace().map(String::from).collect(),
        }
    }

    fn join(self, tokens: &[&str]) -> String {
        match self {
            Tokenization::Character => tokens.concat(),
            Tokenization::WhitespaceWord => tokens.join(" "),
        }
    }

    fn normalize(self, text: &str) -> String {
        match self {
            Tokenization::Character => text.to_string(),
            Tokenization::WhitespaceWord => text.split_whitespace().collect::<Vec<_>>().join(" "),
        }
    }
}

/// Bijective token <-> id map. Ids 0..4 are the specials; content tokens
/// follow in lexicographic order of their surface form.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_content(content: BTreeSet<String>) -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(content)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Content token ids (everything but the specials).
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> {
        (SPECIALS.len() as TokenId)..(self.tokens.len() as TokenId)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub title: String,
    /// Content tokens followed by exactly one EOS.
    pub tokens: Vec<TokenId>,
}

impl Item {
    pub fn content(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, Default, PartialEq)]
struct TrieNode {
    children: BTreeMap<TokenId, NodeId>,
    item: Option<ItemId>,
}

/// Prefix trie over item token sequences. EOS is an ordinary edge into the
/// terminal node that carries the item id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    terminals: usize,
}

pub const ROOT: NodeId = 0;

impl PrefixTrie {
    fn build(items: &[Item]) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for item in items {
            let mut cur = ROOT;
            for &tok in &item.tokens {
                let next = match nodes[cur].children.get(&tok) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(tok, n);
                        n
                    }
                };
                cur = next;
            }
            nodes[cur].item = Some(item.id);
        }
        Self {
            nodes,
            terminals: items.len(),
        }
    }

    pub fn num_terminals(&self) -> usize {
        self.terminals
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn child(&self, node: NodeId, token: TokenId) -> Option<NodeId> {
        self.nodes[node].children.get(&token).copied()
    }

    /// Child token ids at `node`, ascending.
    pub fn children(&self, node: NodeId) -> impl Iterator<Item = (TokenId, NodeId)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &n)| (t, n))
    }

    pub fn terminal_item(&self, node: NodeId) -> Option<ItemId> {
        self.nodes[node].item
    }

    pub fn node_at(&self, prefix: &[TokenId]) -> Result<NodeId, CatalogError> {
        let mut cur = ROOT;
        for &t in prefix {
            cur = self.child(cur, t).ok_or_else(|| CatalogError::PrefixNotInTrie {
                prefix: prefix.to_vec(),
            })?;
        }
        Ok(cur)
    }

    /// Exactly the child token ids at the prefix's node, ascending.
    pub fn valid_next_tokens(&self, prefix: &[TokenId]) -> Result<Vec<TokenId>, CatalogError> {
        let node = self.node_at(prefix)?;
        Ok(self.nodes[node].children.keys().copied().collect())
    }

    pub fn item_of(&self, tokens: &[TokenId]) -> Result<ItemId, CatalogError> {
        let not_item = || CatalogError::NotAnItem {
            tokens: tokens.to_vec(),
        };
        let node = self.node_at(tokens).map_err(|_| not_item())?;
        self.nodes[node].item.ok_or_else(not_item)
    }

    /// Every root-to-terminal path with its item, in token order.
    pub fn paths(&self) -> Vec<(Vec<TokenId>, ItemId)> {
        let mut out = Vec::with_capacity(self.terminals);
        let mut stack = vec![(ROOT, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(item) = self.nodes[node].item {
                out.push((path.clone(), item));
            }
            for (&t, &c) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}

/// Vocabulary, items and trie built together from a list of titles.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub tokenization: Tokenization,
    pub vocab: Vocabulary,
    pub items: Vec<Item>,
    pub trie: PrefixTrie,
}

impl Catalog {
    pub fn build<S: AsRef<str>>(titles: &[S], tokenization: Tokenization) -> Result<Self, CatalogError> {
        if titles.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut seen: HashMap<Vec<String>, usize> = HashMap::new();
        let mut split = Vec::with_capacity(titles.len());
        let mut content = BTreeSet::new();
        for (index, title) in titles.iter().enumerate() {
            let toks = tokenization.split(title.as_ref());
            if toks.is_empty() {
                return Err(CatalogError::EmptyTitle { index });
            }
            if let Some(tok) = toks.iter().find(|t| SPECIALS.contains(&t.as_str())) {
                return Err(CatalogError::ReservedToken {
                    index,
                    token: tok.clone(),
                });
            }
            if let Some(&first) = seen.get(&toks) {
                return Err(CatalogError::DuplicateTitle { first, second: index });
            }
            seen.insert(toks.clone(), index);
            content.extend(toks.iter().cloned());
            split.push(toks);
        }
        let vocab = Vocabulary::from_content(content);
        let items: Vec<Item> = titles
            .iter()
            .zip(&split)
            .enumerate()
            .map(|(id, (title, toks))| {
                let mut tokens: Vec<TokenId> = toks
                    .iter()
                    .map(|t| vocab.id(t).expect("token was inserted"))
                    .collect();
                tokens.push(EOS);
                Item {
                    id,
                    title: tokenization.normalize(title.as_ref()),
                    tokens,
                }
            })
            .collect();
        let trie = PrefixTrie::build(&items);
        Ok(Self {
            tokenization,
            vocab,
            items,
            trie,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: ItemId) -> &Item {
        &self.items[id]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, CatalogError> {
        self.tokenization
            .split(text)
            .iter()
            .map(|t| self.vocab.id(t).ok_or_else(|| CatalogError::UnknownToken(t.clone())))
            .collect()
    }

    /// Joins content tokens back to text; specials are skipped.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        let parts: Vec<&str> = tokens
            .iter()
            .filter(|&&t| !Vocabulary::is_special(t))
            .filter_map(|&t| self.vocab.token(t))
            .collect();
        self.tokenization.join(&parts)
    }

    pub fn item_of(&self, tokens: &[TokenId]) -> Result<ItemId, CatalogError> {
        self.trie.item_of(tokens)
    }

    pub fn valid_next_tokens(&self, prefix: &[TokenId]) -> Result<Vec<TokenId>, CatalogError> {
        self.trie.valid_next_tokens(prefix)
    }

    pub fn max_item_len(&self) -> usize {
        self.items.iter().map(|i| i.tokens.len()).max().unwrap_or(0)
    }

    /// Identifies the vocabulary and item token sequences.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.tokenization).as_bytes());
        for t in &self.vocab.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for item in &self.items {
            for &t in &item.tokens {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Reads a CSV with header `item_id,title`. Ids must be dense `0..n`
    /// in any row order.
    pub fn read_csv(path: &Path, tokenization: Tokenization) -> Result<Self, CatalogError> {
        let file = |e: &dyn std::fmt::Display| CatalogError::File(format!("{}: {e}", path.display()));
        let mut rdr = csv::Reader::from_path(path).map_err(|e| file(&e))?;
        let headers = rdr.headers().map_err(|e| file(&e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["item_id", "title"] {
            return Err(file(&"expected header item_id,title"));
        }
        let mut rows: Vec<(usize, String)> = Vec::new();
        for rec in rdr.deserialize() {
            let row: (usize, String) = rec.map_err(|e| file(&e))?;
            rows.push(row);
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(file(&"item ids must be dense 0..n"));
        }
        let titles: Vec<String> = rows.into_iter().map(|r| r.1).collect();
        Self::build(&titles, tokenization)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CatalogError> {
        let file = |e: &dyn std::fmt::Display| CatalogError::File(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(|e| file(&e))?;
        w.write_record(["item_id", "title"]).map_err(|e| file(&e))?;
        for item in &self.items {
            w.write_record([item.id.to_string(), item.title.clone()])
                .map_err(|e| file(&e))?;
        }
        w.flush().map_err(|e| file(&e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Catalog {
        Catalog::build(&["ab", "ac", "b"], Tokenization::Character).unwrap()
    }

    fn ids(c: &Catalog, s: &str) -> Vec<TokenId> {
        c.tokenize(s).unwrap()
    }

    #[test]
    fn small_catalog_trie() {
        let c = abc();
        assert_eq!(c.trie.num_terminals(), 3);
        let root: Vec<TokenId> = c.valid_next_tokens(&[]).unwrap();
        assert_eq!(root, ids(&c, "ab"));
        let mut bc = ids(&c, "bc");
        bc.sort();
        assert_eq!(c.valid_next_tokens(&ids(&c, "a")).unwrap(), bc);
        assert_eq!(c.valid_next_tokens(&ids(&c, "ab")).unwrap(), vec![EOS]);
    }

    #[test]
    fn single_title() {
        let c = Catalog::build(&["x"], Tokenization::Character).unwrap();
        let x = ids(&c, "x");
        assert_eq!(c.valid_next_tokens(&[]).unwrap(), x);
        assert_eq!(c.valid_next_tokens(&x).unwrap(), vec![EOS]);
    }

    #[test]
    fn item_lookup() {
        let c = abc();
        let mut ab = ids(&c, "ab");
        ab.push(EOS);
        assert_eq!(c.item_of(&ab).unwrap(), 0);
        let mut b = ids(&c, "b");
        b.push(EOS);
        assert_eq!(c.item_of(&b).unwrap(), 2);
        assert!(c.item_of(&ids(&c, "ab")).is_err());
        let mut bb = ids(&c, "bb");
        bb.push(EOS);
        assert!(matches!(c.item_of(&bb), Err(CatalogError::NotAnItem { .. })));
        assert!(matches!(
            c.valid_next_tokens(&ids(&c, "ba")),
            Err(CatalogError::PrefixNotInTrie { .. })
        ));
    }

    #[test]
    fn rejects_bad_titles() {
        assert_eq!(
            Catalog::build(&["a", "b", "a"], Tokenization::Character).unwrap_err(),
            CatalogError::DuplicateTitle { first: 0, second: 2 }
        );
        assert_eq!(
            Catalog::build(&["a", ""], Tokenization::Character).unwrap_err(),
            CatalogError::EmptyTitle { index: 1 }
        );
        assert_eq!(
            Catalog::build::<&str>(&[], Tokenization::Character).unwrap_err(),
            CatalogError::Empty
        );
        assert!(Catalog::build(&["go <EOS> now"], Tokenization::WhitespaceWord).is_err());
    }

    #[test]
    fn word_tokenization_round_trips() {
        let c = Catalog::build(&["Bocchi the Rock!", "The  Wind Rises"], Tokenization::WhitespaceWord).unwrap();
        for item in &c.items {
            assert_eq!(c.detokenize(&item.tokens), item.title);
        }
        assert_eq!(c.items[1].title, "The Wind Rises");
    }

    #[test]
    fn specials_are_fixed() {
        let c = abc();
        assert_eq!(c.vocab.id("<BOS>"), Some(BOS));
        assert_eq!(c.vocab.id("<EOS>"), Some(EOS));
        assert_eq!(c.vocab.id("<SEP>"), Some(SEP));
        assert_eq!(c.vocab.id("<PAD>"), Some(PAD));
        assert!(c.vocab.content_ids().all(|t| !Vocabulary::is_special(t)));
    }

    #[test]
    fn csv_round_trip_with_commas() {
        let c = Catalog::build(&["a,b", "c \"d\"", "e"], Tokenization::Character).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("catalog.csv");
        c.write_csv(&p).unwrap();
        let back = Catalog::read_csv(&p, Tokenization::Character).unwrap();
        assert_eq!(back, c);
    }
}
