use crate::error::{Error, Result};
use crate::numerics::Rng;

/// One training sequence. `mask[i]` marks `tokens[i]` as a scored target;
/// without a mask every next-token prediction is scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub mask: Option<Vec<bool>>,
}

/// A deterministic, random-access stream of training sequences: example
/// `index` depends only on `(seed, index)`, so batches are reproducible
/// regardless of how work is split across threads.
pub trait ExampleSource: Sync {
    fn example(&self, seed: u64, index: u64) -> Result<Example>;
}

/// Concatenates documents with `delimiter` between consecutive documents
/// and cuts the stream into `ctx_len` chunks, dropping the final partial
/// chunk.
pub fn build_batches(corpus: &[Vec<u32>], ctx_len: usize, delimiter: u32) -> Result<Vec<Vec<u32>>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if ctx_len < 2 {
        return Err(Error::invalid(format!("ctx_len {ctx_len} must be at least 2")));
    }
    let mut stream = Vec::with_capacity(corpus.iter().map(|d| d.len() + 1).sum());
    for (i, doc) in corpus.iter().enumerate() {
        if i > 0 {
            stream.push(delimiter);
        }
        stream.extend_from_slice(doc);
    }
    Ok(stream.chunks_exact(ctx_len).map(<[u32]>::to_vec).collect())
}

/// Fixed chunks sampled uniformly with replacement.
#[derive(Clone, Debug)]
pub struct CorpusSource {
    chunks: Vec<Vec<u32>>,
}

impl CorpusSource {
    pub fn new(chunks: Vec<Vec<u32>>) -> Result<Self> {
        if chunks.is_empty() {
            return Err(Error::invalid("corpus yields no full-length chunk"));
        }
        Ok(Self { chunks })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

impl ExampleSource for CorpusSource {
    fn example(&self, seed: u64, index: u64) -> Result<Example> {
        let i = Rng::new(seed).indexed("corpus", &[index]).below(self.chunks.len());
        Ok(Example {
            tokens: self.chunks[i].clone(),
            mask: None,
        })
    }
}

/// Parses a corpus file: one document per non-empty line, token ids
/// separated by whitespace.
pub fn parse_corpus(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| Error::invalid(format!("corpus line {}: `{t}` is not a token id", i + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn load_corpus(path: &std::path::Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

/// Documents drawn from a random sparse bigram chain over ids
/// `1..vocab`: each id has `branching` possible successors. Id 0 is left
/// for the delimiter.
pub fn synthetic_corpus(n_docs: usize, doc_len: usize, vocab: usize, branching: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if vocab < 3 || branching == 0 || n_docs == 0 || doc_len == 0 {
        return Err(Error::invalid("synthetic corpus needs vocab >= 3 and positive sizes"));
    }
    let root = Rng::new(seed);
    let mut rng = root.stream("corpus.table");
    let table: Vec<Vec<u32>> = (0..vocab)
        .map(|_| (0..branching).map(|_| 1 + rng.below(vocab - 1) as u32).collect())
        .collect();
    Ok((0..n_docs as u64)
        .map(|d| {
            let mut rng = root.indexed("corpus.doc", &[d]);
            let mut tok = 1 + rng.below(vocab - 1) as u32;
            let mut doc = Vec::with_capacity(doc_len);
            for _ in 0..doc_len {
                doc.push(tok);
                let next = &table[tok as usize];
                tok = next[rng.below(next.len())];
            }
            doc
        })
        .collect())
}
