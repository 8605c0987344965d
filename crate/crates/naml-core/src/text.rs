//! Text pipeline: tokenization, vocabulary, category indexing, padding and
//! pretrained-embedding loading.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::RawNews;
use crate::error::DataError;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Reserved category/subcategory id for unseen labels.
pub const UNKNOWN_CATEGORY_ID: usize = 0;

/// Lowercase, split on Unicode whitespace, strip leading/trailing
/// punctuation per token, drop empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_other_punctuation()))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

trait OtherPunct {
    fn is_other_punctuation(&self) -> bool;
}

impl OtherPunct for char {
    fn is_other_punctuation(&self) -> bool {
        // Unicode punctuation outside the ASCII range, e.g. curly quotes.
        !self.is_ascii() && !self.is_alphanumeric() && !self.is_whitespace()
    }
}

/// Token/id bijection with reserved PAD (0) and UNK (1) slots.
/// Ids are assigned by frequency descending, ties broken lexicographically.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    frequencies: Vec<u64>,
    pub min_frequency: u64,
}

impl Vocabulary {
    pub fn build<I, T>(corpus: I, min_frequency: u64) -> Self
    where
        I: IntoIterator<Item = T>,
        T: IntoIterator<Item = String>,
    {
        assert!(min_frequency >= 1, "min_frequency must be >= 1");
        let mut counts: HashMap<String, u64> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_frequency)
            .collect();
        kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut frequencies = vec![0, 0];
        let mut token_to_id = HashMap::new();
        for (tok, c) in kept {
            token_to_id.insert(tok.clone(), id_to_token.len());
            id_to_token.push(tok);
            frequencies.push(c);
        }
        Vocabulary { token_to_id, id_to_token, frequencies, min_frequency }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// One "token<TAB>id<TAB>frequency" line per entry, UTF-8.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{tok}\t{id}\t{}\n", self.frequencies[id]));
        }
        fs::write(path, out).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = fs::File::open(path)
            .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
        let mut id_to_token = Vec::new();
        let mut frequencies = Vec::new();
        let mut token_to_id = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
            let parts: Vec<&str> = line.split('\t').collect();
            let err = |detail: String| DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail,
            };
            if parts.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, got {}", parts.len())));
            }
            let id: usize = parts[1].parse().map_err(|_| err(format!("bad id {:?}", parts[1])))?;
            let freq: u64 = parts[2].parse().map_err(|_| err(format!("bad frequency {:?}", parts[2])))?;
            if id != id_to_token.len() {
                return Err(err(format!("non-contiguous id {id}")));
            }
            if id >= 2 {
                token_to_id.insert(parts[0].to_string(), id);
            }
            id_to_token.push(parts[0].to_string());
            frequencies.push(freq);
        }
        if id_to_token.len() < 2 {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: 0,
                detail: "vocabulary file missing reserved PAD/UNK entries".into(),
            });
        }
        Ok(Vocabulary { token_to_id, id_to_token, frequencies, min_frequency: 1 })
    }

    /// SHA-256 over the serialized form; stored in checkpoints to detect
    /// vocabulary/model mismatches.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            h.update(tok.as_bytes());
            h.update(b"\t");
            h.update(id.to_le_bytes());
            h.update(self.frequencies[id].to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Dense category/subcategory ids with reserved UNKNOWN (0).
/// Names are assigned ids in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryIndex {
    categories: Vec<String>,
    subcategories: Vec<String>,
    cat_to_id: HashMap<String, usize>,
    subcat_to_id: HashMap<String, usize>,
}

impl CategoryIndex {
    pub fn build<'a, I>(news: I) -> Self
    where
        I: IntoIterator<Item = &'a RawNews>,
    {
        let mut cats: Vec<String> = Vec::new();
        let mut subs: Vec<String> = Vec::new();
        for n in news {
            cats.push(n.category.clone());
            subs.push(n.subcategory.clone());
        }
        cats.sort();
        cats.dedup();
        subs.sort();
        subs.dedup();
        let mut index = CategoryIndex {
            categories: vec!["<unknown>".into()],
            subcategories: vec!["<unknown>".into()],
            cat_to_id: HashMap::new(),
            subcat_to_id: HashMap::new(),
        };
        for c in cats {
            index.cat_to_id.insert(c.clone(), index.categories.len());
            index.categories.push(c);
        }
        for s in subs {
            index.subcat_to_id.insert(s.clone(), index.subcategories.len());
            index.subcategories.push(s);
        }
        index
    }

    pub fn category_id(&self, name: &str) -> usize {
        *self.cat_to_id.get(name).unwrap_or(&UNKNOWN_CATEGORY_ID)
    }

    pub fn subcategory_id(&self, name: &str) -> usize {
        *self.subcat_to_id.get(name).unwrap_or(&UNKNOWN_CATEGORY_ID)
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn n_subcategories(&self) -> usize {
        self.subcategories.len()
    }

    pub fn category_name(&self, id: usize) -> Option<&str> {
        self.categories.get(id).map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for (id, c) in self.categories.iter().enumerate() {
            out.push_str(&format!("c\t{c}\t{id}\n"));
        }
        for (id, s) in self.subcategories.iter().enumerate() {
            out.push_str(&format!("s\t{s}\t{id}\n"));
        }
        fs::write(path, out).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = fs::File::open(path)
            .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
        let mut index = CategoryIndex {
            categories: Vec::new(),
            subcategories: Vec::new(),
            cat_to_id: HashMap::new(),
            subcat_to_id: HashMap::new(),
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    detail: "expected 3 tab-separated fields".into(),
                });
            }
            match parts[0] {
                "c" => {
                    if !index.categories.is_empty() {
                        index.cat_to_id.insert(parts[1].to_string(), index.categories.len());
                    }
                    index.categories.push(parts[1].to_string());
                }
                "s" => {
                    if !index.subcategories.is_empty() {
                        index.subcat_to_id.insert(parts[1].to_string(), index.subcategories.len());
                    }
                    index.subcategories.push(parts[1].to_string());
                }
                other => {
                    return Err(DataError::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        detail: format!("unknown record kind {other:?}"),
                    })
                }
            }
        }
        Ok(index)
    }
}

/// A news article in fixed-shape token-ID form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedNews {
    pub news_id: String,
    pub title_ids: Vec<usize>,
    pub title_len: usize,
    pub body_ids: Vec<usize>,
    pub body_len: usize,
    pub category_id: usize,
    pub subcategory_id: usize,
}

/// Tokenize, map through the vocabulary, truncate to the maxima and
/// right-pad with PAD.
pub fn encode_news(
    raw: &RawNews,
    vocab: &Vocabulary,
    cats: &CategoryIndex,
    m_max: usize,
    p_max: usize,
) -> TokenizedNews {
    assert!(m_max >= 1 && p_max >= 1, "M_max and P_max must be >= 1");
    let pad = |tokens: Vec<String>, max: usize| -> (Vec<usize>, usize) {
        let mut ids: Vec<usize> = tokens.iter().take(max).map(|t| vocab.id(t)).collect();
        let len = ids.len();
        ids.resize(max, PAD_ID);
        (ids, len)
    };
    let (title_ids, title_len) = pad(tokenize(&raw.title), m_max);
    let (body_ids, body_len) = pad(tokenize(&raw.body), p_max);
    TokenizedNews {
        news_id: raw.news_id.clone(),
        title_ids,
        title_len,
        body_ids,
        body_len,
        category_id: cats.category_id(&raw.category),
        subcategory_id: cats.subcategory_id(&raw.subcategory),
    }
}

/// Fallback encoding for news ids that appear in impressions but not in the
/// news file: empty text views, UNKNOWN category/subcategory.
pub fn unknown_news(news_id: &str, m_max: usize, p_max: usize) -> TokenizedNews {
    TokenizedNews {
        news_id: news_id.to_string(),
        title_ids: vec![PAD_ID; m_max],
        title_len: 0,
        body_ids: vec![PAD_ID; p_max],
        body_len: 0,
        category_id: UNKNOWN_CATEGORY_ID,
        subcategory_id: UNKNOWN_CATEGORY_ID,
    }
}

/// Row-major `[V x dim]` embedding matrix plus the fraction of vocabulary
/// tokens found in the file.
pub struct LoadedEmbeddings {
    pub matrix: Vec<f64>,
    pub dim: usize,
    pub coverage: f64,
}

/// Load whitespace-separated "token v1 .. vD" lines. Vocabulary tokens not
/// present in the file are initialized from uniform(-0.1, 0.1) with the
/// given seed; the PAD row is forced to zero.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<LoadedEmbeddings, DataError> {
    let file = fs::File::open(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab.len();
    let mut matrix: Vec<f64> = (0..v * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let mut covered = vec![false; v];

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap();
        let values: Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let values = values.map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            detail: format!("non-numeric embedding value: {e}"),
        })?;
        if values.len() != dim {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("expected {dim} values, got {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if id != UNK_ID || token == "<unk>" {
            matrix[id * dim..(id + 1) * dim].copy_from_slice(&values);
            covered[id] = true;
        }
    }
    for x in matrix[..dim].iter_mut() {
        *x = 0.0; // PAD row
    }
    // Coverage counts real tokens (ids >= 2).
    let n_real = v.saturating_sub(2);
    let coverage = if n_real == 0 {
        0.0
    } else {
        covered[2..].iter().filter(|c| **c).count() as f64 / n_real as f64
    };
    Ok(LoadedEmbeddings { matrix, dim, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn raw(title: &str, body: &str, cat: &str, sub: &str) -> RawNews {
        RawNews {
            news_id: "n1".into(),
            title: title.into(),
            body: body.into(),
            category: cat.into(),
            subcategory: sub.into(),
        }
    }

    #[test]
    fn tokenize_basic() {
        assert_eq!(
            tokenize("Rockets End 2018 With A Win"),
            vec!["rockets", "end", "2018", "with", "a", "win"]
        );
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("Xbox One On Sale This Week").len(), 6);
        assert_eq!(tokenize("Hello, world!"), vec!["hello", "world"]);
    }

    #[test]
    fn build_vocab_ordering() {
        let corpus = vec![
            vec!["a".to_string(), "b".to_string()],
            vec!["a".to_string()],
        ];
        let v = Vocabulary::build(corpus.clone(), 1);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("zzz"), UNK_ID);

        let v2 = Vocabulary::build(corpus.clone(), 2);
        assert_eq!(v2.id("a"), 2);
        assert_eq!(v2.id("b"), UNK_ID);
        assert_eq!(v2.len(), 3);

        // determinism
        let v3 = Vocabulary::build(corpus, 1);
        assert_eq!(v.id("a"), v3.id("a"));
        assert_eq!(v.id("b"), v3.id("b"));
        assert_eq!(v.hash(), v3.hash());
    }

    #[test]
    fn vocab_file_round_trip() {
        let corpus = vec![vec!["x".to_string(), "y".to_string(), "x".to_string()]];
        let v = Vocabulary::build(corpus, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        loaded.save(&path).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(first, second);
        assert_eq!(v.hash(), loaded.hash());
        assert_eq!(loaded.id("x"), v.id("x"));
    }

    #[test]
    fn encode_news_truncation_and_padding() {
        let news = vec![
            raw("one two three four five six", "body words here", "sports", "nba"),
        ];
        let vocab = Vocabulary::build(
            news.iter().map(|n| {
                let mut t = tokenize(&n.title);
                t.extend(tokenize(&n.body));
                t
            }),
            1,
        );
        let cats = CategoryIndex::build(&news);

        let enc = encode_news(&news[0], &vocab, &cats, 4, 10);
        assert_eq!(enc.title_ids.len(), 4);
        assert_eq!(enc.title_len, 4);

        let enc2 = encode_news(&raw("one two three", "", "sports", "nba"), &vocab, &cats, 5, 10);
        assert_eq!(enc2.title_len, 3);
        assert_eq!(&enc2.title_ids[3..], &[PAD_ID, PAD_ID]);
        assert_eq!(enc2.body_len, 0);
        assert!(enc2.body_ids.iter().all(|&i| i == PAD_ID));

        // idempotent / deterministic
        let enc3 = encode_news(&news[0], &vocab, &cats, 4, 10);
        assert_eq!(enc, enc3);

        // unknown category
        let enc4 = encode_news(&raw("one", "", "weird", "weirder"), &vocab, &cats, 4, 10);
        assert_eq!(enc4.category_id, UNKNOWN_CATEGORY_ID);
        assert_eq!(enc4.subcategory_id, UNKNOWN_CATEGORY_ID);
    }

    #[test]
    fn category_index_dense_and_deterministic() {
        let news = vec![
            raw("t", "b", "sports", "nba"),
            raw("t", "b", "finance", "stocks"),
            raw("t", "b", "sports", "mlb"),
        ];
        let idx = CategoryIndex::build(&news);
        assert_eq!(idx.n_categories(), 3); // unknown + 2
        assert_eq!(idx.n_subcategories(), 4);
        assert_eq!(idx.category_id("finance"), 1);
        assert_eq!(idx.category_id("sports"), 2);
        let idx2 = CategoryIndex::build(&news);
        assert_eq!(idx, idx2);
    }

    #[test]
    fn embeddings_loading() {
        let corpus = vec![vec!["a".to_string(), "b".to_string()]];
        let vocab = Vocabulary::build(corpus, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "a 1.0 2.0").unwrap();
        drop(f);

        let emb = load_pretrained_embeddings(&path, &vocab, 2, 7).unwrap();
        let a_id = vocab.id("a");
        assert_eq!(&emb.matrix[a_id * 2..a_id * 2 + 2], &[1.0, 2.0]);
        assert_eq!(&emb.matrix[..2], &[0.0, 0.0]); // PAD forced
        assert!((emb.coverage - 0.5).abs() < 1e-12);

        // disjoint file -> zero coverage
        let path2 = dir.path().join("emb2.txt");
        fs::write(&path2, "zzz 1.0 2.0\n").unwrap();
        let emb2 = load_pretrained_embeddings(&path2, &vocab, 2, 7).unwrap();
        assert_eq!(emb2.coverage, 0.0);

        // malformed line
        let path3 = dir.path().join("emb3.txt");
        fs::write(&path3, "a 1.0\n").unwrap();
        assert!(matches!(
            load_pretrained_embeddings(&path3, &vocab, 2, 7),
            Err(DataError::Parse { line: 1, .. })
        ));
        let path4 = dir.path().join("emb4.txt");
        fs::write(&path4, "a 1.0 oops\n").unwrap();
        assert!(load_pretrained_embeddings(&path4, &vocab, 2, 7).is_err());
    }
}
