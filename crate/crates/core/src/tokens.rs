//! Vocabulary, learnable token rows and mean-pooled prompt embeddings.
//!
//! A prompt is a word sequence optionally followed by the learned `<sem>`
//! and `<geo>` tokens; its embedding is the mean of the corresponding rows.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const NULL_TOKEN: &str = "<null>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEM_TOKEN: &str = "<sem>";
pub const GEO_TOKEN: &str = "<geo>";
pub const DEFAULT_EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Lowercased words of `text`, split on anything that is not alphanumeric.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocabulary {
    /// Reserved tokens take ids 0..4; corpus words follow in sorted order.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for line in corpus {
            set.extend(words(line));
        }
        let reserved = [NULL_TOKEN, UNK_TOKEN, SEM_TOKEN, GEO_TOKEN];
        Self::from_words(reserved.iter().map(|s| s.to_string()).chain(set).collect()).expect("reserved tokens present")
    }

    fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), TokenId(i)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary word `{w}`")));
            }
        }
        for r in [NULL_TOKEN, UNK_TOKEN, SEM_TOKEN, GEO_TOKEN] {
            if !index.contains_key(r) {
                return Err(Error::Checkpoint(format!("vocabulary lacks `{r}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id.0]
    }

    fn reserved(&self, word: &str) -> TokenId {
        self.index[word]
    }

    pub fn null(&self) -> TokenId {
        self.reserved(NULL_TOKEN)
    }

    pub fn unk(&self) -> TokenId {
        self.reserved(UNK_TOKEN)
    }

    pub fn sem(&self) -> TokenId {
        self.reserved(SEM_TOKEN)
    }

    pub fn geo(&self) -> TokenId {
        self.reserved(GEO_TOKEN)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        words(text).map(|w| self.id(&w).unwrap_or_else(|| self.unk())).collect()
    }
}

/// Text plus flags selecting the learned tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub text: String,
    pub use_sem: bool,
    pub use_geo: bool,
}

impl PromptSpec {
    pub fn new(text: impl Into<String>, use_sem: bool, use_geo: bool) -> Self {
        Self {
            text: text.into(),
            use_sem,
            use_geo,
        }
    }

    pub fn sequence(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut seq = vocab.tokenize(&self.text);
        if self.use_sem {
            seq.push(vocab.sem());
        }
        if self.use_geo {
            seq.push(vocab.geo());
        }
        seq
    }
}

/// Replaces the prompt text, keeping the token flags.
pub fn swap_prompt_subject(spec: &PromptSpec, new_text: &str) -> PromptSpec {
    PromptSpec {
        text: new_text.to_string(),
        ..spec.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    vocab: Vocabulary,
    dim: usize,
    table: Vec<f64>,
    trainable: Vec<bool>,
}

impl TokenSet {
    /// Word rows are standard normal (a frozen stand-in for a text encoder);
    /// `<sem>`, `<geo>` and `<null>` start at zero.
    pub fn new<R: Rng + ?Sized>(vocab: Vocabulary, dim: usize, rng: &mut R) -> Self {
        let mut table: Vec<f64> = (0..vocab.len() * dim).map(|_| rng.sample(StandardNormal)).collect();
        for id in [vocab.null(), vocab.sem(), vocab.geo()] {
            table[id.0 * dim..(id.0 + 1) * dim].fill(0.0);
        }
        let trainable = vec![false; vocab.len()];
        Self {
            vocab,
            dim,
            table,
            trainable,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        &self.table[id.0 * self.dim..(id.0 + 1) * self.dim]
    }

    pub fn set_row(&mut self, id: TokenId, values: &[f64]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::shape(self.dim, values.len()));
        }
        self.table[id.0 * self.dim..(id.0 + 1) * self.dim].copy_from_slice(values);
        Ok(())
    }

    pub fn is_trainable(&self, id: TokenId) -> bool {
        self.trainable[id.0]
    }

    /// Makes exactly `ids` trainable.
    pub fn set_trainable_only(&mut self, ids: &[TokenId]) {
        self.trainable.fill(false);
        for id in ids {
            self.trainable[id.0] = true;
        }
    }

    /// Applies `update(row, grad)` to a trainable row; frozen rows are
    /// left untouched and reported as an error.
    pub fn update_row(&mut self, id: TokenId, update: impl FnOnce(&mut [f64])) -> Result<()> {
        if !self.trainable[id.0] {
            return Err(Error::InvalidArgument(format!(
                "token `{}` is frozen",
                self.vocab.word(id)
            )));
        }
        update(&mut self.table[id.0 * self.dim..(id.0 + 1) * self.dim]);
        if !self.row(id).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("token row `{}`", self.vocab.word(id))));
        }
        Ok(())
    }

    /// Mean of the prompt's rows; the `<null>` row for an empty sequence.
    pub fn embed_prompt(&self, spec: &PromptSpec) -> Vec<f64> {
        let seq = spec.sequence(&self.vocab);
        if seq.is_empty() {
            return self.row(self.vocab.null()).to_vec();
        }
        let mut out = vec![0.0; self.dim];
        for id in &seq {
            for (o, v) in out.iter_mut().zip(self.row(*id)) {
                *o += v;
            }
        }
        let n = seq.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Gradient with respect to row `id` given the gradient with respect to
    /// the pooled embedding: `count(id)/L · grad`.
    pub fn row_gradient(&self, spec: &PromptSpec, id: TokenId, pooled_grad: &[f64]) -> Vec<f64> {
        let seq = spec.sequence(&self.vocab);
        let scale = if seq.is_empty() {
            if id == self.vocab.null() {
                1.0
            } else {
                0.0
            }
        } else {
            seq.iter().filter(|&&s| s == id).count() as f64 / seq.len() as f64
        };
        pooled_grad.iter().map(|g| g * scale).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("tokens");
        ck.set_meta("dim", self.dim.to_string());
        ck.set_meta("vocab", self.vocab.words.join(" "));
        let flags: Vec<&str> = self.trainable.iter().map(|&t| if t { "1" } else { "0" }).collect();
        ck.set_meta("trainable", flags.join(" "));
        ck.push_tensor("embeddings", vec![self.vocab.len(), self.dim], self.table.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("tokens")?;
        let dim: usize = ck.meta_parse("dim")?;
        let vocab = Vocabulary::from_words(ck.meta("vocab")?.split_whitespace().map(String::from).collect())?;
        let trainable: Vec<bool> = ck.meta("trainable")?.split_whitespace().map(|f| f == "1").collect();
        let table = ck.tensor("embeddings")?.to_vec();
        if trainable.len() != vocab.len() || table.len() != vocab.len() * dim {
            return Err(Error::Checkpoint("token table does not match its vocabulary".into()));
        }
        Ok(Self {
            vocab,
            dim,
            table,
            trainable,
        })
    }
}
