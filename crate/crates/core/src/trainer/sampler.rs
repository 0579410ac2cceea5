use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::toylang::{Split, ToyCorpus};
use crate::vocab::LangId;

/// A training example addressed by language and index into its train split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExampleRef {
    pub lang: LangId,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Batch {
    /// Any mix of languages.
    Mixed(Vec<ExampleRef>),
    /// Two equal-size single-language groups with `lang_i != lang_j`.
    Paired {
        lang_i: LangId,
        lang_j: LangId,
        group_i: Vec<ExampleRef>,
        group_j: Vec<ExampleRef>,
    },
}

impl Batch {
    /// Every example, `group_i` before `group_j` for paired batches.
    pub fn examples(&self) -> Vec<ExampleRef> {
        match self {
            Batch::Mixed(v) => v.clone(),
            Batch::Paired { group_i, group_j, .. } => group_i.iter().chain(group_j).copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Batch::Mixed(v) => v.len(),
            Batch::Paired { group_i, group_j, .. } => group_i.len() + group_j.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn all_refs(corpus: &ToyCorpus, lang: LangId) -> Vec<ExampleRef> {
    (0..corpus.examples(lang, Split::Train).len())
        .map(|index| ExampleRef { lang, index })
        .collect()
}

/// One epoch of uniformly shuffled mixed-language batches; the last batch
/// may be short.
pub fn mixed_epoch(corpus: &ToyCorpus, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut all: Vec<ExampleRef> = corpus.vocab.langs().flat_map(|l| all_refs(corpus, l)).collect();
    all.shuffle(rng);
    all.chunks(batch_size.max(1))
        .map(|c| Batch::Mixed(c.to_vec()))
        .collect()
}

/// Two-language batches for the contrastive objective.
///
/// Each batch draws an unordered language pair uniformly and takes
/// `batch_size / 2` examples from each language's shuffled queue. An
/// exhausted queue is reshuffled and refilled; the epoch ends once every
/// language has been exhausted, so every example is seen at least once.
pub struct PairedSampler {
    queues: Vec<Vec<ExampleRef>>,
    exhausted: Vec<bool>,
    half: usize,
}

impl PairedSampler {
    pub fn new(corpus: &ToyCorpus, batch_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let queues = corpus
            .vocab
            .langs()
            .map(|l| {
                let mut q = all_refs(corpus, l);
                q.shuffle(rng);
                q
            })
            .collect::<Vec<_>>();
        Self {
            exhausted: vec![false; queues.len()],
            queues,
            half: (batch_size / 2).max(1),
        }
    }

    pub fn n_langs(&self) -> usize {
        self.queues.len()
    }

    /// Uniform unordered pair `(i, j)` with `i < j`.
    pub fn draw_pair(n_langs: usize, rng: &mut ChaCha8Rng) -> (LangId, LangId) {
        let n_pairs = n_langs * (n_langs - 1) / 2;
        let mut k = rng.gen_range(0..n_pairs);
        for i in 0..n_langs {
            let row = n_langs - 1 - i;
            if k < row {
                return (LangId(i as u16), LangId((i + 1 + k) as u16));
            }
            k -= row;
        }
        unreachable!("pair index within range")
    }

    fn take(&mut self, lang: LangId, corpus: &ToyCorpus, rng: &mut ChaCha8Rng) -> Vec<ExampleRef> {
        let l = lang.index();
        let mut out = Vec::with_capacity(self.half);
        while out.len() < self.half {
            if self.queues[l].is_empty() {
                self.exhausted[l] = true;
                let mut q = all_refs(corpus, lang);
                if q.is_empty() {
                    break;
                }
                q.shuffle(rng);
                self.queues[l] = q;
            }
            out.push(self.queues[l].pop().expect("refilled"));
        }
        if self.queues[l].is_empty() {
            self.exhausted[l] = true;
        }
        out
    }

    pub fn epoch_done(&self) -> bool {
        self.exhausted.iter().all(|e| *e)
    }

    pub fn next_batch(&mut self, corpus: &ToyCorpus, rng: &mut ChaCha8Rng) -> Batch {
        let (lang_i, lang_j) = Self::draw_pair(self.n_langs(), rng);
        let mut group_i = self.take(lang_i, corpus, rng);
        let mut group_j = self.take(lang_j, corpus, rng);
        let n = group_i.len().min(group_j.len());
        group_i.truncate(n);
        group_j.truncate(n);
        Batch::Paired {
            lang_i,
            lang_j,
            group_i,
            group_j,
        }
    }

    /// Batches until every language's queue has been used up once.
    pub fn epoch(corpus: &ToyCorpus, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
        let mut s = Self::new(corpus, batch_size, rng);
        let mut out = Vec::new();
        while !s.epoch_done() {
            out.push(s.next_batch(corpus, rng));
        }
        out
    }
}
