//! Token, language and concept identifiers and the shared vocabulary layout.
//!
//! Ids `0..4` are the specials; language `l`'s token for concept `c` is
//! `4 + l * n_concepts + c`. Surface forms carry a two-letter language
//! prefix (`aa_k017`), so the language of any token is known in O(1).

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LangId(pub u16);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl LangId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const PAD: TokenId = TokenId(0);
pub const BOS: TokenId = TokenId(1);
pub const EOS: TokenId = TokenId(2);
pub const SEP: TokenId = TokenId(3);
pub const N_SPECIAL: u32 = 4;
const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

pub const MAX_LANGS: u16 = 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    n_langs: u16,
    n_concepts: u32,
}

impl Vocabulary {
    pub fn new(n_langs: u16, n_concepts: u32) -> Self {
        assert!(n_langs <= MAX_LANGS, "at most {MAX_LANGS} languages");
        Self { n_langs, n_concepts }
    }

    pub fn n_langs(&self) -> u16 {
        self.n_langs
    }

    pub fn n_concepts(&self) -> u32 {
        self.n_concepts
    }

    pub fn size(&self) -> usize {
        (N_SPECIAL + self.n_langs as u32 * self.n_concepts) as usize
    }

    pub fn langs(&self) -> impl Iterator<Item = LangId> {
        (0..self.n_langs).map(LangId)
    }

    pub fn contains_lang(&self, lang: LangId) -> bool {
        lang.0 < self.n_langs
    }

    pub fn token(&self, lang: LangId, concept: ConceptId) -> TokenId {
        debug_assert!(lang.0 < self.n_langs && concept.0 < self.n_concepts);
        TokenId(N_SPECIAL + lang.0 as u32 * self.n_concepts + concept.0)
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        t.0 < N_SPECIAL
    }

    pub fn lang_of(&self, t: TokenId) -> Option<LangId> {
        if t.0 < N_SPECIAL || t.index() >= self.size() {
            return None;
        }
        Some(LangId(((t.0 - N_SPECIAL) / self.n_concepts) as u16))
    }

    pub fn concept_of(&self, t: TokenId) -> Option<ConceptId> {
        if t.0 < N_SPECIAL || t.index() >= self.size() {
            return None;
        }
        Some(ConceptId((t.0 - N_SPECIAL) % self.n_concepts))
    }

    pub fn code(&self, lang: LangId) -> String {
        let c = (b'a' + lang.0 as u8) as char;
        format!("{c}{c}")
    }

    pub fn lang_by_code(&self, code: &str) -> Option<LangId> {
        let b = code.as_bytes();
        if b.len() != 2 || b[0] != b[1] || !b[0].is_ascii_lowercase() {
            return None;
        }
        let l = (b[0] - b'a') as u16;
        (l < self.n_langs).then_some(LangId(l))
    }

    pub fn surface(&self, t: TokenId) -> String {
        if t.0 < N_SPECIAL {
            return SPECIAL_NAMES[t.index()].to_string();
        }
        match (self.lang_of(t), self.concept_of(t)) {
            (Some(l), Some(c)) => format!("{}_k{:03}", self.code(l), c.0),
            _ => format!("<unk:{}>", t.0),
        }
    }

    pub fn parse(&self, s: &str) -> Option<TokenId> {
        if let Some(i) = SPECIAL_NAMES.iter().position(|n| *n == s) {
            return Some(TokenId(i as u32));
        }
        let (code, rest) = s.split_once("_k")?;
        let lang = self.lang_by_code(code)?;
        let c: u32 = rest.parse().ok()?;
        (c < self.n_concepts).then(|| self.token(lang, ConceptId(c)))
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|t| self.surface(*t)).collect::<Vec<_>>().join(" ")
    }
}
