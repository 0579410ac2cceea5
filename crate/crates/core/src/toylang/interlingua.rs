use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusConfig, ToyLangError};
use crate::vocab::ConceptId;

/// Marks where the target word is inserted in a context template.
pub const HOLE: Option<ConceptId> = None;

/// Shared meaning space of every toy language.
///
/// Concepts are split into topical domains. A concept's context templates
/// always carry three cue concepts from its own domain plus distractors.
/// Distractors never come from the domain of another sense of the same
/// surface word, so the sense of a polysemous word can be read off the
/// context even for templates never seen in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Interlingua {
    pub n_concepts: u32,
    pub domain: Vec<usize>,
    pub definition_templates: Vec<Vec<ConceptId>>,
    /// Per concept; `None` marks the hole.
    pub context_templates: Vec<Vec<Vec<Option<ConceptId>>>>,
    /// `(slot, partner)`: the surface word of `slot` also means `partner`.
    pub polysemy_map: Vec<(ConceptId, ConceptId)>,
}

pub(crate) const CUES_PER_TEMPLATE: usize = 3;

impl Interlingua {
    pub fn generate(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<Self, ToyLangError> {
        let n = cfg.n_concepts as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut domain = vec![0; n];
        for (pos, &c) in order.iter().enumerate() {
            domain[c] = pos % cfg.n_domains;
        }

        let n_poly = cfg.polysemous_slots();
        order.shuffle(rng);
        let (slots, rest) = order.split_at(n_poly);
        let mut free: Vec<usize> = rest.to_vec();
        let mut polysemy_map = Vec::with_capacity(n_poly);
        for &k in slots {
            let pick = free
                .iter()
                .position(|&p| domain[p] != domain[k])
                .ok_or(ToyLangError::Infeasible(
                    "polysemy_fraction: not enough partner concepts in other domains".into(),
                ))?;
            let p = free.remove(pick);
            polysemy_map.push((ConceptId(k as u32), ConceptId(p as u32)));
        }
        polysemy_map.sort();

        // Concepts tied to c through polysemy never appear inside c's
        // templates, so the word occurs exactly once in every context.
        let mut tied: Vec<Vec<usize>> = (0..n).map(|c| vec![c]).collect();
        for &(k, p) in &polysemy_map {
            tied[k.0 as usize].push(p.0 as usize);
            tied[p.0 as usize].push(k.0 as usize);
        }
        let by_domain: Vec<Vec<usize>> = (0..cfg.n_domains)
            .map(|d| (0..n).filter(|&c| domain[c] == d).collect())
            .collect();

        // Domains of the other senses sharing c's surface word; distractors
        // never come from them.
        let foreign: Vec<Vec<usize>> = tied
            .iter()
            .enumerate()
            .map(|(c, t)| t.iter().filter(|&&x| x != c).map(|&x| domain[x]).collect())
            .collect();

        let mut definition_templates = Vec::with_capacity(n);
        for c in 0..n {
            let len = rng.gen_range(cfg.def_len_min..=cfg.def_len_max);
            let mut pool: Vec<usize> = (0..n).filter(|&x| x != c).collect();
            pool.shuffle(rng);
            definition_templates.push(pool[..len].iter().map(|&x| ConceptId(x as u32)).collect());
        }

        let mut context_templates = Vec::with_capacity(n);
        for c in 0..n {
            let cues: Vec<usize> = by_domain[domain[c]]
                .iter()
                .copied()
                .filter(|x| !tied[c].contains(x))
                .collect();
            if cues.len() < CUES_PER_TEMPLATE {
                return Err(ToyLangError::Infeasible(format!(
                    "n_domains: domain of concept {c} has fewer than {CUES_PER_TEMPLATE} cue concepts"
                )));
            }
            let mut templates: Vec<Vec<Option<ConceptId>>> = Vec::with_capacity(cfg.templates_per_concept);
            let mut attempts = 0;
            while templates.len() < cfg.templates_per_concept {
                attempts += 1;
                if attempts > 100 * cfg.templates_per_concept {
                    return Err(ToyLangError::Infeasible(
                        "templates_per_concept: cannot draw enough distinct context templates".into(),
                    ));
                }
                let body_len = rng.gen_range(cfg.context_len_min..=cfg.context_len_max) - 1;
                let mut body: Vec<usize> = cues.choose_multiple(rng, CUES_PER_TEMPLATE).copied().collect();
                while body.len() < body_len {
                    let x = rng.gen_range(0..n);
                    if !foreign[c].contains(&domain[x]) && !tied[c].contains(&x) && !body.contains(&x) {
                        body.push(x);
                    }
                }
                body.shuffle(rng);
                let hole = rng.gen_range(0..=body.len());
                let mut t: Vec<Option<ConceptId>> = body.into_iter().map(|x| Some(ConceptId(x as u32))).collect();
                t.insert(hole, HOLE);
                if !templates.contains(&t) {
                    templates.push(t);
                }
            }
            context_templates.push(templates);
        }

        Ok(Self {
            n_concepts: cfg.n_concepts,
            domain,
            definition_templates,
            context_templates,
            polysemy_map,
        })
    }

    /// Partner sense of a polysemous slot, if `c` is one.
    pub fn partner_of_slot(&self, c: ConceptId) -> Option<ConceptId> {
        self.polysemy_map.iter().find(|(k, _)| *k == c).map(|(_, p)| *p)
    }

    /// The polysemous slot whose second sense is `c`, if any.
    pub fn slot_for_partner(&self, c: ConceptId) -> Option<ConceptId> {
        self.polysemy_map.iter().find(|(_, p)| *p == c).map(|(k, _)| *k)
    }
}
