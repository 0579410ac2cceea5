use rand::Rng;

use super::{ModelConfig, ModelError};
use crate::numcore::{Graph, Tensor, Var};

macro_rules! param_block {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s T)>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &self.$field));)*
            }

            fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut T>) {
                $(out.push(&mut self.$field);)*
            }

            fn map_with<'s, U>(&'s self, prefix: &str, f: &mut impl FnMut(&str, &'s T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field),)*
                }
            }
        }
    };
}

param_block!(
    /// Pre-norm encoder block: self-attention then feed-forward.
    EncoderLayer {
        ln1_g, ln1_b, wq, wk, wv, wo,
        ln2_g, ln2_b, w1, b1, w2, b2,
    }
);

param_block!(
    /// Pre-norm decoder block: causal self-attention, cross-attention over
    /// the encoder states, feed-forward.
    DecoderLayer {
        ln1_g, ln1_b, sq, sk, sv, so,
        ln2_g, ln2_b, cq, ck, cv, co,
        ln3_g, ln3_b, w1, b1, w2, b2,
    }
);

/// Every learnable array of the model. `T` is [`Tensor`] for storage and
/// [`Var`] once bound to a [`Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub tok_emb: T,
    /// One row per language.
    pub lang_prompts: T,
    /// The soft task prompt, shared by encoder and decoder inputs.
    pub task_prompt: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm_g: T,
    pub enc_norm_b: T,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm_g: T,
    pub dec_norm_b: T,
    pub out_w: T,
    pub out_b: T,
}

/// Standard deviation of token, language and task prompt embeddings at init.
pub const EMBED_STD: f64 = 0.1;

pub const TASK_PROMPT: &str = "task_prompt";

impl<T> ModelWeights<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> ModelWeights<U> {
        ModelWeights {
            tok_emb: f("tok_emb", &self.tok_emb),
            lang_prompts: f("lang_prompts", &self.lang_prompts),
            task_prompt: f(TASK_PROMPT, &self.task_prompt),
            encoder: (self.encoder.iter().enumerate())
                .map(|(i, l)| l.map_with(&format!("encoder.{i}"), &mut f))
                .collect(),
            enc_norm_g: f("enc_norm.gain", &self.enc_norm_g),
            enc_norm_b: f("enc_norm.bias", &self.enc_norm_b),
            decoder: (self.decoder.iter().enumerate())
                .map(|(i, l)| l.map_with(&format!("decoder.{i}"), &mut f))
                .collect(),
            dec_norm_g: f("dec_norm.gain", &self.dec_norm_g),
            dec_norm_b: f("dec_norm.bias", &self.dec_norm_b),
            out_w: f("out_w", &self.out_w),
            out_b: f("out_b", &self.out_b),
        }
    }

    /// `(name, value)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("lang_prompts".to_string(), &self.lang_prompts),
            (TASK_PROMPT.to_string(), &self.task_prompt),
        ];
        for (i, l) in self.encoder.iter().enumerate() {
            l.collect(&format!("encoder.{i}"), &mut out);
        }
        out.push(("enc_norm.gain".into(), &self.enc_norm_g));
        out.push(("enc_norm.bias".into(), &self.enc_norm_b));
        for (i, l) in self.decoder.iter().enumerate() {
            l.collect(&format!("decoder.{i}"), &mut out);
        }
        out.push(("dec_norm.gain".into(), &self.dec_norm_g));
        out.push(("dec_norm.bias".into(), &self.dec_norm_b));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    /// Mutable references in the same order as [`ModelWeights::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.lang_prompts, &mut self.task_prompt];
        for l in &mut self.encoder {
            l.collect_mut(&mut out);
        }
        out.push(&mut self.enc_norm_g);
        out.push(&mut self.enc_norm_b);
        for l in &mut self.decoder {
            l.collect_mut(&mut out);
        }
        out.push(&mut self.dec_norm_g);
        out.push(&mut self.dec_norm_b);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }
}

fn dense<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl ModelWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        let ones = || Tensor::full(&[d], 1.0);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let tok_emb = Tensor::randn(&[cfg.vocab_size, d], EMBED_STD, rng);
        let lang_prompts = Tensor::randn(&[cfg.n_langs, d], EMBED_STD, rng);
        let task_prompt = Tensor::randn(&[cfg.n_task_tokens, d], EMBED_STD, rng);
        let encoder = (0..cfg.n_enc_layers)
            .map(|_| EncoderLayer {
                ln1_g: ones(),
                ln1_b: zeros(d),
                wq: dense(d, d, rng),
                wk: dense(d, d, rng),
                wv: dense(d, d, rng),
                wo: dense(d, d, rng),
                ln2_g: ones(),
                ln2_b: zeros(d),
                w1: dense(d, f, rng),
                b1: zeros(f),
                w2: dense(f, d, rng),
                b2: zeros(d),
            })
            .collect();
        let decoder = (0..cfg.n_dec_layers)
            .map(|_| DecoderLayer {
                ln1_g: ones(),
                ln1_b: zeros(d),
                sq: dense(d, d, rng),
                sk: dense(d, d, rng),
                sv: dense(d, d, rng),
                so: dense(d, d, rng),
                ln2_g: ones(),
                ln2_b: zeros(d),
                cq: dense(d, d, rng),
                ck: dense(d, d, rng),
                cv: dense(d, d, rng),
                co: dense(d, d, rng),
                ln3_g: ones(),
                ln3_b: zeros(d),
                w1: dense(d, f, rng),
                b1: zeros(f),
                w2: dense(f, d, rng),
                b2: zeros(d),
            })
            .collect();
        Self {
            tok_emb,
            lang_prompts,
            task_prompt,
            encoder,
            enc_norm_g: ones(),
            enc_norm_b: zeros(d),
            decoder,
            dec_norm_g: ones(),
            dec_norm_b: zeros(d),
            out_w: dense(d, cfg.vocab_size, rng),
            out_b: zeros(cfg.vocab_size),
        }
    }

    /// Binds every tensor as a leaf of `g`. Tensors rejected by `trainable`
    /// become constants and receive no gradient.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: &dyn Fn(&str) -> bool) -> ModelWeights<Var> {
        self.map(|name, t| if trainable(name) { g.param(t) } else { g.constant(t) })
    }

    /// Rebuilds weights from named tensors, checking every expected name
    /// and shape against a fresh layout for `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let template = Self::init(
            cfg,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        let mut missing = None;
        let out = template.map(|name, t| match by_name.remove(name) {
            Some(v) if v.shape() == t.shape() => v,
            Some(v) => {
                missing.get_or_insert(format!("{name}: shape {:?}, expected {:?}", v.shape(), t.shape()));
                t.clone()
            }
            None => {
                missing.get_or_insert(format!("{name}: missing"));
                t.clone()
            }
        });
        if let Some(m) = missing {
            return Err(ModelError::Checkpoint(m));
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(ModelError::Checkpoint(format!("{extra}: unexpected tensor")));
        }
        Ok(out)
    }

    pub fn n_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}
