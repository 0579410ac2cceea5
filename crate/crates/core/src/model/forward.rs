use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::input::{AssembledInput, Slot};
use super::weights::ModelWeights;
use super::{ModelError, Seq2Seq};
use crate::numcore::{AttentionLayout, Graph, Segment, Tensor, Var};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;

/// Row offsets of variable-length sequences packed into one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packed {
    pub fn of(inputs: &[AssembledInput]) -> Self {
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut at = 0;
        for i in inputs {
            offsets.push(at);
            at += i.len();
        }
        Self {
            offsets,
            lens: inputs.iter().map(|i| i.len()).collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    fn self_layout(&self, heads: usize, causal: bool) -> AttentionLayout {
        AttentionLayout {
            heads,
            causal,
            segments: (self.offsets.iter().zip(&self.lens))
                .map(|(&o, &l)| Segment {
                    q_start: o,
                    q_len: l,
                    kv_start: o,
                    kv_len: l,
                })
                .collect(),
        }
    }

    fn cross_layout(&self, kv: &Packed, heads: usize) -> AttentionLayout {
        AttentionLayout {
            heads,
            causal: false,
            segments: (0..self.lens.len())
                .map(|i| Segment {
                    q_start: self.offsets[i],
                    q_len: self.lens[i],
                    kv_start: kv.offsets[i],
                    kv_len: kv.lens[i],
                })
                .collect(),
        }
    }
}

/// Model weights bound to one graph, plus the per-graph embedding table.
pub struct Bound<'m> {
    pub model: &'m Seq2Seq,
    pub w: ModelWeights<Var>,
    table: Var,
    n_tok_rows: usize,
    has_task_rows: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Encoder-side results of a packed teacher-forced pass.
pub struct MleForward {
    pub loss: Var,
    /// Final encoder states, one row per encoder slot of every example.
    pub enc_states: Var,
    pub enc_packed: Packed,
    pub n_targets: usize,
}

impl<'m> Bound<'m> {
    /// Binds `model` into `g`. Only tensors accepted by `trainable` get
    /// gradients. The task prompt joins the embedding table only when
    /// `with_task` is set, so direct-mode graphs never touch it.
    pub fn new(
        g: &mut Graph<'m>,
        model: &'m Seq2Seq,
        trainable: &dyn Fn(&str) -> bool,
        with_task: bool,
    ) -> Result<Self, ModelError> {
        let w = model.weights.bind(g, trainable);
        Self::from_vars(g, model, w, with_task)
    }

    /// Uses weights that are already leaves of `g`, e.g. under a
    /// finite-difference check.
    pub fn from_vars(
        g: &mut Graph<'m>,
        model: &'m Seq2Seq,
        w: ModelWeights<Var>,
        with_task: bool,
    ) -> Result<Self, ModelError> {
        let mut parts = vec![w.tok_emb, w.lang_prompts];
        if with_task {
            parts.push(w.task_prompt);
        }
        let table = g.concat_rows(&parts)?;
        Ok(Self {
            model,
            w,
            table,
            n_tok_rows: model.config.vocab_size,
            has_task_rows: with_task,
            dropout_rng: None,
        })
    }

    /// Frozen binding for inference.
    pub fn frozen(g: &mut Graph<'m>, model: &'m Seq2Seq, with_task: bool) -> Result<Self, ModelError> {
        Self::new(g, model, &|_| false, with_task)
    }

    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        if self.model.config.dropout > 0.0 {
            self.dropout_rng = Some(rng);
        }
        self
    }

    fn dropout(&mut self, g: &mut Graph<'m>, x: Var) -> Result<Var, ModelError> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let p = self.model.config.dropout;
        let shape = g.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - p);
        let n = g.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let m = g.input(Tensor::new(shape, mask)?);
        Ok(g.mul(x, m)?)
    }

    fn embed(&mut self, g: &mut Graph<'m>, inputs: &[AssembledInput]) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let mut index = Vec::new();
        let mut pe = Vec::new();
        for inp in inputs {
            if inp.len() > cfg.max_len {
                return Err(ModelError::TooLong {
                    needed: inp.len(),
                    max_len: cfg.max_len,
                });
            }
            for (pos, slot) in inp.slots.iter().enumerate() {
                index.push(match *slot {
                    Slot::Token(t) => {
                        if t.index() >= self.n_tok_rows {
                            return Err(ModelError::UnknownToken(t.0));
                        }
                        t.index()
                    }
                    Slot::Lang(l) => {
                        if l.index() >= cfg.n_langs {
                            return Err(ModelError::UnknownLanguage(l.0));
                        }
                        self.n_tok_rows + l.index()
                    }
                    Slot::Task(k) => {
                        if !self.has_task_rows || k >= cfg.n_task_tokens {
                            return Err(ModelError::NoTaskPrompt);
                        }
                        self.n_tok_rows + cfg.n_langs + k
                    }
                });
                pe.extend_from_slice(self.model.positional().row_slice(pos));
            }
        }
        let x = g.gather_rows(self.table, &index)?;
        let pe = g.input(Tensor::matrix(index.len(), d, pe)?);
        let x = g.add(x, pe)?;
        self.dropout(g, x)
    }

    fn attend(
        &mut self,
        g: &mut Graph<'m>,
        xq: Var,
        xkv: Var,
        proj: [Var; 4],
        layout: AttentionLayout,
    ) -> Result<Var, ModelError> {
        let [wq, wk, wv, wo] = proj;
        let q = g.matmul(xq, wq)?;
        let k = g.matmul(xkv, wk)?;
        let v = g.matmul(xkv, wv)?;
        let a = g.attention(q, k, v, layout)?;
        let o = g.matmul(a, wo)?;
        self.dropout(g, o)
    }

    fn ffn(&mut self, g: &mut Graph<'m>, x: Var, p: [Var; 4]) -> Result<Var, ModelError> {
        let [w1, b1, w2, b2] = p;
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        self.dropout(g, o)
    }

    /// Final (layer-normed) encoder states for a packed batch.
    pub fn encode(&mut self, g: &mut Graph<'m>, inputs: &[AssembledInput]) -> Result<(Var, Packed), ModelError> {
        let packed = Packed::of(inputs);
        let heads = self.model.config.n_heads;
        let mut x = self.embed(g, inputs)?;
        for i in 0..self.w.encoder.len() {
            let l = self.w.encoder[i].clone();
            let h = g.layer_norm(x, l.ln1_g, l.ln1_b, LN_EPS)?;
            let a = self.attend(g, h, h, [l.wq, l.wk, l.wv, l.wo], packed.self_layout(heads, false))?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, l.ln2_g, l.ln2_b, LN_EPS)?;
            let f = self.ffn(g, h, [l.w1, l.b1, l.w2, l.b2])?;
            x = g.add(x, f)?;
        }
        let out = g.layer_norm(x, self.w.enc_norm_g, self.w.enc_norm_b, LN_EPS)?;
        Ok((out, packed))
    }

    /// Final (layer-normed) decoder states; example `i` cross-attends to
    /// segment `i` of `enc`.
    pub fn decode(
        &mut self,
        g: &mut Graph<'m>,
        enc: Var,
        enc_packed: &Packed,
        inputs: &[AssembledInput],
    ) -> Result<(Var, Packed), ModelError> {
        let packed = Packed::of(inputs);
        let heads = self.model.config.n_heads;
        let mut y = self.embed(g, inputs)?;
        for i in 0..self.w.decoder.len() {
            let l = self.w.decoder[i].clone();
            let h = g.layer_norm(y, l.ln1_g, l.ln1_b, LN_EPS)?;
            let a = self.attend(g, h, h, [l.sq, l.sk, l.sv, l.so], packed.self_layout(heads, true))?;
            y = g.add(y, a)?;
            let h = g.layer_norm(y, l.ln2_g, l.ln2_b, LN_EPS)?;
            let c = self.attend(
                g,
                h,
                enc,
                [l.cq, l.ck, l.cv, l.co],
                packed.cross_layout(enc_packed, heads),
            )?;
            y = g.add(y, c)?;
            let h = g.layer_norm(y, l.ln3_g, l.ln3_b, LN_EPS)?;
            let f = self.ffn(g, h, [l.w1, l.b1, l.w2, l.b2])?;
            y = g.add(y, f)?;
        }
        let out = g.layer_norm(y, self.w.dec_norm_g, self.w.dec_norm_b, LN_EPS)?;
        Ok((out, packed))
    }

    /// Vocabulary logits for the given state rows.
    pub fn project(&mut self, g: &mut Graph<'m>, states: Var) -> Result<Var, ModelError> {
        let z = g.matmul(states, self.w.out_w)?;
        Ok(g.add_row(z, self.w.out_b)?)
    }

    /// Teacher-forced mean token cross-entropy over a packed batch.
    ///
    /// `targets[i]` are the tokens to predict from the `[BOS]` slot of
    /// `dec[i]` onwards (the decoder tokens shifted left, then `EOS`).
    pub fn mle(
        &mut self,
        g: &mut Graph<'m>,
        enc: &[AssembledInput],
        dec: &[AssembledInput],
        targets: &[Vec<TokenId>],
    ) -> Result<MleForward, ModelError> {
        if enc.len() != dec.len() || dec.len() != targets.len() || enc.is_empty() {
            return Err(ModelError::Batch(format!(
                "{} encoder inputs, {} decoder inputs, {} target lists",
                enc.len(),
                dec.len(),
                targets.len()
            )));
        }
        let (h, enc_packed) = self.encode(g, enc)?;
        let (y, dec_packed) = self.decode(g, h, &enc_packed, dec)?;
        let mut rows = Vec::new();
        let mut flat = Vec::new();
        for (i, t) in targets.iter().enumerate() {
            let bos = dec[i].prefix_len();
            if dec[i].len() - bos != t.len() {
                return Err(ModelError::Batch(format!(
                    "example {i}: {} decoder slots after the prompt but {} targets",
                    dec[i].len() - bos,
                    t.len()
                )));
            }
            rows.extend((0..t.len()).map(|k| dec_packed.offsets[i] + bos + k));
            flat.extend(t.iter().map(|x| x.index()));
        }
        let states = g.gather_rows(y, &rows)?;
        let logits = self.project(g, states)?;
        let loss = g.cross_entropy(logits, &flat, crate::vocab::PAD.index())?;
        Ok(MleForward {
            loss,
            enc_states: h,
            enc_packed,
            n_targets: flat.len(),
        })
    }
}
