//! Prompt-state extraction, pooling and the contrastive prompt objective.

use serde::{Deserialize, Serialize};

use crate::model::{AssembledInput, Packed};
use crate::numcore::{Graph, NumError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptingError {
    #[error("no task span: input was assembled without a task prompt")]
    NoTaskSpan,
    #[error("unknown pooling method '{0}' (attention|mean|max)")]
    UnknownPooling(String),
    #[error("lambda {0} outside [0, 1]")]
    Lambda(f64),
    #[error("invalid contrastive config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Attention,
    Mean,
    Max,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Attention, Pooling::Mean, Pooling::Max];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Attention => "attention",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = PromptingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(Pooling::Attention),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(PromptingError::UnknownPooling(other.to_string())),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Hinge margin σ.
    pub margin: f64,
    /// Temperature τ dividing the hinge.
    pub temperature: f64,
    pub pooling: Pooling,
    /// Weight λ of the contrastive term against the MLE term.
    pub lambda: f64,
    /// Also average the negative distances anchored at `h_tp_j`.
    pub symmetrize_negatives: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            temperature: 0.16,
            pooling: Pooling::Attention,
            lambda: 0.2,
            symmetrize_negatives: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), PromptingError> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(PromptingError::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(PromptingError::Config(format!("margin {} must be >= 0", self.margin)));
        }
        check_lambda(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<(), PromptingError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PromptingError::Lambda(lambda));
    }
    Ok(())
}

/// Encoder states at the prompt positions of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptStates {
    /// `n × d`, the task-prompt rows.
    pub h_tp: Tensor,
    /// `1 × d`, the language-prompt row.
    pub h_lp: Tensor,
}

pub fn extract_prompt_states(h: &Tensor, input: &AssembledInput) -> Result<PromptStates, PromptingError> {
    let (first, last) = input.task_span.ok_or(PromptingError::NoTaskSpan)?;
    if h.rows() != input.len() {
        return Err(PromptingError::Dimension(format!(
            "{} state rows for an input of {} slots",
            h.rows(),
            input.len()
        )));
    }
    let d = h.cols();
    let h_tp = Tensor::matrix(last - first + 1, d, h.data()[first * d..(last + 1) * d].to_vec())?;
    let h_lp = Tensor::row(h.row_slice(input.lang_pos).to_vec())?;
    Ok(PromptStates { h_tp, h_lp })
}

/// Reduces `h_tp` (`n × d`) to one `1 × d` row.
pub fn pool_var(g: &mut Graph<'_>, h_tp: Var, h_lp: Var, method: Pooling) -> Result<Var, PromptingError> {
    let d = g.value(h_tp).cols();
    if g.value(h_lp).len() != d {
        return Err(PromptingError::Dimension(format!(
            "h_lp has {} values, h_tp rows have {d}",
            g.value(h_lp).len()
        )));
    }
    Ok(match method {
        Pooling::Mean => g.mean_rows(h_tp),
        Pooling::Max => g.max_rows(h_tp),
        Pooling::Attention => {
            let s = g.matmul_nt(h_lp, h_tp)?;
            let s = g.scale(s, 1.0 / (d as f64).sqrt());
            let w = g.softmax(s);
            g.matmul(w, h_tp)?
        }
    })
}

pub fn pool(h_tp: &Tensor, h_lp: &Tensor, method: Pooling) -> Result<Tensor, PromptingError> {
    let mut g = Graph::new();
    let a = g.constant(h_tp);
    let lp = g.input(Tensor::row(h_lp.data().to_vec())?);
    let out = pool_var(&mut g, a, lp, method)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveOutput {
    pub d_p: f64,
    pub d_n: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveVars {
    pub d_p: Var,
    pub d_n: Var,
    pub loss: Var,
}

/// Hinge on the positive (cross-language task prompt) distance against
/// the negative (task prompt to language prompt) distances, over `1/τ`.
pub fn contrastive_var(
    g: &mut Graph<'_>,
    h_tp_i: Var,
    h_tp_j: Var,
    h_lp_i: Var,
    h_lp_j: Var,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveVars, PromptingError> {
    let d = g.value(h_tp_i).len();
    for v in [h_tp_j, h_lp_i, h_lp_j] {
        if g.value(v).len() != d {
            return Err(PromptingError::Dimension(format!(
                "vectors of length {d} and {}",
                g.value(v).len()
            )));
        }
    }
    let dist = |g: &mut Graph<'_>, a: Var, b: Var| -> Result<Var, PromptingError> {
        let diff = g.sub(a, b)?;
        Ok(g.l2_norm(diff))
    };
    let d_p = dist(g, h_tp_i, h_tp_j)?;
    let n1 = dist(g, h_tp_i, h_lp_i)?;
    let n2 = dist(g, h_tp_i, h_lp_j)?;
    let mut d_n = g.add(n1, n2)?;
    d_n = if cfg.symmetrize_negatives {
        let n3 = dist(g, h_tp_j, h_lp_j)?;
        let n4 = dist(g, h_tp_j, h_lp_i)?;
        let m = g.add(n3, n4)?;
        let all = g.add(d_n, m)?;
        g.scale(all, 0.25)
    } else {
        g.scale(d_n, 0.5)
    };
    let gap = g.sub(d_p, d_n)?;
    let gap = g.add_scalar(gap, cfg.margin);
    let hinge = g.relu(gap);
    let loss = g.scale(hinge, 1.0 / cfg.temperature);
    Ok(ContrastiveVars { d_p, d_n, loss })
}

pub fn contrastive_loss(
    h_tp_i: &Tensor,
    h_tp_j: &Tensor,
    h_lp_i: &Tensor,
    h_lp_j: &Tensor,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutput, PromptingError> {
    cfg.validate()?;
    let mut g = Graph::new();
    let mut v = Vec::with_capacity(4);
    for t in [h_tp_i, h_tp_j, h_lp_i, h_lp_j] {
        v.push(g.input(Tensor::row(t.data().to_vec())?));
    }
    let out = contrastive_var(&mut g, v[0], v[1], v[2], v[3], cfg)?;
    Ok(ContrastiveOutput {
        d_p: g.scalar(out.d_p),
        d_n: g.scalar(out.d_n),
        loss: g.scalar(out.loss),
    })
}

/// `λ·l_c + (1−λ)·l_mle`.
pub fn combined_loss(l_mle: f64, l_c: f64, lambda: f64) -> Result<f64, PromptingError> {
    check_lambda(lambda)?;
    Ok(lambda * l_c + (1.0 - lambda) * l_mle)
}

pub fn combined_var(g: &mut Graph<'_>, l_mle: Var, l_c: Var, lambda: f64) -> Result<Var, PromptingError> {
    check_lambda(lambda)?;
    let a = g.scale(l_c, lambda);
    let b = g.scale(l_mle, 1.0 - lambda);
    Ok(g.add(a, b)?)
}

/// Group-level prompt representations: the mean over `members` of each
/// example's pooled task-prompt state, and the mean of their
/// language-prompt states. `states` are packed encoder outputs.
pub fn group_prompt_states(
    g: &mut Graph<'_>,
    states: Var,
    packed: &Packed,
    inputs: &[AssembledInput],
    members: &[usize],
    pooling: Pooling,
) -> Result<(Var, Var), PromptingError> {
    if members.is_empty() {
        return Err(PromptingError::Dimension("empty group".into()));
    }
    let mut pooled = Vec::with_capacity(members.len());
    let mut lang_rows = Vec::with_capacity(members.len());
    for &e in members {
        let (first, last) = inputs[e].task_span.ok_or(PromptingError::NoTaskSpan)?;
        let off = packed.offsets[e];
        let h_tp = g.slice_rows(states, off + first, last - first + 1)?;
        let h_lp = g.slice_rows(states, off + inputs[e].lang_pos, 1)?;
        pooled.push(pool_var(g, h_tp, h_lp, pooling)?);
        lang_rows.push(off + inputs[e].lang_pos);
    }
    let tp = g.concat_rows(&pooled)?;
    let tp = g.mean_rows(tp);
    let lp = g.gather_rows(states, &lang_rows)?;
    let lp = g.mean_rows(lp);
    Ok((tp, lp))
}
