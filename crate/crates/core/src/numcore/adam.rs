use super::{NumError, Tensor};

/// Adam moments and hyper-parameters, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new<'t>(params: impl IntoIterator<Item = &'t Tensor>, learning_rate: f64) -> Self {
        let first_moment: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step_count: 0,
            second_moment: first_moment.clone(),
            first_moment,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    /// One bias-corrected Adam update. A `None` gradient marks a frozen
    /// parameter: neither it nor its moments are touched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>]) -> Result<(), NumError> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(NumError::Shape {
                op: "adam_step",
                left: vec![params.len(), grads.len()],
                right: vec![self.first_moment.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            let g_len = g.map_or(p.len(), <[f64]>::len);
            if p.len() != m.len() || g_len != p.len() {
                return Err(NumError::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g_len],
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
