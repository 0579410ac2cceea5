use super::{Graph, NumError, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// numerically zero are compared in absolute terms.
    pub denom_floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            denom_floor: 1e-4,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<32} max rel err {:.3e} at {} ({} checked)",
                e.name, e.max_rel_error, e.worst_index, e.checked
            )?;
        }
        Ok(())
    }
}

fn evaluate<'c, F>(f: &F, params: &[(String, Tensor)]) -> Result<(f64, Vec<Vec<f64>>), NumError>
where
    F: Fn(&mut Graph<'c>, &[Var]) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone().with_grad(true))).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.scalar(loss);
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(v, (_, t))| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

fn value_at<'c, F>(f: &F, params: &[(String, Tensor)]) -> Result<f64, NumError>
where
    F: Fn(&mut Graph<'c>, &[Var]) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.scalar(loss))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences, parameter by parameter.
pub fn grad_check<'c, F>(f: F, params: &[(String, Tensor)], opts: GradCheckOptions) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<'c>, &[Var]) -> Result<Var, NumError>,
{
    let (_, analytic) = evaluate(&f, params)?;
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = GradCheckReport::default();
    for p in 0..params.len() {
        let n = params[p].1.len();
        let stride = opts.max_elements.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut entry = GradCheckEntry {
            name: params[p].0.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            checked: 0,
        };
        for idx in (0..n).step_by(stride) {
            let orig = params[p].1.data()[idx];
            work[p].1.data_mut()[idx] = orig + opts.step;
            let up = value_at(&f, &work)?;
            work[p].1.data_mut()[idx] = orig - opts.step;
            let down = value_at(&f, &work)?;
            work[p].1.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[p][idx];
            let denom = a.abs().max(numeric.abs()).max(opts.denom_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst_index = idx;
            }
            entry.checked += 1;
        }
        report.entries.push(entry);
    }
    Ok(report)
}
