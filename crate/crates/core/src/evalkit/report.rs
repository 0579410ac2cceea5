use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{median, EvalError, EvalResult, METRICS};

/// Evaluation results of one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub mode: String,
    pub seed: u64,
    pub corpus_digest: String,
    pub results: Vec<EvalResult>,
}

/// `(b − a) / b`: how much lower `a` is than the baseline `b`. Zero when
/// both are zero, `None` when only the baseline is.
pub fn relative_decrease(a: f64, b: f64) -> Option<f64> {
    if b == 0.0 {
        return (a == 0.0).then_some(0.0);
    }
    Some((b - a) / b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub src: String,
    pub tgt: String,
    pub metric: String,
    pub mode: String,
    /// One value per seed, in `ComparisonTable::seeds` order.
    pub per_seed: Vec<f64>,
    pub median: f64,
    /// Against the baseline mode's median.
    pub rel_decrease: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub modes: Vec<String>,
    pub seeds: Vec<u64>,
    pub pairs: Vec<(String, String)>,
    pub baseline: String,
    pub rows: Vec<CompareRow>,
}

fn pair_key(r: &EvalResult) -> (String, String) {
    (r.src.clone(), r.tgt.clone())
}

/// Side-by-side per-pair metrics for every mode with per-seed values,
/// medians and the relative decrease against `baseline`.
pub fn compare_report(runs: &[RunResults], baseline: &str) -> Result<ComparisonTable, EvalError> {
    let first = runs.first().ok_or_else(|| EvalError::Mismatch("no runs".into()))?;
    let mut modes: Vec<String> = Vec::new();
    for r in runs {
        if r.corpus_digest != first.corpus_digest {
            return Err(EvalError::Mismatch(format!(
                "corpus {} differs from {}",
                r.corpus_digest, first.corpus_digest
            )));
        }
        if !modes.contains(&r.mode) {
            modes.push(r.mode.clone());
        }
    }
    if modes.len() < 2 {
        return Err(EvalError::Mismatch("need at least two modes".into()));
    }
    if !modes.iter().any(|m| m == baseline) {
        return Err(EvalError::Mismatch(format!(
            "baseline mode '{baseline}' not among the runs"
        )));
    }
    let seeds_of = |m: &str| -> Vec<u64> {
        let mut s: Vec<u64> = runs.iter().filter(|r| r.mode == m).map(|r| r.seed).collect();
        s.sort_unstable();
        s
    };
    let seeds = seeds_of(&modes[0]);
    if seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(EvalError::Mismatch(format!("duplicate seed for mode {}", modes[0])));
    }
    for m in &modes {
        if seeds_of(m) != seeds {
            return Err(EvalError::Mismatch(format!("mode {m} was run on a different seed set")));
        }
    }
    let pairs: Vec<(String, String)> = first.results.iter().map(pair_key).collect();
    for r in runs {
        if r.results.iter().map(pair_key).collect::<Vec<_>>() != pairs {
            return Err(EvalError::Mismatch(format!(
                "mode {} seed {} covers different pairs",
                r.mode, r.seed
            )));
        }
    }

    let value = |mode: &str, seed: u64, p: usize, metric: &str| -> Option<f64> {
        runs.iter()
            .find(|r| r.mode == mode && r.seed == seed)
            .and_then(|r| r.results[p].metric(metric))
    };
    let mut rows = Vec::new();
    for (p, (src, tgt)) in pairs.iter().enumerate() {
        for metric in METRICS {
            let mut block: Vec<CompareRow> = Vec::new();
            for mode in &modes {
                let per_seed: Option<Vec<f64>> = seeds.iter().map(|&s| value(mode, s, p, metric)).collect();
                let Some(per_seed) = per_seed else { continue };
                block.push(CompareRow {
                    src: src.clone(),
                    tgt: tgt.clone(),
                    metric: metric.to_string(),
                    mode: mode.clone(),
                    median: median(&per_seed),
                    per_seed,
                    rel_decrease: None,
                });
            }
            let base = block.iter().find(|r| r.mode == baseline).map(|r| r.median);
            for row in &mut block {
                row.rel_decrease = base.and_then(|b| relative_decrease(row.median, b));
            }
            rows.extend(block);
        }
    }
    Ok(ComparisonTable {
        modes,
        seeds,
        pairs,
        baseline: baseline.to_string(),
        rows,
    })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("src,tgt,metric,mode");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        let _ = writeln!(s, ",median,rel_decrease_vs_{}", self.baseline);
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.src, r.tgt, r.metric, r.mode);
            for v in &r.per_seed {
                let _ = write!(s, ",{v:.6}");
            }
            let rel = r.rel_decrease.map_or(String::new(), |x| format!("{:.1}%", 100.0 * x));
            let _ = writeln!(s, ",{:.6},{rel}", r.median);
        }
        s
    }

    pub fn row(&self, src: &str, tgt: &str, metric: &str, mode: &str) -> Option<&CompareRow> {
        self.rows
            .iter()
            .find(|r| r.src == src && r.tgt == tgt && r.metric == metric && r.mode == mode)
    }
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of one metric's medians: one group per language pair, one
/// bar per mode.
pub fn render_svg(table: &ComparisonTable, metric: &str) -> String {
    let pairs: Vec<&(String, String)> = table
        .pairs
        .iter()
        .filter(|(s, t)| {
            table
                .rows
                .iter()
                .any(|r| &r.src == s && &r.tgt == t && r.metric == metric)
        })
        .collect();
    let n_modes = table.modes.len().max(1);
    let bar_w = 14.0;
    let group_w = bar_w * n_modes as f64 + 16.0;
    let (left, top, plot_h) = (48.0, 28.0, 200.0);
    let width = left + group_w * pairs.len() as f64 + 150.0;
    let height = top + plot_h + 48.0;
    let max = table
        .rows
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| r.median)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let scale_max = if max <= 1.0 { 1.0 } else { max };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="16">{} (median over seeds)</text>"#,
        escape(metric)
    );
    let base_y = top + plot_h;
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{base_y}" x2="{:.1}" y2="{base_y}" stroke="#333"/>"##,
        left + group_w * pairs.len() as f64
    );
    for tick in 0..=4 {
        let v = scale_max * tick as f64 / 4.0;
        let y = base_y - plot_h * tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            left - 4.0,
            y + 4.0
        );
    }
    for (gi, (src, tgt)) in pairs.iter().enumerate() {
        let gx = left + group_w * gi as f64 + 8.0;
        let _ = writeln!(s, r#"<g class="pair" data-pair="{src}-{tgt}">"#);
        for (mi, mode) in table.modes.iter().enumerate() {
            if let Some(r) = table.row(src, tgt, metric, mode) {
                let h = plot_h * (r.median / scale_max).clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar_w}" height="{h:.1}" fill="{}"><title>{} {:.4}</title></rect>"#,
                    gx + bar_w * mi as f64,
                    base_y - h,
                    PALETTE[mi % PALETTE.len()],
                    escape(mode),
                    r.median
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{src}→{tgt}</text>"#,
            gx + bar_w * n_modes as f64 / 2.0,
            base_y + 16.0
        );
        let _ = writeln!(s, "</g>");
    }
    let lx = left + group_w * pairs.len() as f64 + 16.0;
    for (mi, mode) in table.modes.iter().enumerate() {
        let y = top + 16.0 * mi as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[mi % PALETTE.len()],
            lx + 14.0,
            y + 9.0,
            escape(mode)
        );
    }
    s.push_str("</svg>\n");
    s
}
