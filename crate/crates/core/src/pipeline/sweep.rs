//! Budget sweep: WER against training minutes, with and without the LM.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{run_pipeline_at, PipelineConfig, PipelineError, ScoreSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub budgets: Vec<f64>,
    /// Harvest long-form audio in every cell. Off by default so cells
    /// differ only in the short-form budget.
    pub include_long_form: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { budgets: vec![1.0, 2.0, 4.0, 8.0], include_long_form: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepScore {
    pub wer: f64,
    pub report: ScoreSummary,
    pub train_minutes: f64,
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub budget_minutes: f64,
    pub use_lm: bool,
    pub run_dir: PathBuf,
    pub score: Result<SweepScore, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub seed: u64,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn wer(&self, budget: f64, use_lm: bool) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.budget_minutes == budget && c.use_lm == use_lm)
            .and_then(|c| c.score.as_ref().ok())
            .map(|s| s.wer)
    }

    pub fn budgets(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.cells.iter().map(|c| c.budget_minutes).collect();
        b.dedup();
        b
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("budget_minutes\ttrain_minutes\twer_lm\twer_nolm\n");
        for b in self.budgets() {
            let cell = |lm| self.wer(b, lm).map_or("ERR".to_string(), |w| format!("{:.2}", w * 100.0));
            let mins = self
                .cells
                .iter()
                .find_map(|c| (c.budget_minutes == b).then(|| c.score.as_ref().ok()).flatten())
                .map_or("ERR".to_string(), |s| format!("{:.2}", s.train_minutes));
            let _ = writeln!(s, "{b}\t{mins}\t{}\t{}", cell(true), cell(false));
        }
        s
    }
}

/// Run one pipeline per (budget, LM on/off) cell under `workdir/sweep-s<seed>/`.
/// Cells run one after another and share the stage cache, so the features,
/// lexicon and per-budget models are built once. A failing cell is recorded
/// and the sweep carries on.
pub fn sweep(base: &PipelineConfig, sc: &SweepConfig) -> Result<SweepResult, PipelineError> {
    base.validate()?;
    let mut budgets = sc.budgets.clone();
    if budgets.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(PipelineError::Config("sweep budgets must be non-negative".into()));
    }
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    if budgets.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one budget".into()));
    }
    let root = base.paths.workdir.join(format!("sweep-s{}", base.seed));
    let mut cells = Vec::new();
    for &b in &budgets {
        for use_lm in [true, false] {
            let mut cfg = base.clone();
            cfg.budget_minutes = Some(b);
            cfg.use_lm = use_lm;
            if !sc.include_long_form {
                cfg.paths.long_manifest = None;
            }
            let run_dir = root.join(format!("b{b}-{}", if use_lm { "lm" } else { "nolm" }));
            let score = match run_pipeline_at(&cfg, &run_dir) {
                Ok(out) => Ok(SweepScore {
                    wer: out.summary.wer.rate,
                    report: out.summary.wer.clone(),
                    train_minutes: out.summary.mono.train_minutes,
                    shortfall: out.summary.mono.shortfall,
                }),
                Err(e @ PipelineError::Config(_)) => return Err(e),
                Err(e) => {
                    log::warn!("sweep cell {}: {e}", run_dir.display());
                    Err(e.to_string())
                }
            };
            cells.push(SweepCell { budget_minutes: b, use_lm, run_dir, score });
        }
    }
    let result = SweepResult { seed: base.seed, cells };
    let wr = |p: PathBuf, s: String| {
        std::fs::write(&p, s).map_err(|e| PipelineError::Write { path: p.display().to_string(), msg: e.to_string() })
    };
    wr(root.join("sweep.tsv"), result.to_tsv())?;
    wr(root.join("sweep.json"), serde_json::to_string_pretty(&result).expect("sweep serializes"))?;
    wr(root.join("sweep.svg"), render_svg(&result))?;
    Ok(result)
}

/// WER-vs-minutes plot; the band between the two curves is the LM gain.
pub fn render_svg(r: &SweepResult) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let budgets = r.budgets();
    let pts = |lm: bool| -> Vec<(f64, f64)> {
        budgets.iter().filter_map(|&b| r.wer(b, lm).map(|w| (b, w * 100.0))).collect()
    };
    let (with, without) = (pts(true), pts(false));
    let max_x = budgets.iter().copied().fold(1e-9, f64::max);
    let max_y = with.iter().chain(&without).map(|p| p.1).fold(1.0, f64::max) * 1.1;
    let sx = |x: f64| pad + x / max_x * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / max_y * (h - 2.0 * pad);
    let line = |p: &[(f64, f64)]| p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect::<Vec<_>>().join(" ");
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    if with.len() == without.len() && !with.is_empty() {
        let mut band: Vec<(f64, f64)> = without.clone();
        band.extend(with.iter().rev());
        let _ = writeln!(s, "<polygon points=\"{}\" fill=\"#9ecae1\" fill-opacity=\"0.4\"/>", line(&band));
    }
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>", line(&without));
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>", line(&with));
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for &b in &budgets {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{b}</text>", sx(b), h - pad + 16.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">training minutes</text>", w / 2.0, h - 10.0);
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">WER %</text>", h / 2.0, h / 2.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" font-size=\"12\" fill=\"#1f77b4\">with LM</text>", w - 150.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"36\" font-size=\"12\" fill=\"#d62728\">without LM</text>", w - 150.0);
    s.push_str("</svg>\n");
    s
}
