//! Confusion matrices, precision/recall/F1 and facet-level scoring.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::talk_move::{Facet, TalkMove};

/// Square count matrix, rows = gold, columns = predicted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let k = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn talk_moves() -> Self {
        ConfusionMatrix::new(TalkMove::ALL.iter().map(|m| m.name().to_string()).collect())
    }

    pub fn facets() -> Self {
        ConfusionMatrix::new(Facet::ALL.iter().map(|f| f.display_name().to_string()).collect())
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn add(&mut self, gold: usize, pred: usize) {
        self.counts[gold][pred] += 1;
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, gold: usize) -> u64 {
        self.counts[gold].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        self.counts.iter().map(|r| r[pred]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("gold\\pred");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(l);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    /// Heat map with row-normalized shading and raw counts in each cell.
    pub fn to_svg(&self, title: &str) -> String {
        let k = self.size();
        let (cell, left, top) = (56.0, 190.0, 70.0);
        let width = left + cell * k as f64 + 20.0;
        let height = top + cell * k as f64 + 190.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#,
            width / 2.0,
            escape(title)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="50" text-anchor="middle">predicted</text>"#,
            left + cell * k as f64 / 2.0
        );
        for (i, row) in self.counts.iter().enumerate() {
            let sum: u64 = row.iter().sum();
            let y = top + cell * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 8.0,
                y + cell / 2.0 + 4.0,
                escape(&self.labels[i])
            );
            for (j, &c) in row.iter().enumerate() {
                let frac = if sum == 0 { 0.0 } else { c as f64 / sum as f64 };
                let shade = (255.0 * (1.0 - frac)).round() as u8;
                let x = left + cell * j as f64;
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#888"/>"##
                );
                let ink = if frac > 0.5 { "white" } else { "black" };
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{c}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0
                );
            }
        }
        let base = top + cell * k as f64 + 10.0;
        for (j, l) in self.labels.iter().enumerate() {
            let x = left + cell * j as f64 + cell / 2.0;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{base}" transform="rotate(60 {x} {base})">{}</text>"#,
                escape(l)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn confusion_indices(labels: Vec<String>, golds: &[usize], preds: &[usize]) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(Error::invalid(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut m = ConfusionMatrix::new(labels);
    let k = m.size();
    for (&g, &p) in golds.iter().zip(preds) {
        if g >= k || p >= k {
            return Err(Error::invalid(format!("class index out of range for {k} classes")));
        }
        m.add(g, p);
    }
    Ok(m)
}

pub fn confusion(golds: &[TalkMove], preds: &[TalkMove]) -> Result<ConfusionMatrix> {
    let g: Vec<usize> = golds.iter().map(|m| m.index()).collect();
    let p: Vec<usize> = preds.iter().map(|m| m.index()).collect();
    confusion_indices(ConfusionMatrix::talk_moves().labels, &g, &p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub matrix: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro scores. Undefined ratios count as 0 and every class
/// enters the macro mean.
pub fn prf1(m: &ConfusionMatrix) -> Result<EvalReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let k = m.size();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = m.get(c, c);
            let precision = ratio(tp, m.col_sum(c));
            let recall = ratio(tp, m.row_sum(c));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: m.row_sum(c),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(EvalReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: m.trace() as f64 / total as f64,
        per_class,
        matrix: m.clone(),
    })
}

pub fn evaluate(golds: &[TalkMove], preds: &[TalkMove]) -> Result<EvalReport> {
    prf1(&confusion(golds, preds)?)
}

pub fn facet_of(mv: TalkMove) -> Facet {
    mv.facet()
}

/// Scores after mapping gold and predicted moves to their facet bins.
pub fn facet_eval(golds: &[TalkMove], preds: &[TalkMove]) -> Result<EvalReport> {
    let g: Vec<usize> = golds.iter().map(|m| facet_of(*m).index()).collect();
    let p: Vec<usize> = preds.iter().map(|m| facet_of(*m).index()).collect();
    prf1(&confusion_indices(ConfusionMatrix::facets().labels, &g, &p)?)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl EvalReport {
    /// One row per class and a macro row, values x100 to two decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,Prec,Recall,F1\n");
        for (l, c) in self.matrix.labels.iter().zip(&self.per_class) {
            let _ = writeln!(s, "{l},{},{},{}", pct(c.precision), pct(c.recall), pct(c.f1));
        }
        let _ = writeln!(
            s,
            "Macro average,{},{},{}",
            pct(self.macro_precision),
            pct(self.macro_recall),
            pct(self.macro_f1)
        );
        s
    }

    pub fn table_header(&self) -> String {
        let mut s = String::from("Model | Prec. | Recall | F1");
        for l in &self.matrix.labels {
            let _ = write!(s, " | {l} F1");
        }
        s
    }

    /// Macro P/R/F1 followed by each class F1.
    pub fn table_row(&self, name: &str) -> String {
        let mut s = format!(
            "{name} | {} | {} | {}",
            pct(self.macro_precision),
            pct(self.macro_recall),
            pct(self.macro_f1)
        );
        for c in &self.per_class {
            let _ = write!(s, " | {}", pct(c.f1));
        }
        s
    }
}
