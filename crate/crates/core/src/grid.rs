//! Hyperparameter grid search and the ranked results table.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captioner::{CaptionerModel, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::format_metric;
use crate::synth::Sample;
use crate::train::{train, HyperConfig, TrainReport};

pub const TABLE_COLUMNS: [&str; 6] = ["CNN", "RNN", "Neurons", "Val. CCR", "Val. Loss", "Test CCR"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub model: ModelConfig,
    pub hyper: HyperConfig,
}

impl GridPoint {
    /// Model config with its neuron count taken from the hyper config.
    pub fn new(mut model: ModelConfig, hyper: HyperConfig) -> Self {
        model.neurons = hyper.neurons;
        Self { model, hyper }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// Position of the configuration in the search space.
    pub index: usize,
    pub cnn: String,
    pub rnn: String,
    pub neurons: usize,
    pub hyper: HyperConfig,
    pub status: RowStatus,
    pub val_ccr: Option<f64>,
    pub val_loss: Option<f64>,
    pub test_ccr: Option<f64>,
    pub report: Option<TrainReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Ranked rows; the first successful row is the best.
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn best(&self) -> Option<&GridRow> {
        self.rows.first().filter(|r| r.status == RowStatus::Ok)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Aligned text table with the best row marked `<- best`.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), format_metric);
        let mut lines: Vec<[String; 6]> = vec![TABLE_COLUMNS.map(str::to_string)];
        for r in &self.rows {
            lines.push([
                r.cnn.clone(),
                r.rnn.clone(),
                r.neurons.to_string(),
                cell(r.val_ccr),
                cell(r.val_loss),
                cell(r.test_ccr),
            ]);
        }
        let widths: Vec<usize> = (0..6).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            let mut text = cells.join("  ").trim_end().to_string();
            if i > 0 {
                let row = &self.rows[i - 1];
                if i == 1 && row.status == RowStatus::Ok {
                    text.push_str("  <- best");
                } else if let RowStatus::Failed(why) = &row.status {
                    text.push_str(&format!("  FAILED: {why}"));
                }
            }
            out.push_str(&text);
            out.push('\n');
        }
        out
    }
}

fn run_point(index: usize, point: &GridPoint, samples: &[Sample]) -> GridRow {
    let outcome = CaptionerModel::build(point.model.clone()).and_then(|mut m| train(&mut m, samples, &point.hyper));
    let (status, report) = match outcome {
        Ok(r) => (RowStatus::Ok, Some(r)),
        Err(e) => (RowStatus::Failed(e.to_string()), None),
    };
    GridRow {
        index,
        cnn: point.model.encoder.label().to_string(),
        rnn: point.model.decoder.label().to_string(),
        neurons: point.model.neurons,
        hyper: point.hyper.clone(),
        status,
        val_ccr: report.as_ref().map(|r| r.val_ccr),
        val_loss: report.as_ref().map(|r| r.val_loss),
        test_ccr: report.as_ref().map(|r| r.test.ccr),
        report,
    }
}

/// Trains every point (in parallel) and ranks by test CCR descending, then
/// validation loss ascending, then position. Failed runs become flagged
/// rows at the bottom.
pub fn grid_search(space: &[GridPoint], samples: &[Sample]) -> Result<GridResult> {
    if space.is_empty() {
        return Err(Error::Empty("grid search space"));
    }
    for p in space {
        if p.model.neurons != p.hyper.neurons {
            return Err(Error::Config("grid point neurons disagree between model and hyper config".into()));
        }
    }
    let mut rows: Vec<GridRow> = space
        .par_iter()
        .enumerate()
        .map(|(i, p)| run_point(i, p, samples))
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &GridRow| (r.status != RowStatus::Ok, r.test_ccr.unwrap_or(f64::NEG_INFINITY), r.val_loss.unwrap_or(f64::INFINITY));
        let (fa, ta, la) = key(a);
        let (fb, tb, lb) = key(b);
        fa.cmp(&fb)
            .then(tb.total_cmp(&ta))
            .then(la.total_cmp(&lb))
            .then(a.index.cmp(&b.index))
    });
    Ok(GridResult { rows })
}
