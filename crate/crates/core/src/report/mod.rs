//! Run histories and the artifacts rendered from them.
//!
//! Everything written here is a pure function of its inputs: emitting the same history
//! twice produces byte-identical files.

mod svg;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundRecord;
use crate::seed::Seeds;
use crate::unfolding::{MetaTrace, WeightLogits};

pub use svg::{render_svg, svg_document, ChartKind};

/// Simplex tolerance for theta rows written to disk.
pub const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub meta_iter: usize,
    pub record: RoundRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaSummary {
    pub meta_iter: usize,
    pub meta_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub clients: usize,
    pub config: serde_json::Value,
    rows: Vec<HistoryRow>,
    pub meta: Vec<MetaSummary>,
    /// Wall-clock seconds per phase. Never written to the deterministic artifacts.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl RunHistory {
    pub fn new(clients: usize, config: serde_json::Value) -> Self {
        RunHistory {
            clients,
            config,
            rows: Vec::new(),
            meta: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn rows(&self) -> &[HistoryRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends one round; rounds must strictly increase within a meta-iteration.
    pub fn push(&mut self, meta_iter: usize, record: RoundRecord) -> Result<()> {
        if record.theta.len() != self.clients || record.participation.len() != self.clients {
            return Err(Error::Dimension(format!(
                "round record has {} weights / {} flags for {} clients",
                record.theta.len(),
                record.participation.len(),
                self.clients
            )));
        }
        if let Some(last) = self.rows.last() {
            if last.meta_iter == meta_iter && last.record.round >= record.round {
                return Err(Error::InvalidArgument(format!(
                    "round {} does not follow round {} in meta-iteration {meta_iter}",
                    record.round, last.record.round
                )));
            }
        }
        self.rows.push(HistoryRow { meta_iter, record });
        Ok(())
    }

    pub fn extend_trace(&mut self, trace: &MetaTrace) -> Result<()> {
        for it in &trace.iterations {
            for r in &it.rounds {
                self.push(it.meta_iter, r.clone())?;
            }
            self.meta.push(MetaSummary {
                meta_iter: it.meta_iter,
                meta_loss: it.meta_loss,
            });
        }
        Ok(())
    }

    pub fn record_timing(&mut self, phase: impl Into<String>, seconds: f64) {
        self.timings.push((phase.into(), seconds));
    }

    /// Rows of the highest meta-iteration present.
    pub fn last_pass(&self) -> Vec<&HistoryRow> {
        match self.rows.last() {
            Some(last) => self.rows.iter().filter(|r| r.meta_iter == last.meta_iter).collect(),
            None => Vec::new(),
        }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.record.test_accuracy)
    }
}

/// Decimal rendering with 9 significant digits, like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    const DIGITS: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if (-5..DIGITS).contains(&exp) {
        if exp < 0 {
            out.push_str("0.");
            out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
            out.push_str(&digits);
        } else {
            let split = (exp + 1) as usize;
            out.push_str(&digits[..split]);
            out.push('.');
            out.push_str(&digits[split..]);
        }
        trim_fraction(&mut out);
    } else {
        out.push_str(&digits[..1]);
        out.push('.');
        out.push_str(&digits[1..]);
        trim_fraction(&mut out);
        let _ = write!(out, "e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    out
}

fn trim_fraction(s: &mut String) {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn csv_header(clients: usize) -> String {
    let mut h = String::from("meta_iter,round,val_loss,test_acc");
    for k in 0..clients {
        let _ = write!(h, ",theta_{k}");
    }
    h.push_str(",participation_mask");
    h
}

/// The CSV document for a history, one row per round.
pub fn csv_string(history: &RunHistory) -> String {
    let mut out = csv_header(history.clients);
    out.push('\n');
    for row in &history.rows {
        let r = &row.record;
        let _ = write!(
            out,
            "{},{},{},{}",
            row.meta_iter,
            r.round,
            format_sig9(r.val_loss),
            format_sig9(r.test_accuracy)
        );
        for t in &r.theta {
            out.push(',');
            out.push_str(&format_sig9(*t));
        }
        out.push(',');
        out.extend(r.participation.iter().map(|&p| if p { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

pub fn emit_csv(history: &RunHistory, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), csv_string(history).as_bytes())
}

/// Reads a history back from its CSV form. Local losses are not part of the schema and
/// come back empty.
pub fn read_csv(path: impl AsRef<Path>) -> Result<RunHistory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<RunHistory> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let clients = cols.iter().filter(|c| c.starts_with("theta_")).count();
    if header != csv_header(clients) {
        return Err(Error::Data(format!("unexpected CSV header `{header}`")));
    }
    let mut history = RunHistory::new(clients, serde_json::Value::Null);
    for (n, line) in lines.enumerate() {
        let bad = |what: &str| Error::Data(format!("line {}: {what}", n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad("wrong number of fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("`{s}` is not an integer")));
        let mask = fields[cols.len() - 1];
        if mask.len() != clients || mask.chars().any(|c| c != '0' && c != '1') {
            return Err(bad("malformed participation mask"));
        }
        let record = RoundRecord {
            round: int(fields[1])?,
            theta: fields[4..4 + clients].iter().map(|s| num(s)).collect::<Result<_>>()?,
            local_losses: vec![None; clients],
            participation: mask.chars().map(|c| c == '1').collect(),
            val_loss: num(fields[2])?,
            test_accuracy: num(fields[3])?,
        };
        history.push(int(fields[0])?, record)?;
    }
    Ok(history)
}

/// Learned weights as written to `weights.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "K")]
    pub clients: usize,
    pub logits: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub normalized: bool,
    pub config_hash: String,
    pub seeds: Seeds,
    pub config: serde_json::Value,
}

impl WeightsFile {
    pub fn new(
        logits: &WeightLogits,
        theta: Vec<Vec<f64>>,
        normalized: bool,
        config_hash: String,
        seeds: Seeds,
        config: serde_json::Value,
    ) -> Self {
        WeightsFile {
            rounds: logits.rounds(),
            clients: logits.clients(),
            logits: logits.rows(),
            theta,
            normalized,
            config_hash,
            seeds,
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shape_ok = |m: &[Vec<f64>]| m.len() == self.rounds && m.iter().all(|r| r.len() == self.clients);
        if !shape_ok(&self.logits) || !shape_ok(&self.theta) {
            return Err(Error::Dimension(format!(
                "weights must be {} x {}",
                self.rounds, self.clients
            )));
        }
        if self.normalized {
            for (t, row) in self.theta.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|v| *v < 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "theta row {t} is off the simplex (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn logits(&self) -> Result<WeightLogits> {
        WeightLogits::from_rows(self.logits.clone())
    }
}

pub fn emit_weights_json(weights: &WeightsFile, path: impl AsRef<Path>) -> Result<()> {
    weights.validate()?;
    let mut text = serde_json::to_string_pretty(weights)?;
    text.push('\n');
    write_file(path.as_ref(), text.as_bytes())
}

pub fn read_weights_json(path: impl AsRef<Path>) -> Result<WeightsFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let weights: WeightsFile = serde_json::from_str(&text)?;
    weights.validate()?;
    Ok(weights)
}
