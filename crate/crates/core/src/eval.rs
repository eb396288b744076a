//! Generative exact-match evaluation.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::data::{AnswerType, QaRecord, SampleBuilder};
use crate::error::{Error, Result};
use crate::model::{tokenizer, MileModel};
use crate::tensor::Scalar;

/// Version of the answer normalization rules in [`normalize_answer`].
pub const NORMALIZATION_VERSION: u32 = 1;

/// Lowercases, trims, collapses internal whitespace and strips any trailing
/// run of punctuation (`.`, `,`, `!`, `?`, `;`, `:`) and spaces.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| ".,!?;:".contains(c) || c.is_whitespace())
        .to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_open: usize,
    pub n_closed: usize,
    pub acc_open: f64,
    pub acc_closed: f64,
    pub acc_global: f64,
}

impl EvalReport {
    /// Builds a report from correct counts. Accuracies are percentages; an
    /// empty category scores 0.
    pub fn from_counts(n_open: usize, correct_open: usize, n_closed: usize, correct_closed: usize) -> Self {
        let pct = |c: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
        let acc_open = pct(correct_open, n_open);
        let acc_closed = pct(correct_closed, n_closed);
        Self {
            n_open,
            n_closed,
            acc_open,
            acc_closed,
            acc_global: global_accuracy(n_open, acc_open, n_closed, acc_closed),
        }
    }

    pub fn csv_header() -> &'static str {
        "n_open,n_closed,acc_open,acc_closed,acc_global"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{:.4},{:.4},{:.4}\n",
            Self::csv_header(),
            self.n_open,
            self.n_closed,
            self.acc_open,
            self.acc_closed,
            self.acc_global
        )
    }
}

/// Count-weighted mean of the two category accuracies.
pub fn global_accuracy(n_open: usize, acc_open: f64, n_closed: usize, acc_closed: f64) -> f64 {
    let n = n_open + n_closed;
    if n == 0 {
        return 0.0;
    }
    100.0 * (n_open as f64 * acc_open / 100.0 + n_closed as f64 * acc_closed / 100.0) / n as f64
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>8}{:>10}", "split", "n", "acc (%)")?;
        writeln!(f, "{:<8}{:>8}{:>10.2}", "open", self.n_open, self.acc_open)?;
        writeln!(f, "{:<8}{:>8}{:>10.2}", "closed", self.n_closed, self.acc_closed)?;
        write!(f, "{:<8}{:>8}{:>10.2}", "global", self.n_open + self.n_closed, self.acc_global)
    }
}

/// One scored record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub prediction: String,
    pub reference: String,
    pub answer_type: AnswerType,
    pub correct: bool,
}

/// Scores predictions already generated.
pub fn score(predictions: &[Prediction]) -> EvalReport {
    let count = |t: AnswerType, correct: bool| {
        predictions
            .iter()
            .filter(|p| p.answer_type == t && (!correct || p.correct))
            .count()
    };
    EvalReport::from_counts(
        count(AnswerType::Open, false),
        count(AnswerType::Open, true),
        count(AnswerType::Closed, false),
        count(AnswerType::Closed, true),
    )
}

/// Greedy-decodes an answer to every record's original question and scores
/// exact match. `threads > 1` splits records across scoped threads; the
/// result does not depend on the thread count.
pub fn evaluate<T: Scalar>(
    model: &MileModel<T>,
    records: &[QaRecord],
    image_dir: &Path,
    max_len: usize,
    threads: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if records.is_empty() {
        return Err(Error::Input("benchmark is empty".into()));
    }
    let builder = SampleBuilder {
        image_size: model.config.image_size,
        max_text_len: model.config.max_text_len,
        base_dir: image_dir,
    };
    let samples = builder.origin::<T>(records)?;
    let predict = |i: usize| -> Result<Prediction> {
        let s = &samples[i];
        let tokens = model.generate(&s.pixels, &s.question, max_len)?;
        let prediction = tokenizer::decode(&tokens);
        let correct = normalize_answer(&prediction) == normalize_answer(&records[i].answer);
        Ok(Prediction {
            prediction,
            reference: records[i].answer.clone(),
            answer_type: records[i].answer_type,
            correct,
        })
    };

    let threads = threads.clamp(1, records.len());
    let predictions: Vec<Prediction> = if threads == 1 {
        (0..records.len()).map(predict).collect::<Result<_>>()?
    } else {
        let chunk = records.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..records.len())
                .step_by(chunk)
                .map(|start| {
                    let predict = &predict;
                    scope.spawn(move || {
                        (start..(start + chunk).min(records.len()))
                            .map(predict)
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(records.len());
            for h in handles {
                out.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    Ok((score(&predictions), predictions))
}
