use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::detector::{stack_examples, Detector, DetectorOutput, Example};
use crate::error::{Error, Result};
use crate::ohlc::{PatternClass, MAX_WINDOW_SIZE, MIN_WINDOW_SIZE};

const SIZES: usize = MAX_WINDOW_SIZE - MIN_WINDOW_SIZE + 1;
const EVAL_CHUNK: usize = 256;

/// A class label and window size, either true or predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub class: PatternClass,
    pub window_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub samples: usize,
    pub correct: usize,
    /// One-vs-all accuracy; absent when the class has no samples.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub per_class: Vec<ClassAccuracy>,
    /// Arithmetic mean of the per-class accuracies of classes present.
    pub macro_accuracy: f64,
    /// Overall fraction classified correctly.
    pub weighted_accuracy: f64,
    pub window_accuracy: f64,
    pub window_within_one: f64,
    /// Rows are true window sizes 5..=16, columns predicted sizes.
    pub window_confusion: Vec<Vec<usize>>,
}

fn size_index(w: usize) -> Result<usize> {
    if !(MIN_WINDOW_SIZE..=MAX_WINDOW_SIZE).contains(&w) {
        return Err(Error::invalid(format!("window size {w} out of range")));
    }
    Ok(w - MIN_WINDOW_SIZE)
}

pub fn evaluate_predictions(truth: &[Label], predicted: &[Label]) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    if truth.len() != predicted.len() {
        return Err(Error::invalid("truth and predictions differ in length"));
    }
    let mut samples = [0usize; PatternClass::COUNT];
    let mut correct = [0usize; PatternClass::COUNT];
    let mut confusion = vec![vec![0usize; SIZES]; SIZES];
    let (mut exact, mut near) = (0usize, 0usize);
    for (t, p) in truth.iter().zip(predicted) {
        let k = t.class.index();
        samples[k] += 1;
        correct[k] += usize::from(t.class == p.class);
        confusion[size_index(t.window_size)?][size_index(p.window_size)?] += 1;
        exact += usize::from(t.window_size == p.window_size);
        near += usize::from(t.window_size.abs_diff(p.window_size) <= 1);
    }
    let per_class: Vec<ClassAccuracy> = PatternClass::ALL
        .iter()
        .map(|c| {
            let k = c.index();
            ClassAccuracy {
                class: c.name().to_string(),
                samples: samples[k],
                correct: correct[k],
                accuracy: (samples[k] > 0).then(|| correct[k] as f64 / samples[k] as f64),
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.accuracy).collect();
    let n = truth.len() as f64;
    Ok(EvalReport {
        samples: truth.len(),
        macro_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        weighted_accuracy: correct.iter().sum::<usize>() as f64 / n,
        window_accuracy: exact as f64 / n,
        window_within_one: near as f64 / n,
        per_class,
        window_confusion: confusion,
    })
}

/// Inference-mode predictions for a set of examples.
pub fn predict_labels(model: &Detector, examples: &[Example]) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        for o in model.predict(&stack_examples(&refs)?)? {
            out.push(label_of(&o));
        }
    }
    Ok(out)
}

fn label_of(o: &DetectorOutput) -> Label {
    Label {
        class: o.top_class().0,
        window_size: o.predicted_window(),
    }
}

pub fn evaluate(model: &Detector, records: &[&SampleRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let examples: Vec<Example> = records.iter().map(|r| r.to_example()).collect();
    let truth: Vec<Label> = examples
        .iter()
        .map(|e| Label {
            class: e.class,
            window_size: e.window_size,
        })
        .collect();
    evaluate_predictions(&truth, &predict_labels(model, &examples)?)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:6.2}%", 100.0 * v);
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>7} {:>7} {:>8}", "class", "samples", "correct", "accuracy");
        for c in &self.per_class {
            let acc = c.accuracy.map_or_else(|| "     -".to_string(), pct);
            let _ = writeln!(out, "{:<18} {:>7} {:>7} {:>8}", c.class, c.samples, c.correct, acc);
        }
        let _ = writeln!(out, "{:<18} {:>24}", "macro average", pct(self.macro_accuracy));
        let _ = writeln!(out, "{:<18} {:>24}", "weighted average", pct(self.weighted_accuracy));
        let _ = writeln!(out, "{:<18} {:>24}", "window exact", pct(self.window_accuracy));
        let _ = writeln!(out, "{:<18} {:>24}", "window within 1", pct(self.window_within_one));
        out
    }

    pub fn write_confusion_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["true\\pred".to_string()];
        header.extend((MIN_WINDOW_SIZE..=MAX_WINDOW_SIZE).map(|s| s.to_string()));
        w.write_record(&header)?;
        for (i, row) in self.window_confusion.iter().enumerate() {
            let mut rec = vec![(MIN_WINDOW_SIZE + i).to_string()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced() -> Vec<Label> {
        (0..80)
            .map(|i| Label {
                class: PatternClass::ALL[i % 8],
                window_size: 5 + i % 12,
            })
            .collect()
    }

    #[test]
    fn perfect_predictor() {
        let t = balanced();
        let r = evaluate_predictions(&t, &t).unwrap();
        assert_eq!(r.macro_accuracy, 1.0);
        assert_eq!(r.window_accuracy, 1.0);
        assert!(r.per_class.iter().all(|c| c.accuracy == Some(1.0)));
        for (i, row) in r.window_confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(i == j || *v == 0);
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let t = balanced();
        let p: Vec<Label> = t
            .iter()
            .map(|l| Label {
                class: PatternClass::MorningStar,
                window_size: l.window_size,
            })
            .collect();
        let r = evaluate_predictions(&t, &p).unwrap();
        assert_eq!(r.macro_accuracy, 0.125);
        let mean = r.per_class.iter().filter_map(|c| c.accuracy).sum::<f64>() / 8.0;
        assert_eq!(r.macro_accuracy, mean);
        let total: usize = r.window_confusion.iter().flatten().sum();
        assert_eq!(total, t.len());
        for (i, row) in r.window_confusion.iter().enumerate() {
            let true_count = t.iter().filter(|l| l.window_size == i + 5).count();
            assert_eq!(row.iter().sum::<usize>(), true_count);
        }
    }

    #[test]
    fn window_tolerance_and_absent_classes() {
        let t = vec![
            Label { class: PatternClass::ShootingStar, window_size: 7 },
            Label { class: PatternClass::ShootingStar, window_size: 9 },
            Label { class: PatternClass::BearishHarami, window_size: 16 },
        ];
        let p = vec![
            Label { class: PatternClass::ShootingStar, window_size: 8 },
            Label { class: PatternClass::MorningStar, window_size: 11 },
            Label { class: PatternClass::BearishHarami, window_size: 16 },
        ];
        let r = evaluate_predictions(&t, &p).unwrap();
        assert_eq!(r.window_accuracy, 1.0 / 3.0);
        assert_eq!(r.window_within_one, 2.0 / 3.0);
        assert_eq!(r.macro_accuracy, (0.5 + 1.0) / 2.0);
        assert_eq!(r.weighted_accuracy, 2.0 / 3.0);
        assert_eq!(r.per_class[0].accuracy, None);
        assert!(evaluate_predictions(&[], &[]).is_err());
        assert!(evaluate_predictions(&t, &p[..2]).is_err());

        let json = r.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let mut csv_out = Vec::new();
        r.write_confusion_csv(&mut csv_out).unwrap();
        assert_eq!(String::from_utf8(csv_out).unwrap().lines().count(), 13);
        assert!(r.to_table().contains("macro average"));
    }
}
