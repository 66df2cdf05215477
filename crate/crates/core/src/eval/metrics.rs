use std::fmt::Write as _;

use super::{EvalError, LabeledDataset, Result, Split};

/// F1 of the positive class; 0 when precision + recall is 0.
pub fn binary_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
}

impl MetricsReport {
    /// `class<TAB>precision<TAB>recall<TAB>f1` rows and a `MACRO` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class\tprecision\trecall\tf1\n");
        for c in &self.per_class {
            writeln!(
                s,
                "{}\t{:.4}\t{:.4}\t{:.4}",
                c.class, c.precision, c.recall, c.f1
            )
            .unwrap();
        }
        let n = self.per_class.len().max(1) as f64;
        let p = self.per_class.iter().map(|c| c.precision).sum::<f64>() / n;
        let r = self.per_class.iter().map(|c| c.recall).sum::<f64>() / n;
        writeln!(s, "MACRO\t{p:.4}\t{r:.4}\t{:.4}", self.macro_f1).unwrap();
        s
    }
}

/// Per-class F1 over the items of `split`, averaged without weighting.
/// `predictions` follow the order of `dataset.items_in(split)`.
pub fn macro_f1(
    dataset: &LabeledDataset,
    split: Split,
    predictions: &[bool],
) -> Result<MetricsReport> {
    let items: Vec<_> = dataset.items_in(split).collect();
    if items.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if items.len() != predictions.len() {
        return Err(EvalError::PredictionCount {
            expected: items.len(),
            found: predictions.len(),
        });
    }
    let mut counts = vec![(0usize, 0usize, 0usize); dataset.classes.len()];
    for (item, &pred) in items.iter().zip(predictions) {
        let c = &mut counts[item.class as usize];
        match (item.positive, pred) {
            (true, true) => c.0 += 1,
            (false, true) => c.1 += 1,
            (true, false) => c.2 += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = counts
        .iter()
        .zip(&dataset.classes)
        .map(|(&(tp, fp, fn_), name)| ClassMetrics {
            class: name.clone(),
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: binary_f1(tp, fp, fn_),
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len().max(1) as f64;
    Ok(MetricsReport {
        per_class,
        macro_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Item;
    use crate::store::ConceptId;

    fn item(concept: u32, class: u32, positive: bool) -> Item {
        Item {
            concept: ConceptId(concept),
            class,
            positive,
            split: Split::Test,
        }
    }

    #[test]
    fn hand_computed_values() {
        assert_eq!(binary_f1(1, 1, 1), 0.5);
        assert_eq!(binary_f1(0, 0, 3), 0.0);
        assert_eq!(binary_f1(0, 0, 0), 0.0);
        assert_eq!(binary_f1(4, 0, 0), 1.0);
    }

    #[test]
    fn two_half_classes_average_to_half() {
        let items = vec![
            item(0, 0, true),
            item(1, 0, true),
            item(2, 0, false),
            item(3, 1, true),
            item(4, 1, true),
            item(5, 1, false),
        ];
        let ds = LabeledDataset::new(vec!["a".into(), "b".into()], items);
        let preds = [true, false, true, true, false, true];
        let r = macro_f1(&ds, Split::Test, &preds).unwrap();
        assert_eq!(r.per_class[0].f1, 0.5);
        assert_eq!(r.per_class[1].f1, 0.5);
        assert_eq!(r.macro_f1, 0.5);
        assert!(r.to_tsv().ends_with("MACRO\t0.5000\t0.5000\t0.5000\n"));

        let perfect = [true, true, false, true, true, false];
        assert_eq!(macro_f1(&ds, Split::Test, &perfect).unwrap().macro_f1, 1.0);
        let none = [false; 6];
        assert_eq!(macro_f1(&ds, Split::Test, &none).unwrap().macro_f1, 0.0);
        assert!(matches!(
            macro_f1(&ds, Split::Dev, &[]),
            Err(EvalError::EmptySplit)
        ));
        assert!(matches!(
            macro_f1(&ds, Split::Test, &[true]),
            Err(EvalError::PredictionCount { .. })
        ));
    }
}
