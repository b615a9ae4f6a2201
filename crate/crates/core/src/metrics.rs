//! Confusion matrix, overall/average accuracy and Cohen's kappa.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{LabelMap, SplitCell, SplitMask};
use crate::error::{precondition, Error, Result};

/// `c x c` counts; rows are reference classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::LengthMismatch {
                shape: vec![classes, classes],
                got: counts.len(),
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count for reference class `r` predicted as `p` (both 1-based).
    pub fn get(&self, r: u16, p: u16) -> u64 {
        self.counts[(r as usize - 1) * self.classes + p as usize - 1]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn add(&mut self, r: u16, p: u16) {
        self.counts[(r as usize - 1) * self.classes + p as usize - 1] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.counts[k * self.classes + k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.classes..(k + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|r| self.counts[r * self.classes + k]).sum()
    }

    /// Recall of each class, `None` for classes without reference pixels.
    pub fn class_accuracies(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let n = self.row_sum(k);
                (n > 0).then(|| self.counts[k * self.classes + k] as f64 / n as f64)
            })
            .collect()
    }
}

/// Counts test pixels (and train pixels too when `include_train`).
pub fn confusion(
    pred: &LabelMap,
    reference: &LabelMap,
    mask: &SplitMask,
    include_train: bool,
) -> Result<ConfusionMatrix> {
    let dims = |r: usize, c: usize| vec![r, c];
    if (pred.rows(), pred.cols()) != (reference.rows(), reference.cols())
        || (mask.rows(), mask.cols()) != (reference.rows(), reference.cols())
    {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            left: dims(pred.rows(), pred.cols()),
            right: dims(reference.rows(), reference.cols()),
        });
    }
    mask.check_against(reference)?;
    let c = reference.num_classes();
    let mut cm = ConfusionMatrix::new(c);
    for ((&p, &r), &cell) in pred.ids().iter().zip(reference.ids()).zip(mask.cells()) {
        let counted = cell == SplitCell::Test || (include_train && cell == SplitCell::Train);
        if !counted {
            continue;
        }
        if p == 0 || p as usize > c {
            return Err(Error::LabelOutOfRange {
                label: p as u32,
                classes: c,
            });
        }
        cm.add(r, p);
    }
    if cm.total() == 0 {
        return Err(precondition("no evaluation pixels in the split"));
    }
    Ok(cm)
}

fn nonempty(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(precondition("empty confusion matrix")),
        n => Ok(n as f64),
    }
}

/// `trace / total`.
pub fn oa(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / nonempty(cm)?)
}

/// Mean per-class recall; every class needs reference pixels.
pub fn aa(cm: &ConfusionMatrix) -> Result<f64> {
    nonempty(cm)?;
    let acc = cm.class_accuracies();
    let mut sum = 0.0;
    for (k, a) in acc.iter().enumerate() {
        sum += a.ok_or(Error::EmptyClass(k as u16 + 1))?;
    }
    Ok(sum / cm.classes() as f64)
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`. When `p_e = 1` it is 1 for
/// perfect agreement and undefined otherwise.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = nonempty(cm)?;
    let po = cm.trace() as f64 / n;
    let pe: f64 = (0..cm.classes())
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    if pe == 1.0 {
        return if po == 1.0 {
            Ok(1.0)
        } else {
            Err(precondition("kappa undefined: chance agreement is 1"))
        };
    }
    Ok((po - pe) / (1.0 - pe))
}

/// One row of an accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class_id: u16,
    pub name: String,
    /// Recall in percent.
    pub accuracy: f64,
}

/// Per-class accuracies followed by OA, AA and kappa, all in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub classes: Vec<ClassRow>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl Report {
    pub fn new(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        if class_names.len() != cm.classes() {
            return Err(precondition(format!(
                "{} class names for {} classes",
                class_names.len(),
                cm.classes()
            )));
        }
        let classes = cm
            .class_accuracies()
            .into_iter()
            .enumerate()
            .map(|(k, a)| {
                Ok(ClassRow {
                    class_id: k as u16 + 1,
                    name: class_names[k].clone(),
                    accuracy: 100.0 * a.ok_or(Error::EmptyClass(k as u16 + 1))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes,
            oa: 100.0 * oa(cm)?,
            aa: 100.0 * aa(cm)?,
            kappa: 100.0 * kappa(cm)?,
        })
    }
}
