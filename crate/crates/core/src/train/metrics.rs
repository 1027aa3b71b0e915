use crate::error::{Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(Confusion {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class * self.classes..][..self.classes].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("true\\pred");
        for p in 0..self.classes {
            out += &format!(" {p:>6}");
        }
        out.push('\n');
        for t in 0..self.classes {
            out += &format!("{t:>9}");
            for p in 0..self.classes {
                out += &format!(" {:>6}", self.get(t, p));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub confusion: Confusion,
    /// Mean recall over classes with non-zero support.
    pub ua: f64,
    /// Overall accuracy.
    pub wa: f64,
}

pub fn compute_metrics(confusion: &Confusion) -> Metrics {
    let total = confusion.total();
    let wa = if total == 0 {
        0.0
    } else {
        confusion.trace() as f64 / total as f64
    };
    let recalls: Vec<f64> = (0..confusion.classes())
        .filter(|&c| confusion.support(c) > 0)
        .map(|c| confusion.get(c, c) as f64 / confusion.support(c) as f64)
        .collect();
    let ua = if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    };
    Metrics {
        confusion: confusion.clone(),
        ua,
        wa,
    }
}

/// Mean recall of the two-way decision between classes `a` and `b`,
/// restricted to records of those classes and to their two logits.
pub fn pair_recall(logits: &[Vec<f32>], labels: &[u32], a: usize, b: usize) -> f64 {
    let mut hit = [0usize; 2];
    let mut seen = [0usize; 2];
    for (row, &label) in logits.iter().zip(labels) {
        let slot = match label as usize {
            l if l == a => 0,
            l if l == b => 1,
            _ => continue,
        };
        seen[slot] += 1;
        let pick_a = row[a] >= row[b];
        if pick_a == (slot == 0) {
            hit[slot] += 1;
        }
    }
    let recalls: Vec<f64> = (0..2)
        .filter(|&s| seen[s] > 0)
        .map(|s| hit[s] as f64 / seen[s] as f64)
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}
