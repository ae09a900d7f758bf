//! Dataset summaries for `scenealign stats`.

use std::collections::BTreeMap;
use std::fmt::Write;

use scenealign::dpo::PreferenceRecord;

const BINS: usize = 10;

#[derive(Debug, Default, PartialEq)]
pub struct DatasetStats {
    pub records: usize,
    /// Records per instance id.
    pub per_instance: BTreeMap<String, usize>,
    /// Records per operator label, e.g. `swap+shorten`.
    pub operators: BTreeMap<String, usize>,
    /// Individual edits per operator.
    pub edits: BTreeMap<String, usize>,
    /// Overlap histogram over `[0, 1]` in tenths.
    pub jaccard_bins: [usize; BINS],
}

impl DatasetStats {
    pub fn from_records(records: &[PreferenceRecord]) -> Self {
        let mut s = DatasetStats {
            records: records.len(),
            ..Default::default()
        };
        for r in records {
            *s.per_instance.entry(r.meta.instance_id.clone()).or_default() += 1;
            *s.operators.entry(r.meta.operator.clone()).or_default() += 1;
            for op in &r.meta.edits {
                *s.edits.entry(op.tag.to_string()).or_default() += 1;
            }
            let bin = ((r.meta.jaccard.value() * BINS as f64) as usize).min(BINS - 1);
            s.jaccard_bins[bin] += 1;
        }
        s
    }

    pub fn mean_negatives(&self) -> f64 {
        if self.per_instance.is_empty() {
            0.0
        } else {
            self.records as f64 / self.per_instance.len() as f64
        }
    }

    /// Share of instances with fewer than `m` records.
    pub fn shortfall_rate(&self, m: usize) -> f64 {
        if self.per_instance.is_empty() {
            return 0.0;
        }
        let short = self.per_instance.values().filter(|&&n| n < m).count();
        short as f64 / self.per_instance.len() as f64
    }

    pub fn render(&self, m: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "records: {}", self.records);
        let _ = writeln!(out, "instances: {}", self.per_instance.len());
        let _ = writeln!(out, "mean negatives per instance: {:.3}", self.mean_negatives());
        let _ = writeln!(out, "shortfall rate (< {m}): {:.3}", self.shortfall_rate(m));
        let _ = writeln!(out, "operator mix:");
        for (op, n) in &self.operators {
            let _ = writeln!(out, "  {op:<28} {n}");
        }
        let _ = writeln!(out, "edits:");
        for (op, n) in &self.edits {
            let _ = writeln!(out, "  {op:<28} {n}");
        }
        let _ = writeln!(out, "jaccard histogram:");
        for (i, n) in self.jaccard_bins.iter().enumerate() {
            let _ = writeln!(out, "  [{:.1}, {:.1}{} {n}", i as f64 / 10.0, (i + 1) as f64 / 10.0, if i == BINS - 1 { "]" } else { ")" });
        }
        out
    }
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the absolute error when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}
