//! Confusion matrices, mIoU / mAcc and the per-round report tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K×K` pixel tally, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update<P, G>(&mut self, pred: &[P], gt: &[G]) -> Result<()>
    where
        P: Copy + Into<usize>,
        G: Copy + Into<usize>,
    {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(bad) = pred
            .iter()
            .map(|&p| p.into())
            .chain(gt.iter().map(|&g| g.into()))
            .find(|&c| c >= self.k)
        {
            return Err(Error::Data(format!("class id {bad} outside [0, {})", self.k)));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g.into() * self.k + p.into()] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Dimension(format!(
                "merging {}-class and {}-class matrices",
                self.k, other.k
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn gt_count(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, c)).sum()
    }

    /// IoU per class; `None` for classes absent from both gt and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let union = self.gt_count(c) + self.pred_count(c) - self.tp(c);
                (union > 0).then(|| self.tp(c) as f64 / union as f64)
            })
            .collect()
    }

    /// Accuracy per class; `None` for classes absent from gt.
    pub fn per_class_acc(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let n = self.gt_count(c);
                (n > 0).then(|| self.tp(c) as f64 / n as f64)
            })
            .collect()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::Usage("metrics of an empty confusion matrix".into()))
        } else {
            Ok(())
        }
    }

    pub fn miou(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        Ok(mean_present(&self.per_class_iou()))
    }

    pub fn macc(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        Ok(mean_present(&self.per_class_acc()))
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Metrics of one (round, domain) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub round: usize,
    pub domain: String,
    pub matrix: ConfusionMatrix,
    pub samples: usize,
}

impl CellResult {
    pub fn miou(&self) -> f64 {
        self.matrix.miou().unwrap_or(0.0)
    }

    pub fn macc(&self) -> f64 {
        self.matrix.macc().unwrap_or(0.0)
    }
}

/// All cells of one run, in stream order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub cells: Vec<CellResult>,
}

impl RunReport {
    pub fn total_samples(&self) -> usize {
        self.cells.iter().map(|c| c.samples).sum()
    }

    pub fn cell(&self, round: usize, domain: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.round == round && c.domain == domain)
    }

    /// Arithmetic mean of cell mIoU.
    pub fn mean_miou(&self) -> f64 {
        self.cells.iter().map(CellResult::miou).sum::<f64>() / self.cells.len().max(1) as f64
    }

    pub fn mean_macc(&self) -> f64 {
        self.cells.iter().map(CellResult::macc).sum::<f64>() / self.cells.len().max(1) as f64
    }

    pub fn rounds(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.cells.iter().map(|c| c.round).collect();
        r.dedup();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn round_mean(&self, round: usize) -> f64 {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.round == round).map(CellResult::miou).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub round: usize,
    pub domain: String,
    pub miou: f64,
    pub macc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregateRow {
    RoundMean { round: usize, miou: f64 },
    Mean { miou: f64, macc: f64 },
    Gain(f64),
    Warning(String),
}

/// Table form of a run: one row per cell, then one mean per round, the
/// overall mean, and the gain over a source baseline when one is given.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub cells: Vec<CellRow>,
    pub aggregates: Vec<AggregateRow>,
}

pub fn report(run: &RunReport, source: Option<&RunReport>) -> ReportTable {
    let cells = run
        .cells
        .iter()
        .map(|c| CellRow {
            round: c.round,
            domain: c.domain.clone(),
            miou: c.miou(),
            macc: c.macc(),
        })
        .collect();
    let mut aggregates: Vec<AggregateRow> = run
        .rounds()
        .into_iter()
        .map(|round| AggregateRow::RoundMean {
            round,
            miou: run.round_mean(round),
        })
        .collect();
    aggregates.push(AggregateRow::Mean {
        miou: run.mean_miou(),
        macc: run.mean_macc(),
    });
    aggregates.push(match source {
        Some(src) => AggregateRow::Gain(run.mean_miou() - src.mean_miou()),
        None => AggregateRow::Warning("no source baseline; gain omitted".into()),
    });
    ReportTable { cells, aggregates }
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

impl ReportTable {
    /// `round,domain,miou,macc`, values in percent with one decimal.
    pub fn cells_csv(&self) -> String {
        let mut s = String::from("round,domain,miou,macc\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{}", c.round, c.domain, pct(c.miou), pct(c.macc));
        }
        s
    }

    /// `metric,value` aggregate table.
    pub fn aggregates_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for a in &self.aggregates {
            match a {
                AggregateRow::RoundMean { round, miou } => {
                    let _ = writeln!(s, "round{round}_miou,{}", pct(*miou));
                }
                AggregateRow::Mean { miou, macc } => {
                    let _ = writeln!(s, "mean_miou,{}", pct(*miou));
                    let _ = writeln!(s, "mean_macc,{}", pct(*macc));
                }
                AggregateRow::Gain(g) => {
                    let _ = writeln!(s, "gain_over_source,{}", pct(*g));
                }
                AggregateRow::Warning(w) => {
                    let _ = writeln!(s, "warning,{w}");
                }
            }
        }
        s
    }

    pub fn gain(&self) -> Option<f64> {
        self.aggregates.iter().find_map(|a| match a {
            AggregateRow::Gain(g) => Some(*g),
            _ => None,
        })
    }

    pub fn mean_rows(&self) -> usize {
        self.aggregates
            .iter()
            .filter(|a| matches!(a, AggregateRow::RoundMean { .. } | AggregateRow::Mean { .. }))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn update_examples() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0u8, 1, 2, 2], &[0u8, 1, 2, 2]).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                if g != p {
                    assert_eq!(cm.get(g, p), 0);
                }
            }
        }
        cm.update(&[2u8], &[1u8]).unwrap();
        assert_eq!(cm.get(1, 2), 1);
        assert_eq!(cm.total(), 5);
        assert!(matches!(cm.update(&[3u8], &[0u8]), Err(Error::Data(_))));
        assert!(matches!(cm.update(&[0u8], &[0u8, 1]), Err(Error::Dimension(_))));
    }

    #[test]
    fn additivity() {
        let (p1, g1) = ([0u8, 1, 1, 2], [0u8, 2, 1, 2]);
        let (p2, g2) = ([2u8, 0], [2u8, 1]);
        let mut a = ConfusionMatrix::new(3);
        a.update(&p1, &g1).unwrap();
        a.update(&p2, &g2).unwrap();
        let mut b = ConfusionMatrix::new(3);
        let p: Vec<u8> = p1.iter().chain(&p2).copied().collect();
        let g: Vec<u8> = g1.iter().chain(&g2).copied().collect();
        b.update(&p, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn closed_forms() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0u8, 1, 0, 1], &[0u8, 1, 0, 1]).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.macc().unwrap(), 1.0);

        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0u8, 0, 0, 0], &[0u8, 0, 1, 1]).unwrap();
        let iou = cm.per_class_iou();
        assert_eq!(iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(cm.miou().unwrap(), 0.25);
        assert_eq!(cm.macc().unwrap(), 0.5);
        assert!(matches!(ConfusionMatrix::new(2).miou(), Err(Error::Usage(_))));
    }

    #[test]
    fn absent_class_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&[0u8, 1], &[0u8, 1]).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    fn cell(round: usize, domain: &str, gt: &[u8], pred: &[u8]) -> CellResult {
        let mut m = ConfusionMatrix::new(3);
        m.update(pred, gt).unwrap();
        CellResult { round, domain: domain.into(), matrix: m, samples: 1 }
    }

    #[test]
    fn report_layout_and_gain() {
        let mut run = RunReport::default();
        for r in 1..=3 {
            for d in ["a", "b", "c", "d"] {
                run.cells.push(cell(r, d, &[0, 1, 2, 2], &[0, 1, 2, 1]));
            }
        }
        let t = report(&run, Some(&run));
        assert_eq!(t.cells.len(), 12);
        assert_eq!(t.mean_rows(), 4);
        assert_eq!(t.gain(), Some(0.0));
        let no_base = report(&run, None);
        assert_eq!(no_base.gain(), None);
        assert!(no_base.aggregates_csv().contains("warning,"));
        assert_eq!(t.cells_csv().lines().count(), 13);
    }

    #[test]
    fn mean_is_arithmetic_average() {
        let run = RunReport {
            cells: vec![
                cell(1, "a", &[0, 0, 1, 1], &[0, 0, 1, 1]),
                cell(1, "b", &[0, 0, 1, 1], &[0, 0, 0, 0]),
            ],
        };
        // cells: 1.0 and (0.5 + 0)/2 = 0.25
        assert_relative_eq!(run.mean_miou(), 0.625, epsilon = 1e-15);
        let t = report(&run, None);
        assert!(t.aggregates_csv().contains("mean_miou,62.5\n"));
        assert!(t.cells_csv().contains("1,b,25.0,50.0\n"));
    }
}
