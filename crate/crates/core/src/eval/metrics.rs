use crate::error::{Error, Result};

use super::predict::PredictiveResult;

/// Mann–Whitney AUC: the probability that a random positive scores above a
/// random negative, ties counting one half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("auc scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("auc needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC of class probabilities: the positive-class AUC for two classes, the
/// unweighted mean of one-vs-rest AUCs otherwise.
pub fn multiclass_auc(probs: &[Vec<f64>], labels: &[u32], classes: usize) -> Result<f64> {
    if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&scores, &pos);
    }
    let mut total = 0.0;
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        total += auc(&scores, &pos)?;
    }
    Ok(total / classes as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    /// Mean confidence of the bin's predictions (0 when empty).
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["bin_low", "bin_high", "confidence", "accuracy", "count"]).map_err(err)?;
        for b in &self.bins {
            w.write_record([
                format!("{:?}", b.low),
                format!("{:?}", b.high),
                format!("{:.17e}", b.confidence),
                format!("{:.17e}", b.accuracy),
                b.count.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expected calibration error over `bins` equal-width confidence bins
/// (`[i/B, (i+1)/B)`, the last bin closed): `Σ_b (n_b / N) |acc_b − conf_b|`.
pub fn ece_from_confidences(confidences: &[f64], correct: &[bool], bins: usize) -> Result<(f64, ReliabilityBins)> {
    if confidences.is_empty() {
        return Err(Error::Metric("ece of an empty prediction set".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::dim("ece", confidences.len(), correct.len()));
    }
    if bins == 0 {
        return Err(Error::Metric("ece needs at least one bin".into()));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Metric(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        conf_sum[b] += c;
        hits[b] += ok as usize;
        counts[b] += 1;
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let (confidence, accuracy) = if counts[b] == 0 {
            (0.0, 0.0)
        } else {
            (conf_sum[b] / counts[b] as f64, hits[b] as f64 / counts[b] as f64)
        };
        ece += counts[b] as f64 / n * (accuracy - confidence).abs();
        out.push(ReliabilityBin {
            low: b as f64 / bins as f64,
            high: (b + 1) as f64 / bins as f64,
            confidence,
            accuracy,
            count: counts[b],
        });
    }
    Ok((ece, ReliabilityBins { bins: out }))
}

/// ECE of predictive results with max-probability confidence.
pub fn ece(results: &[PredictiveResult], labels: &[u32], bins: usize) -> Result<(f64, ReliabilityBins)> {
    if results.len() != labels.len() {
        return Err(Error::dim("ece", results.len(), labels.len()));
    }
    let conf: Vec<f64> = results.iter().map(PredictiveResult::confidence).collect();
    let correct: Vec<bool> = results
        .iter()
        .zip(labels)
        .map(|(r, &l)| r.predicted_class() == l as usize)
        .collect();
    ece_from_confidences(&conf, &correct, bins)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropySplit {
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    /// Histogram edges over `[0, ln C]`.
    pub edges: Vec<f64>,
    pub hist_correct: Vec<usize>,
    pub hist_incorrect: Vec<usize>,
}

impl EntropySplit {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["group", "bin_low", "bin_high", "count"]).map_err(err)?;
        for (group, hist) in [("correct", &self.hist_correct), ("incorrect", &self.hist_incorrect)] {
            for (i, c) in hist.iter().enumerate() {
                w.write_record([
                    group.to_string(),
                    format!("{:.17e}", self.edges[i]),
                    format!("{:.17e}", self.edges[i + 1]),
                    c.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean predictive entropy of correctly and incorrectly classified samples,
/// with 10-bin histograms over `[0, ln C]`.
pub fn entropy_split(results: &[PredictiveResult], labels: &[u32]) -> Result<EntropySplit> {
    if results.len() != labels.len() {
        return Err(Error::dim("entropy_split", results.len(), labels.len()));
    }
    const BINS: usize = 10;
    let classes = results.first().map_or(2, |r| r.probs.len());
    let top = (classes as f64).ln();
    let edges: Vec<f64> = (0..=BINS).map(|i| top * i as f64 / BINS as f64).collect();
    let bin = |h: f64| (((h / top) * BINS as f64) as usize).min(BINS - 1);
    let (mut sums, mut counts) = ([0.0; 2], [0usize; 2]);
    let mut hists = [vec![0usize; BINS], vec![0usize; BINS]];
    for (r, &l) in results.iter().zip(labels) {
        let g = (r.predicted_class() != l as usize) as usize;
        sums[g] += r.entropy;
        counts[g] += 1;
        hists[g][bin(r.entropy.max(0.0))] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Metric(
            "entropy split needs at least one correct and one incorrect prediction".into(),
        ));
    }
    let [hist_correct, hist_incorrect] = hists;
    Ok(EntropySplit {
        mean_correct: sums[0] / counts[0] as f64,
        mean_incorrect: sums[1] / counts[1] as f64,
        edges,
        hist_correct,
        hist_incorrect,
    })
}

/// Mean negative log-probability of the true class (probabilities floored at 1e-300).
pub fn mean_nll(results: &[PredictiveResult], labels: &[u32]) -> f64 {
    let total: f64 = results
        .iter()
        .zip(labels)
        .map(|(r, &l)| -r.probs[l as usize].max(1e-300).ln())
        .sum();
    total / results.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
    }

    #[test]
    fn ece_examples() {
        let (e, bins) = ece_from_confidences(&[1.0; 4], &[true; 4], 10).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(bins.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        let (e, _) = ece_from_confidences(&[1.0; 4], &[true, false, true, false], 10).unwrap();
        assert_eq!(e, 0.5);
        assert!(ece_from_confidences(&[], &[], 10).is_err());
    }

    #[test]
    fn entropy_split_needs_both_groups() {
        let r = PredictiveResult::from_draws(vec![vec![1.0, 0.0]]);
        assert!(entropy_split(&[r.clone(), r], &[0, 0]).is_err());
    }
}
