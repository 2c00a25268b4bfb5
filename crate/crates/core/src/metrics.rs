//! Distance-based accuracy, top-K accuracy, confusion matrices, and the
//! evaluation / ablation harness.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fusion_model::{Ablation, BatchInput, BevFusionModel};
use crate::nn::{Forward, Mode};
use crate::numerics::Real;
use crate::training::SampleSource;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbaConfig {
    pub k: usize,
    pub delta: f64,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self { k: 3, delta: 5.0 }
    }
}

impl DbaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("dba_k", "must be >= 1"));
        }
        if !(self.delta >= 1.0) {
            return Err(Error::config("dba_delta", "must be >= 1"));
        }
        Ok(())
    }
}

fn check_lists(preds: &[Vec<usize>], labels: &[usize], k: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} prediction lists for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::contract("no samples to score"));
    }
    if let Some((i, p)) = preds.iter().enumerate().find(|(_, p)| p.len() < k) {
        return Err(Error::contract(format!(
            "prediction {i} ranks {} beams, need {k}",
            p.len()
        )));
    }
    Ok(())
}

/// `Y_k` for `k = 1..=K`: one minus the mean over samples of the best
/// normalized index distance among the first `k` predictions.
pub fn dba_curve(preds: &[Vec<usize>], labels: &[usize], cfg: &DbaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_lists(preds, labels, cfg.k)?;
    let mut sums = vec![0.0f64; cfg.k];
    for (p, &m) in preds.iter().zip(labels) {
        let mut best = f64::INFINITY;
        for (j, &b) in p.iter().take(cfg.k).enumerate() {
            let d = (b.abs_diff(m) as f64 / cfg.delta).min(1.0);
            best = best.min(d);
            sums[j] += best;
        }
    }
    let n = labels.len() as f64;
    Ok(sums.into_iter().map(|s| 1.0 - s / n).collect())
}

/// Mean of `Y_1..Y_K`.
pub fn dba_score(preds: &[Vec<usize>], labels: &[usize], cfg: &DbaConfig) -> Result<f64> {
    let y = dba_curve(preds, labels, cfg)?;
    Ok(y.iter().sum::<f64>() / y.len() as f64)
}

/// Fraction of samples whose label is among the first `k` predictions.
pub fn topk_accuracy(preds: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    check_lists(preds, labels, k)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, m)| p[..k].contains(m))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `M × M` counts, row = true beam, column = predicted beam.
pub fn confusion_matrix(top1: &[usize], labels: &[usize], m: usize) -> Result<Vec<Vec<u64>>> {
    if top1.len() != labels.len() {
        return Err(Error::contract("prediction and label counts differ"));
    }
    let mut cm = vec![vec![0u64; m]; m];
    for (&p, &t) in top1.iter().zip(labels) {
        if p >= m || t >= m {
            return Err(Error::contract(format!(
                "beam index out of range for M = {m}: {t} -> {p}"
            )));
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

/// Beam indices by descending probability; ties go to the lower index.
pub fn rank_beams(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Expected DBA of a predictor that ranks `K` distinct beams uniformly at
/// random, averaged over the given labels.
///
/// For a label with sorted per-beam scores `f_(1) ≤ … ≤ f_(M)`, the chance
/// that the best of a random `k`-subset is at least `f_(i)` is
/// `C(M − i + 1, k) / C(M, k)`.
pub fn random_predictor_dba(labels: &[usize], m: usize, cfg: &DbaConfig) -> Result<f64> {
    cfg.validate()?;
    if labels.is_empty() || cfg.k > m {
        return Err(Error::contract("need labels and K <= M"));
    }
    let mut per_label = BTreeMap::new();
    let mut total = 0.0;
    for &t in labels {
        if t >= m {
            return Err(Error::contract(format!(
                "label {t} out of range for M = {m}"
            )));
        }
        let v = *per_label.entry(t).or_insert_with(|| {
            let mut f: Vec<f64> = (0..m)
                .map(|b| (b.abs_diff(t) as f64 / cfg.delta).min(1.0))
                .collect();
            f.sort_by(f64::total_cmp);
            let ys: f64 = (1..=cfg.k)
                .map(|k| {
                    let denom = binomial(m, k);
                    // E[min] = Σ_i (f_(i) − f_(i−1)) · P(min ≥ f_(i))
                    let mut e = 0.0;
                    let mut prev = 0.0;
                    for (i, &fi) in f.iter().enumerate() {
                        e += (fi - prev) * binomial(m - i, k) / denom;
                        prev = fi;
                    }
                    1.0 - e
                })
                .sum();
            ys / cfg.k as f64
        });
        total += v;
    }
    Ok(total / labels.len() as f64)
}

/// Scores for one evaluated set.
#[derive(Clone, Debug, PartialEq)]
pub struct DbaReport {
    pub mode: String,
    pub samples: usize,
    pub dba: f64,
    pub top_k: [f64; 3],
    /// Scenario id → (sample count, DBA).
    pub per_scenario: BTreeMap<u32, (usize, f64)>,
    pub confusion: Vec<Vec<u64>>,
}

/// Ranked predictions and labels for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub seq_id: String,
    pub scenario: u32,
    pub ranked: Vec<usize>,
    pub label: usize,
}

impl DbaReport {
    pub fn from_samples(
        mode: &str,
        samples: &[ScoredSample],
        m: usize,
        cfg: &DbaConfig,
    ) -> Result<Self> {
        let preds: Vec<Vec<usize>> = samples.iter().map(|s| s.ranked.clone()).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let dba = dba_score(&preds, &labels, cfg)?;
        let mut top_k = [0.0; 3];
        for (k, slot) in top_k.iter_mut().enumerate() {
            *slot = topk_accuracy(&preds, &labels, k + 1)?;
        }
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry(s.scenario).or_default().push(i);
        }
        let mut per_scenario = BTreeMap::new();
        for (sc, idx) in groups {
            let p: Vec<Vec<usize>> = idx.iter().map(|&i| preds[i].clone()).collect();
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            per_scenario.insert(sc, (idx.len(), dba_score(&p, &l, cfg)?));
        }
        let top1: Vec<usize> = preds.iter().map(|p| p[0]).collect();
        Ok(Self {
            mode: mode.to_string(),
            samples: samples.len(),
            dba,
            top_k,
            per_scenario,
            confusion: confusion_matrix(&top1, &labels, m)?,
        })
    }

    /// Columns `mode,scope,samples,dba,top1,top2,top3`; one `overall` row
    /// then one `scenario_<id>` row per scenario (top-K left empty there).
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::contract(format!("report write failed: {e}"));
        wr.write_record(["mode", "scope", "samples", "dba", "top1", "top2", "top3"])
            .map_err(io)?;
        wr.write_record([
            self.mode.clone(),
            "overall".into(),
            self.samples.to_string(),
            format!("{:.6}", self.dba),
            format!("{:.6}", self.top_k[0]),
            format!("{:.6}", self.top_k[1]),
            format!("{:.6}", self.top_k[2]),
        ])
        .map_err(io)?;
        for (sc, (n, d)) in &self.per_scenario {
            wr.write_record([
                self.mode.clone(),
                format!("scenario_{sc}"),
                n.to_string(),
                format!("{d:.6}"),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(io)?;
        }
        wr.flush()
            .map_err(|e| Error::contract(format!("report write failed: {e}")))
    }

    pub fn write_confusion_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::contract(format!("confusion write failed: {e}"));
        let m = self.confusion.len();
        let mut header = vec!["true\\pred".to_string()];
        header.extend((0..m).map(|i| i.to_string()));
        wr.write_record(&header).map_err(io)?;
        for (t, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|c| c.to_string()));
            wr.write_record(&rec).map_err(io)?;
        }
        wr.flush()
            .map_err(|e| Error::contract(format!("confusion write failed: {e}")))
    }
}

/// Row of an external predictions file.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct PredictionRow {
    pub seq_id: String,
    pub rank1: usize,
    pub rank2: usize,
    pub rank3: usize,
    pub label: usize,
}

/// Parse a predictions CSV with header `seq_id,rank1,rank2,rank3,label`.
pub fn parse_predictions(r: impl Read, m: usize) -> Result<Vec<PredictionRow>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let headers = rd
        .headers()
        .map_err(|e| Error::contract(format!("predictions header: {e}")))?
        .clone();
    let want = ["seq_id", "rank1", "rank2", "rank3", "label"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::contract(format!(
            "predictions header must be {}",
            want.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.deserialize::<PredictionRow>().enumerate() {
        let row = rec.map_err(|e| Error::contract(format!("predictions row {}: {e}", i + 1)))?;
        for v in [row.rank1, row.rank2, row.rank3, row.label] {
            if v >= m {
                return Err(Error::contract(format!(
                    "predictions row {}: beam {v} out of range for M = {m}",
                    i + 1
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Per-sample probability rows from an eval-mode pass over `src`.
pub fn predict_probs<F: Real, S: SampleSource<F> + ?Sized>(
    model: &BevFusionModel<F>,
    src: &S,
    ablation: Ablation,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    let needs = model.needs(ablation);
    let mut out = Vec::with_capacity(src.len());
    let idx: Vec<usize> = (0..src.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let samples = chunk
            .par_iter()
            .map(|&i| src.load(i, needs, None))
            .collect::<Result<Vec<_>>>()?;
        let input = BatchInput::collate(&samples.iter().collect::<Vec<_>>())?;
        let mut ctx = Forward::new(&model.store, Mode::Eval, 0);
        let o = model.forward(&mut ctx, &input, ablation)?;
        let p = ctx.g.value(o.probs);
        let m = p.shape()[1];
        out.extend(p.to_f64_vec().chunks(m).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Evaluate `model` over `src` with the given pathway switched off.
pub fn ablation_run<F: Real, S: SampleSource<F> + ?Sized>(
    model: &BevFusionModel<F>,
    src: &S,
    ablation: Ablation,
    cfg: &DbaConfig,
    batch_size: usize,
) -> Result<(DbaReport, Vec<Vec<f64>>)> {
    let probs = predict_probs(model, src, ablation, batch_size)?;
    let samples: Vec<ScoredSample> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| ScoredSample {
            seq_id: src.seq_id(i),
            scenario: src.scenario(i),
            ranked: rank_beams(p),
            label: src.label(i),
        })
        .collect();
    let report = DbaReport::from_samples(ablation.as_str(), &samples, model.config.beams, cfg)?;
    Ok((report, probs))
}
