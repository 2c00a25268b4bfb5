//! Focal loss, AdamW with cosine annealing, augmentations and the seeded
//! training loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion_model::{Ablation, BatchInput, BevFusionModel, InputNeeds, PreparedSample};
use crate::metrics::{dba_score, predict_probs, rank_beams, DbaConfig};
use crate::nn::{apply_bn_updates, Forward, Mode};
use crate::numerics::{Array, Graph, ParamStore, Real, Var};
use crate::preprocess::CameraFrame;

/// Indexed access to labeled samples, loaded on demand.
pub trait SampleSource<F: Real>: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, i: usize) -> usize;
    fn scenario(&self, i: usize) -> u32;
    fn seq_id(&self, i: usize) -> String;
    /// Load and preprocess sample `i`, skipping inputs the model will not
    /// read. `jitter` is applied to camera pixels before normalization.
    fn load(
        &self,
        i: usize,
        needs: InputNeeds,
        jitter: Option<PhotometricJitter>,
    ) -> Result<PreparedSample<F>>;
}

/// Samples already held in memory; photometric jitter is not applicable.
#[derive(Clone, Debug, Default)]
pub struct MemorySource<F> {
    pub samples: Vec<PreparedSample<F>>,
    pub scenarios: Vec<u32>,
}

impl<F: Real> MemorySource<F> {
    pub fn new(samples: Vec<PreparedSample<F>>) -> Self {
        let scenarios = vec![0; samples.len()];
        Self { samples, scenarios }
    }
}

impl<F: Real> SampleSource<F> for MemorySource<F> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    fn scenario(&self, i: usize) -> u32 {
        self.scenarios[i]
    }

    fn seq_id(&self, i: usize) -> String {
        format!("mem_{i:05}")
    }

    fn load(
        &self,
        i: usize,
        needs: InputNeeds,
        _jitter: Option<PhotometricJitter>,
    ) -> Result<PreparedSample<F>> {
        let s = &self.samples[i];
        Ok(PreparedSample {
            camera: s.camera.clone().filter(|_| needs.camera),
            lidar: s.lidar.clone().filter(|_| needs.lidar),
            radar: s.radar.clone().filter(|_| needs.radar),
            gps_mask: s.gps_mask.clone().filter(|_| needs.gps_mask),
            gps: s.gps,
            label: s.label,
        })
    }
}

/// A view of `inner` restricted to `indices`.
pub struct Subset<'a, S: ?Sized> {
    pub inner: &'a S,
    pub indices: &'a [usize],
}

impl<F: Real, S: SampleSource<F> + ?Sized> SampleSource<F> for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn label(&self, i: usize) -> usize {
        self.inner.label(self.indices[i])
    }

    fn scenario(&self, i: usize) -> u32 {
        self.inner.scenario(self.indices[i])
    }

    fn seq_id(&self, i: usize) -> String {
        self.inner.seq_id(self.indices[i])
    }

    fn load(
        &self,
        i: usize,
        needs: InputNeeds,
        jitter: Option<PhotometricJitter>,
    ) -> Result<PreparedSample<F>> {
        self.inner.load(self.indices[i], needs, jitter)
    }
}

/// Mean over the batch of `−α_m (1 − p_m)^γ ln p_m` at the true class,
/// with the log clamped at 1e-12.
pub fn focal_loss<F: Real>(
    g: &mut Graph<F>,
    probs: Var,
    labels: &[usize],
    alpha: &[f64],
    gamma: f64,
) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::config("focal_gamma", "must be >= 0"));
    }
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || alpha.len() != s[1] {
        return Err(Error::dim("focal_loss", &s, &[labels.len(), alpha.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::contract(format!(
            "label {bad} out of range for M = {}",
            s[1]
        )));
    }
    let p = g.gather_rows(probs, labels)?;
    let logp = g.ln_clamped(p, F::from_f64_lossy(1e-12));
    let w: Vec<f64> = labels.iter().map(|&l| -alpha[l]).collect();
    let w = g.constant(Array::from_f64(vec![labels.len()], &w)?);
    let mut per = g.mul(logp, w)?;
    if gamma != 0.0 {
        let q = g.affine(p, -F::one(), F::one());
        let q = g.powf(q, F::from_f64_lossy(gamma));
        per = g.mul(per, q)?;
    }
    Ok(g.mean_all(per))
}

/// `α_m = N / (M (count_m + 1))`, rescaled to mean 1.
pub fn class_weights(labels: &[usize], m: usize) -> Result<Vec<f64>> {
    if labels.is_empty() || m == 0 {
        return Err(Error::contract("class weights need a non-empty label set"));
    }
    let mut counts = vec![0usize; m];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::contract(format!("label {l} out of range for M = {m}")))? += 1;
    }
    let n = labels.len() as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| n / (m as f64 * (c as f64 + 1.0)))
        .collect();
    let mean = raw.iter().sum::<f64>() / m as f64;
    Ok(raw.into_iter().map(|a| a / mean).collect())
}

/// `0.5 · lr · (1 + cos(π · epoch / epochs))`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr: f64) -> f64 {
    if epochs == 0 {
        return lr;
    }
    let e = epoch.min(epochs) as f64;
    0.5 * lr * (1.0 + (std::f64::consts::PI * e / epochs as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(k, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        Ok(())
    }
}

/// AdamW moments, one buffer per parameter entry (empty for buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| {
                    if e.trainable {
                        vec![F::zero(); e.value.numel()]
                    } else {
                        Vec::new()
                    }
                })
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected AdamW update from the gradients held in `store`.
    /// Decay is decoupled: `p ← p − lr·wd·p`, then the Adam step.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        cfg: &OptimizerConfig,
        lr: f64,
    ) -> Result<()> {
        for e in store.entries() {
            if e.trainable && e.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}`",
                    e.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let f = F::from_f64_lossy;
        let (b1, b2, eps) = (f(cfg.beta1), f(cfg.beta2), f(cfg.eps));
        let decay = f(1.0 - lr * cfg.weight_decay);
        let (lr_f, bc1, bc2) = (f(lr), f(bc1), f(bc2));
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = e.grad.data().to_vec();
            for (((p, g), mi), vi) in e
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * g;
                *vi = b2 * *vi + (F::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p * decay;
                *p = *p - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let s = F::from_f64_lossy(max_norm / norm);
        for e in store.entries_mut() {
            if e.trainable {
                e.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
            }
        }
    }
    norm
}

/// Multiplicative colour jitter factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl PhotometricJitter {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    /// Each factor uniform in `[0.8, 1.2]`.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            brightness: rng.gen_range(0.8..=1.2),
            contrast: rng.gen_range(0.8..=1.2),
            saturation: rng.gen_range(0.8..=1.2),
        }
    }
}

/// Brightness, then contrast about the mean gray level, then saturation
/// about each pixel's gray level; clamped to `[0, 255]` after each step.
pub fn photometric_augment(frame: &CameraFrame, j: PhotometricJitter) -> CameraFrame {
    let gray = |p: &[f32]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let clamp = |v: f32| v.clamp(0.0, 255.0);
    let mut px: Vec<f32> = frame
        .pixels()
        .iter()
        .map(|&v| clamp(v as f32 * j.brightness))
        .collect();
    if j.contrast != 1.0 {
        let n = (px.len() / 3).max(1) as f32;
        let mean = px.chunks(3).map(gray).sum::<f32>() / n;
        px.iter_mut()
            .for_each(|v| *v = clamp((*v - mean) * j.contrast + mean));
    }
    if j.saturation != 1.0 {
        for p in px.chunks_mut(3) {
            let g = gray(p);
            p.iter_mut()
                .for_each(|v| *v = clamp((*v - g) * j.saturation + g));
        }
    }
    let out = px.into_iter().map(|v| v.round() as u8).collect();
    CameraFrame::new(frame.height(), frame.width(), out).expect("same geometry")
}

/// Horizontal mirror of a prepared sample: every spatial input is mirrored
/// along its width axis, the GPS lateral offset is negated and the beam
/// index is reversed.
pub fn flip_augment<F: Real>(s: &PreparedSample<F>, m: usize) -> Result<PreparedSample<F>> {
    if s.label >= m {
        return Err(Error::contract(format!(
            "label {} out of range for M = {m}",
            s.label
        )));
    }
    Ok(PreparedSample {
        camera: s.camera.as_ref().map(Array::mirror_last),
        lidar: s.lidar.as_ref().map(Array::mirror_last),
        radar: s.radar.as_ref().map(Array::mirror_last),
        gps_mask: s.gps_mask.as_ref().map(Array::mirror_last),
        gps: [-s.gps[0], s.gps[1]],
        label: m - 1 - s.label,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub focal_gamma: f64,
    pub grad_clip: f64,
    pub flip_prob: f64,
    pub photometric: bool,
    pub seed: u64,
    pub ablation: Ablation,
    pub dba: DbaConfig,
    /// Record wall-clock seconds in the log. Off by default so logs are
    /// reproducible byte for byte.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 150,
            batch_size: 4,
            focal_gamma: 2.0,
            grad_clip: 5.0,
            flip_prob: 0.5,
            photometric: true,
            seed: 0,
            ablation: Ablation::Full,
            dba: DbaConfig::default(),
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.dba.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("focal_gamma", "must be >= 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_dba: f64,
    pub val_dba: Option<f64>,
    pub wall_time_s: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_dba,wall_time_s";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_default();
        format!(
            "{},{:.6e},{:.8},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.val_dba, 6),
            opt(self.wall_time_s, 1)
        )
    }
}

/// Optimizer and loop state carried across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F> {
    pub adam: AdamState<F>,
    pub epoch: usize,
    pub seed: u64,
    pub best_val_dba: Option<f64>,
}

impl<F: Real> TrainState<F> {
    pub fn new(store: &ParamStore<F>, seed: u64) -> Self {
        Self {
            adam: AdamState::new(store),
            epoch: 0,
            seed,
            best_val_dba: None,
        }
    }
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b);
    r.gen()
}

/// Plan for one sample in a batch: which augmentations to apply.
#[derive(Clone, Copy, Debug)]
struct Aug {
    index: usize,
    flip: bool,
    jitter: Option<PhotometricJitter>,
}

/// One pass over `train` in seeded shuffled order. Returns the mean loss and
/// the DBA of the training-time predictions.
pub fn train_epoch<F: Real, S: SampleSource<F> + ?Sized>(
    model: &mut BevFusionModel<F>,
    train: &S,
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
    alpha: &[f64],
    lr: f64,
) -> Result<(f64, f64)> {
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let epoch = state.epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, 1, epoch as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let needs = model.needs(cfg.ablation);
    let beams = model.config.beams;
    let (mut loss_sum, mut count) = (0.0f64, 0usize);
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let plan: Vec<Aug> = chunk
            .iter()
            .map(|&index| Aug {
                index,
                flip: rng.gen_bool(cfg.flip_prob),
                jitter: (cfg.photometric && needs.camera)
                    .then(|| PhotometricJitter::sample(&mut rng)),
            })
            .collect();
        let ctx_err = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} batch {bi}: {m}")),
            other => other,
        };
        let samples = plan
            .par_iter()
            .map(|a| {
                let s = train.load(a.index, needs, a.jitter)?;
                if a.flip {
                    flip_augment(&s, beams)
                } else {
                    Ok(s)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let batch_labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let input = BatchInput::collate(&samples.iter().collect::<Vec<_>>())?;
        drop(samples);
        let (loss, probs, updates) = {
            let seed = derive_seed(state.seed, 2, ((epoch as u64) << 32) | bi as u64);
            let mut ctx = Forward::new(&model.store, Mode::Train, seed);
            let out = model
                .forward(&mut ctx, &input, cfg.ablation)
                .map_err(ctx_err)?;
            let loss = focal_loss(&mut ctx.g, out.probs, &batch_labels, alpha, cfg.focal_gamma)?;
            let lv = ctx.g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch} batch {bi}: loss is {lv}"
                )));
            }
            let probs = ctx.g.value(out.probs).to_f64_vec();
            ctx.g.backward(loss).map_err(ctx_err)?;
            let Forward { g, bn_updates, .. } = ctx;
            model.store.zero_grads();
            g.accumulate_param_grads(&mut model.store);
            (lv, probs, bn_updates)
        };
        apply_bn_updates(&mut model.store, &updates);
        clip_grad_norm(&mut model.store, cfg.grad_clip);
        state
            .adam
            .step(&mut model.store, &cfg.optimizer, lr)
            .map_err(ctx_err)?;
        loss_sum += loss * batch_labels.len() as f64;
        count += batch_labels.len();
        preds.extend(probs.chunks(beams).map(rank_beams));
        labels.extend(batch_labels);
    }
    let k = cfg.dba.k.min(beams);
    let train_dba = dba_score(&preds, &labels, &DbaConfig { k, ..cfg.dba })?;
    Ok((loss_sum / count as f64, train_dba))
}

/// DBA of `model` on `src`.
pub fn evaluate_dba<F: Real, S: SampleSource<F> + ?Sized>(
    model: &BevFusionModel<F>,
    src: &S,
    ablation: Ablation,
    cfg: &DbaConfig,
    batch_size: usize,
) -> Result<f64> {
    let probs = predict_probs(model, src, ablation, batch_size)?;
    let preds: Vec<Vec<usize>> = probs.iter().map(|p| rank_beams(p)).collect();
    let labels: Vec<usize> = (0..src.len()).map(|i| src.label(i)).collect();
    dba_score(&preds, &labels, cfg)
}

/// Full run: cosine schedule, per-epoch validation, and a callback whenever
/// validation DBA improves (for best-checkpoint retention). `on_epoch`
/// receives every log row as it is produced.
pub fn fit<F: Real, S: SampleSource<F> + ?Sized, V: SampleSource<F> + ?Sized>(
    model: &mut BevFusionModel<F>,
    train: &S,
    val: Option<&V>,
    cfg: &TrainConfig,
    state: &mut TrainState<F>,
    mut on_improve: impl FnMut(&BevFusionModel<F>, &TrainState<F>) -> Result<()>,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let labels: Vec<usize> = (0..train.len()).map(|i| train.label(i)).collect();
    let alpha = class_weights(&labels, model.config.beams)?;
    let start = Instant::now();
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs {
        let lr = cosine_lr(state.epoch, cfg.epochs, cfg.optimizer.lr);
        let (train_loss, train_dba) = train_epoch(model, train, state, cfg, &alpha, lr)?;
        let val_dba = match val {
            Some(v) if !v.is_empty() => Some(evaluate_dba(
                model,
                v,
                cfg.ablation,
                &cfg.dba,
                cfg.batch_size,
            )?),
            _ => None,
        };
        let row = EpochLog {
            epoch: state.epoch + 1,
            lr,
            train_loss,
            train_dba,
            val_dba,
            wall_time_s: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {} lr {:.3e} loss {:.4} train_dba {:.4} val_dba {}",
            row.epoch,
            lr,
            train_loss,
            train_dba,
            val_dba
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into())
        );
        state.epoch += 1;
        let improved = match (val_dba, state.best_val_dba) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            state.best_val_dba = val_dba;
            on_improve(model, state)?;
        }
        on_epoch(&row)?;
        logs.push(row);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion_model::{ModelConfig, FRAMES};
    use proptest::prelude::*;
    use rand::Rng;

    fn probs_graph(rows: &[Vec<f64>]) -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let m = rows[0].len();
        let flat: Vec<f64> = rows.concat();
        let p = g.leaf(Array::from_f64(vec![rows.len(), m], &flat).unwrap(), true);
        (g, p)
    }

    #[test]
    fn focal_worked_examples() {
        let (mut g, p) = probs_graph(&[vec![0.5, 0.5]]);
        let l = focal_loss(&mut g, p, &[0], &[1.0, 1.0], 2.0).unwrap();
        assert!((g.value(l).data()[0] - 0.25 * 2f64.ln()).abs() < 1e-9);
        let (mut g, p) = probs_graph(&[vec![1.0, 0.0]]);
        let l = focal_loss(&mut g, p, &[0], &[1.0, 1.0], 2.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(p).unwrap().is_finite());
        let (mut g, p) = probs_graph(&[vec![0.5, 0.5]]);
        assert!(matches!(
            focal_loss(&mut g, p, &[2], &[1.0, 1.0], 2.0),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn focal_gamma0_is_cross_entropy(raw in prop::collection::vec(0.01f64..1.0, 2..9), seed in 0usize..100) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let label = seed % p.len();
            let (mut g, v) = probs_graph(std::slice::from_ref(&p));
            let l = focal_loss(&mut g, v, &[label], &vec![1.0; p.len()], 0.0).unwrap();
            prop_assert!((g.value(l).data()[0] + p[label].ln()).abs() < 1e-10);
        }

        #[test]
        fn focal_is_nonnegative(raw in prop::collection::vec(0.0f64..1.0, 2..9), gamma in 0.0f64..4.0) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let (mut g, v) = probs_graph(std::slice::from_ref(&p));
            let l = focal_loss(&mut g, v, &[0], &vec![1.0; p.len()], gamma).unwrap();
            prop_assert!(g.value(l).data()[0] >= 0.0);
        }

        #[test]
        fn cosine_is_non_increasing(epochs in 1usize..300, lr in 1e-6f64..1.0) {
            for e in 0..epochs {
                prop_assert!(cosine_lr(e + 1, epochs, lr) <= cosine_lr(e, epochs, lr));
            }
        }
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[0, 0, 1, 1, 2, 2], 3).unwrap();
        assert!(w.iter().all(|&a| (a - 1.0).abs() < 1e-12));
        let mut labels = vec![0; 9];
        labels.push(1);
        let w = class_weights(&labels, 2).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 5.0 / 3.0).abs() < 1e-12);
        let w = class_weights(&[0, 0], 3).unwrap();
        assert!(w.iter().all(|a| a.is_finite() && *a > 0.0));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 150, 1e-4), 1e-4);
        assert!(cosine_lr(150, 150, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(75, 150, 1e-4) - 5e-5).abs() < 1e-18);
    }

    fn one_param_store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("p", Array::from_f64(vec![v.len()], v).unwrap());
        s
    }

    #[test]
    fn adamw_examples() {
        let cfg0 = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = one_param_store(&[1.0, -2.0]);
        let mut st = AdamState::new(&s);
        st.step(&mut s, &cfg0, 0.1).unwrap();
        assert_eq!(s.value(s.id("p").unwrap()).data(), &[1.0, -2.0]);

        let cfg = OptimizerConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut s = one_param_store(&[1.0, -2.0]);
        let mut st = AdamState::new(&s);
        st.step(&mut s, &cfg, 0.1).unwrap();
        let got = s.value(s.id("p").unwrap()).data().to_vec();
        assert!((got[0] - 0.999).abs() < 1e-15 && (got[1] + 1.998).abs() < 1e-15);

        let mut s = one_param_store(&[0.0]);
        let id = s.id("p").unwrap();
        s.add_grad(id, &[1.0]);
        let mut st = AdamState::new(&s);
        st.step(&mut s, &cfg0, 0.1).unwrap();
        assert!((s.value(id).data()[0] + 0.1).abs() < 1e-8);

        s.zero_grads();
        s.add_grad(id, &[f64::NAN]);
        assert!(matches!(
            st.step(&mut s, &cfg0, 0.1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn clip_limits_global_norm() {
        let mut s = one_param_store(&[0.0, 0.0]);
        let id = s.id("p").unwrap();
        s.add_grad(id, &[30.0, 40.0]);
        assert_eq!(clip_grad_norm(&mut s, 5.0), 50.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn photometric_examples() {
        let f =
            CameraFrame::new(32, 32, (0..32 * 32 * 3).map(|i| (i % 256) as u8).collect()).unwrap();
        assert_eq!(photometric_augment(&f, PhotometricJitter::IDENTITY), f);
        let px = |v: u8| CameraFrame::new(32, 32, vec![v; 32 * 32 * 3]).unwrap();
        let j = PhotometricJitter {
            brightness: 1.2,
            ..PhotometricJitter::IDENTITY
        };
        assert!(photometric_augment(&px(200), j)
            .pixels()
            .iter()
            .all(|&v| v == 240));
        assert!(photometric_augment(&px(250), j)
            .pixels()
            .iter()
            .all(|&v| v == 255));
    }

    fn sample(m: usize, label: usize) -> PreparedSample<f32> {
        let ramp = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Array::new(shape.to_vec(), (0..n).map(|i| i as f32 * 0.5).collect()).unwrap()
        };
        let _ = m;
        PreparedSample {
            camera: Some(ramp(&[FRAMES, 3, 16, 16])),
            lidar: Some(ramp(&[FRAMES, 1, 8, 8])),
            radar: Some(ramp(&[FRAMES, 2, 8, 8])),
            gps_mask: Some(ramp(&[FRAMES, 1, 8, 8])),
            gps: [3.0, 7.0],
            label,
        }
    }

    #[test]
    fn flip_is_involution_and_relabels() {
        for m in [8, 64] {
            for label in [0, 1, m / 2, m - 1] {
                let s = sample(m, label);
                let f = flip_augment(&s, m).unwrap();
                assert_eq!(f.label, m - 1 - label);
                assert_eq!(f.gps, [-3.0, 7.0]);
                assert_ne!(f.camera, s.camera);
                assert_eq!(flip_augment(&f, m).unwrap(), s);
            }
        }
        assert_eq!(flip_augment(&sample(64, 0), 64).unwrap().label, 63);
    }

    pub(crate) fn separable_set(cfg: &ModelConfig, n: usize, seed: u64) -> MemorySource<f64> {
        // label determined by which column band of the LiDAR map is lit
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = cfg.grid;
        let samples = (0..n)
            .map(|_| {
                let label = rng.gen_range(0..cfg.beams);
                let col = label * g / cfg.beams;
                let mut lidar = Array::zeros(vec![FRAMES, 1, g, g]);
                for t in 0..FRAMES {
                    for r in 0..g {
                        lidar.data_mut()[(t * g + r) * g + col] = 1.0;
                    }
                }
                let gx = (label as f64 + 0.5) / cfg.beams as f64 * 2.0 - 1.0;
                PreparedSample {
                    camera: Some(Array::zeros(vec![
                        FRAMES,
                        3,
                        cfg.camera_size,
                        cfg.camera_size,
                    ])),
                    lidar: Some(lidar),
                    radar: Some(Array::zeros(vec![FRAMES, 2, g, g])),
                    gps_mask: Some(Array::zeros(vec![FRAMES, 1, g, g])),
                    gps: [gx * cfg.bev_extent * 0.8, 10.0],
                    label,
                }
            })
            .collect();
        MemorySource::new(samples)
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            grid: 8,
            c_bev: 16,
            c_back: 8,
            camera_size: 16,
            xattn_layers: 1,
            xattn_heads: 2,
            temporal_layers: 1,
            temporal_heads: 2,
            gps_hidden: 8,
            head_hidden: 16,
            beams: 4,
            ..ModelConfig::default()
        }
    }

    fn train_cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                lr,
                ..Default::default()
            },
            epochs,
            batch_size: 8,
            photometric: false,
            seed: 3,
            dba: DbaConfig { k: 3, delta: 5.0 },
            ..Default::default()
        }
    }

    fn run(
        model: &mut BevFusionModel<f64>,
        data: &MemorySource<f64>,
        cfg: &TrainConfig,
    ) -> Vec<EpochLog> {
        let mut st = TrainState::new(&model.store, cfg.seed);
        fit(
            model,
            data,
            Some(data),
            cfg,
            &mut st,
            |_, _| Ok(()),
            |_| Ok(()),
        )
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = tiny_cfg();
        let data = separable_set(&cfg, 16, 1);
        let mut m = BevFusionModel::<f64>::new(
            ModelConfig {
                head_dropout: 0.0,
                ..cfg
            },
            2,
        )
        .unwrap();
        let before: Vec<_> = m
            .store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.clone())
            .collect();
        let tc = TrainConfig {
            flip_prob: 0.0,
            batch_size: 16,
            ..train_cfg(2, 0.0)
        };
        let logs = run(&mut m, &data, &tc);
        let after: Vec<_> = m
            .store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.clone())
            .collect();
        assert_eq!(before, after);
        assert!((logs[0].train_loss - logs[1].train_loss).abs() < 1e-9 * logs[0].train_loss.abs());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = tiny_cfg();
        let data = separable_set(&cfg, 16, 4);
        let go = || {
            let mut m = BevFusionModel::<f64>::new(cfg.clone(), 5).unwrap();
            let logs = run(&mut m, &data, &train_cfg(2, 1e-3));
            logs.iter().map(EpochLog::csv_line).collect::<Vec<_>>()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let cfg = tiny_cfg();
        let data = separable_set(&cfg, 64, 6);
        let mut m = BevFusionModel::<f64>::new(cfg, 7).unwrap();
        let tc = TrainConfig {
            flip_prob: 0.0,
            ..train_cfg(5, 3e-4)
        };
        let logs = run(&mut m, &data, &tc);
        let losses: Vec<f64> = logs.iter().map(|l| l.train_loss).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn improvement_callback_fires_on_first_epoch() {
        let cfg = tiny_cfg();
        let data = separable_set(&cfg, 8, 8);
        let mut m = BevFusionModel::<f64>::new(cfg, 9).unwrap();
        let tc = train_cfg(2, 1e-3);
        let mut st = TrainState::new(&m.store, tc.seed);
        let mut hits = 0;
        fit(
            &mut m,
            &data,
            Some(&data),
            &tc,
            &mut st,
            |_, _| {
                hits += 1;
                Ok(())
            },
            |_| Ok(()),
        )
        .unwrap();
        assert!(hits >= 1);
        assert_eq!(st.epoch, 2);
    }
}
