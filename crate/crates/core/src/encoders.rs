//! Modality encoders onto the shared BEV grid: camera backbone with
//! query-based cross-attention, conv encoders for LiDAR / radar / GPS masks,
//! and the dense GPS embedding MLP.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, ConvBn, Forward, LayerNorm, Linear};
use crate::numerics::{Array, ParamId, ParamStore, Real, Var};

/// Camera features come out at this spatial size (8×8 = 64 tokens).
pub const CAMERA_TOKENS_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Camera,
    Lidar,
    Radar,
    GpsSpatial,
}

/// A modality's feature map on the BEV grid, `[B, C_bev, H_bev, W_bev]`.
#[derive(Clone, Copy, Debug)]
pub struct BevFeature {
    pub data: Var,
    pub modality: Modality,
}

/// Number of stride-2 stages taking a `size`×`size` image to 8×8.
pub fn backbone_stages(size: usize) -> Result<usize> {
    if size < 2 * CAMERA_TOKENS_SIDE
        || !size.is_multiple_of(CAMERA_TOKENS_SIDE)
        || !(size / CAMERA_TOKENS_SIDE).is_power_of_two()
    {
        return Err(Error::config(
            "camera_size",
            format!("{size} is not 8·2^k with k >= 1"),
        ));
    }
    Ok((size / CAMERA_TOKENS_SIDE).trailing_zeros() as usize)
}

#[derive(Clone, Debug)]
struct BackboneStage {
    main: ConvBn,
    shortcut_w: ParamId,
    shortcut_b: ParamId,
}

/// Randomly initialized strided CNN standing in for an ImageNet ResNet.
/// Each stage is `ReLU(BN(conv3×3/2(x)) + conv1×1/2(x))`; channel widths
/// follow 32→64→128→256 scaled by `C_back / 512`, ending at `C_back`.
#[derive(Clone, Debug)]
pub struct CameraBackbone {
    stages: Vec<BackboneStage>,
    input_size: usize,
    out_channels: usize,
}

impl CameraBackbone {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input_size: usize,
        c_back: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = backbone_stages(input_size)?;
        let mut cin = 3;
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let cout = if i + 1 == n {
                c_back
            } else {
                ((32usize << i) * c_back / 512).max(4)
            };
            let main = ConvBn::new(store, &format!("{name}.stage{i}"), cin, cout, 3, 2, rng);
            let std = (1.0 / cin as f64).sqrt();
            let shortcut_w = store.add_normal(
                &format!("{name}.stage{i}.shortcut.w"),
                &[cout, cin, 1, 1],
                std,
                rng,
            );
            let shortcut_b = store.add_const(&format!("{name}.stage{i}.shortcut.b"), &[cout], 0.0);
            stages.push(BackboneStage {
                main,
                shortcut_w,
                shortcut_b,
            });
            cin = cout;
        }
        Ok(Self {
            stages,
            input_size,
            out_channels: c_back,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[N, 3, S, S]` → `[N, C_back, 8, 8]`.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, img: Var) -> Result<Var> {
        let s = ctx.g.shape(img).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(Error::dim(
                "camera_backbone",
                &s,
                &[0, 3, self.input_size, self.input_size],
            ));
        }
        let mut x = img;
        for st in &self.stages {
            let main = st.main.forward(ctx, x)?;
            let (w, b) = (ctx.p(st.shortcut_w), ctx.p(st.shortcut_b));
            let skip = ctx.g.conv2d(x, w, Some(b), 2, 0)?;
            let sum = ctx.g.add(main, skip)?;
            x = ctx.g.relu(sum);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct CrossAttnLayer {
    w_k: Linear,
    w_v: Linear,
    w_o: Linear,
    norm: LayerNorm,
}

/// Learned camera-to-BEV projection: one query per BEV cell attends over
/// the 64 camera tokens. Each layer is attention → output projection →
/// residual with the layer's input queries → layer norm. No feed-forward
/// sublayer. Positional encodings enter once, at the first layer.
#[derive(Clone, Debug)]
pub struct CameraToBev {
    pub query_embed: ParamId,
    pub pos_embed: ParamId,
    layers: Vec<CrossAttnLayer>,
    heads: usize,
    grid: (usize, usize),
    c_bev: usize,
}

impl CameraToBev {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        grid: (usize, usize),
        c_bev: usize,
        c_back: usize,
        n_layers: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !c_bev.is_multiple_of(heads) {
            return Err(Error::config(
                "xattn_heads",
                format!("C_bev {c_bev} not divisible by {heads} heads"),
            ));
        }
        let cells = grid.0 * grid.1;
        let query_embed =
            store.add_normal(&format!("{name}.query_embed"), &[cells, c_bev], 1.0, rng);
        let pos_embed = store.add_normal(&format!("{name}.pos_embed"), &[cells, c_bev], 0.1, rng);
        let layers = (0..n_layers)
            .map(|i| CrossAttnLayer {
                w_k: Linear::new(
                    store,
                    &format!("{name}.layer{i}.w_k"),
                    c_back,
                    c_bev,
                    false,
                    rng,
                ),
                w_v: Linear::new(
                    store,
                    &format!("{name}.layer{i}.w_v"),
                    c_back,
                    c_bev,
                    false,
                    rng,
                ),
                w_o: Linear::new(
                    store,
                    &format!("{name}.layer{i}.w_o"),
                    c_bev,
                    c_bev,
                    false,
                    rng,
                ),
                norm: LayerNorm::new(store, &format!("{name}.layer{i}.ln"), c_bev),
            })
            .collect();
        Ok(Self {
            query_embed,
            pos_embed,
            layers,
            heads,
            grid,
            c_bev,
        })
    }

    /// `[N, C_back, 8, 8]` → `[N, C_bev, H_bev, W_bev]`.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, feat: Var) -> Result<Var> {
        let s = ctx.g.shape(feat).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(
                "camera_to_bev",
                &s,
                &[0, 0, CAMERA_TOKENS_SIDE, CAMERA_TOKENS_SIDE],
            ));
        }
        let (n, c_back) = (s[0], s[1]);
        let tokens = ctx.g.reshape(feat, &[n, c_back, s[2] * s[3]])?;
        let tokens = ctx.g.permute(tokens, &[0, 2, 1])?;
        let (e, p) = (ctx.p(self.query_embed), ctx.p(self.pos_embed));
        let q0 = ctx.g.add(e, p)?;
        let mut q = ctx.g.expand_leading(q0, n);
        for layer in &self.layers {
            let k = layer.w_k.forward(ctx, tokens)?;
            let v = layer.w_v.forward(ctx, tokens)?;
            let z = multi_head_attention(ctx, q, k, v, self.heads)?;
            let z = layer.w_o.forward(ctx, z)?;
            let r = ctx.g.add(q, z)?;
            q = layer.norm.forward(ctx, r)?;
        }
        let q = ctx.g.permute(q, &[0, 2, 1])?;
        ctx.g.reshape(q, &[n, self.c_bev, self.grid.0, self.grid.1])
    }
}

/// Three conv→BN→ReLU blocks at fixed resolution, channels
/// `Cin → C/4 → C/2 → C`.
#[derive(Clone, Debug)]
pub struct ConvBevEncoder {
    blocks: Vec<ConvBn>,
    cin: usize,
}

impl ConvBevEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        c_bev: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let widths = [(c_bev / 4).max(1), (c_bev / 2).max(1), c_bev];
        let mut prev = cin;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ConvBn::new(store, &format!("{name}.block{i}"), prev, w, 3, 1, rng);
                prev = w;
                b
            })
            .collect();
        Self { blocks, cin }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x);
        if s.len() != 4 || s[1] != self.cin {
            return Err(Error::dim("conv_bev_encoder", s, &[0, self.cin, 0, 0]));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward_relu(ctx, h)?;
        }
        Ok(h)
    }
}

/// Dense GPS embedding `LN(W2·ReLU(LN(W1·g + b1)) + b2)`.
///
/// Coordinates are divided by the grid extent before `W1`. `b1` starts
/// random: with a zero bias the first layer norm would make the embedding
/// invariant to the reading's magnitude.
#[derive(Clone, Debug)]
pub struct GpsMlp {
    l1: Linear,
    ln1: LayerNorm,
    l2: Linear,
    ln2: LayerNorm,
    input_scale: f64,
}

impl GpsMlp {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        hidden: usize,
        c_bev: usize,
        extent: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let l1 = Linear::with_std(store, &format!("{name}.fc1"), 2, hidden, false, 1.0, rng);
        let dist = Normal::new(0.0, 1.0).expect("std");
        let b1: Vec<F> = (0..hidden)
            .map(|_| F::from_f64_lossy(dist.sample(rng)))
            .collect();
        let b1 = store.add_param(
            &format!("{name}.fc1.b"),
            Array::new(vec![hidden], b1).expect("shape"),
        );
        let l1 = Linear {
            w: l1.w,
            b: Some(b1),
        };
        Self {
            l1,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), hidden),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, c_bev, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c_bev),
            input_scale: 1.0 / extent,
        }
    }

    /// `[B, 2]` calibrated coordinates → `[B, C_bev]`.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, g: Var) -> Result<Var> {
        let s = ctx.g.shape(g);
        if s.len() != 2 || s[1] != 2 {
            return Err(Error::dim("gps_mlp", s, &[0, 2]));
        }
        let x = ctx.g.scale(g, F::from_f64_lossy(self.input_scale));
        let h = self.l1.forward(ctx, x)?;
        let h = self.ln1.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        let h = self.l2.forward(ctx, h)?;
        self.ln2.forward(ctx, h)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_arr(r: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        let n = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stage_count_from_input_size() {
        assert_eq!(backbone_stages(256).unwrap(), 5);
        assert_eq!(backbone_stages(32).unwrap(), 2);
        assert!(backbone_stages(8).is_err());
        assert!(backbone_stages(48).is_err());
    }

    #[test]
    fn backbone_output_shape_and_gradient_coverage() {
        let mut store = ParamStore::<f64>::new();
        let bb = CameraBackbone::new(&mut store, "bb", 32, 16, &mut rng(1)).unwrap();
        let mut ctx = Forward::new(&store, Mode::Train, 0);
        let x = ctx.g.leaf(rand_arr(&mut rng(2), &[2, 3, 32, 32]), true);
        let y = bb.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 16, 8, 8]);
        let l = ctx.g.sum_all(y);
        ctx.g.backward(l).unwrap();
        let gx = ctx.g.grad(x).unwrap();
        let nonzero = gx.data().iter().filter(|v| v.abs() > 0.0).count();
        assert!(
            nonzero as f64 >= 0.99 * gx.numel() as f64,
            "{nonzero}/{}",
            gx.numel()
        );
    }

    #[test]
    fn backbone_rejects_wrong_size() {
        let mut store = ParamStore::<f32>::new();
        let bb = CameraBackbone::new(&mut store, "bb", 32, 16, &mut rng(1)).unwrap();
        let mut ctx = Forward::new(&store, Mode::Eval, 0);
        let x = ctx.g.constant(Array::zeros(vec![1, 3, 64, 64]));
        assert!(matches!(
            bb.forward(&mut ctx, x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backbone_zero_input_is_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let bb = CameraBackbone::new(&mut store, "bb", 32, 8, &mut rng(4)).unwrap();
        let run = || {
            let mut ctx = Forward::new(&store, Mode::Eval, 0);
            let x = ctx.g.constant(Array::zeros(vec![1, 3, 32, 32]));
            let y = bb.forward(&mut ctx, x).unwrap();
            ctx.g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    fn xattn(store: &mut ParamStore<f64>) -> CameraToBev {
        CameraToBev::new(store, "x", (4, 4), 8, 6, 2, 2, &mut rng(5)).unwrap()
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let mut store = ParamStore::<f64>::new();
        let x = xattn(&mut store);
        let mut ctx = Forward::new(&store, Mode::Eval, 0);
        let feat = ctx.g.constant(Array::full(vec![1, 6, 8, 8], 0.3));
        x.forward(&mut ctx, feat).unwrap();
        let a = ctx.g.value(ctx.attention[0]);
        assert!(a.data().iter().all(|&w| (w - 1.0 / 64.0).abs() < 1e-12));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut store = ParamStore::<f64>::new();
        let x = xattn(&mut store);
        let mut ctx = Forward::new(&store, Mode::Eval, 0);
        let feat = ctx.g.constant(rand_arr(&mut rng(6), &[2, 6, 8, 8]));
        let y = x.forward(&mut ctx, feat).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 8, 4, 4]);
        for &a in &ctx.attention {
            for row in ctx.g.value(a).data().chunks(64) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_projections_reduce_to_normed_queries() {
        let mut store = ParamStore::<f64>::new();
        let x = CameraToBev::new(&mut store, "x", (4, 4), 8, 6, 1, 2, &mut rng(7)).unwrap();
        for name in ["x.layer0.w_k.w", "x.layer0.w_v.w"] {
            let shape = store.value(store.id(name).unwrap()).shape().to_vec();
            store.set(name, Array::zeros(shape)).unwrap();
        }
        let out = |seed: u64| {
            let mut ctx = Forward::new(&store, Mode::Eval, 0);
            let feat = ctx.g.constant(rand_arr(&mut rng(seed), &[1, 6, 8, 8]));
            let y = x.forward(&mut ctx, feat).unwrap();
            ctx.g.value(y).clone()
        };
        let a = out(1);
        assert_eq!(a, out(2));
        // independent LN of E + P, laid out [C, H, W]
        let e = store.value(x.query_embed).to_f64_vec();
        let p = store.value(x.pos_embed).to_f64_vec();
        for cell in 0..16 {
            let q: Vec<f64> = (0..8).map(|c| e[cell * 8 + c] + p[cell * 8 + c]).collect();
            let m = q.iter().sum::<f64>() / 8.0;
            let v = q.iter().map(|t| (t - m).powi(2)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let want = (q[c] - m) / (v + 1e-5).sqrt();
                assert!((a.data()[c * 16 + cell] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn camera_to_bev_is_batch_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let x = xattn(&mut store);
        let feats = rand_arr(&mut rng(8), &[3, 6, 8, 8]);
        let run = |f: Array<f64>| {
            let mut ctx = Forward::new(&store, Mode::Eval, 0);
            let v = ctx.g.constant(f);
            let y = x.forward(&mut ctx, v).unwrap();
            ctx.g.value(y).clone()
        };
        let base = run(feats.clone());
        let per = 6 * 64;
        let mut swapped = feats.data().to_vec();
        let (a, b) = swapped.split_at_mut(per);
        a.swap_with_slice(&mut b[per..2 * per]);
        let out = run(Array::new(vec![3, 6, 8, 8], swapped).unwrap());
        let o = 8 * 16;
        assert_eq!(&out.data()[..o], &base.data()[2 * o..3 * o]);
        assert_eq!(&out.data()[2 * o..], &base.data()[..o]);
        assert_eq!(&out.data()[o..2 * o], &base.data()[o..2 * o]);
    }

    #[test]
    fn conv_encoder_zero_in_zero_out_and_shape() {
        let mut store = ParamStore::<f32>::new();
        let enc = ConvBevEncoder::new(&mut store, "lid", 1, 16, &mut rng(9));
        let mut ctx = Forward::new(&store, Mode::Eval, 0);
        let x = ctx.g.constant(Array::zeros(vec![2, 1, 12, 12]));
        let y = enc.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 16, 12, 12]);
        assert!(ctx.g.value(y).data().iter().all(|&v| v == 0.0));
        let bad = ctx.g.constant(Array::zeros(vec![2, 2, 12, 12]));
        assert!(enc.forward(&mut ctx, bad).is_err());
    }

    #[test]
    fn gps_mlp_zero_weights_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let mlp = GpsMlp::new(&mut store, "gps", 8, 16, 50.0, &mut rng(10));
        for e in store.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // layer-norm gammas back to 1 so only weights and biases are zero
        for name in ["gps.ln1.gamma", "gps.ln2.gamma"] {
            let n = store.value(store.id(name).unwrap()).numel();
            store.set(name, Array::full(vec![n], 1.0)).unwrap();
        }
        let mut ctx = Forward::new(&store, Mode::Eval, 0);
        let g = ctx
            .g
            .constant(Array::from_f64(vec![1, 2], &[3.0, 7.0]).unwrap());
        let y = mlp.forward(&mut ctx, g).unwrap();
        assert_eq!(ctx.g.shape(y), &[1, 16]);
        assert!(ctx.g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gps_mlp_separates_inputs() {
        for seed in 0..5 {
            let mut store = ParamStore::<f64>::new();
            let mlp = GpsMlp::new(&mut store, "gps", 128, 256, 50.0, &mut rng(seed));
            let mut ctx = Forward::new(&store, Mode::Eval, 0);
            let g = ctx
                .g
                .constant(Array::from_f64(vec![2, 2], &[3.0, 7.0, 6.0, 14.0]).unwrap());
            let y = mlp.forward(&mut ctx, g).unwrap();
            assert_eq!(ctx.g.shape(y), &[2, 256]);
            let d = ctx.g.value(y).data();
            let dist: f64 = (0..256)
                .map(|i| (d[i] - d[256 + i]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(dist > 0.0, "seed {seed}");
        }
    }
}
