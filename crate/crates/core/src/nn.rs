//! Layer building blocks shared by the encoders and the fusion model: the
//! per-pass forward context and parameter-id bundles for conv, norm and
//! linear layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{
    Array, BnMode, Graph, ParamId, ParamStore, Real, Var, BN_MOMENTUM, NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<F> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<F>,
    pub batch_var: Vec<F>,
    pub count: usize,
}

/// One forward pass: the tape, read-only parameters, mode, and side outputs.
pub struct Forward<'a, F: Real> {
    pub g: Graph<F>,
    pub store: &'a ParamStore<F>,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate<F>>,
    /// Attention-weight nodes, in creation order.
    pub attention: Vec<Var>,
    rng: ChaCha8Rng,
    warned_bn: bool,
}

impl<'a, F: Real> Forward<'a, F> {
    pub fn new(store: &'a ParamStore<F>, mode: Mode, seed: u64) -> Self {
        Self {
            g: Graph::new(),
            store,
            mode,
            bn_updates: Vec::new(),
            attention: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            warned_bn: false,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train() {
            return x;
        }
        let Self { g, rng, .. } = self;
        g.dropout(x, rate, rng)
    }
}

/// Apply collected batch-norm statistics with momentum 0.1. Running variance
/// uses the unbiased estimate.
pub fn apply_bn_updates<F: Real>(store: &mut ParamStore<F>, updates: &[BnUpdate<F>]) {
    let mom = F::from_f64_lossy(BN_MOMENTUM);
    for u in updates {
        let unbias = if u.count > 1 {
            F::from_f64_lossy(u.count as f64 / (u.count - 1) as f64)
        } else {
            F::one()
        };
        for (r, &b) in store
            .value_mut(u.mean_id)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_mean)
        {
            *r = (F::one() - mom) * *r + mom * b;
        }
        for (r, &b) in store
            .value_mut(u.var_id)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_var)
        {
            *r = (F::one() - mom) * *r + mom * b * unbias;
        }
    }
    if !updates.is_empty() {
        if let Some(id) = store.id(BN_STEPS) {
            let v = store.value_mut(id).data_mut();
            v[0] = v[0] + F::one();
        }
    }
}

/// Scalar buffer counting batch-norm statistic updates.
pub const BN_STEPS: &str = "bn_steps";

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub rmean: ParamId,
    pub rvar: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add_normal(
                &format!("{name}.w"),
                &[cout, cin, k, k],
                he_std(cin * k * k),
                rng,
            ),
            b: store.add_const(&format!("{name}.b"), &[cout], 0.0),
            gamma: store.add_const(&format!("{name}.bn.gamma"), &[cout], 1.0),
            beta: store.add_const(&format!("{name}.bn.beta"), &[cout], 0.0),
            rmean: store.add_buffer(&format!("{name}.bn.running_mean"), Array::zeros(vec![cout])),
            rvar: store.add_buffer(
                &format!("{name}.bn.running_var"),
                Array::full(vec![cout], F::one()),
            ),
            stride,
            pad: k / 2,
        }
    }

    /// `BN(conv(x))`.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.g.conv2d(x, w, Some(b), self.stride, self.pad)?;
        self.norm(ctx, y)
    }

    fn norm<F: Real>(&self, ctx: &mut Forward<'_, F>, y: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        let eps = F::from_f64_lossy(NORM_EPS);
        if ctx.train() {
            let (out, stats) = ctx.g.batch_norm(y, gamma, beta, BnMode::Train, eps)?;
            if let Some((m, v)) = stats {
                let s = ctx.g.shape(y);
                let count = s[0] * s[2] * s[3];
                ctx.bn_updates.push(BnUpdate {
                    mean_id: self.rmean,
                    var_id: self.rvar,
                    batch_mean: m,
                    batch_var: v,
                    count,
                });
            }
            Ok(out)
        } else {
            if !ctx.warned_bn {
                let untouched = ctx
                    .store
                    .id(BN_STEPS)
                    .map(|id| ctx.store.value(id).data()[0] == F::zero())
                    .unwrap_or(false);
                if untouched {
                    log::warn!(
                        "batch norm evaluated before any training step; using initial statistics"
                    );
                }
                ctx.warned_bn = true;
            }
            let store = ctx.store;
            let mode = BnMode::Eval {
                mean: store.value(self.rmean).data(),
                var: store.value(self.rvar).data(),
            };
            Ok(ctx.g.batch_norm(y, gamma, beta, mode, eps)?.0)
        }
    }

    /// `ReLU(BN(conv(x)))`.
    pub fn forward_relu<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let y = self.forward(ctx, x)?;
        Ok(ctx.g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_std(
            store,
            name,
            din,
            dout,
            bias,
            (1.0 / din.max(1) as f64).sqrt(),
            rng,
        )
    }

    pub fn with_std<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add_normal(&format!("{name}.w"), &[dout, din], std, rng),
            b: bias.then(|| store.add_const(&format!("{name}.b"), &[dout], 0.0)),
        }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_const(&format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_const(&format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.g.layer_norm(x, g, b, F::from_f64_lossy(NORM_EPS))
    }
}

/// Scaled dot-product attention over pre-projected `q: [B, Nq, C]`,
/// `k, v: [B, Nk, C]`, split into `heads` heads of width `C / heads`.
/// Records the attention weights on the context.
pub fn multi_head_attention<F: Real>(
    ctx: &mut Forward<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let qs = ctx.g.shape(q).to_vec();
    let ks = ctx.g.shape(k).to_vec();
    let (b, nq, c) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    let dk = c / heads;
    let split = |ctx: &mut Forward<'_, F>, x: Var, n: usize| -> Result<Var> {
        let x = ctx.g.reshape(x, &[b, n, heads, dk])?;
        ctx.g.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(ctx, q, nq)?;
    let kh = split(ctx, k, nk)?;
    let vh = split(ctx, v, nk)?;
    let scores = ctx.g.matmul(qh, kh, true)?;
    let scores = ctx
        .g
        .scale(scores, F::from_f64_lossy(1.0 / (dk as f64).sqrt()));
    let attn = ctx.g.softmax(scores)?;
    ctx.attention.push(attn);
    let out = ctx.g.matmul(attn, vh, false)?;
    let out = ctx.g.permute(out, &[0, 2, 1, 3])?;
    ctx.g.reshape(out, &[b, nq, c])
}
