//! The complete beam predictor: per-frame modality encoders, BEV fusion,
//! temporal transformer, gated GPS injection and the classification head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{CameraBackbone, CameraToBev, ConvBevEncoder, GpsMlp};
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, ConvBn, Forward, LayerNorm, Linear, BN_STEPS};
use crate::numerics::{Array, ParamId, ParamStore, Real, Var};
use crate::preprocess::{BevGridSpec, LidarChannels};

/// Observations per sample.
pub const FRAMES: usize = 5;

/// Which network is built from a [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    BevFusion,
    /// GPS embedding MLP straight into the classification head.
    GpsOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BevFusion => "bev_fusion",
            Variant::GpsOnly => "gps_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bev_fusion" => Ok(Variant::BevFusion),
            "gps_only" => Ok(Variant::GpsOnly),
            _ => Err(Error::config("model", format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub grid: usize,
    pub bev_extent: f64,
    pub c_bev: usize,
    pub c_back: usize,
    pub camera_size: usize,
    pub xattn_layers: usize,
    pub xattn_heads: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub gps_hidden: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub beams: usize,
    pub lidar_channels: LidarChannels,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BevFusion,
            grid: 128,
            bev_extent: 50.0,
            c_bev: 256,
            c_back: 512,
            camera_size: 256,
            xattn_layers: 3,
            xattn_heads: 4,
            temporal_layers: 4,
            temporal_heads: 4,
            gps_hidden: 128,
            head_hidden: 512,
            head_dropout: 0.1,
            beams: 64,
            lidar_channels: LidarChannels::HeightOnly,
        }
    }
}

impl ModelConfig {
    pub fn grid_spec(&self) -> BevGridSpec {
        BevGridSpec::square(self.bev_extent, self.grid)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec().validate()?;
        crate::encoders::backbone_stages(self.camera_size)?;
        let positive = [
            ("c_bev", self.c_bev),
            ("c_back", self.c_back),
            ("xattn_heads", self.xattn_heads),
            ("temporal_heads", self.temporal_heads),
            ("gps_hidden", self.gps_hidden),
            ("head_hidden", self.head_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be >= 1"));
            }
        }
        if self.beams < 2 {
            return Err(Error::config("beams", "codebook needs at least 2 beams"));
        }
        if !self.c_bev.is_multiple_of(self.xattn_heads) {
            return Err(Error::config(
                "xattn_heads",
                format!("does not divide c_bev = {}", self.c_bev),
            ));
        }
        if !self.c_bev.is_multiple_of(self.temporal_heads) {
            return Err(Error::config(
                "temporal_heads",
                format!("does not divide c_bev = {}", self.c_bev),
            ));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config("head_dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Architecture-defining keys and values, compared when loading a
    /// checkpoint.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model", self.variant.as_str().to_string()),
            ("grid", self.grid.to_string()),
            ("bev_extent", self.bev_extent.to_string()),
            ("c_bev", self.c_bev.to_string()),
            ("c_back", self.c_back.to_string()),
            ("camera_size", self.camera_size.to_string()),
            ("xattn_layers", self.xattn_layers.to_string()),
            ("xattn_heads", self.xattn_heads.to_string()),
            ("temporal_layers", self.temporal_layers.to_string()),
            ("temporal_heads", self.temporal_heads.to_string()),
            ("gps_hidden", self.gps_hidden.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("head_dropout", self.head_dropout.to_string()),
            ("beams", self.beams.to_string()),
            ("lidar_channels", self.lidar_channels.as_str().to_string()),
        ]
    }
}

/// Pathway switches for the ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum Ablation {
    #[default]
    Full,
    DropCamera,
    DropLidar,
    DropRadar,
    /// Both GPS pathways off.
    DropGps,
    /// Time-average of the pooled frame features; no temporal transformer.
    MeanPool,
    /// Only the last observation.
    SingleFrame,
    GpsSpatialOnly,
    GpsMlpOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::Full,
        Ablation::DropCamera,
        Ablation::DropLidar,
        Ablation::DropRadar,
        Ablation::DropGps,
        Ablation::MeanPool,
        Ablation::SingleFrame,
        Ablation::GpsSpatialOnly,
        Ablation::GpsMlpOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::DropCamera => "drop_camera",
            Ablation::DropLidar => "drop_lidar",
            Ablation::DropRadar => "drop_radar",
            Ablation::DropGps => "drop_gps",
            Ablation::MeanPool => "mean_pool",
            Ablation::SingleFrame => "single_frame",
            Ablation::GpsSpatialOnly => "gps_spatial_only",
            Ablation::GpsMlpOnly => "gps_mlp_only",
        }
    }

    pub fn uses_camera(self) -> bool {
        self != Ablation::DropCamera
    }

    pub fn uses_lidar(self) -> bool {
        self != Ablation::DropLidar
    }

    pub fn uses_radar(self) -> bool {
        self != Ablation::DropRadar
    }

    pub fn uses_gps_mask(self) -> bool {
        !matches!(self, Ablation::DropGps | Ablation::GpsMlpOnly)
    }

    pub fn uses_gps_mlp(self) -> bool {
        !matches!(self, Ablation::DropGps | Ablation::GpsSpatialOnly)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown ablation mode `{s}`")))
    }
}

/// One preprocessed sample, ready for batching. Spatial inputs are
/// `[T, C, H, W]`; `gps` is the calibrated reading fed to the MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample<F> {
    pub camera: Option<Array<F>>,
    pub lidar: Option<Array<F>>,
    pub radar: Option<Array<F>>,
    pub gps_mask: Option<Array<F>>,
    pub gps: [f64; 2],
    pub label: usize,
}

/// A stacked batch: spatial inputs `[B, T, C, H, W]`, GPS `[B, 2]`.
#[derive(Clone, Debug, Default)]
pub struct BatchInput<F> {
    pub camera: Option<Array<F>>,
    pub lidar: Option<Array<F>>,
    pub radar: Option<Array<F>>,
    pub gps_mask: Option<Array<F>>,
    pub gps: Option<Array<F>>,
}

impl<F: Real> BatchInput<F> {
    pub fn collate(samples: &[&PreparedSample<F>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        fn stack<F: Real>(items: Vec<Option<&Array<F>>>, what: &str) -> Result<Option<Array<F>>> {
            if items.iter().all(|a| a.is_none()) {
                return Ok(None);
            }
            let present: Option<Vec<&Array<F>>> = items.into_iter().collect();
            let present = present
                .ok_or_else(|| Error::contract(format!("{what} missing for part of the batch")))?;
            Array::stack(&present).map(Some)
        }
        let gps: Vec<f64> = samples.iter().flat_map(|s| s.gps).collect();
        Ok(Self {
            camera: stack(
                samples.iter().map(|s| s.camera.as_ref()).collect(),
                "camera",
            )?,
            lidar: stack(samples.iter().map(|s| s.lidar.as_ref()).collect(), "lidar")?,
            radar: stack(samples.iter().map(|s| s.radar.as_ref()).collect(), "radar")?,
            gps_mask: stack(
                samples.iter().map(|s| s.gps_mask.as_ref()).collect(),
                "gps_mask",
            )?,
            gps: Some(Array::from_f64(vec![samples.len(), 2], &gps)?),
        })
    }

    pub fn batch_size(&self) -> Option<usize> {
        [
            &self.camera,
            &self.lidar,
            &self.radar,
            &self.gps_mask,
            &self.gps,
        ]
        .into_iter()
        .flatten()
        .map(|a| a.shape()[0])
        .next()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
}

#[derive(Clone, Debug)]
struct TemporalBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct FusionParts {
    backbone: CameraBackbone,
    xattn: CameraToBev,
    lidar: ConvBevEncoder,
    radar: ConvBevEncoder,
    gps_mask: ConvBevEncoder,
    reduce: ConvBn,
    res: Vec<ResBlock>,
    temporal_pos: ParamId,
    temporal: Vec<TemporalBlock>,
    temporal_ln: LayerNorm,
    gate: ParamId,
}

#[derive(Clone, Debug)]
struct Parts {
    fusion: Option<FusionParts>,
    gps_mlp: GpsMlp,
    head1: Linear,
    head2: Linear,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub probs: Var,
    /// Temporal summary before GPS injection (absent for the GPS-only variant).
    pub z_final: Option<Var>,
    /// Input to the classification head.
    pub z_aug: Var,
}

/// Model parameters plus the layer layout that indexes them.
#[derive(Clone, Debug)]
pub struct BevFusionModel<F: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    parts: Parts,
}

impl<F: Real> BevFusionModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add_buffer(BN_STEPS, Array::zeros(vec![1]));
        let c = config.c_bev;
        let fusion = match config.variant {
            Variant::GpsOnly => None,
            Variant::BevFusion => {
                let grid = (config.grid, config.grid);
                let backbone = CameraBackbone::new(
                    &mut store,
                    "camera.backbone",
                    config.camera_size,
                    config.c_back,
                    &mut rng,
                )?;
                let xattn = CameraToBev::new(
                    &mut store,
                    "camera.xattn",
                    grid,
                    c,
                    config.c_back,
                    config.xattn_layers,
                    config.xattn_heads,
                    &mut rng,
                )?;
                let lidar = ConvBevEncoder::new(
                    &mut store,
                    "lidar",
                    config.lidar_channels.count(),
                    c,
                    &mut rng,
                );
                let radar = ConvBevEncoder::new(&mut store, "radar", 2, c, &mut rng);
                let gps_mask = ConvBevEncoder::new(&mut store, "gps_mask", 1, c, &mut rng);
                let reduce = ConvBn::new(&mut store, "fusion.reduce", 4 * c, c, 1, 1, &mut rng);
                let res = (0..2)
                    .map(|i| ResBlock {
                        a: ConvBn::new(
                            &mut store,
                            &format!("fusion.res{i}.a"),
                            c,
                            c,
                            3,
                            1,
                            &mut rng,
                        ),
                        b: ConvBn::new(
                            &mut store,
                            &format!("fusion.res{i}.b"),
                            c,
                            c,
                            3,
                            1,
                            &mut rng,
                        ),
                    })
                    .collect();
                let temporal_pos = store.add_normal("temporal.pos", &[FRAMES, c], 0.02, &mut rng);
                let temporal = (0..config.temporal_layers)
                    .map(|i| {
                        let n = |s: &str| format!("temporal.block{i}.{s}");
                        TemporalBlock {
                            ln1: LayerNorm::new(&mut store, &n("ln1"), c),
                            q: Linear::new(&mut store, &n("q"), c, c, true, &mut rng),
                            k: Linear::new(&mut store, &n("k"), c, c, true, &mut rng),
                            v: Linear::new(&mut store, &n("v"), c, c, true, &mut rng),
                            o: Linear::new(&mut store, &n("o"), c, c, true, &mut rng),
                            ln2: LayerNorm::new(&mut store, &n("ln2"), c),
                            ff1: Linear::new(&mut store, &n("ff1"), c, 4 * c, true, &mut rng),
                            ff2: Linear::new(&mut store, &n("ff2"), 4 * c, c, true, &mut rng),
                        }
                    })
                    .collect();
                let temporal_ln = LayerNorm::new(&mut store, "temporal.ln", c);
                let gate = store.add_const("gate.s", &[1], 0.0);
                Some(FusionParts {
                    backbone,
                    xattn,
                    lidar,
                    radar,
                    gps_mask,
                    reduce,
                    res,
                    temporal_pos,
                    temporal,
                    temporal_ln,
                    gate,
                })
            }
        };
        let gps_mlp = GpsMlp::new(
            &mut store,
            "gps.mlp",
            config.gps_hidden,
            c,
            config.bev_extent,
            &mut rng,
        );
        let head1 = Linear::new(
            &mut store,
            "head.fc1",
            c,
            config.head_hidden,
            true,
            &mut rng,
        );
        let head2 = Linear::new(
            &mut store,
            "head.fc2",
            config.head_hidden,
            config.beams,
            true,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            parts: Parts {
                fusion,
                gps_mlp,
                head1,
                head2,
            },
        })
    }

    /// Same architecture and values in another float type.
    pub fn cast<G: Real>(&self) -> BevFusionModel<G> {
        BevFusionModel {
            config: self.config.clone(),
            store: self.store.cast(),
            parts: self.parts.clone(),
        }
    }

    pub fn gate_id(&self) -> Option<ParamId> {
        self.parts.fusion.as_ref().map(|f| f.gate)
    }

    /// Which inputs a forward pass under `ablation` reads.
    pub fn needs(&self, ablation: Ablation) -> InputNeeds {
        match self.config.variant {
            Variant::GpsOnly => InputNeeds {
                camera: false,
                lidar: false,
                radar: false,
                gps_mask: false,
            },
            Variant::BevFusion => InputNeeds {
                camera: ablation.uses_camera(),
                lidar: ablation.uses_lidar(),
                radar: ablation.uses_radar(),
                gps_mask: ablation.uses_gps_mask(),
            },
        }
    }

    /// Full forward pass for a batch.
    pub fn forward(
        &self,
        ctx: &mut Forward<'_, F>,
        input: &BatchInput<F>,
        ablation: Ablation,
    ) -> Result<ModelOutput> {
        let b = input
            .batch_size()
            .ok_or_else(|| Error::contract("batch carries no inputs"))?;
        let gps_in = || {
            input
                .gps
                .clone()
                .ok_or_else(|| Error::contract("gps reading missing"))
        };
        let (z_final, z_aug) = match &self.parts.fusion {
            None => {
                let g = ctx.g.constant(gps_in()?);
                (None, self.parts.gps_mlp.forward(ctx, g)?)
            }
            Some(fp) => {
                let z = self.fused_sequence(ctx, fp, input, b, ablation)?;
                let z_aug = if ablation.uses_gps_mlp() {
                    let g = ctx.g.constant(gps_in()?);
                    let h = self.parts.gps_mlp.forward(ctx, g)?;
                    let s = ctx.p(fp.gate);
                    gps_inject(ctx, z, h, s)?
                } else {
                    z
                };
                (Some(z), z_aug)
            }
        };
        let logits = self.classify_logits(ctx, z_aug)?;
        let probs = ctx.g.softmax(logits)?;
        Ok(ModelOutput {
            logits,
            probs,
            z_final,
            z_aug,
        })
    }

    fn classify_logits(&self, ctx: &mut Forward<'_, F>, z: Var) -> Result<Var> {
        let h = self.parts.head1.forward(ctx, z)?;
        let h = ctx.g.relu(h);
        let h = ctx.dropout(h, self.config.head_dropout);
        self.parts.head2.forward(ctx, h)
    }

    /// Per-frame encoding and fusion, then the temporal stage: `[B, C]`.
    fn fused_sequence(
        &self,
        ctx: &mut Forward<'_, F>,
        fp: &FusionParts,
        input: &BatchInput<F>,
        b: usize,
        ablation: Ablation,
    ) -> Result<Var> {
        let single = ablation == Ablation::SingleFrame;
        let t = if single { 1 } else { FRAMES };
        let n = b * t;
        let c = self.config.c_bev;
        let gsz = self.config.grid;
        let zero = |ctx: &mut Forward<'_, F>| ctx.g.constant(Array::zeros(vec![n, c, gsz, gsz]));

        let frames =
            |a: &Option<Array<F>>, what: &'static str, ch: usize, hw: usize| -> Result<Array<F>> {
                let a = a.as_ref().ok_or_else(|| {
                    Error::contract(format!("{what} input missing and not dropped"))
                })?;
                let want = [b, FRAMES, ch, hw, hw];
                if a.shape() != want {
                    return Err(Error::dim(what, a.shape(), &want));
                }
                if single {
                    let per = ch * hw * hw;
                    let mut out = Vec::with_capacity(b * per);
                    for i in 0..b {
                        let s = (i * FRAMES + FRAMES - 1) * per;
                        out.extend_from_slice(&a.data()[s..s + per]);
                    }
                    Array::new(vec![n, ch, hw, hw], out)
                } else {
                    a.clone().reshape(vec![n, ch, hw, hw])
                }
            };

        let cam = if ablation.uses_camera() {
            let x = frames(&input.camera, "camera", 3, self.config.camera_size)?;
            let x = ctx.g.constant(x);
            let f = fp.backbone.forward(ctx, x)?;
            fp.xattn.forward(ctx, f)?
        } else {
            zero(ctx)
        };
        let lid = if ablation.uses_lidar() {
            let x = frames(
                &input.lidar,
                "lidar",
                self.config.lidar_channels.count(),
                gsz,
            )?;
            let x = ctx.g.constant(x);
            fp.lidar.forward(ctx, x)?
        } else {
            zero(ctx)
        };
        let rad = if ablation.uses_radar() {
            let x = frames(&input.radar, "radar", 2, gsz)?;
            let x = ctx.g.constant(x);
            fp.radar.forward(ctx, x)?
        } else {
            zero(ctx)
        };
        let gm = if ablation.uses_gps_mask() {
            let x = frames(&input.gps_mask, "gps_mask", 1, gsz)?;
            let x = ctx.g.constant(x);
            fp.gps_mask.forward(ctx, x)?
        } else {
            zero(ctx)
        };

        let fused = fuse_bev(ctx, fp, [cam, lid, rad, gm])?;
        let pooled = ctx.g.reshape(fused, &[n, c, gsz * gsz])?;
        let pooled = ctx.g.mean_axis(pooled, 2)?;
        let seq = ctx.g.reshape(pooled, &[b, t, c])?;
        if ablation == Ablation::MeanPool {
            return ctx.g.mean_axis(seq, 1);
        }
        let pos = ctx.p(fp.temporal_pos);
        let pos = if single {
            ctx.g.slice(pos, 0, FRAMES - 1, 1)?
        } else {
            pos
        };
        let x = ctx.g.add_bcast(seq, pos)?;
        temporal_encode(ctx, fp, x, self.config.temporal_heads)
    }
}

/// Which spatial inputs a forward pass reads; the GPS reading is always read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputNeeds {
    pub camera: bool,
    pub lidar: bool,
    pub radar: bool,
    pub gps_mask: bool,
}

impl InputNeeds {
    pub const ALL: Self = Self {
        camera: true,
        lidar: true,
        radar: true,
        gps_mask: true,
    };
}

/// Channel concat of the four modality maps, 1×1 reduction, two residual
/// refinement blocks.
fn fuse_bev<F: Real>(ctx: &mut Forward<'_, F>, fp: &FusionParts, feats: [Var; 4]) -> Result<Var> {
    let s0 = ctx.g.shape(feats[0]).to_vec();
    for &f in &feats[1..] {
        if ctx.g.shape(f) != s0.as_slice() {
            return Err(Error::dim("fuse_bev", &s0, ctx.g.shape(f)));
        }
    }
    let cat = ctx.g.concat(&feats, 1)?;
    let mut x = fp.reduce.forward_relu(ctx, cat)?;
    for r in &fp.res {
        let h = r.a.forward_relu(ctx, x)?;
        let h = r.b.forward(ctx, h)?;
        let s = ctx.g.add(x, h)?;
        x = ctx.g.relu(s);
    }
    Ok(x)
}

/// Pre-norm transformer blocks over `[B, T, C]`, final layer norm, mean
/// over time.
fn temporal_encode<F: Real>(
    ctx: &mut Forward<'_, F>,
    fp: &FusionParts,
    mut x: Var,
    heads: usize,
) -> Result<Var> {
    for blk in &fp.temporal {
        let h = blk.ln1.forward(ctx, x)?;
        let q = blk.q.forward(ctx, h)?;
        let k = blk.k.forward(ctx, h)?;
        let v = blk.v.forward(ctx, h)?;
        let a = multi_head_attention(ctx, q, k, v, heads)?;
        let a = blk.o.forward(ctx, a)?;
        x = ctx.g.add(x, a)?;
        let h = blk.ln2.forward(ctx, x)?;
        let h = blk.ff1.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let h = blk.ff2.forward(ctx, h)?;
        x = ctx.g.add(x, h)?;
    }
    let x = fp.temporal_ln.forward(ctx, x)?;
    ctx.g.mean_axis(x, 1)
}

/// `z + tanh(s) · h`.
pub fn gps_inject<F: Real>(ctx: &mut Forward<'_, F>, z: Var, h: Var, s: Var) -> Result<Var> {
    let gate = ctx.g.tanh(s);
    let gh = ctx.g.mul_scalar(h, gate)?;
    ctx.g.add(z, gh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{apply_bn_updates, Mode};
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            grid: 8,
            c_bev: 16,
            c_back: 8,
            camera_size: 16,
            xattn_layers: 2,
            xattn_heads: 4,
            temporal_layers: 2,
            temporal_heads: 4,
            gps_hidden: 8,
            head_hidden: 16,
            beams: 8,
            ..ModelConfig::default()
        }
    }

    fn rand_arr<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array<F> {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Array::from_f64(shape.to_vec(), &v).unwrap()
    }

    fn tiny_sample<F: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> PreparedSample<F> {
        let g = cfg.grid;
        let mut mask = Array::zeros(vec![FRAMES, 1, g, g]);
        let cell = rng.gen_range(0..g * g);
        for t in 0..FRAMES {
            mask.data_mut()[t * g * g + cell] = F::one();
        }
        PreparedSample {
            camera: Some(rand_arr(
                rng,
                &[FRAMES, 3, cfg.camera_size, cfg.camera_size],
                -2.0,
                2.0,
            )),
            lidar: Some(rand_arr(rng, &[FRAMES, 1, g, g], 0.0, 2.0)),
            radar: Some(rand_arr(rng, &[FRAMES, 2, g, g], 0.0, 1.0)),
            gps_mask: Some(mask),
            gps: [rng.gen_range(-40.0..40.0), rng.gen_range(0.0..40.0)],
            label: rng.gen_range(0..cfg.beams),
        }
    }

    fn tiny_batch<F: Real>(cfg: &ModelConfig, b: usize, seed: u64) -> BatchInput<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<PreparedSample<F>> = (0..b).map(|_| tiny_sample(cfg, &mut rng)).collect();
        BatchInput::collate(&s.iter().collect::<Vec<_>>()).unwrap()
    }

    fn eval_probs(m: &BevFusionModel<f64>, input: &BatchInput<f64>, ab: Ablation) -> Array<f64> {
        let mut ctx = Forward::new(&m.store, Mode::Eval, 0);
        let out = m.forward(&mut ctx, input, ab).unwrap();
        ctx.g.value(out.probs).clone()
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!(matches!(
            "drop_sonar".parse::<Ablation>(),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn output_shapes_and_rows_normalized() {
        let cfg = tiny_config();
        let m = BevFusionModel::<f64>::new(cfg.clone(), 1).unwrap();
        let input = tiny_batch(&cfg, 3, 2);
        for ab in Ablation::ALL {
            let p = eval_probs(&m, &input, ab);
            assert_eq!(p.shape(), &[3, 8]);
            for row in p.data().chunks(8) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{ab}");
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn gate_at_zero_is_identity_bitwise() {
        let cfg = tiny_config();
        let m = BevFusionModel::<f32>::new(cfg.clone(), 3).unwrap();
        let input = tiny_batch(&cfg, 2, 4);
        let mut ctx = Forward::new(&m.store, Mode::Eval, 0);
        let out = m.forward(&mut ctx, &input, Ablation::Full).unwrap();
        let z = ctx.g.value(out.z_final.unwrap());
        let za = ctx.g.value(out.z_aug);
        let bits = |a: &Array<f32>| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(z), bits(za));
    }

    #[test]
    fn gate_value_and_saturation() {
        let mut store = ParamStore::<f64>::new();
        let s = store.add_const("s", &[1], 0.82);
        let mut ctx = Forward::new(&store, Mode::Eval, 0);
        let z = ctx.g.constant(Array::zeros(vec![1, 4]));
        let h = ctx.g.constant(Array::full(vec![1, 4], 1.0));
        let sv = ctx.p(s);
        let out = gps_inject(&mut ctx, z, h, sv).unwrap();
        assert!((ctx.g.value(out).data()[0] - 0.675).abs() < 5e-4);
        let big = ctx.g.constant(Array::scalar(1e6).reshape(vec![1]).unwrap());
        let out = gps_inject(&mut ctx, z, h, big).unwrap();
        assert!(ctx.g.value(out).data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config();
        let m = BevFusionModel::<f64>::new(cfg.clone(), 5).unwrap();
        let input = tiny_batch(&cfg, 2, 6);
        assert_eq!(
            eval_probs(&m, &input, Ablation::Full),
            eval_probs(&m, &input, Ablation::Full)
        );
    }

    #[test]
    fn dropping_a_modality_changes_output() {
        let cfg = tiny_config();
        let m = BevFusionModel::<f64>::new(cfg.clone(), 7).unwrap();
        let input = tiny_batch(&cfg, 2, 8);
        let full = eval_probs(&m, &input, Ablation::Full);
        for ab in [
            Ablation::DropLidar,
            Ablation::DropRadar,
            Ablation::DropCamera,
        ] {
            assert!(eval_probs(&m, &input, ab).max_abs_diff(&full) > 0.0, "{ab}");
        }
    }

    #[test]
    fn missing_modality_without_drop_is_contract_error() {
        let cfg = tiny_config();
        let m = BevFusionModel::<f64>::new(cfg.clone(), 9).unwrap();
        let mut input = tiny_batch::<f64>(&cfg, 1, 10);
        input.radar = None;
        let mut ctx = Forward::new(&m.store, Mode::Eval, 0);
        assert!(matches!(
            m.forward(&mut ctx, &input, Ablation::Full),
            Err(Error::Contract(_))
        ));
        let mut ctx = Forward::new(&m.store, Mode::Eval, 0);
        assert!(m.forward(&mut ctx, &input, Ablation::DropRadar).is_ok());
    }

    #[test]
    fn batch_permutation_permutes_output() {
        let cfg = tiny_config();
        let m = BevFusionModel::<f64>::new(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s: Vec<PreparedSample<f64>> = (0..3).map(|_| tiny_sample(&cfg, &mut rng)).collect();
        let a = BatchInput::collate(&[&s[0], &s[1], &s[2]]).unwrap();
        let b = BatchInput::collate(&[&s[2], &s[0], &s[1]]).unwrap();
        let pa = eval_probs(&m, &a, Ablation::Full);
        let pb = eval_probs(&m, &b, Ablation::Full);
        let row = |p: &Array<f64>, i: usize| p.data()[i * 8..(i + 1) * 8].to_vec();
        for (ib, ia) in [(0, 2), (1, 0), (2, 1)] {
            let d: f64 = row(&pa, ia)
                .iter()
                .zip(row(&pb, ib))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn logit_shift_keeps_argmax() {
        let cfg = tiny_config();
        let m = BevFusionModel::<f64>::new(cfg.clone(), 13).unwrap();
        let input = tiny_batch(&cfg, 4, 14);
        let mut ctx = Forward::new(&m.store, Mode::Eval, 0);
        let out = m.forward(&mut ctx, &input, Ablation::Full).unwrap();
        let shifted = ctx.g.affine(out.logits, 1.0, 37.5);
        let p2 = ctx.g.softmax(shifted).unwrap();
        let argmax = |a: &Array<f64>| {
            a.data()
                .chunks(8)
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .max_by(|x, y| x.1.total_cmp(y.1))
                        .unwrap()
                        .0
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(argmax(ctx.g.value(out.probs)), argmax(ctx.g.value(p2)));
    }

    #[test]
    fn single_frame_reads_only_last_step() {
        let cfg = tiny_config();
        let m = BevFusionModel::<f64>::new(cfg.clone(), 15).unwrap();
        let input = tiny_batch::<f64>(&cfg, 2, 16);
        let mut other = input.clone();
        // scramble frames 1..4 of every spatial input
        for a in [&mut other.camera, &mut other.lidar, &mut other.radar]
            .into_iter()
            .flatten()
        {
            let per = a.numel() / (2 * FRAMES);
            for bi in 0..2 {
                for t in 0..FRAMES - 1 {
                    let s = (bi * FRAMES + t) * per;
                    a.data_mut()[s..s + per]
                        .iter_mut()
                        .for_each(|v| *v = -*v + 0.3);
                }
            }
        }
        let a = eval_probs(&m, &input, Ablation::SingleFrame);
        let b = eval_probs(&m, &other, Ablation::SingleFrame);
        assert_eq!(a, b);
        assert!(
            eval_probs(&m, &other, Ablation::Full).max_abs_diff(&eval_probs(
                &m,
                &input,
                Ablation::Full
            )) > 0.0
        );
    }

    #[test]
    fn gps_only_variant_builds_small_model() {
        let cfg = ModelConfig {
            variant: Variant::GpsOnly,
            ..tiny_config()
        };
        let m = BevFusionModel::<f64>::new(cfg.clone(), 1).unwrap();
        assert!(m.store.id("camera.xattn.query_embed").is_none());
        let input = BatchInput {
            gps: Some(Array::from_f64(vec![2, 2], &[1.0, 2.0, -3.0, 4.0]).unwrap()),
            ..Default::default()
        };
        let p = eval_probs(&m, &input, Ablation::Full);
        assert_eq!(p.shape(), &[2, 8]);
    }

    #[test]
    fn train_mode_updates_batch_norm_buffers() {
        let cfg = tiny_config();
        let mut m = BevFusionModel::<f64>::new(cfg.clone(), 17).unwrap();
        let input = tiny_batch(&cfg, 2, 18);
        let before = m
            .store
            .value(m.store.id("lidar.block0.bn.running_mean").unwrap())
            .clone();
        let updates = {
            let mut ctx = Forward::new(&m.store, Mode::Train, 0);
            m.forward(&mut ctx, &input, Ablation::Full).unwrap();
            ctx.bn_updates
        };
        apply_bn_updates(&mut m.store, &updates);
        let after = m
            .store
            .value(m.store.id("lidar.block0.bn.running_mean").unwrap());
        assert!(after.max_abs_diff(&before) > 0.0);
        assert_eq!(m.store.value(m.store.id(BN_STEPS).unwrap()).data()[0], 1.0);
    }
}
