//! Raw sensor records to model-ready arrays: camera normalization, LiDAR
//! BEV rasterization, radar range-angle / range-velocity maps, GPS
//! calibration and BEV masks.

use num_complex::{Complex, Complex32};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, fft_power_rows, Array, Real};

/// RGB image, row-major `H × W × 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CameraFrame {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl CameraFrame {
    pub const MIN_SIDE: usize = 32;

    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(Error::contract(format!(
                "camera frame {height}x{width} is smaller than {0}x{0}",
                Self::MIN_SIDE
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::dim(
                "camera frame",
                &[height, width, 3],
                &[pixels.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Left-right mirror.
    pub fn mirrored(&self) -> Self {
        let mut out = self.pixels.clone();
        let w = self.width;
        for (dst, src) in out.chunks_mut(w * 3).zip(self.pixels.chunks(w * 3)) {
            for x in 0..w {
                dst[x * 3..x * 3 + 3].copy_from_slice(&src[(w - 1 - x) * 3..(w - 1 - x) * 3 + 3]);
            }
        }
        Self {
            pixels: out,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraNormConfig {
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub out_size: (usize, usize),
}

impl Default for CameraNormConfig {
    /// ImageNet channel statistics, 256×256 output.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            out_size: (256, 256),
        }
    }
}

impl CameraNormConfig {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("camera_std", "components must be > 0"));
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            return Err(Error::config("camera_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Bilinear resize to `out_size`, scale to [0, 1], then per-channel
/// `(v - mean) / std`. Output is channel-major `[3, H, W]`.
pub fn normalize_camera<F: Real>(frame: &CameraFrame, cfg: &CameraNormConfig) -> Result<Array<F>> {
    cfg.validate()?;
    let (h, w) = (frame.height, frame.width);
    let mut planes = vec![F::zero(); 3 * h * w];
    for (i, px) in frame.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * h * w + i] = F::from_f64_lossy(px[c] as f64);
        }
    }
    let raw = Array::new(vec![3, h, w], planes)?;
    let (oh, ow) = cfg.out_size;
    let mut out = bilinear_resize(&raw, oh, ow)?;
    let inv255 = F::from_f64_lossy(1.0 / 255.0);
    for (c, plane) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let m = F::from_f64_lossy(cfg.mean[c] as f64);
        let s = F::from_f64_lossy(cfg.std[c] as f64);
        plane.iter_mut().for_each(|v| *v = (*v * inv255 - m) / s);
    }
    Ok(out)
}

/// Inverse of the affine part of [`normalize_camera`]: returns values in
/// pixel/255 units.
pub fn denormalize_camera<F: Real>(x: &Array<F>, cfg: &CameraNormConfig) -> Array<F> {
    let plane = x.numel() / 3;
    let mut out = x.clone();
    for (c, p) in out.data_mut().chunks_mut(plane).enumerate() {
        let m = F::from_f64_lossy(cfg.mean[c] as f64);
        let s = F::from_f64_lossy(cfg.std[c] as f64);
        p.iter_mut().for_each(|v| *v = *v * s + m);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.points.iter().find(|p| {
            !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite())
        }) {
            return Err(Error::contract(format!("non-finite lidar point {p:?}")));
        }
        Ok(())
    }
}

/// Square BEV grid centered on the base station.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGridSpec {
    /// Half-width in meters.
    pub extent: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self {
            extent: 50.0,
            height: 128,
            width: 128,
        }
    }
}

impl BevGridSpec {
    pub const MIN_CELLS: usize = 8;

    pub fn square(extent: f64, cells: usize) -> Self {
        Self {
            extent,
            height: cells,
            width: cells,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::config("bev_extent", "must be finite and > 0"));
        }
        if self.height < Self::MIN_CELLS || self.width < Self::MIN_CELLS {
            return Err(Error::config(
                "grid",
                format!("needs at least {} cells per side", Self::MIN_CELLS),
            ));
        }
        Ok(())
    }

    /// Cell holding `(x, y)` for rasterization; `None` outside `[-E, E)²`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let e = self.extent;
        if !(x >= -e && x < e && y >= -e && y < e) {
            return None;
        }
        let c = (((x + e) / (2.0 * e)) * self.width as f64).floor() as usize;
        let r = (((y + e) / (2.0 * e)) * self.height as f64).floor() as usize;
        Some((r.min(self.height - 1), c.min(self.width - 1)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LidarChannels {
    /// Max height only.
    #[default]
    HeightOnly,
    /// Max height, max intensity, point count.
    HeightIntensityDensity,
}

impl LidarChannels {
    pub fn as_str(self) -> &'static str {
        match self {
            LidarChannels::HeightOnly => "height",
            LidarChannels::HeightIntensityDensity => "height_intensity_density",
        }
    }

    pub fn count(self) -> usize {
        match self {
            LidarChannels::HeightOnly => 1,
            LidarChannels::HeightIntensityDensity => 3,
        }
    }
}

impl std::fmt::Display for LidarChannels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LidarChannels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "height" => Ok(LidarChannels::HeightOnly),
            "height_intensity_density" => Ok(LidarChannels::HeightIntensityDensity),
            _ => Err(Error::config(
                "lidar_channels",
                format!("unknown channel set `{s}`"),
            )),
        }
    }
}

/// Rasterize a point cloud onto the BEV grid. Empty cells are 0 in every
/// channel; points outside the extent are dropped.
pub fn lidar_to_bev<F: Real>(
    cloud: &PointCloud,
    grid: &BevGridSpec,
    channels: LidarChannels,
) -> Result<Array<F>> {
    grid.validate()?;
    cloud.validate()?;
    let plane = grid.height * grid.width;
    let mut height = vec![f64::NEG_INFINITY; plane];
    let mut intensity = vec![f64::NEG_INFINITY; plane];
    let mut density = vec![0u32; plane];
    for p in &cloud.points {
        if let Some((r, c)) = grid.cell_of(p.x as f64, p.y as f64) {
            let k = r * grid.width + c;
            height[k] = height[k].max(p.z as f64);
            intensity[k] = intensity[k].max(p.intensity as f64);
            density[k] += 1;
        }
    }
    let fill = |v: f64, k: usize| {
        if density[k] == 0 {
            F::zero()
        } else {
            F::from_f64_lossy(v)
        }
    };
    let mut data: Vec<F> = height
        .iter()
        .enumerate()
        .map(|(k, &v)| fill(v, k))
        .collect();
    if channels == LidarChannels::HeightIntensityDensity {
        data.extend(intensity.iter().enumerate().map(|(k, &v)| fill(v, k)));
        data.extend(density.iter().map(|&d| F::from_f64_lossy(d as f64)));
    }
    Array::new(vec![channels.count(), grid.height, grid.width], data)
}

/// Complex radar samples laid out `[antennas, chirps, range bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarCube {
    n_antennas: usize,
    n_chirps: usize,
    n_range: usize,
    samples: Vec<Complex32>,
}

impl RadarCube {
    pub fn new(
        n_antennas: usize,
        n_chirps: usize,
        n_range: usize,
        samples: Vec<Complex32>,
    ) -> Result<Self> {
        if n_antennas < 2 || n_chirps < 2 || n_range < 2 {
            return Err(Error::contract(format!(
                "radar cube {n_antennas}x{n_chirps}x{n_range} needs every axis >= 2"
            )));
        }
        if samples.len() != n_antennas * n_chirps * n_range {
            return Err(Error::dim(
                "radar cube",
                &[n_antennas, n_chirps, n_range],
                &[samples.len()],
            ));
        }
        Ok(Self {
            n_antennas,
            n_chirps,
            n_range,
            samples,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_antennas, self.n_chirps, self.n_range)
    }

    pub fn samples(&self) -> &[Complex32] {
        &self.samples
    }

    fn at(&self, a: usize, c: usize, r: usize) -> Complex<f64> {
        let v = self.samples[(a * self.n_chirps + c) * self.n_range + r];
        Complex::new(v.re as f64, v.im as f64)
    }
}

fn max_normalize(map: &mut [f64]) {
    let m = map.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        map.iter_mut().for_each(|v| *v /= m);
    }
}

/// Range-angle and range-velocity power maps.
///
/// RA`[r, θ]` averages `|DFT over antennas|²` across chirps; RV`[r, v]`
/// averages `|DFT over chirps|²` across antennas. Each map is scaled by its
/// own maximum to [0, 1], resized to `out`, and the two are stacked as
/// `[RA, RV]`.
pub fn radar_to_maps<F: Real>(cube: &RadarCube, out: (usize, usize)) -> Result<Array<F>> {
    let (na, nc, nr) = cube.dims();
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::dim("radar_to_maps", &[na, nc, nr], &[out.0, out.1]));
    }
    let mut ra = vec![0.0f64; nr * na];
    let mut rv = vec![0.0f64; nr * nc];
    let mut rows = Vec::with_capacity(nc * na);
    for r in 0..nr {
        rows.clear();
        for c in 0..nc {
            rows.extend((0..na).map(|a| cube.at(a, c, r)));
        }
        let p = fft_power_rows(&mut rows, na);
        for c in 0..nc {
            for a in 0..na {
                ra[r * na + a] += p[c * na + a] / nc as f64;
            }
        }
        rows.clear();
        for a in 0..na {
            rows.extend((0..nc).map(|c| cube.at(a, c, r)));
        }
        let p = fft_power_rows(&mut rows, nc);
        for a in 0..na {
            for c in 0..nc {
                rv[r * nc + c] += p[a * nc + c] / na as f64;
            }
        }
    }
    max_normalize(&mut ra);
    max_normalize(&mut rv);
    let ra = bilinear_resize(&Array::<f64>::new(vec![1, nr, na], ra)?, out.0, out.1)?;
    let rv = bilinear_resize(&Array::<f64>::new(vec![1, nr, nc], rv)?, out.0, out.1)?;
    let data = ra
        .data()
        .iter()
        .chain(rv.data())
        .map(|&v| F::from_f64_lossy(v.clamp(0.0, 1.0)))
        .collect();
    Array::new(vec![2, out.0, out.1], data)
}

/// UE position relative to the base station, meters (east, north).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsReading {
    pub dx: f64,
    pub dy: f64,
}

impl GpsReading {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ScenarioCalibration {
    pub theta_offset: f64,
}

impl ScenarioCalibration {
    pub fn new(theta_offset: f64) -> Result<Self> {
        let pi = std::f64::consts::PI;
        if !(theta_offset > -pi && theta_offset <= pi) {
            return Err(Error::contract(format!(
                "theta_offset {theta_offset} outside (-pi, pi]"
            )));
        }
        Ok(Self { theta_offset })
    }
}

/// Rotate the reading by the scenario offset into the camera-aligned frame.
pub fn calibrate_gps(g: GpsReading, cal: ScenarioCalibration) -> GpsReading {
    let (s, c) = cal.theta_offset.sin_cos();
    GpsReading {
        dx: c * g.dx - s * g.dy,
        dy: s * g.dx + c * g.dy,
    }
}

/// Inverse of [`calibrate_gps`].
pub fn uncalibrate_gps(g: GpsReading, cal: ScenarioCalibration) -> GpsReading {
    calibrate_gps(
        g,
        ScenarioCalibration {
            theta_offset: -cal.theta_offset,
        },
    )
}

/// Grid cell `(row, col)` for a calibrated reading:
/// `floor(clamp((d + E) / 2E · (cells − 1), 0, cells − 1))` per axis.
pub fn gps_cell(g: GpsReading, grid: &BevGridSpec) -> (usize, usize) {
    let e = grid.extent;
    let idx = |d: f64, cells: usize| {
        let hi = (cells - 1) as f64;
        let v = ((d + e) / (2.0 * e) * hi).clamp(0.0, hi);
        if v.is_nan() {
            0
        } else {
            v.floor() as usize
        }
    };
    (idx(g.dy, grid.height), idx(g.dx, grid.width))
}

/// One-hot `[1, H, W]` mask at [`gps_cell`].
pub fn gps_to_mask<F: Real>(g: GpsReading, grid: &BevGridSpec) -> Array<F> {
    let (r, c) = gps_cell(g, grid);
    let mut m = Array::zeros(vec![1, grid.height, grid.width]);
    m.data_mut()[r * grid.width + c] = F::one();
    m
}
