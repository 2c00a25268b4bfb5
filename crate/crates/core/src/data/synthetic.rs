//! Synthetic drive-by scenarios with a geometric beam oracle.
//!
//! The base station sits at the origin with boresight along +y. Each
//! sequence is a vehicle on a straight lateral pass at constant speed; the
//! label is the codebook beam covering the vehicle's azimuth at the last
//! observation.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::dataset::{
    write_index, write_sequence, Frame, IndexEntry, SampleSequence, SequenceMeta, INDEX_FILE,
};
use crate::error::{Error, Result};
use crate::fusion_model::FRAMES;
use crate::preprocess::{
    uncalibrate_gps, CameraFrame, GpsReading, LidarPoint, PointCloud, RadarCube,
    ScenarioCalibration,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodebookSpec {
    pub beams: usize,
    /// Azimuth span covered by the codebook, degrees.
    pub fov_deg: f64,
}

impl Default for CodebookSpec {
    fn default() -> Self {
        Self {
            beams: 64,
            fov_deg: 90.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleBeam {
    pub index: usize,
    /// The position was outside the codebook's field of view (or behind
    /// the array) and was clamped to the nearest edge beam.
    pub clamped: bool,
}

/// Azimuth from boresight, radians, positive toward +x.
pub fn azimuth(pos: GpsReading) -> f64 {
    pos.dx.atan2(pos.dy)
}

/// `clamp(floor((az + fov/2) / fov · M), 0, M − 1)`.
pub fn oracle_beam(pos: GpsReading, cb: &CodebookSpec) -> OracleBeam {
    let fov = cb.fov_deg.to_radians();
    let az = azimuth(pos);
    let raw = ((az + fov / 2.0) / fov * cb.beams as f64).floor();
    let hi = (cb.beams - 1) as f64;
    let clamped = !(0.0..=hi).contains(&raw) || pos.dy < 0.0;
    OracleBeam {
        index: raw.clamp(0.0, hi) as usize,
        clamped,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_sequences: usize,
    pub codebook: CodebookSpec,
    pub scenarios: usize,
    pub seed: u64,
    /// Vehicle speed range, m/s.
    pub speed_range: (f64, f64),
    /// Perpendicular distance of the pass from the base station, m.
    pub depth_range: (f64, f64),
    /// Time between observations, s.
    pub frame_dt: f64,
    /// GPS noise standard deviation per axis, m.
    pub gps_sigma: f64,
    pub camera_size: usize,
    /// Per-pixel Gaussian noise standard deviation, gray levels.
    pub pixel_noise: f64,
    /// Probability that the vehicle is hidden from every sensor at a given
    /// observation.
    pub occlusion_prob: f64,
    /// Half-width of the area holding LiDAR ground clutter, m.
    pub extent: f64,
    pub lidar_vehicle_points: usize,
    pub lidar_clutter_points: usize,
    /// Radar cube `(antennas, chirps, range samples)`.
    pub radar_dims: (usize, usize, usize),
    pub radar_max_range: f64,
    pub radar_max_speed: f64,
    pub radar_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_sequences: 2000,
            codebook: CodebookSpec::default(),
            scenarios: 3,
            seed: 0,
            speed_range: (5.0, 15.0),
            depth_range: (8.0, 40.0),
            frame_dt: 0.1,
            gps_sigma: 1.0,
            camera_size: 256,
            pixel_noise: 6.0,
            occlusion_prob: 0.15,
            extent: 50.0,
            lidar_vehicle_points: 120,
            lidar_clutter_points: 300,
            radar_dims: (16, 16, 32),
            radar_max_range: 64.0,
            radar_max_speed: 20.0,
            radar_noise: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sequences == 0 {
            return Err(Error::config("sequences", "must be >= 1"));
        }
        if self.codebook.beams < 2 {
            return Err(Error::config("beams", "must be >= 2"));
        }
        if !(self.codebook.fov_deg > 0.0 && self.codebook.fov_deg < 180.0) {
            return Err(Error::config("fov_deg", "must lie in (0, 180)"));
        }
        if self.scenarios == 0 {
            return Err(Error::config("scenarios", "must be >= 1"));
        }
        let range_ok =
            |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if !range_ok(self.speed_range) {
            return Err(Error::config("speed_range", "needs 0 <= lo <= hi"));
        }
        if !range_ok(self.depth_range)
            || self.depth_range.0 <= 0.0
            || self.depth_range.1 >= self.extent
        {
            return Err(Error::config("depth_range", "needs 0 < lo <= hi < extent"));
        }
        if !(self.gps_sigma >= 0.0 && self.pixel_noise >= 0.0 && self.radar_noise >= 0.0) {
            return Err(Error::config("noise", "noise levels must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::config("occlusion_prob", "must lie in [0, 1]"));
        }
        if self.camera_size < CameraFrame::MIN_SIDE {
            return Err(Error::config(
                "camera_size",
                format!("must be >= {}", CameraFrame::MIN_SIDE),
            ));
        }
        let (a, c, r) = self.radar_dims;
        if a < 2 || c < 2 || r < 2 {
            return Err(Error::config("radar_dims", "every axis must be >= 2"));
        }
        Ok(())
    }

    /// Calibration offset of scenario `s`, uniform in `(−π, π]`.
    pub fn scenario_offset(&self, s: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0x5ce0_0000 + s as u64);
        PI - rng.gen_range(0.0..2.0 * PI)
    }
}

/// Ground truth behind one generated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub positions: [GpsReading; FRAMES],
    pub velocity_x: f64,
    pub occluded: [bool; FRAMES],
}

fn sample_trajectory(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Trajectory {
    let half = cfg.codebook.fov_deg.to_radians() / 2.0;
    let depth = rng.gen_range(cfg.depth_range.0..=cfg.depth_range.1);
    let az_last = rng.gen_range(-half..half);
    let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
    let vx = if rng.gen_bool(0.5) { speed } else { -speed };
    let x_last = depth * az_last.tan();
    let positions = std::array::from_fn(|t| {
        GpsReading::new(x_last - vx * cfg.frame_dt * (FRAMES - 1 - t) as f64, depth)
    });
    let occluded = std::array::from_fn(|_| rng.gen_bool(cfg.occlusion_prob));
    Trajectory {
        positions,
        velocity_x: vx,
        occluded,
    }
}

/// Background colour varies smoothly with image column so that a local
/// patch reveals its horizontal position.
fn background(col: usize, row: usize, s: usize) -> [f64; 3] {
    let u = col as f64 / (s - 1) as f64;
    let v = row as f64 / (s - 1) as f64;
    let sky = if v < 0.5 { 25.0 } else { 0.0 };
    [
        30.0 + 160.0 * u + sky,
        70.0 + 50.0 * (PI * v).sin() + sky,
        190.0 - 160.0 * u + sky,
    ]
}

fn render_camera(
    cfg: &SyntheticConfig,
    pos: GpsReading,
    visible: bool,
    tint: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> CameraFrame {
    let s = cfg.camera_size;
    let fov = cfg.codebook.fov_deg.to_radians();
    let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("sigma");
    let range = pos.norm().max(1.0);
    let to_px = |angle: f64| angle / fov * s as f64;
    let uc = (azimuth(pos) / fov + 0.5) * s as f64;
    let half_w = to_px((2.25 / range).atan()).max(1.5);
    let bottom = s as f64 / 2.0 + to_px((1.5 / range).atan());
    let top = bottom - to_px((1.5 / range).atan()).max(2.0) * 1.2;
    let mut px = Vec::with_capacity(s * s * 3);
    for row in 0..s {
        for col in 0..s {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let inside = visible && (x - uc).abs() <= half_w && y >= top && y <= bottom;
            let base = if inside {
                tint
            } else {
                background(col, row, s)
            };
            for c in base {
                let v = if cfg.pixel_noise > 0.0 {
                    c + noise.sample(rng)
                } else {
                    c
                };
                px.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    CameraFrame::new(s, s, px).expect("camera geometry")
}

fn render_lidar(
    cfg: &SyntheticConfig,
    pos: GpsReading,
    visible: bool,
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let mut points = Vec::with_capacity(cfg.lidar_vehicle_points + cfg.lidar_clutter_points);
    let jitter = Normal::new(0.0, 0.03).expect("sigma");
    if visible {
        for i in 0..cfg.lidar_vehicle_points {
            let on_top = i % 5 < 2;
            let z = if on_top { 1.5 } else { rng.gen_range(0.2..1.5) };
            points.push(LidarPoint {
                x: (pos.dx + rng.gen_range(-2.25..2.25) + jitter.sample(rng)) as f32,
                y: (pos.dy + rng.gen_range(-0.9..0.9) + jitter.sample(rng)) as f32,
                z: (z + jitter.sample(rng)) as f32,
                intensity: rng.gen_range(0.5..1.0),
            });
        }
    }
    let ground = Normal::new(0.0, 0.05).expect("sigma");
    for _ in 0..cfg.lidar_clutter_points {
        points.push(LidarPoint {
            x: rng.gen_range(-cfg.extent..cfg.extent) as f32,
            y: rng.gen_range(0.0..cfg.extent) as f32,
            z: ground.sample(rng) as f32,
            intensity: rng.gen_range(0.0..0.3),
        });
    }
    PointCloud { points }
}

fn render_radar(
    cfg: &SyntheticConfig,
    pos: GpsReading,
    vx: f64,
    visible: bool,
    rng: &mut ChaCha8Rng,
) -> RadarCube {
    let (na, nc, nr) = cfg.radar_dims;
    let noise = Normal::new(0.0, cfg.radar_noise.max(1e-12)).expect("sigma");
    let az = azimuth(pos);
    let range = pos.norm();
    // radial velocity of a target moving along x
    let vr = vx * az.sin();
    let f_angle = 0.5 * az.sin();
    let f_range = 0.5 * (range / cfg.radar_max_range).min(1.0);
    let f_dopp = 0.5 * (vr / cfg.radar_max_speed).clamp(-1.0, 1.0);
    let amp = if visible { 1.0 } else { 0.0 };
    let mut samples = Vec::with_capacity(na * nc * nr);
    for a in 0..na {
        for c in 0..nc {
            for r in 0..nr {
                let phase =
                    2.0 * PI * (f_angle * a as f64 + f_dopp * c as f64 + f_range * r as f64);
                let (re_n, im_n) = if cfg.radar_noise > 0.0 {
                    (noise.sample(rng), noise.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                samples.push(Complex32::new(
                    (amp * phase.cos() + re_n) as f32,
                    (amp * phase.sin() + im_n) as f32,
                ));
            }
        }
    }
    RadarCube::new(na, nc, nr, samples).expect("radar geometry")
}

fn scenario_tint(s: usize) -> [f64; 3] {
    const TINTS: [[f64; 3]; 4] = [
        [235.0, 235.0, 235.0],
        [240.0, 200.0, 60.0],
        [220.0, 60.0, 50.0],
        [90.0, 220.0, 90.0],
    ];
    TINTS[s % TINTS.len()]
}

fn sequence_rng(cfg: &SyntheticConfig, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Generate sequence `i` in memory, with its ground truth.
pub fn generate_sequence(cfg: &SyntheticConfig, i: usize) -> Result<(SampleSequence, Trajectory)> {
    let mut rng = sequence_rng(cfg, i);
    let scenario = i % cfg.scenarios;
    let theta = cfg.scenario_offset(scenario);
    let cal = ScenarioCalibration::new(theta)?;
    let traj = sample_trajectory(cfg, &mut rng);
    let tint = scenario_tint(scenario);
    let frames = (0..FRAMES)
        .map(|t| {
            let (p, vis) = (traj.positions[t], !traj.occluded[t]);
            Frame {
                camera: render_camera(cfg, p, vis, tint, &mut rng),
                lidar: render_lidar(cfg, p, vis, &mut rng),
                radar: render_radar(cfg, p, traj.velocity_x, vis, &mut rng),
            }
        })
        .collect();
    let noise = Normal::new(0.0, cfg.gps_sigma.max(1e-12)).expect("sigma");
    let gps = std::array::from_fn(|t| {
        let p = traj.positions[t];
        let (nx, ny) = if cfg.gps_sigma > 0.0 {
            (noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        uncalibrate_gps(GpsReading::new(p.dx + nx, p.dy + ny), cal)
    });
    let label = oracle_beam(traj.positions[FRAMES - 1], &cfg.codebook).index;
    let seq = SampleSequence {
        seq_id: format!("seq_{i:05}"),
        scenario_id: scenario as u32,
        frames,
        gps,
        label,
        meta: SequenceMeta {
            theta_offset: theta,
            beams: cfg.codebook.beams,
        },
    };
    Ok((seq, traj))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub sequences: usize,
    pub label_histogram: Vec<usize>,
}

/// Write a full dataset under `out`. Output is byte-identical for equal
/// configs regardless of thread count.
pub fn generate_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries = (0..cfg.n_sequences)
        .into_par_iter()
        .map(|i| {
            let (seq, _) = generate_sequence(cfg, i)?;
            let dir = seq.seq_id.clone();
            write_sequence(&out.join(&dir), &seq)?;
            Ok(IndexEntry {
                seq_id: seq.seq_id,
                scenario_id: seq.scenario_id,
                label: seq.label,
                dir,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = out.join(INDEX_FILE);
    let f = std::fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    write_index(std::io::BufWriter::new(f), &entries)?;
    let mut label_histogram = vec![0; cfg.codebook.beams];
    for e in &entries {
        label_histogram[e.label] += 1;
    }
    Ok(GenerateSummary {
        sequences: entries.len(),
        label_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::gps_inputs;
    use crate::preprocess::{gps_cell, BevGridSpec};

    fn cb16() -> CodebookSpec {
        CodebookSpec {
            beams: 16,
            fov_deg: 90.0,
        }
    }

    fn at_azimuth(deg: f64) -> GpsReading {
        let a = deg.to_radians();
        GpsReading::new(20.0 * a.sin(), 20.0 * a.cos())
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(
            oracle_beam(at_azimuth(0.0), &cb16()),
            OracleBeam {
                index: 8,
                clamped: false
            }
        );
        assert_eq!(oracle_beam(at_azimuth(-45.0), &cb16()).index, 0);
        assert_eq!(oracle_beam(at_azimuth(44.9), &cb16()).index, 15);
        let behind = oracle_beam(GpsReading::new(1.0, -5.0), &cb16());
        assert!(behind.clamped && behind.index == 15);
        assert!(oracle_beam(at_azimuth(60.0), &cb16()).clamped);
    }

    #[test]
    fn oracle_is_monotone_in_azimuth() {
        let mut prev = 0;
        for i in 0..=1800 {
            let b = oracle_beam(at_azimuth(-90.0 + i as f64 * 0.1), &cb16()).index;
            assert!(b >= prev);
            prev = b;
        }
    }

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_sequences: 6,
            codebook: cb16(),
            camera_size: 32,
            radar_dims: (4, 4, 8),
            lidar_clutter_points: 20,
            lidar_vehicle_points: 20,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn noiseless_gps_mask_hits_true_cell() {
        let cfg = SyntheticConfig {
            gps_sigma: 0.0,
            ..small()
        };
        let grid = BevGridSpec::square(50.0, 32);
        for i in 0..20 {
            let (seq, traj) = generate_sequence(&cfg, i).unwrap();
            let (per_frame, g2) = gps_inputs(&seq).unwrap();
            assert_eq!(gps_cell(g2, &grid), gps_cell(traj.positions[1], &grid));
            assert_eq!(
                gps_cell(per_frame[0], &grid),
                gps_cell(traj.positions[0], &grid)
            );
        }
    }

    #[test]
    fn labels_cover_most_beams() {
        let cfg = small();
        let mut seen = [false; 16];
        for i in 0..1000 {
            let mut rng = sequence_rng(&cfg, i);
            let t = sample_trajectory(&cfg, &mut rng);
            seen[oracle_beam(t.positions[FRAMES - 1], &cfg.codebook).index] = true;
        }
        assert!(seen.iter().filter(|&&s| s).count() as f64 >= 0.8 * 16.0);
    }

    #[test]
    fn sequences_are_deterministic_and_valid() {
        let cfg = small();
        let (a, _) = generate_sequence(&cfg, 3).unwrap();
        let (b, _) = generate_sequence(&cfg, 3).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_ne!(generate_sequence(&cfg, 4).unwrap().0, a);
    }

    #[test]
    fn zero_sequences_is_config_error() {
        let cfg = SyntheticConfig {
            n_sequences: 0,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
