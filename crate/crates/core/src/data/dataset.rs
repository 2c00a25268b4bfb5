//! On-disk dataset layout, per-sequence records, and preprocessing into
//! model inputs.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bvt::{load_tensor, save_tensor};
use crate::error::{Error, Result};
use crate::fusion_model::{InputNeeds, ModelConfig, PreparedSample, FRAMES};
use crate::numerics::{Array, Real, Tensor, TensorData};
use crate::preprocess::{
    calibrate_gps, gps_to_mask, lidar_to_bev, normalize_camera, radar_to_maps, BevGridSpec,
    CameraFrame, CameraNormConfig, GpsReading, LidarChannels, LidarPoint, PointCloud, RadarCube,
    ScenarioCalibration,
};
use crate::training::{photometric_augment, PhotometricJitter, SampleSource};

/// GPS readings per sequence (first two observations only).
pub const GPS_READINGS: usize = 2;

pub const INDEX_FILE: &str = "index.csv";
pub const META_FILE: &str = "meta.txt";
pub const GPS_FILE: &str = "gps.bvt";

pub fn camera_file(t: usize) -> String {
    format!("cam_t{}.bvt", t + 1)
}

pub fn lidar_file(t: usize) -> String {
    format!("lidar_t{}.bvt", t + 1)
}

pub fn radar_file(t: usize) -> String {
    format!("radar_t{}.bvt", t + 1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub seq_id: String,
    pub scenario_id: u32,
    pub label: usize,
    /// Sequence directory relative to the dataset root.
    pub dir: String,
}

fn check_relative(dir: &str) -> Result<()> {
    let p = Path::new(dir);
    let ok = !dir.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "sequence dir `{dir}` must be a plain relative path"
        )))
    }
}

/// Parse `index.csv` (`seq_id,scenario_id,label,dir`). Sequence ids must be
/// unique and directories must stay inside the dataset root.
pub fn parse_index(r: impl Read) -> Result<Vec<IndexEntry>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd
        .headers()
        .map_err(|e| Error::contract(format!("index header: {e}")))?
        .clone();
    let want = ["seq_id", "scenario_id", "label", "dir"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::contract(format!(
            "index header must be {}",
            want.join(",")
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize::<IndexEntry>().enumerate() {
        let e = rec.map_err(|e| Error::contract(format!("index row {}: {e}", i + 1)))?;
        check_relative(&e.dir)?;
        if !seen.insert(e.seq_id.clone()) {
            return Err(Error::contract(format!("duplicate seq_id `{}`", e.seq_id)));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_index(w: impl Write, entries: &[IndexEntry]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for e in entries {
        wr.serialize(e)
            .map_err(|e| Error::contract(format!("index write failed: {e}")))?;
    }
    wr.flush()
        .map_err(|e| Error::contract(format!("index write failed: {e}")))
}

/// Per-sequence metadata from `meta.txt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceMeta {
    pub theta_offset: f64,
    pub beams: usize,
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
/// Requires `theta_offset` and `beams`; unknown keys are rejected.
pub fn parse_meta(text: &str) -> Result<SequenceMeta> {
    let (mut theta, mut beams) = (None, None);
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("meta line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = |what: &str| Error::contract(format!("meta line {}: {what}", n + 1));
        match k {
            "theta_offset" => {
                let t: f64 = v.parse().map_err(|_| bad("theta_offset is not a number"))?;
                ScenarioCalibration::new(t)?;
                theta = Some(t);
            }
            "beams" => {
                let b: usize = v.parse().map_err(|_| bad("beams is not an integer"))?;
                if b < 2 {
                    return Err(bad("beams must be >= 2"));
                }
                beams = Some(b);
            }
            _ => return Err(bad(&format!("unknown key `{k}`"))),
        }
    }
    Ok(SequenceMeta {
        theta_offset: theta.ok_or_else(|| Error::contract("meta lacks theta_offset"))?,
        beams: beams.ok_or_else(|| Error::contract("meta lacks beams"))?,
    })
}

pub fn format_meta(m: &SequenceMeta) -> String {
    format!("theta_offset={:e}\nbeams={}\n", m.theta_offset, m.beams)
}

/// One synchronized observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub camera: CameraFrame,
    pub lidar: PointCloud,
    pub radar: RadarCube,
}

/// One labeled record: five frames, two raw GPS readings, the beam label.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSequence {
    pub seq_id: String,
    pub scenario_id: u32,
    pub frames: Vec<Frame>,
    /// Raw (uncalibrated) readings at the first two observations.
    pub gps: [GpsReading; GPS_READINGS],
    pub label: usize,
    pub meta: SequenceMeta,
}

impl SampleSequence {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != FRAMES {
            return Err(Error::contract(format!(
                "{}: {} frames, expected {FRAMES}",
                self.seq_id,
                self.frames.len()
            )));
        }
        if self.label >= self.meta.beams {
            return Err(Error::contract(format!(
                "{}: label {} out of range for M = {}",
                self.seq_id, self.label, self.meta.beams
            )));
        }
        let (h, w) = (
            self.frames[0].camera.height(),
            self.frames[0].camera.width(),
        );
        let dims = self.frames[0].radar.dims();
        for f in &self.frames {
            if (f.camera.height(), f.camera.width()) != (h, w) {
                return Err(Error::contract(format!(
                    "{}: camera size varies across frames",
                    self.seq_id
                )));
            }
            if f.radar.dims() != dims {
                return Err(Error::contract(format!(
                    "{}: radar cube size varies across frames",
                    self.seq_id
                )));
            }
            f.lidar.validate()?;
        }
        if self
            .gps
            .iter()
            .any(|g| !(g.dx.is_finite() && g.dy.is_finite()))
        {
            return Err(Error::contract(format!(
                "{}: non-finite GPS reading",
                self.seq_id
            )));
        }
        Ok(())
    }
}

fn camera_tensor(f: &CameraFrame) -> Tensor {
    Tensor::new(
        vec![f.height(), f.width(), 3],
        TensorData::U8(f.pixels().to_vec()),
    )
    .expect("camera shape")
}

fn lidar_tensor(p: &PointCloud) -> Tensor {
    let data = p
        .points
        .iter()
        .flat_map(|q| [q.x, q.y, q.z, q.intensity])
        .collect();
    Tensor::new(vec![p.points.len(), 4], TensorData::F32(data)).expect("lidar shape")
}

fn radar_tensor(c: &RadarCube) -> Tensor {
    let (a, ch, r) = c.dims();
    Tensor::new(vec![a, ch, r], TensorData::Complex64(c.samples().to_vec())).expect("radar shape")
}

fn expect_shape(t: &Tensor, path: &Path, ndim: usize, fixed: &[(usize, usize)]) -> Result<()> {
    let s = t.shape();
    let ok = s.len() == ndim && fixed.iter().all(|&(i, v)| s[i] == v);
    if ok {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "{}: unexpected shape {s:?}",
            path.display()
        )))
    }
}

pub fn read_camera(path: &Path) -> Result<CameraFrame> {
    let t = load_tensor(path)?;
    expect_shape(&t, path, 3, &[(2, 3)])?;
    let (h, w) = (t.shape()[0], t.shape()[1]);
    match t.into_data() {
        TensorData::U8(px) => CameraFrame::new(h, w, px),
        _ => Err(Error::contract(format!(
            "{}: camera must be u8",
            path.display()
        ))),
    }
}

pub fn read_lidar(path: &Path) -> Result<PointCloud> {
    let t = load_tensor(path)?;
    expect_shape(&t, path, 2, &[(1, 4)])?;
    match t.into_data() {
        TensorData::F32(v) => Ok(PointCloud {
            points: v
                .chunks_exact(4)
                .map(|c| LidarPoint {
                    x: c[0],
                    y: c[1],
                    z: c[2],
                    intensity: c[3],
                })
                .collect(),
        }),
        _ => Err(Error::contract(format!(
            "{}: lidar must be f32",
            path.display()
        ))),
    }
}

pub fn read_radar(path: &Path) -> Result<RadarCube> {
    let t = load_tensor(path)?;
    expect_shape(&t, path, 3, &[])?;
    let s = t.shape().to_vec();
    match t.into_data() {
        TensorData::Complex64(v) => RadarCube::new(s[0], s[1], s[2], v),
        _ => Err(Error::contract(format!(
            "{}: radar must be complex64",
            path.display()
        ))),
    }
}

pub fn read_gps(path: &Path) -> Result<[GpsReading; GPS_READINGS]> {
    let t = load_tensor(path)?;
    expect_shape(&t, path, 2, &[(0, GPS_READINGS), (1, 2)])?;
    let v: Vec<f64> = match t.into_data() {
        TensorData::F64(v) => v,
        TensorData::F32(v) => v.into_iter().map(f64::from).collect(),
        _ => {
            return Err(Error::contract(format!(
                "{}: gps must be floating point",
                path.display()
            )))
        }
    };
    Ok([GpsReading::new(v[0], v[1]), GpsReading::new(v[2], v[3])])
}

pub fn read_meta(path: &Path) -> Result<SequenceMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_meta(&text).map_err(|e| Error::contract(format!("{}: {e}", path.display())))
}

pub fn write_sequence(dir: &Path, seq: &SampleSequence) -> Result<()> {
    seq.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in seq.frames.iter().enumerate() {
        save_tensor(&dir.join(camera_file(t)), &camera_tensor(&f.camera))?;
        save_tensor(&dir.join(lidar_file(t)), &lidar_tensor(&f.lidar))?;
        save_tensor(&dir.join(radar_file(t)), &radar_tensor(&f.radar))?;
    }
    let gps: Vec<f64> = seq.gps.iter().flat_map(|g| [g.dx, g.dy]).collect();
    save_tensor(
        &dir.join(GPS_FILE),
        &Tensor::new(vec![GPS_READINGS, 2], TensorData::F64(gps))?,
    )?;
    let meta = dir.join(META_FILE);
    std::fs::write(&meta, format_meta(&seq.meta)).map_err(|e| Error::io(&meta, e))
}

/// How raw records become model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub camera: CameraNormConfig,
    pub grid: BevGridSpec,
    pub lidar_channels: LidarChannels,
}

impl PrepConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            camera: CameraNormConfig {
                out_size: (cfg.camera_size, cfg.camera_size),
                ..CameraNormConfig::default()
            },
            grid: cfg.grid_spec(),
            lidar_channels: cfg.lidar_channels,
        }
    }
}

/// GPS inputs for a sequence: the per-frame mask readings (first reading
/// at t=1, second reading held for t ≥ 2) and the MLP input (second reading),
/// all calibrated.
pub fn gps_inputs(seq: &SampleSequence) -> Result<([GpsReading; FRAMES], GpsReading)> {
    let cal = ScenarioCalibration::new(seq.meta.theta_offset)?;
    let g1 = calibrate_gps(seq.gps[0], cal);
    let g2 = calibrate_gps(seq.gps[1], cal);
    let mut per_frame = [g2; FRAMES];
    per_frame[0] = g1;
    Ok((per_frame, g2))
}

/// Turn a raw record into model inputs, computing only what `needs` asks for.
pub fn prepare_sample<F: Real>(
    seq: &SampleSequence,
    prep: &PrepConfig,
    needs: InputNeeds,
    jitter: Option<PhotometricJitter>,
) -> Result<PreparedSample<F>> {
    seq.validate()?;
    let stack = |items: Vec<Array<F>>| -> Result<Array<F>> {
        Array::stack(&items.iter().collect::<Vec<_>>())
    };
    let camera = if needs.camera {
        let frames = seq
            .frames
            .iter()
            .map(|f| match jitter {
                Some(j) => normalize_camera(&photometric_augment(&f.camera, j), &prep.camera),
                None => normalize_camera(&f.camera, &prep.camera),
            })
            .collect::<Result<Vec<_>>>()?;
        Some(stack(frames)?)
    } else {
        None
    };
    let lidar = if needs.lidar {
        let maps = seq
            .frames
            .iter()
            .map(|f| lidar_to_bev(&f.lidar, &prep.grid, prep.lidar_channels))
            .collect::<Result<Vec<_>>>()?;
        Some(stack(maps)?)
    } else {
        None
    };
    let radar = if needs.radar {
        let maps = seq
            .frames
            .iter()
            .map(|f| radar_to_maps(&f.radar, (prep.grid.height, prep.grid.width)))
            .collect::<Result<Vec<_>>>()?;
        Some(stack(maps)?)
    } else {
        None
    };
    let (per_frame, g2) = gps_inputs(seq)?;
    let gps_mask = if needs.gps_mask {
        Some(stack(
            per_frame
                .iter()
                .map(|&g| gps_to_mask(g, &prep.grid))
                .collect(),
        )?)
    } else {
        None
    };
    Ok(PreparedSample {
        camera,
        lidar,
        radar,
        gps_mask,
        gps: [g2.dx, g2.dy],
        label: seq.label,
    })
}

/// An opened dataset. Sequences are read from disk on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<IndexEntry>,
    prep: PrepConfig,
}

impl Dataset {
    /// Read and validate the index; sequence files are not touched.
    pub fn open(root: &Path) -> Result<Self> {
        let index = root.join(INDEX_FILE);
        let f = std::fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
        let entries = parse_index(std::io::BufReader::new(f))
            .map_err(|e| Error::contract(format!("{}: {e}", index.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            prep: PrepConfig::for_model(&ModelConfig::default()),
        })
    }

    pub fn with_prep(mut self, prep: PrepConfig) -> Self {
        self.prep = prep;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn seq_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].dir)
    }

    /// Read all files of sequence `i` and check them against the index.
    pub fn read_sequence(&self, i: usize) -> Result<SampleSequence> {
        let e = &self.entries[i];
        let dir = self.seq_dir(i);
        let meta = read_meta(&dir.join(META_FILE))?;
        let frames = (0..FRAMES)
            .map(|t| {
                Ok(Frame {
                    camera: read_camera(&dir.join(camera_file(t)))?,
                    lidar: read_lidar(&dir.join(lidar_file(t)))?,
                    radar: read_radar(&dir.join(radar_file(t)))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = SampleSequence {
            seq_id: e.seq_id.clone(),
            scenario_id: e.scenario_id,
            frames,
            gps: read_gps(&dir.join(GPS_FILE))?,
            label: e.label,
            meta,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Read only what a forward pass needs; skipped modalities are not
    /// loaded from disk.
    fn read_partial(&self, i: usize, needs: InputNeeds) -> Result<SampleSequence> {
        if needs.camera && needs.lidar && needs.radar {
            return self.read_sequence(i);
        }
        let e = &self.entries[i];
        let dir = self.seq_dir(i);
        let meta = read_meta(&dir.join(META_FILE))?;
        let blank_cam = CameraFrame::new(
            CameraFrame::MIN_SIDE,
            CameraFrame::MIN_SIDE,
            vec![0; CameraFrame::MIN_SIDE * CameraFrame::MIN_SIDE * 3],
        )?;
        let blank_radar = RadarCube::new(2, 2, 2, vec![Default::default(); 8])?;
        let frames = (0..FRAMES)
            .map(|t| {
                Ok(Frame {
                    camera: if needs.camera {
                        read_camera(&dir.join(camera_file(t)))?
                    } else {
                        blank_cam.clone()
                    },
                    lidar: if needs.lidar {
                        read_lidar(&dir.join(lidar_file(t)))?
                    } else {
                        PointCloud::default()
                    },
                    radar: if needs.radar {
                        read_radar(&dir.join(radar_file(t)))?
                    } else {
                        blank_radar.clone()
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = SampleSequence {
            seq_id: e.seq_id.clone(),
            scenario_id: e.scenario_id,
            frames,
            gps: read_gps(&dir.join(GPS_FILE))?,
            label: e.label,
            meta,
        };
        seq.validate()?;
        Ok(seq)
    }
}

impl<F: Real> SampleSource<F> for Dataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn label(&self, i: usize) -> usize {
        self.entries[i].label
    }

    fn scenario(&self, i: usize) -> u32 {
        self.entries[i].scenario_id
    }

    fn seq_id(&self, i: usize) -> String {
        self.entries[i].seq_id.clone()
    }

    fn load(
        &self,
        i: usize,
        needs: InputNeeds,
        jitter: Option<PhotometricJitter>,
    ) -> Result<PreparedSample<F>> {
        let seq = self.read_partial(i, needs)?;
        prepare_sample(&seq, &self.prep, needs, jitter)
    }
}
