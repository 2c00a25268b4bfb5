//! End-to-end runs driven by a [`RunConfig`]: split a dataset, train with
//! checkpointing and logging, and evaluate a checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::dataset::{Dataset, PrepConfig};
use crate::data::split::{split_dataset, Split};
use crate::error::{Error, Result};
use crate::fusion_model::{Ablation, BevFusionModel};
use crate::metrics::{ablation_run, DbaReport};
use crate::training::{fit, EpochLog, Subset, TrainState, LOG_HEADER};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Which split a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            "all" => Ok(Part::All),
            _ => Err(Error::config(
                "split",
                format!("unknown split `{s}` (train, val, test, all)"),
            )),
        }
    }
}

/// A dataset opened for a given model configuration, with its split.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: Split,
    all: Vec<usize>,
}

impl Prepared {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let dataset =
            Dataset::open(&cfg.data_dir)?.with_prep(PrepConfig::for_model(&cfg.model_config()));
        if let Some(e) = dataset.entries().iter().find(|e| e.label >= cfg.beams) {
            return Err(Error::config(
                "beams",
                format!(
                    "{}: label {} does not fit a {}-beam codebook",
                    e.seq_id, e.label, cfg.beams
                ),
            ));
        }
        let split = split_dataset(dataset.entries(), cfg.split_ratios(), cfg.split_seed)?;
        let all = (0..dataset.entries().len()).collect();
        Ok(Self {
            dataset,
            split,
            all,
        })
    }

    pub fn indices(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.split.train,
            Part::Val => &self.split.val,
            Part::Test => &self.split.test,
            Part::All => &self.all,
        }
    }

    pub fn subset(&self, part: Part) -> Subset<'_, Dataset> {
        Subset {
            inner: &self.dataset,
            indices: self.indices(part),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_val_dba: Option<f64>,
    pub out_dir: PathBuf,
}

/// Train per `cfg`, writing the effective config, the epoch log and the
/// best and last checkpoints into `cfg.out_dir`. `resume` continues from a
/// checkpoint written by an earlier run with the same architecture.
pub fn train_run(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Prepared::open(cfg)?;
    let out = &cfg.out_dir;
    cfg.echo(out)?;
    let mcfg = cfg.model_config();
    let (mut model, mut state) = match resume {
        Some(p) => load_checkpoint::<f32>(p, &mcfg)?,
        None => {
            let m = BevFusionModel::<f32>::new(mcfg, cfg.seed)?;
            let s = TrainState::new(&m.store, cfg.seed);
            (m, s)
        }
    };
    let log_path = out.join(TRAIN_LOG);
    let mut log = {
        let f = if resume.is_some() && log_path.exists() {
            File::options().append(true).open(&log_path)
        } else {
            File::create(&log_path)
        };
        BufWriter::new(f.map_err(|e| Error::io(&log_path, e))?)
    };
    if resume.is_none()
        || std::fs::metadata(&log_path)
            .map(|m| m.len() == 0)
            .unwrap_or(true)
    {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let train = data.subset(Part::Train);
    let val = data.subset(Part::Val);
    let best = out.join(BEST_CHECKPOINT);
    let logs = fit(
        &mut model,
        &train,
        Some(&val),
        &cfg.train_config(),
        &mut state,
        |m, s| save_checkpoint(&best, m, s),
        |row| {
            writeln!(log, "{}", row.csv_line())
                .and_then(|_| log.flush())
                .map_err(|e| Error::io(&log_path, e))
        },
    )?;
    save_checkpoint(&out.join(LAST_CHECKPOINT), &model, &state)?;
    if state.best_val_dba.is_none() {
        save_checkpoint(&best, &model, &state)?;
    }
    Ok(TrainOutcome {
        logs,
        best_val_dba: state.best_val_dba,
        out_dir: out.clone(),
    })
}

/// Load a checkpoint for the architecture in `cfg`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<BevFusionModel<f32>> {
    Ok(load_checkpoint::<f32>(checkpoint, &cfg.model_config())?.0)
}

/// Score a checkpoint on one split with the given pathway switches.
pub fn eval_run(
    cfg: &RunConfig,
    model: &BevFusionModel<f32>,
    data: &Prepared,
    part: Part,
    ablation: Ablation,
) -> Result<(DbaReport, Vec<Vec<f64>>)> {
    let src = data.subset(part);
    if src.indices.is_empty() {
        return Err(Error::contract(format!("{part:?} split is empty")));
    }
    ablation_run(model, &src, ablation, &cfg.dba_config(), cfg.batch_size)
}
