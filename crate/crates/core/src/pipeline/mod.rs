//! Multi-step prediction, dataset generation, self-augmentation and the
//! outer training loop.

mod dataset;
mod predict;
mod train_loop;

pub use dataset::{read_dataset, write_dataset, DataRecord, Dataset, Provenance, Split};
pub use predict::{early_stop_check, predict_iterative, predict_until_converged, Prediction, Step};
pub use train_loop::{
    augment, run, train_loop, LoopConfig, RoundReport, RunReport, RunResult, StopReason,
};

use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kinematics::to_affine;
use crate::render::{downsample, render_mesh, Camera};
use crate::scene::{instantiate, sample_params, Geometry, TaskDef};

/// Attempts per record before a generation run gives up on finding a visible pose.
const MAX_RESAMPLES: usize = 1000;

/// Camera placement and image resolutions shared by every record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewConfig {
    pub net_width: usize,
    pub net_height: usize,
    /// Cloud resolution is `cloud_factor` times the network resolution.
    pub cloud_factor: usize,
    pub hfov_deg: f64,
    pub near: f64,
    pub far: f64,
    /// Distance from the prototype center to the eye.
    pub distance: f64,
    /// Angle of the eye above the horizontal through the prototype center.
    pub elevation_deg: f64,
}

impl ViewConfig {
    pub fn for_task(task: &TaskDef) -> Self {
        let elevation_deg = match task.geometry {
            Geometry::Box(_) => 30.0,
            Geometry::Door(_) => 10.0,
        };
        ViewConfig {
            net_width: 64,
            net_height: 48,
            cloud_factor: 4,
            hfov_deg: 60.0,
            near: 0.3,
            far: 4.0,
            distance: 2.0,
            elevation_deg,
        }
    }

    /// Cloud-resolution camera on the `-y` side of the prototype, looking at its center.
    pub fn camera(&self, task: &TaskDef) -> Result<Camera> {
        if self.cloud_factor == 0 || self.net_width == 0 || self.net_height == 0 {
            return Err(Error::Config("image sizes must be positive".into()));
        }
        let center = task.prototype_center();
        let el = self.elevation_deg.to_radians();
        let eye = center + self.distance * Vector3::new(0.0, -el.cos(), el.sin());
        Camera::look_at(
            Point3::from(eye.coords),
            center,
            self.net_width * self.cloud_factor,
            self.net_height * self.cloud_factor,
            self.hfov_deg,
            self.near,
            self.far,
        )
    }
}

/// Everything needed to turn observations into network inputs and back.
#[derive(Clone, Debug, PartialEq)]
pub struct Observer {
    pub task: TaskDef,
    /// Cloud-resolution camera.
    pub camera: Camera,
    pub factor: usize,
}

impl Observer {
    pub fn new(task: TaskDef, camera: Camera, factor: usize) -> Result<Self> {
        camera.validate()?;
        camera.downscaled(factor)?;
        Ok(Observer {
            task,
            camera,
            factor,
        })
    }

    pub fn net_size(&self) -> (usize, usize) {
        (self.camera.width / self.factor, self.camera.height / self.factor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub n_data: usize,
    pub seed: u64,
    /// Fraction of records assigned to the training split.
    pub split_fraction: f64,
}

impl GenerateConfig {
    pub fn new(n_data: usize, seed: u64) -> Self {
        GenerateConfig {
            n_data,
            seed,
            split_fraction: 0.8,
        }
    }
}

/// SplitMix64 finalizer over `(seed, stream)`, used to derive independent
/// per-record RNG seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GENERATION_STREAM: u64 = 0x6765_6e00;
const SPLIT_STREAM: u64 = 0x7370_6c00;

/// Samples, instantiates and renders `n_data` records. Poses that leave
/// nothing visible are redrawn and counted in [`Dataset::resampled`].
pub fn generate_dataset(obs: &Observer, config: &GenerateConfig) -> Result<Dataset> {
    if !(config.split_fraction > 0.0 && config.split_fraction <= 1.0) {
        return Err(Error::Config("split_fraction must lie in (0, 1]".into()));
    }
    let rendered: Vec<Result<(DataRecord, usize)>> = (0..config.n_data)
        .into_par_iter()
        .map(|i| generate_record(obs, mix_seed(config.seed ^ GENERATION_STREAM, i as u64), i))
        .collect();
    let mut records = Vec::with_capacity(config.n_data);
    let mut resampled = 0;
    for r in rendered {
        let (rec, redraws) = r?;
        resampled += redraws;
        records.push(rec);
    }
    // Exactly round((1 - split_fraction) * n) test records, chosen by a seeded shuffle.
    let n_test = ((1.0 - config.split_fraction) * config.n_data as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.n_data).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SPLIT_STREAM)));
    for &i in &order[..n_test] {
        records[i].split = Split::Test;
    }
    if resampled > 0 {
        log::info!("{resampled} invisible poses were redrawn");
    }
    Ok(Dataset {
        task: obs.task.clone(),
        camera: obs.camera,
        factor: obs.factor,
        seed: config.seed,
        resampled,
        records,
    })
}

fn generate_record(obs: &Observer, seed: u64, index: usize) -> Result<(DataRecord, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..MAX_RESAMPLES {
        let params = sample_params(&obs.task.schema, &mut rng);
        let model = instantiate(&obs.task, &params)?;
        let r = render_mesh(&model, &obs.camera);
        let depth = downsample(&r.depth, obs.factor)?;
        if depth.occupied() == 0 {
            continue;
        }
        let transform = to_affine(&params.theta, &obs.task.schema)?;
        let record = DataRecord {
            depth,
            cloud_depth: r.metric,
            theta: params.theta,
            gamma: params.gamma,
            transform,
            residual: 0.0,
            provenance: Provenance::Generated,
            split: Split::Train,
            source_index: index as u32,
        };
        return Ok((record, attempt));
    }
    Err(Error::Config(format!(
        "record {index}: no visible pose after {MAX_RESAMPLES} draws; check the camera"
    )))
}
