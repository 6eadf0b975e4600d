//! Experiment orchestration: model and image setup, per-run seeding, the
//! worker pool, and result files.

pub mod batch;
pub mod config;
pub mod output;
pub mod sphere;
pub mod stats;

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::oracle::remote::RemoteOracle;
use crate::oracle::synth::{train, BlobClasses};
use crate::oracle::{AttackGoal, Classifier, DefenseTransform, ModelOracle, Oracle, QueryBudget, ToyModel};
use crate::tensorimg::{load_image, ImageTensor, Shape};

pub use batch::{run_batch, AttackSpec, RunOutcome, RunRecord};
pub use config::{load_config, parse_config, ExperimentConfig, ModelKind, ModelSpec};
pub use output::{run_experiment, Experiment, ExperimentReport};
pub use sphere::{sphere_sweep, SphereRow, SphereSweepResult};
pub use stats::{histogram, summarize, AttackSummary, HistogramBin};

/// One step of the splitmix64 generator.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one run, mixed from the master seed and the run's coordinates.
pub fn run_seed(master: u64, image: usize, repetition: usize, arm: usize) -> u64 {
    [image as u64, repetition as u64, arm as u64]
        .iter()
        .fold(splitmix64(master), |h, &v| splitmix64(h ^ v))
}

#[derive(Clone)]
pub enum ModelHandle {
    Local(Arc<ToyModel>),
    Remote { endpoint: String },
}

/// The attacked system: a model (local or remote), the defense in front of
/// it, and the blob classes used to draw synthetic images.
#[derive(Clone)]
pub struct Target {
    pub model: ModelHandle,
    pub defense: DefenseTransform,
    pub blobs: Arc<BlobClasses>,
}

impl Target {
    /// Trains the toy model described by `spec` (or connects to the remote
    /// endpoint).
    pub fn build(spec: &ModelSpec, defense: DefenseTransform) -> Result<Self> {
        let blobs = BlobClasses::new(spec.dataset.spec(spec.data_seed))?;
        let model = match (spec.kind, spec.train_config()) {
            (ModelKind::Remote, _) | (_, None) => {
                if defense != DefenseTransform::Identity {
                    return Err(Error::Config("defense: a remote model applies its own defense".into()));
                }
                let endpoint = spec
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("model.endpoint: required for a remote model".into()))?;
                ModelHandle::Remote { endpoint }
            }
            (_, Some(train_cfg)) => {
                log::info!("training {:?} model on {:?}", spec.kind, spec.dataset);
                ModelHandle::Local(Arc::new(train(&blobs, &train_cfg)?))
            }
        };
        Ok(Self { model, defense, blobs: Arc::new(blobs) })
    }

    pub fn local(model: Arc<ToyModel>, blobs: BlobClasses, defense: DefenseTransform) -> Self {
        Self { model: ModelHandle::Local(model), defense, blobs: Arc::new(blobs) }
    }

    pub fn shape(&self) -> Shape {
        self.blobs.shape()
    }

    pub fn classes(&self) -> usize {
        match &self.model {
            ModelHandle::Local(m) => m.num_classes(),
            ModelHandle::Remote { .. } => self.blobs.classes(),
        }
    }

    pub fn classifier(&self) -> Option<&Arc<ToyModel>> {
        match &self.model {
            ModelHandle::Local(m) => Some(m),
            ModelHandle::Remote { .. } => None,
        }
    }

    pub fn oracle(&self, goal: AttackGoal, budget: QueryBudget) -> Result<Box<dyn Oracle + Send>> {
        Ok(match &self.model {
            ModelHandle::Local(m) => {
                let model: Arc<dyn Classifier> = m.clone();
                Box::new(ModelOracle::new(model, goal, budget)?.with_defense(self.defense)?)
            }
            ModelHandle::Remote { endpoint } => Box::new(RemoteOracle::new(endpoint, goal, budget)),
        })
    }

    /// Label the defended model assigns to `img`. Free for local models; a
    /// remote model is probed with untargeted decisions, one per class at
    /// most.
    pub fn predict(&self, img: &ImageTensor) -> Result<usize> {
        match &self.model {
            ModelHandle::Local(m) => m.predict(&self.defense.apply(img)?),
            ModelHandle::Remote { .. } => {
                for label in 0..self.classes() {
                    let mut oracle = self.oracle(AttackGoal::Untargeted { label }, QueryBudget::unlimited())?;
                    if !oracle.decide(img)? {
                        return Ok(label);
                    }
                }
                Err(Error::Transport("remote model rejected every label".into()))
            }
        }
    }
}

/// An image to attack with the label the model gives it.
#[derive(Debug, Clone)]
pub struct AttackImage {
    pub index: usize,
    pub image: ImageTensor,
    pub label: usize,
}

/// Synthetic images: samples of the blob classes, in class order, kept only
/// when the defended model classifies them correctly.
pub fn synthetic_images(target: &Target, count: usize, seed: u64) -> Result<Vec<AttackImage>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let classes = target.blobs.classes();
    let mut out = Vec::with_capacity(count);
    let max_draws = count.saturating_mul(50).max(100);
    for draw in 0..max_draws {
        if out.len() == count {
            break;
        }
        let class = draw % classes;
        let image = target.blobs.sample(&mut rng, class);
        if target.predict(&image)? == class {
            out.push(AttackImage { index: out.len(), image, label: class });
        }
    }
    if out.len() < count {
        return Err(Error::Config(format!(
            "images.count: only {} of {max_draws} samples are classified correctly",
            out.len()
        )));
    }
    Ok(out)
}

/// `.ppm`/`.pgm` files of `dir` in name order, labelled by the defended
/// model's prediction, up to `count` of them.
pub fn directory_images(target: &Target, dir: &Path, count: usize) -> Result<Vec<AttackImage>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths.into_iter().take(count) {
        let image = load_image(&path)?;
        if image.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "{} is {}, the model expects {}",
                path.display(),
                image.shape(),
                target.shape()
            )));
        }
        let label = target.predict(&image)?;
        out.push(AttackImage { index: out.len(), image, label });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("images.path: no .ppm/.pgm files in {}", dir.display())));
    }
    Ok(out)
}

pub fn load_images(config: &ExperimentConfig, target: &Target) -> Result<Vec<AttackImage>> {
    match config.images.source {
        config::ImageSourceKind::Synthetic => synthetic_images(target, config.images.count, config.images.seed),
        config::ImageSourceKind::Directory => {
            let dir = config
                .images
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("images.path: required for a directory source".into()))?;
            directory_images(target, dir, config.images.count)
        }
    }
}

/// Runs `job(i)` for `i in 0..n` on a pool of `workers` threads (0 = all
/// cores) and returns the results in index order.
pub fn run_jobs<T, F>(workers: usize, n: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("workers: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(&job).collect()))
}
