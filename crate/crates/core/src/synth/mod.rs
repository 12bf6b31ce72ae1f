//! Deterministic fixtures and a small training harness.
//!
//! Tasks are binary classification problems over Gaussian inputs. A *track*
//! fixes an orthogonal transform and a label direction; each task in the
//! track adds its own small perturbation to the transform. Adapters are
//! trained inside a frozen random-feature model (see [`model`]).

mod experiment;
mod model;
mod rng;

pub use experiment::{
    run_directional_experiment, Aggregate, ExperimentResult, ExperimentSpec, InitResult, SeedResult, ShotResult,
    DEFAULT_SPEC_JSON,
};
pub use model::{evaluate, loss, loss_and_grad, train_adapter, Backbone, Dataset, Metrics, TrainConfig, TrainOutcome};
pub use rng::Rng;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterLayer, AdapterStack, ProbeBatch, StackMetadata};
use crate::linalg::{dot, matmul, Matrix};

/// Gaussian weights with standard deviation `1/√d`, zero biases.
pub fn gen_adapter(cfg: &AdapterConfig, seed: u64) -> AdapterStack {
    let mut rng = Rng::new(seed);
    let (d, m) = (cfg.d, cfg.m());
    let s = 1.0 / (d as f64).sqrt();
    let layers = (0..cfg.layers)
        .map(|_| AdapterLayer {
            w_down: Matrix::from_fn(m, d, |_, _| rng.gaussian() * s),
            b_down: vec![0.0; m],
            w_up: Matrix::from_fn(d, m, |_, _| rng.gaussian() * s),
            b_up: vec![0.0; d],
        })
        .collect();
    AdapterStack {
        config: *cfg,
        layers,
        metadata: StackMetadata {
            name: format!("adapter-{seed}"),
            track: String::new(),
            source_task: String::new(),
            aligned_to: None,
        },
    }
}

/// Standard Gaussian probe inputs, one `n × d` block per layer.
pub fn gen_probe(d: usize, n: usize, layers: usize, seed: u64) -> ProbeBatch {
    let mut rng = Rng::new(seed);
    let blocks = (0..layers)
        .map(|_| Matrix::from_fn(n, d, |_, _| rng.gaussian()))
        .collect();
    ProbeBatch::new(blocks).expect("generated probe is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSizes {
    pub n_train: usize,
    pub n_test: usize,
    /// `‖E‖_F / ‖R‖_F` for the per-task perturbation `E`.
    pub perturbation: f64,
}

impl Default for TaskSizes {
    fn default() -> Self {
        TaskSizes {
            n_train: 256,
            n_test: 512,
            perturbation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub track_id: String,
    pub name: String,
    /// Orthogonal transform shared by every task in the track.
    pub rotation: Matrix,
    pub perturbation: Matrix,
    /// Label rule: `y = sign(label_dir · (R + E) x)`, shared within a track.
    pub label_dir: Vec<f64>,
    pub train: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn label(&self, x: &[f64]) -> f64 {
        let t = matmul(&self.transform(), &Matrix::column(x)).expect("square transform");
        if dot(t.data(), &self.label_dir) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn transform(&self) -> Matrix {
        self.rotation.add(&self.perturbation).expect("same shape")
    }
}

/// Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        for u in &rows {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&rows).expect("square")
}

fn sample(transform: &Matrix, label_dir: &[f64], n: usize, rng: &mut Rng) -> Dataset {
    let d = label_dir.len();
    let x = Matrix::from_fn(n, d, |_, _| rng.gaussian());
    // w = transformᵀ · label_dir, so y = sign(w · x)
    let w: Vec<f64> = (0..d)
        .map(|k| (0..d).map(|i| transform.get(i, k) * label_dir[i]).sum())
        .collect();
    let y = (0..n)
        .map(|i| if dot(x.row(i), &w) >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    Dataset { x, y }
}

pub fn gen_track(track_id: &str, n_tasks: usize, d: usize, seed: u64) -> Vec<SyntheticTask> {
    gen_track_with(track_id, n_tasks, d, seed, &TaskSizes::default())
}

pub fn gen_track_with(track_id: &str, n_tasks: usize, d: usize, seed: u64, sizes: &TaskSizes) -> Vec<SyntheticTask> {
    let mut rng = Rng::new(seed);
    let rotation = random_orthogonal(d, &mut rng);
    let mut label_dir: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
    let n = dot(&label_dir, &label_dir).sqrt();
    label_dir.iter_mut().for_each(|x| *x /= n);
    let rnorm = rotation.frobenius_norm();

    (0..n_tasks)
        .map(|t| {
            let mut trng = Rng::new(Rng::derive(seed, t as u64 + 1));
            let raw = Matrix::from_fn(d, d, |_, _| trng.gaussian());
            let scale = sizes.perturbation * rnorm / raw.frobenius_norm().max(f64::MIN_POSITIVE);
            let perturbation = raw.scale(scale);
            let transform = rotation.add(&perturbation).expect("same shape");
            let train = sample(&transform, &label_dir, sizes.n_train, &mut trng);
            let test = sample(&transform, &label_dir, sizes.n_test, &mut trng);
            SyntheticTask {
                track_id: track_id.to_string(),
                name: format!("{track_id}-{t}"),
                rotation: rotation.clone(),
                perturbation,
                label_dir: label_dir.clone(),
                train,
                test,
            }
        })
        .collect()
}

/// Zero-shot metrics of `stack` on the task's test split.
pub fn eval_zero_shot(backbone: &Backbone, task: &SyntheticTask, stack: &AdapterStack) -> crate::Result<Metrics> {
    evaluate(backbone, stack, &task.test)
}
