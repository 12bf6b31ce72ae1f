//! The frozen model adapters are trained inside: a random feature map
//! `h = relu(x · projᵀ)`, the adapter stack, and a fixed linear head. Only
//! adapter tensors receive gradients.

use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_forward, pre_activations, AdapterConfig, AdapterLayer, AdapterStack};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_bt, Matrix};

use super::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    /// `d × d` frozen projection.
    pub proj: Matrix,
    /// Frozen head weights, length `d`.
    pub head: Vec<f64>,
}

impl Backbone {
    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let s = 1.0 / (d as f64).sqrt();
        let proj = Matrix::from_fn(d, d, |_, _| rng.gaussian() * s);
        let head = (0..d).map(|_| rng.gaussian() * s).collect();
        Backbone { proj, head }
    }

    pub fn d(&self) -> usize {
        self.head.len()
    }

    /// Hidden states entering the first adapter layer.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(matmul_bt(x, &self.proj)?.map(|v| v.max(0.0)))
    }

    pub fn logits(&self, stack: &AdapterStack, x: &Matrix) -> Result<Vec<f64>> {
        let h = stack.forward(&self.features(x)?)?;
        Ok((0..h.rows())
            .map(|i| crate::linalg::dot(h.row(i), &self.head))
            .collect())
    }

    /// Inputs to each adapter layer of `stack` for the samples `x`.
    pub fn layer_inputs(&self, stack: &AdapterStack, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut h = self.features(x)?;
        let mut out = Vec::with_capacity(stack.layers.len());
        for layer in &stack.layers {
            let next = adapter_forward(layer, &h, &stack.config)?;
            out.push(h);
            h = next;
        }
        Ok(out)
    }
}

/// Labelled samples, `y ∈ {−1, +1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// The first `k` samples of each class, in original order.
    pub fn k_per_class(&self, k: usize) -> Dataset {
        let (mut pos, mut neg) = (0, 0);
        let mut idx = Vec::new();
        for (i, &y) in self.y.iter().enumerate() {
            if y > 0.0 && pos < k {
                pos += 1;
                idx.push(i);
            } else if y < 0.0 && neg < k {
                neg += 1;
                idx.push(i);
            }
        }
        Dataset {
            x: Matrix::from_fn(idx.len(), self.x.cols(), |i, j| self.x.get(idx[i], j)),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean logistic loss and accuracy.
pub fn evaluate(backbone: &Backbone, stack: &AdapterStack, data: &Dataset) -> Result<Metrics> {
    let logits = backbone.logits(stack, &data.x)?;
    let n = data.len() as f64;
    let loss = logits.iter().zip(&data.y).map(|(z, y)| softplus(-y * z)).sum::<f64>() / n;
    let correct = logits.iter().zip(&data.y).filter(|(z, y)| *z * *y > 0.0).count();
    Ok(Metrics {
        loss,
        accuracy: correct as f64 / n,
    })
}

pub fn loss(backbone: &Backbone, stack: &AdapterStack, data: &Dataset) -> Result<f64> {
    evaluate(backbone, stack, data).map(|m| m.loss)
}

/// Mean logistic loss and its gradient with respect to every adapter tensor.
pub fn loss_and_grad(backbone: &Backbone, stack: &AdapterStack, data: &Dataset) -> Result<(f64, Vec<AdapterLayer>)> {
    loss_and_grad_from(&backbone.features(&data.x)?, &backbone.head, stack, &data.y)
}

/// [`loss_and_grad`] on precomputed backbone features.
fn loss_and_grad_from(
    features: &Matrix,
    head: &[f64],
    stack: &AdapterStack,
    y: &[f64],
) -> Result<(f64, Vec<AdapterLayer>)> {
    let cfg: &AdapterConfig = &stack.config;
    let nl = cfg.nonlinearity;
    let n = y.len();
    if n == 0 {
        return Err(Error::Validation("empty training set".into()));
    }

    // forward with cache
    let mut inputs = Vec::with_capacity(stack.layers.len());
    let mut pres = Vec::with_capacity(stack.layers.len());
    let mut h = features.clone();
    for layer in &stack.layers {
        layer.check_shape(cfg)?;
        let z = pre_activations(layer, &h);
        let a = z.map(|v| nl.apply(v));
        let mut out = matmul_bt(&a, &layer.w_up)?;
        for i in 0..n {
            for ((o, x), b) in out.row_mut(i).iter_mut().zip(h.row(i)).zip(&layer.b_up) {
                *o += x + b;
            }
        }
        inputs.push(h);
        pres.push(z);
        h = out;
    }

    let mut total = 0.0;
    let mut g = Matrix::zeros(n, cfg.d);
    for i in 0..n {
        let z = crate::linalg::dot(h.row(i), head);
        let y = y[i];
        total += softplus(-y * z);
        let dz = -y * sigmoid(-y * z) / n as f64;
        for (gv, w) in g.row_mut(i).iter_mut().zip(head) {
            *gv = dz * w;
        }
    }
    let loss = total / n as f64;

    let mut grads: Vec<AdapterLayer> = Vec::with_capacity(stack.layers.len());
    for (l, layer) in stack.layers.iter().enumerate().rev() {
        let z = &pres[l];
        let hin = &inputs[l];
        let a = z.map(|v| nl.apply(v));
        // d/dw_up = gᵀ a, d/db_up = Σ g
        let gt = crate::linalg::transpose(&g);
        let w_up = matmul(&gt, &a)?;
        let b_up = g.col_sums();
        // back through the bottleneck
        let ga = matmul(&g, &layer.w_up)?;
        let gz = Matrix::from_fn(n, z.cols(), |i, p| ga.get(i, p) * nl.derivative(z.get(i, p)));
        let w_down = matmul(&crate::linalg::transpose(&gz), hin)?;
        let b_down = gz.col_sums();
        // residual + bottleneck path
        let back = matmul(&gz, &layer.w_down)?;
        g = g.add(&back)?;
        grads.push(AdapterLayer {
            w_down,
            b_down,
            w_up,
            b_up,
        });
    }
    grads.reverse();
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 200, lr: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: AdapterStack,
    /// Loss before each step, followed by the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the adapter tensors only.
pub fn train_adapter(
    backbone: &Backbone,
    data: &Dataset,
    init: &AdapterStack,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut stack = init.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    // the backbone is frozen, so its features are computed once
    let features = backbone.features(&data.x)?;
    for step in 0..cfg.steps {
        let (l, grads) = loss_and_grad_from(&features, &backbone.head, &stack, &data.y)?;
        if !l.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        losses.push(l);
        for (layer, g) in stack.layers.iter_mut().zip(&grads) {
            *layer = layer.zip_map(g, |w, dw| w - cfg.lr * dw);
        }
        if stack.layers.iter().any(|l| l.check_finite().is_err()) {
            return Err(Error::TrainingDiverged { step });
        }
    }
    let final_loss = loss(backbone, &stack, data)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged { step: cfg.steps });
    }
    losses.push(final_loss);
    Ok(TrainOutcome { stack, losses })
}
