//! Bottleneck adapters: a down projection to width `m = d / r`, a pointwise
//! nonlinearity, an up projection back to `d`, and a residual add.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul_bt, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl Nonlinearity {
    /// GELU uses the tanh approximation.
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Nonlinearity::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Nonlinearity::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Gelu => "gelu",
            Nonlinearity::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Nonlinearity::Relu),
            "gelu" => Some(Nonlinearity::Gelu),
            "identity" => Some(Nonlinearity::Identity),
            _ => None,
        }
    }
}

/// Architecture of an adapter stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d: usize,
    pub r: usize,
    pub layers: usize,
    pub nonlinearity: Nonlinearity,
}

impl AdapterConfig {
    pub fn new(d: usize, r: usize, layers: usize, nonlinearity: Nonlinearity) -> Result<Self> {
        let cfg = AdapterConfig {
            d,
            r,
            layers,
            nonlinearity,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.d == 0 {
            return Err(Error::Config(format!(
                "d and r must be positive (d={}, r={})",
                self.d, self.r
            )));
        }
        if self.d % self.r != 0 {
            return Err(Error::Config(format!("d={} is not divisible by r={}", self.d, self.r)));
        }
        if self.layers == 0 {
            return Err(Error::Config("layer count must be at least 1".into()));
        }
        Ok(())
    }

    /// Bottleneck width.
    #[inline]
    pub fn m(&self) -> usize {
        self.d / self.r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    /// `m × d`; row `p` holds the incoming edges of bottleneck neuron `p`.
    pub w_down: Matrix,
    pub b_down: Vec<f64>,
    /// `d × m`; column `p` holds the outgoing edges of bottleneck neuron `p`.
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
}

impl AdapterLayer {
    pub fn new(w_down: Matrix, b_down: Vec<f64>, w_up: Matrix, b_up: Vec<f64>) -> Result<Self> {
        let layer = AdapterLayer {
            w_down,
            b_down,
            w_up,
            b_up,
        };
        let (m, d) = layer.w_down.shape();
        if layer.w_up.shape() != (d, m) || layer.b_down.len() != m || layer.b_up.len() != d {
            return Err(Error::Shape(format!(
                "inconsistent adapter layer: w_down {:?}, b_down {}, w_up {:?}, b_up {}",
                layer.w_down.shape(),
                layer.b_down.len(),
                layer.w_up.shape(),
                layer.b_up.len()
            )));
        }
        layer.check_finite()?;
        Ok(layer)
    }

    pub fn zeros(cfg: &AdapterConfig) -> Self {
        let (d, m) = (cfg.d, cfg.m());
        AdapterLayer {
            w_down: Matrix::zeros(m, d),
            b_down: vec![0.0; m],
            w_up: Matrix::zeros(d, m),
            b_up: vec![0.0; d],
        }
    }

    pub fn width(&self) -> usize {
        self.w_down.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_down.cols()
    }

    pub fn check_shape(&self, cfg: &AdapterConfig) -> Result<()> {
        let (d, m) = (cfg.d, cfg.m());
        if self.w_down.shape() != (m, d)
            || self.w_up.shape() != (d, m)
            || self.b_down.len() != m
            || self.b_up.len() != d
        {
            return Err(Error::Shape(format!(
                "layer shapes (w_down {:?}, w_up {:?}) do not match d={d}, m={m}",
                self.w_down.shape(),
                self.w_up.shape()
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        self.w_down.check_finite("w_down")?;
        self.w_up.check_finite("w_up")?;
        if self.b_down.iter().chain(&self.b_up).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("adapter bias".into()));
        }
        Ok(())
    }

    /// Reorders bottleneck neurons: neuron `i` of the result is neuron
    /// `perm[i]` of `self`. The layer function is unchanged.
    pub fn permute_bottleneck(&self, perm: &[usize]) -> AdapterLayer {
        AdapterLayer {
            w_down: self.w_down.permute_rows(perm),
            b_down: perm.iter().map(|&p| self.b_down[p]).collect(),
            w_up: self.w_up.permute_cols(perm),
            b_up: self.b_up.clone(),
        }
    }

    /// Elementwise `f` over every tensor of two same-shaped layers.
    pub fn zip_map(&self, other: &AdapterLayer, f: impl Fn(f64, f64) -> f64) -> AdapterLayer {
        let zip = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
        let (m, d) = self.w_down.shape();
        AdapterLayer {
            w_down: Matrix::from_fn(m, d, |i, j| f(self.w_down.get(i, j), other.w_down.get(i, j))),
            b_down: zip(&self.b_down, &other.b_down),
            w_up: Matrix::from_fn(d, m, |i, j| f(self.w_up.get(i, j), other.w_up.get(i, j))),
            b_up: zip(&self.b_up, &other.b_up),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> AdapterLayer {
        AdapterLayer {
            w_down: self.w_down.map(&f),
            b_down: self.b_down.iter().map(|&x| f(x)).collect(),
            w_up: self.w_up.map(&f),
            b_up: self.b_up.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Largest absolute elementwise difference over all four tensors.
    pub fn max_abs_diff(&self, other: &AdapterLayer) -> f64 {
        let vec_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        self.w_down
            .max_abs_diff(&other.w_down)
            .max(self.w_up.max_abs_diff(&other.w_up))
            .max(vec_diff(&self.b_down, &other.b_down))
            .max(vec_diff(&self.b_up, &other.b_up))
    }

    /// Tensors in container order with their canonical suffixes.
    pub fn tensors(&self) -> [(&'static str, (usize, usize), &[f64]); 4] {
        [
            ("w_down", self.w_down.shape(), self.w_down.data()),
            ("b_down", (self.b_down.len(), 1), &self.b_down),
            ("w_up", self.w_up.shape(), self.w_up.data()),
            ("b_up", (self.b_up.len(), 1), &self.b_up),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StackMetadata {
    pub name: String,
    pub track: String,
    pub source_task: String,
    /// Name of the anchor this stack was aligned to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterStack {
    pub config: AdapterConfig,
    pub layers: Vec<AdapterLayer>,
    pub metadata: StackMetadata,
}

impl AdapterStack {
    pub fn new(config: AdapterConfig, layers: Vec<AdapterLayer>, metadata: StackMetadata) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.layers {
            return Err(Error::Config(format!(
                "config declares {} layers, got {}",
                config.layers,
                layers.len()
            )));
        }
        for l in &layers {
            l.check_shape(&config)?;
            l.check_finite()?;
        }
        Ok(AdapterStack {
            config,
            layers,
            metadata,
        })
    }

    pub fn zeros(config: AdapterConfig, metadata: StackMetadata) -> Self {
        AdapterStack {
            layers: (0..config.layers).map(|_| AdapterLayer::zeros(&config)).collect(),
            config,
            metadata,
        }
    }

    pub fn max_abs_diff(&self, other: &AdapterStack) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Applies every layer in sequence.
    pub fn forward(&self, h: &Matrix) -> Result<Matrix> {
        let mut cur = h.clone();
        for layer in &self.layers {
            cur = adapter_forward(layer, &cur, &self.config)?;
        }
        Ok(cur)
    }
}

/// Per-layer probe inputs (hidden states entering each adapter layer) used by
/// the activation ground metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    layers: Vec<Matrix>,
}

impl ProbeBatch {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Validation("probe batch has no layers".into()))?;
        let shape = first.shape();
        if shape.0 == 0 {
            return Err(Error::Validation("probe batch has zero samples".into()));
        }
        if shape.1 == 0 {
            return Err(Error::Validation("probe batch has zero dimension".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.shape() != shape {
                return Err(Error::Shape(format!(
                    "probe layer {i} is {:?}, expected {:?}",
                    l.shape(),
                    shape
                )));
            }
            l.check_finite("probe")?;
        }
        Ok(ProbeBatch { layers })
    }

    pub fn n(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn d(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &Matrix {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }
}

fn check_input(h: &Matrix, cfg: &AdapterConfig, layer: &AdapterLayer) -> Result<()> {
    layer.check_shape(cfg)?;
    if h.cols() != cfg.d {
        return Err(Error::Shape(format!(
            "input has {} columns, adapter expects d={}",
            h.cols(),
            cfg.d
        )));
    }
    Ok(())
}

/// Pre-activations `h · w_downᵀ + b_down`, shape `n × m`.
pub(crate) fn pre_activations(layer: &AdapterLayer, h: &Matrix) -> Matrix {
    let mut z = matmul_bt(h, &layer.w_down).expect("shape checked by caller");
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.b_down) {
            *v += b;
        }
    }
    z
}

/// `h + σ(h·w_downᵀ + b_down)·w_upᵀ + b_up`, row-wise.
pub fn adapter_forward(layer: &AdapterLayer, h: &Matrix, cfg: &AdapterConfig) -> Result<Matrix> {
    check_input(h, cfg, layer)?;
    let act = pre_activations(layer, h).map(|x| cfg.nonlinearity.apply(x));
    let mut out = matmul_bt(&act, &layer.w_up)?;
    for i in 0..out.rows() {
        let hrow = h.row(i);
        for ((o, x), b) in out.row_mut(i).iter_mut().zip(hrow).zip(&layer.b_up) {
            *o += x + b;
        }
    }
    Ok(out)
}

/// Bottleneck activations over a probe, shape `m × n`: row `p` is neuron
/// `p`'s activation profile.
pub fn bottleneck_activations(layer: &AdapterLayer, probe: &Matrix, cfg: &AdapterConfig) -> Result<Matrix> {
    check_input(probe, cfg, layer)?;
    if probe.rows() == 0 {
        return Err(Error::Shape("probe has no samples".into()));
    }
    let z = matmul_bt(&layer.w_down, probe)?;
    Ok(Matrix::from_fn(z.rows(), z.cols(), |p, s| {
        cfg.nonlinearity.apply(z.get(p, s) + layer.b_down[p])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Adapter,
    FusionComposition,
}

/// Trainable parameters per layer, bias terms excluded: `2d²/r` for an
/// adapter and `3d²` for a fusion composition layer (query, key, value).
pub fn param_count(cfg: &AdapterConfig, kind: ParamKind) -> u64 {
    let d = cfg.d as u64;
    match kind {
        ParamKind::Adapter => 2 * d * cfg.m() as u64,
        ParamKind::FusionComposition => 3 * d * d,
    }
}

/// Like [`param_count`], optionally counting biases.
pub fn param_count_with_bias(cfg: &AdapterConfig, kind: ParamKind, include_bias: bool) -> u64 {
    let base = param_count(cfg, kind);
    if !include_bias {
        return base;
    }
    let d = cfg.d as u64;
    base + match kind {
        ParamKind::Adapter => d + cfg.m() as u64,
        ParamKind::FusionComposition => 3 * d,
    }
}
