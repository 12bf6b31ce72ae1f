//! Neuron alignment of one adapter onto another.
//!
//! Only the bottleneck carries permutation freedom: the adapter's input and
//! output live in the frozen model's `d`-dimensional basis, so the transport
//! at both boundaries is the identity. With `T` the bottleneck plan (rows are
//! the neurons of the adapter being aligned, columns the anchor's neurons)
//! and `β` its column marginals, the aligned layer is
//!
//! ```text
//! w̃_down = diag(1/β) · Tᵀ · w_down        b̃_down = diag(1/β) · Tᵀ · b_down
//! w̃_up   = w_up · T · diag(1/β)           b̃_up   = b_up
//! ```
//!
//! For a vertex plan this is an exact relabeling of bottleneck neurons, so the
//! aligned layer computes the same function as the original.

use serde::{Deserialize, Serialize};

use crate::adapter::{bottleneck_activations, AdapterConfig, AdapterLayer, AdapterStack, ProbeBatch};
use crate::error::{Error, Result};
use crate::linalg::{diag_div_left, diag_div_right, matmul, pairwise_sq_dist, transpose, Matrix};
use crate::ot::{solve_exact, solve_sinkhorn, SinkhornParams, TransportPlan};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Wts,
    Acts,
}

/// Ground metric for a single layer. The activation metric carries the probe
/// inputs it is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum GroundMetric<'a> {
    Wts { include_bias: bool },
    Acts { probe: &'a Matrix },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Exact,
    Sinkhorn(SinkhornParams),
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub aligned: AdapterLayer,
    /// Bottleneck plan, `other` neurons × anchor neurons.
    pub plan: TransportPlan,
    /// The cost the plan was solved on, oriented like `plan.t`.
    pub ground_cost: Matrix,
}

fn check_same_config(anchor: &AdapterLayer, other: &AdapterLayer, cfg: &AdapterConfig) -> Result<()> {
    anchor
        .check_shape(cfg)
        .and_then(|_| other.check_shape(cfg))
        .map_err(|e| Error::Config(format!("layers do not share the adapter config: {e}")))
}

fn incoming_rows(layer: &AdapterLayer, include_bias: bool) -> Matrix {
    if !include_bias {
        return layer.w_down.clone();
    }
    let (m, d) = layer.w_down.shape();
    Matrix::from_fn(
        m,
        d + 1,
        |p, k| {
            if k < d {
                layer.w_down.get(p, k)
            } else {
                layer.b_down[p]
            }
        },
    )
}

/// `C[p, q]` = squared distance between the incoming edges of anchor neuron
/// `p` and other neuron `q` (with the bias appended when requested).
pub fn ground_cost_wts(anchor: &AdapterLayer, other: &AdapterLayer, include_bias: bool) -> Result<Matrix> {
    if anchor.w_down.shape() != other.w_down.shape() || anchor.w_up.shape() != other.w_up.shape() {
        return Err(Error::Config(format!(
            "layer shapes differ: {:?} vs {:?}",
            anchor.w_down.shape(),
            other.w_down.shape()
        )));
    }
    pairwise_sq_dist(
        &incoming_rows(anchor, include_bias),
        &incoming_rows(other, include_bias),
    )
}

/// `C[p, q]` = squared distance between the activation profiles of anchor
/// neuron `p` and other neuron `q` over the shared probe.
pub fn ground_cost_acts(
    anchor: &AdapterLayer,
    other: &AdapterLayer,
    probe: &Matrix,
    cfg: &AdapterConfig,
) -> Result<Matrix> {
    check_same_config(anchor, other, cfg)?;
    if probe.cols() != cfg.d {
        return Err(Error::Shape(format!(
            "probe has dimension {}, adapter expects d={}",
            probe.cols(),
            cfg.d
        )));
    }
    let a = bottleneck_activations(anchor, probe, cfg)?;
    let b = bottleneck_activations(other, probe, cfg)?;
    pairwise_sq_dist(&a, &b)
}

pub fn ground_cost(
    anchor: &AdapterLayer,
    other: &AdapterLayer,
    metric: GroundMetric<'_>,
    cfg: &AdapterConfig,
) -> Result<Matrix> {
    match metric {
        GroundMetric::Wts { include_bias } => {
            check_same_config(anchor, other, cfg)?;
            ground_cost_wts(anchor, other, include_bias)
        }
        GroundMetric::Acts { probe } => ground_cost_acts(anchor, other, probe, cfg),
    }
}

pub fn solve(cost: &Matrix, solver: &Solver) -> Result<TransportPlan> {
    match solver {
        Solver::Exact => solve_exact(cost),
        Solver::Sinkhorn(p) => solve_sinkhorn(cost, p),
    }
}

/// Rewrites `other` with a given bottleneck plan (`other` × anchor).
pub fn apply_plan(other: &AdapterLayer, plan: &TransportPlan) -> Result<AdapterLayer> {
    let beta = plan.realized_beta();
    if let Some(q) = beta.iter().position(|&b| b == 0.0) {
        return Err(Error::DegenerateMarginal(format!("anchor neuron {q} receives no mass")));
    }
    let t = &plan.t;
    // diag(1/β) · Tᵀ, anchor × other
    let pull = diag_div_left(&beta, &transpose(t))?;
    let w_down = matmul(&pull, &other.w_down)?;
    let b_down = matmul(&pull, &Matrix::column(&other.b_down))?.into_data();
    let w_up = matmul(&other.w_up, &diag_div_right(t, &beta)?)?;
    AdapterLayer::new(w_down, b_down, w_up, other.b_up.clone())
}

/// Aligns `other` into `anchor`'s bottleneck coordinates.
pub fn align_layer(
    anchor: &AdapterLayer,
    other: &AdapterLayer,
    metric: GroundMetric<'_>,
    solver: &Solver,
    cfg: &AdapterConfig,
) -> Result<AlignmentResult> {
    let cost = ground_cost(anchor, other, metric, cfg)?;
    let ground_cost = transpose(&cost);
    let plan = solve(&ground_cost, solver)?;
    let aligned = apply_plan(other, &plan)?;
    Ok(AlignmentResult {
        aligned,
        plan,
        ground_cost,
    })
}

#[derive(Debug, Clone)]
pub struct StackAlignment {
    pub stack: AdapterStack,
    pub layers: Vec<AlignmentResult>,
}

/// Layer-wise [`align_layer`]. The activation metric needs one probe layer
/// per adapter layer.
pub fn align_stack(
    anchor: &AdapterStack,
    other: &AdapterStack,
    metric: MetricKind,
    include_bias: bool,
    solver: &Solver,
    probes: Option<&ProbeBatch>,
) -> Result<StackAlignment> {
    if anchor.config != other.config {
        return Err(Error::Config(format!(
            "cannot align '{}' ({:?}) to '{}' ({:?})",
            other.metadata.name, other.config, anchor.metadata.name, anchor.config
        )));
    }
    let cfg = anchor.config;
    let probes = match metric {
        MetricKind::Acts => {
            let p = probes.ok_or_else(|| Error::MissingProbe("activation alignment requires a probe batch".into()))?;
            if p.layer_count() != cfg.layers {
                return Err(Error::MissingProbe(format!(
                    "probe batch has {} layers, adapters have {}",
                    p.layer_count(),
                    cfg.layers
                )));
            }
            Some(p)
        }
        MetricKind::Wts => None,
    };

    let layers = par::try_map_range(cfg.layers, |l| {
        let gm = match probes {
            Some(p) => GroundMetric::Acts { probe: p.layer(l) },
            None => GroundMetric::Wts { include_bias },
        };
        align_layer(&anchor.layers[l], &other.layers[l], gm, solver, &cfg)
    })?;

    let mut metadata = other.metadata.clone();
    metadata.aligned_to = Some(anchor.metadata.name.clone());
    let stack = AdapterStack {
        config: cfg,
        layers: layers.iter().map(|r| r.aligned.clone()).collect(),
        metadata,
    };
    Ok(StackAlignment { stack, layers })
}
