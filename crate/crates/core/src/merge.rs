//! Merging several adapter stacks into one.
//!
//! `sum` and `avg` combine tensors position by position. The OT strategies
//! first align every non-anchor stack into the anchor's neuron coordinates
//! (the anchor is the first input) and then average all `n` stacks, anchor
//! included.

use serde::{Deserialize, Serialize};

use crate::adapter::{param_count, AdapterConfig, AdapterLayer, AdapterStack, ParamKind, ProbeBatch, StackMetadata};
use crate::align::{align_stack, MetricKind, Solver, StackAlignment};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Sum,
    Avg,
    OtWts,
    OtActs,
}

impl MergeKind {
    pub fn metric(self) -> Option<MetricKind> {
        match self {
            MergeKind::OtWts => Some(MetricKind::Wts),
            MergeKind::OtActs => Some(MetricKind::Acts),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeKind::Sum => "sum",
            MergeKind::Avg => "avg",
            MergeKind::OtWts => "wts",
            MergeKind::OtActs => "acts",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeStrategy {
    pub kind: MergeKind,
    pub solver: Solver,
    pub include_bias_in_cost: bool,
}

impl MergeStrategy {
    pub fn new(kind: MergeKind) -> Self {
        MergeStrategy {
            kind,
            solver: Solver::Exact,
            include_bias_in_cost: false,
        }
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputInfo {
    pub name: String,
    pub track: String,
    pub source_task: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputTransport {
    /// Position of the aligned stack in the merge inputs.
    pub input: usize,
    pub name: String,
    /// `⟨C, T⟩` per adapter layer.
    pub layer_costs: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub d: usize,
    pub r: usize,
    pub layers: usize,
    pub n_adapters: usize,
    pub adapter_per_layer: u64,
    pub composition_per_layer: u64,
    /// A single adapter stack; also the merged adapter's footprint.
    pub single_adapter_total: u64,
    pub merged_total: u64,
    /// `n` parallel adapters plus one composition layer per adapter layer.
    pub fusion_total: u64,
    /// `composition_per_layer / adapter_per_layer`, i.e. `3r/2`.
    pub composition_to_adapter_ratio: f64,
}

impl ParamReport {
    pub fn new(cfg: &AdapterConfig, n_adapters: usize) -> Self {
        let adapter = param_count(cfg, ParamKind::Adapter);
        let comp = param_count(cfg, ParamKind::FusionComposition);
        let l = cfg.layers as u64;
        ParamReport {
            d: cfg.d,
            r: cfg.r,
            layers: cfg.layers,
            n_adapters,
            adapter_per_layer: adapter,
            composition_per_layer: comp,
            single_adapter_total: adapter * l,
            merged_total: adapter * l,
            fusion_total: (n_adapters as u64 * adapter + comp) * l,
            composition_to_adapter_ratio: comp as f64 / adapter as f64,
        }
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub schema_version: u32,
    pub strategy: MergeStrategy,
    pub n_inputs: usize,
    pub anchor: Option<String>,
    pub inputs: Vec<InputInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport: Option<Vec<InputTransport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_transport_cost: Option<f64>,
    pub params: ParamReport,
}

fn check_inputs(stacks: &[AdapterStack]) -> Result<AdapterConfig> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::EmptySelection("no adapters to merge".into()))?;
    for s in &stacks[1..] {
        if s.config != first.config {
            return Err(Error::Config(format!(
                "'{}' has config {:?} but '{}' has {:?}",
                s.metadata.name, s.config, first.metadata.name, first.config
            )));
        }
    }
    Ok(first.config)
}

/// A single input keeps its own metadata, so merging one stack is the
/// identity all the way down to the serialized bytes.
fn merged_metadata(stacks: &[AdapterStack], tag: &str) -> StackMetadata {
    if let [only] = stacks {
        return StackMetadata {
            aligned_to: None,
            ..only.metadata.clone()
        };
    }
    let track = match stacks.first() {
        Some(f) if stacks.iter().all(|s| s.metadata.track == f.metadata.track) => f.metadata.track.clone(),
        _ => "mixed".to_string(),
    };
    StackMetadata {
        name: format!("merged-{tag}"),
        track,
        source_task: stacks
            .iter()
            .map(|s| s.metadata.name.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        aligned_to: None,
    }
}

fn fold_layers(
    stacks: &[AdapterStack],
    l: usize,
    mut step: impl FnMut(&AdapterLayer, &AdapterLayer, usize) -> AdapterLayer,
) -> AdapterLayer {
    let mut acc = stacks[0].layers[l].clone();
    for (k, s) in stacks.iter().enumerate().skip(1) {
        acc = step(&acc, &s.layers[l], k + 1);
    }
    acc
}

/// Elementwise sum, accumulated in argument order.
pub fn merge_sum(stacks: &[AdapterStack]) -> Result<AdapterStack> {
    let cfg = check_inputs(stacks)?;
    let layers = (0..cfg.layers)
        .map(|l| fold_layers(stacks, l, |acc, x, _| acc.zip_map(x, |a, b| a + b)))
        .collect();
    Ok(AdapterStack {
        config: cfg,
        layers,
        metadata: merged_metadata(stacks, "sum"),
    })
}

/// Elementwise mean. Uses the running-mean update `μ += (x − μ)/k`, which
/// returns a repeated input unchanged.
pub fn merge_avg(stacks: &[AdapterStack]) -> Result<AdapterStack> {
    let cfg = check_inputs(stacks)?;
    Ok(AdapterStack {
        config: cfg,
        layers: running_mean(stacks, cfg.layers),
        metadata: merged_metadata(stacks, "avg"),
    })
}

fn running_mean(stacks: &[AdapterStack], layers: usize) -> Vec<AdapterLayer> {
    (0..layers)
        .map(|l| {
            fold_layers(stacks, l, |acc, x, k| {
                let k = k as f64;
                acc.zip_map(x, |m, v| m + (v - m) / k)
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OtMerge {
    pub merged: AdapterStack,
    pub report: MergeReport,
    /// Alignment of `stacks[i + 1]` onto the anchor.
    pub alignments: Vec<StackAlignment>,
}

/// Aligns every input to the first one and averages the `n` results.
pub fn merge_ot(
    stacks: &[AdapterStack],
    strategy: &MergeStrategy,
    probes: Option<&ProbeBatch>,
) -> Result<(AdapterStack, MergeReport)> {
    merge_ot_detailed(stacks, strategy, probes).map(|m| (m.merged, m.report))
}

pub fn merge_ot_detailed(
    stacks: &[AdapterStack],
    strategy: &MergeStrategy,
    probes: Option<&ProbeBatch>,
) -> Result<OtMerge> {
    let metric = strategy
        .kind
        .metric()
        .ok_or_else(|| Error::Config(format!("{} is not an alignment strategy", strategy.kind.name())))?;
    let cfg = check_inputs(stacks)?;
    if stacks.len() < 2 {
        return Err(Error::Validation(format!(
            "{} merging needs at least two adapters",
            strategy.kind.name()
        )));
    }
    if metric == MetricKind::Acts && probes.is_none() {
        return Err(Error::MissingProbe("activation merging requires a probe batch".into()));
    }
    let anchor = &stacks[0];
    let alignments = par::try_map(&stacks[1..], |other| {
        align_stack(
            anchor,
            other,
            metric,
            strategy.include_bias_in_cost,
            &strategy.solver,
            probes,
        )
    })?;

    let mut aligned = Vec::with_capacity(stacks.len());
    aligned.push(anchor.clone());
    aligned.extend(alignments.iter().map(|a| a.stack.clone()));
    let merged = AdapterStack {
        config: cfg,
        layers: running_mean(&aligned, cfg.layers),
        metadata: merged_metadata(stacks, strategy.kind.name()),
    };

    let transport: Vec<InputTransport> = alignments
        .iter()
        .enumerate()
        .map(|(i, a)| InputTransport {
            input: i + 1,
            name: stacks[i + 1].metadata.name.clone(),
            layer_costs: a.layers.iter().map(|r| r.plan.cost).collect(),
            converged: a.layers.iter().all(|r| r.plan.converged),
        })
        .collect();
    let total = transport.iter().flat_map(|t| &t.layer_costs).sum();
    let mut report = base_report(stacks, strategy, cfg);
    report.transport = Some(transport);
    report.total_transport_cost = Some(total);
    Ok(OtMerge {
        merged,
        report,
        alignments,
    })
}

fn base_report(stacks: &[AdapterStack], strategy: &MergeStrategy, cfg: AdapterConfig) -> MergeReport {
    MergeReport {
        schema_version: REPORT_SCHEMA_VERSION,
        strategy: *strategy,
        n_inputs: stacks.len(),
        anchor: stacks.first().map(|s| s.metadata.name.clone()),
        inputs: stacks
            .iter()
            .map(|s| InputInfo {
                name: s.metadata.name.clone(),
                track: s.metadata.track.clone(),
                source_task: s.metadata.source_task.clone(),
            })
            .collect(),
        transport: None,
        total_transport_cost: None,
        params: ParamReport::new(&cfg, stacks.len()),
    }
}

/// Dispatches on the strategy.
pub fn merge(
    stacks: &[AdapterStack],
    strategy: &MergeStrategy,
    probes: Option<&ProbeBatch>,
) -> Result<(AdapterStack, MergeReport)> {
    match strategy.kind {
        MergeKind::Sum | MergeKind::Avg => {
            let cfg = check_inputs(stacks)?;
            let merged = if strategy.kind == MergeKind::Sum {
                merge_sum(stacks)?
            } else {
                merge_avg(stacks)?
            };
            Ok((merged, base_report(stacks, strategy, cfg)))
        }
        MergeKind::OtWts | MergeKind::OtActs => merge_ot(stacks, strategy, probes),
    }
}

/// Stacks whose track equals `track`, in input order.
pub fn filter_same_track(stacks: &[AdapterStack], track: &str) -> Result<Vec<AdapterStack>> {
    let out: Vec<AdapterStack> = stacks.iter().filter(|s| s.metadata.track == track).cloned().collect();
    if out.is_empty() {
        return Err(Error::EmptySelection(format!("no adapter belongs to track '{track}'")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::Nonlinearity;
    use crate::ot::{brute_force_plan, plan_cost};
    use crate::synth::{gen_adapter, gen_probe};

    fn cfg() -> AdapterConfig {
        AdapterConfig::new(12, 2, 2, Nonlinearity::Relu).unwrap()
    }

    fn named(seed: u64, track: &str) -> AdapterStack {
        let mut s = gen_adapter(&cfg(), seed);
        s.metadata.name = format!("a{seed}");
        s.metadata.track = track.into();
        s
    }

    fn permuted(s: &AdapterStack, perms: &[&[usize]]) -> AdapterStack {
        let mut out = s.clone();
        for (l, p) in perms.iter().enumerate() {
            out.layers[l] = s.layers[l].permute_bottleneck(p);
        }
        out
    }

    #[test]
    fn sum_identities() {
        let a = named(1, "x");
        let zero = AdapterStack::zeros(cfg(), StackMetadata::default());
        assert_eq!(merge_sum(&[a.clone(), zero]).unwrap().layers, a.layers);
        let doubled = merge_sum(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(
            doubled.layers,
            a.layers.iter().map(|l| l.map(|x| 2.0 * x)).collect::<Vec<_>>()
        );

        let (b, c) = (named(2, "x"), named(3, "x"));
        let s = merge_sum(&[a.clone(), b.clone(), c.clone()]).unwrap();
        for l in 0..2 {
            let oracle = a.layers[l]
                .zip_map(&b.layers[l], |x, y| x + y)
                .zip_map(&c.layers[l], |x, y| x + y);
            assert!(s.layers[l].max_abs_diff(&oracle) < 1e-12);
        }
    }

    #[test]
    fn avg_identities() {
        let a = named(4, "x");
        let copies = vec![a.clone(); 5];
        assert_eq!(merge_avg(&copies).unwrap().layers, a.layers);
        let neg = AdapterStack {
            layers: a.layers.iter().map(|l| l.map(|x| -x)).collect(),
            ..a.clone()
        };
        let z = merge_avg(&[a.clone(), neg]).unwrap();
        assert!(z
            .layers
            .iter()
            .all(|l| l.max_abs_diff(&AdapterLayer::zeros(&cfg())) == 0.0));

        let trio = [a, named(5, "x"), named(6, "x")];
        let s = merge_sum(&trio).unwrap();
        let m = merge_avg(&trio).unwrap();
        for l in 0..2 {
            assert!(m.layers[l].max_abs_diff(&s.layers[l].map(|x| x / 3.0)) < 1e-12);
        }
    }

    #[test]
    fn config_mismatch() {
        let other = gen_adapter(&AdapterConfig::new(12, 3, 2, Nonlinearity::Relu).unwrap(), 1);
        assert!(matches!(merge_sum(&[named(1, "x"), other]), Err(Error::Config(_))));
        assert!(matches!(merge_avg(&[]), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn ot_undoes_permutation() {
        let a = named(7, "x");
        let b = permuted(&a, &[&[5, 4, 3, 2, 1, 0], &[1, 2, 0, 4, 5, 3]]);
        let (m, report) = merge_ot(&[a.clone(), b.clone()], &MergeStrategy::new(MergeKind::OtWts), None).unwrap();
        assert!(m.max_abs_diff(&a) < 1e-12);
        assert!(merge_avg(&[a.clone(), b]).unwrap().max_abs_diff(&a) > 1e-3);
        assert_eq!(report.total_transport_cost, Some(0.0));
    }

    #[test]
    fn ot_identical_inputs() {
        let a = named(8, "x");
        let probes = gen_probe(12, 40, 2, 3);
        for kind in [MergeKind::OtWts, MergeKind::OtActs] {
            let (m, _) = merge_ot(&vec![a.clone(); 3], &MergeStrategy::new(kind), Some(&probes)).unwrap();
            assert_eq!(m.layers, a.layers);
            let (m2, _) = merge_ot(&vec![a.clone(); 2], &MergeStrategy::new(kind), Some(&probes)).unwrap();
            assert_eq!(m2.layers, merge_avg(&vec![a.clone(); 2]).unwrap().layers);
        }
    }

    #[test]
    fn ot_matches_brute_force_oracle() {
        let stacks = [named(9, "x"), named(10, "x"), named(11, "x")];
        let (m, _) = merge_ot(&stacks, &MergeStrategy::new(MergeKind::OtWts), None).unwrap();
        let anchor = &stacks[0];
        for l in 0..2 {
            let mut aligned = vec![anchor.layers[l].clone()];
            for other in &stacks[1..] {
                // cost rows: other neurons, cols: anchor neurons
                let cost = crate::linalg::pairwise_sq_dist(&other.layers[l].w_down, &anchor.layers[l].w_down).unwrap();
                let perm = brute_force_plan(&cost).unwrap().assignment().unwrap();
                let mut inverse = vec![0; perm.len()];
                for (q, &p) in perm.iter().enumerate() {
                    inverse[p] = q;
                }
                aligned.push(other.layers[l].permute_bottleneck(&inverse));
            }
            let n = aligned.len() as f64;
            let mut mean = AdapterLayer::zeros(&cfg());
            for x in &aligned {
                mean = mean.zip_map(x, |a, b| a + b / n);
            }
            assert!(m.layers[l].max_abs_diff(&mean) < 1e-12);
        }
    }

    #[test]
    fn report_consistency() {
        let stacks = [named(12, "x"), named(13, "y"), named(14, "x")];
        let probes = gen_probe(12, 30, 2, 5);
        let out = merge_ot_detailed(&stacks, &MergeStrategy::new(MergeKind::OtActs), Some(&probes)).unwrap();
        let tr = out.report.transport.as_ref().unwrap();
        for (a, t) in out.alignments.iter().zip(tr) {
            for (r, c) in a.layers.iter().zip(&t.layer_costs) {
                assert!((plan_cost(&r.plan, &r.ground_cost).unwrap() - c).abs() < 1e-12);
                assert!(*c >= 0.0);
            }
        }
        assert_eq!(out.merged.metadata.track, "mixed");
        assert_eq!(out.report.anchor.as_deref(), Some("a12"));
    }

    #[test]
    fn ot_errors() {
        let a = named(1, "x");
        assert!(matches!(
            merge_ot(&[a.clone(), a.clone()], &MergeStrategy::new(MergeKind::OtActs), None),
            Err(Error::MissingProbe(_))
        ));
        assert!(merge_ot(std::slice::from_ref(&a), &MergeStrategy::new(MergeKind::OtWts), None).is_err());
        let (_, report) = merge(&[a.clone(), a], &MergeStrategy::new(MergeKind::Sum), None).unwrap();
        assert!(report.transport.is_none());
    }

    #[test]
    fn track_filter() {
        let s = [named(1, "NLI"), named(2, "STS"), named(3, "NLI")];
        let f = filter_same_track(&s, "NLI").unwrap();
        assert_eq!(
            f.iter().map(|x| x.metadata.name.as_str()).collect::<Vec<_>>(),
            ["a1", "a3"]
        );
        assert_eq!(filter_same_track(&s[..1], "NLI").unwrap().len(), 1);
        assert!(matches!(filter_same_track(&s, "QA"), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn param_report() {
        let c = AdapterConfig::new(768, 16, 12, Nonlinearity::Relu).unwrap();
        let r2 = ParamReport::new(&c, 2);
        let r5 = ParamReport::new(&c, 5);
        assert_eq!(r2.merged_total, r5.merged_total);
        assert_eq!(r2.merged_total, 73_728 * 12);
        assert!(r5.fusion_total > r2.fusion_total);
        assert_eq!(r2.composition_to_adapter_ratio, 24.0);
    }
}
