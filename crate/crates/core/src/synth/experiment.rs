//! Directional experiment: pretrain adapters on source tasks, merge them with
//! each strategy, and compare zero-shot and few-shot loss on a held-out task
//! against a randomly initialized adapter and against a merge of adapters
//! from a different track.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterStack, Nonlinearity, ProbeBatch};
use crate::align::Solver;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::merge::{merge, MergeKind, MergeStrategy};
use crate::par;

use super::model::{evaluate, train_adapter, Backbone, Metrics, TrainConfig};
use super::rng::Rng;
use super::{gen_adapter, gen_track_with, SyntheticTask, TaskSizes};

/// The bundled default spec.
pub const DEFAULT_SPEC_JSON: &str = include_str!("default_spec.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seeds: Vec<u64>,
    pub d: usize,
    pub r: usize,
    pub layers: usize,
    pub nonlinearity: Nonlinearity,
    pub n_source_tasks: usize,
    pub shots: Vec<usize>,
    pub tasks: TaskSizes,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub probe_size: usize,
    pub strategies: Vec<MergeKind>,
    /// Strategy used for the cross-track merge; `None` disables it.
    pub cross_track: Option<MergeKind>,
    pub solver: Solver,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec::from_json(DEFAULT_SPEC_JSON).expect("bundled spec is valid")
    }
}

fn spec_err(path: &str, message: impl Into<String>) -> Error {
    Error::Spec {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentSpec {
    /// Parses and validates a spec; errors carry the JSON path of the
    /// offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = match e.path().to_string() {
                p if p == "." => "$".to_string(),
                p => format!("$.{p}"),
            };
            spec_err(&path, e.into_inner().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(spec_err("$.seeds", "at least one seed is required"));
        }
        AdapterConfig::new(self.d, self.r, self.layers, self.nonlinearity)
            .map_err(|e| spec_err("$.r", e.to_string()))?;
        if self.n_source_tasks < 2 {
            return Err(spec_err("$.n_source_tasks", "need at least two source tasks to merge"));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(spec_err("$.shots", "shot counts must be non-empty and positive"));
        }
        if let Some(&k) = self.shots.iter().find(|&&k| 2 * k > self.tasks.n_train) {
            return Err(spec_err(
                "$.shots",
                format!("{k} shots per class exceed the {} training samples", self.tasks.n_train),
            ));
        }
        if self.tasks.n_test == 0 || self.tasks.n_train == 0 {
            return Err(spec_err("$.tasks", "task splits must be non-empty"));
        }
        if !(0.0..=0.1).contains(&self.tasks.perturbation) {
            return Err(spec_err("$.tasks.perturbation", "must lie in [0, 0.1]"));
        }
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if !(t.lr >= 0.0 && t.lr.is_finite()) {
                return Err(spec_err(&format!("$.{name}.lr"), "must be finite and non-negative"));
            }
        }
        let needs_probe = self.strategies.contains(&MergeKind::OtActs) || self.cross_track == Some(MergeKind::OtActs);
        if needs_probe && self.probe_size == 0 {
            return Err(spec_err("$.probe_size", "activation merging needs a non-empty probe"));
        }
        Ok(())
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            d: self.d,
            r: self.r,
            layers: self.layers,
            nonlinearity: self.nonlinearity,
        }
    }

    /// The shot count the directional checks use.
    pub fn primary_shots(&self) -> usize {
        self.shots.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotResult {
    pub shots: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitResult {
    /// `random`, a strategy name, or `cross-<strategy>`.
    pub init: String,
    pub zero_shot: Metrics,
    pub few_shot: Vec<ShotResult>,
}

impl InitResult {
    pub fn few_shot_loss(&self, shots: usize) -> Option<f64> {
        self.few_shot.iter().find(|s| s.shots == shots).map(|s| s.loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Final training loss of each source adapter.
    pub source_losses: Vec<f64>,
    pub inits: Vec<InitResult>,
}

impl SeedResult {
    pub fn init(&self, name: &str) -> Option<&InitResult> {
        self.inits.iter().find(|r| r.init == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_seeds: usize,
    pub primary_shots: usize,
    pub mean_zero_shot_loss: BTreeMap<String, f64>,
    /// init → shots → mean loss
    pub mean_few_shot_loss: BTreeMap<String, BTreeMap<usize, f64>>,
    /// Directional check name → number of seeds where it holds.
    pub checks: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Aggregate,
}

pub const RANDOM_INIT: &str = "random";

pub fn cross_name(kind: MergeKind) -> String {
    format!("cross-{}", kind.name())
}

fn pretrain_sources(
    spec: &ExperimentSpec,
    backbone: &Backbone,
    tasks: &[SyntheticTask],
    seed: u64,
    stream: u64,
) -> Result<Vec<(AdapterStack, f64)>> {
    let cfg = spec.adapter_config();
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let mut init = gen_adapter(&cfg, Rng::derive(seed, stream + i as u64));
            init.metadata.name = task.name.clone();
            init.metadata.track = task.track_id.clone();
            init.metadata.source_task = task.name.clone();
            let out = train_adapter(backbone, &task.train, &init, &spec.pretrain)?;
            let last = *out.losses.last().expect("at least the final loss");
            Ok((out.stack, last))
        })
        .collect()
}

fn probe_for(backbone: &Backbone, anchor: &AdapterStack, x: &Matrix) -> Result<ProbeBatch> {
    ProbeBatch::new(backbone.layer_inputs(anchor, x)?)
}

fn merged_init(
    spec: &ExperimentSpec,
    backbone: &Backbone,
    sources: &[AdapterStack],
    kind: MergeKind,
    probe_x: &Matrix,
) -> Result<AdapterStack> {
    let probes = if kind == MergeKind::OtActs {
        Some(probe_for(backbone, &sources[0], probe_x)?)
    } else {
        None
    };
    let strategy = MergeStrategy::new(kind).with_solver(spec.solver);
    Ok(merge(sources, &strategy, probes.as_ref())?.0)
}

fn evaluate_init(
    spec: &ExperimentSpec,
    backbone: &Backbone,
    target: &SyntheticTask,
    name: String,
    init: &AdapterStack,
) -> Result<InitResult> {
    let zero_shot = evaluate(backbone, init, &target.test)?;
    let few_shot = spec
        .shots
        .iter()
        .map(|&k| {
            let data = target.train.k_per_class(k);
            let tuned = train_adapter(backbone, &data, init, &spec.finetune)?;
            let m = evaluate(backbone, &tuned.stack, &target.test)?;
            Ok(ShotResult {
                shots: k,
                loss: m.loss,
                accuracy: m.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InitResult {
        init: name,
        zero_shot,
        few_shot,
    })
}

/// One seed of the experiment.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedResult> {
    let cfg = spec.adapter_config();
    let backbone = Backbone::random(spec.d, Rng::derive(seed, 1));
    let n = spec.n_source_tasks;
    let mut same = gen_track_with("track-a", n + 1, spec.d, Rng::derive(seed, 2), &spec.tasks);
    let target = same.pop().expect("n + 1 tasks");

    let sources = pretrain_sources(spec, &backbone, &same, seed, 100)?;
    let source_losses = sources.iter().map(|s| s.1).collect();
    let sources: Vec<AdapterStack> = sources.into_iter().map(|s| s.0).collect();

    let mut probe_rng = Rng::new(Rng::derive(seed, 4));
    let probe_x = Matrix::from_fn(spec.probe_size.max(1), spec.d, |_, _| probe_rng.gaussian());

    let mut inits: Vec<(String, AdapterStack)> = Vec::new();
    let mut random = gen_adapter(&cfg, Rng::derive(seed, 300));
    random.metadata.name = RANDOM_INIT.into();
    inits.push((RANDOM_INIT.into(), random));
    for &kind in &spec.strategies {
        inits.push((
            kind.name().to_string(),
            merged_init(spec, &backbone, &sources, kind, &probe_x)?,
        ));
    }
    if let Some(kind) = spec.cross_track {
        let other = gen_track_with("track-b", n, spec.d, Rng::derive(seed, 3), &spec.tasks);
        let cross: Vec<AdapterStack> = pretrain_sources(spec, &backbone, &other, seed, 200)?
            .into_iter()
            .map(|s| s.0)
            .collect();
        inits.push((cross_name(kind), merged_init(spec, &backbone, &cross, kind, &probe_x)?));
    }

    let inits = inits
        .into_iter()
        .map(|(name, stack)| evaluate_init(spec, &backbone, &target, name, &stack))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedResult {
        seed,
        source_losses,
        inits,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn aggregate(spec: &ExperimentSpec, seeds: &[SeedResult]) -> Aggregate {
    let primary = spec.primary_shots();
    let names: Vec<String> = seeds
        .first()
        .map(|s| s.inits.iter().map(|i| i.init.clone()).collect())
        .unwrap_or_default();
    let mut mean_zero_shot_loss = BTreeMap::new();
    let mut mean_few_shot_loss = BTreeMap::new();
    for name in &names {
        mean_zero_shot_loss.insert(
            name.clone(),
            mean(seeds.iter().filter_map(|s| s.init(name)).map(|i| i.zero_shot.loss)),
        );
        let per_shot = spec
            .shots
            .iter()
            .map(|&k| (k, mean(seeds.iter().filter_map(|s| s.init(name)?.few_shot_loss(k)))))
            .collect();
        mean_few_shot_loss.insert(name.clone(), per_shot);
    }

    let few = |s: &SeedResult, name: &str| s.init(name).and_then(|i| i.few_shot_loss(primary));
    let zero = |s: &SeedResult, name: &str| s.init(name).map(|i| i.zero_shot.loss);
    let count = |pred: &dyn Fn(&SeedResult) -> Option<bool>| -> Option<usize> {
        let mut hits = 0;
        for s in seeds {
            if pred(s)? {
                hits += 1;
            }
        }
        Some(hits)
    };

    let mut checks = BTreeMap::new();
    let acts = MergeKind::OtActs.name();
    let avg = MergeKind::Avg.name();
    let mut insert = |name: &str, v: Option<usize>| {
        if let Some(v) = v {
            checks.insert(name.to_string(), v);
        }
    };
    insert("acts_le_avg_few_shot", count(&|s| Some(few(s, acts)? <= few(s, avg)?)));
    insert(
        "avg_le_random_few_shot",
        count(&|s| Some(few(s, avg)? <= few(s, RANDOM_INIT)?)),
    );
    if let Some(kind) = spec.cross_track {
        let cross = cross_name(kind);
        insert(
            "same_track_lt_cross_track_few_shot",
            count(&|s| Some(few(s, kind.name())? < few(s, &cross)?)),
        );
        insert(
            "same_track_lt_cross_track_zero_shot",
            count(&|s| Some(zero(s, kind.name())? < zero(s, &cross)?)),
        );
    }
    for &kind in &spec.strategies {
        insert(
            &format!("{}_lt_random_zero_shot", kind.name()),
            count(&|s| Some(zero(s, kind.name())? < zero(s, RANDOM_INIT)?)),
        );
    }

    Aggregate {
        n_seeds: seeds.len(),
        primary_shots: primary,
        mean_zero_shot_loss,
        mean_few_shot_loss,
        checks,
    }
}

/// Runs every seed (in parallel when enabled) and aggregates. Results are
/// ordered by seed.
pub fn run_directional_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let mut seeds = spec.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let results = par::try_map(&seeds, |&s| run_seed(spec, s))?;
    let aggregate = aggregate(spec, &results);
    Ok(ExperimentResult {
        spec: spec.clone(),
        seeds: results,
        aggregate,
    })
}

impl ExperimentResult {
    /// Plain-text table of mean losses.
    pub fn summary_table(&self) -> String {
        let agg = &self.aggregate;
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>10}", "init", "zero-shot"));
        for k in &self.spec.shots {
            out.push_str(&format!(" {:>10}", format!("{k}-shot")));
        }
        out.push('\n');
        for (name, zs) in &agg.mean_zero_shot_loss {
            out.push_str(&format!("{name:<12} {zs:>10.4}"));
            for k in &self.spec.shots {
                let v = agg.mean_few_shot_loss[name][k];
                out.push_str(&format!(" {v:>10.4}"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\nchecks over {} seeds ({}-shot):\n",
            agg.n_seeds, agg.primary_shots
        ));
        for (name, hits) in &agg.checks {
            out.push_str(&format!("  {name:<40} {hits}/{}\n", agg.n_seeds));
        }
        out
    }
}
