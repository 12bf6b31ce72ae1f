use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adapter_merge::adapter::{param_count_with_bias, ParamKind};
use adapter_merge::align::Solver;
use adapter_merge::merge::{merge, ParamReport};
use adapter_merge::ot::SinkhornParams;
use adapter_merge::store;
use adapter_merge::synth::{self, ExperimentSpec};
use adapter_merge::{AdapterConfig, Error, MergeKind, MergeStrategy, Nonlinearity};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "adapter-merge",
    version,
    about = "Merge bottleneck adapters by sum, average, or OT alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge adapter files into one.
    ///
    /// The first input is the anchor: for wts and acts every other input is
    /// aligned into its neuron order before averaging.
    Merge(MergeArgs),
    /// Generate deterministic fixtures.
    Gen {
        #[command(subcommand)]
        what: GenCommand,
    },
    /// Print the header, tensor table and finiteness check of a container.
    Inspect { file: PathBuf },
    /// Parameter counts for one adapter, a merged adapter and AdapterFusion.
    Params(ParamsArgs),
    /// Run the synthetic directional experiment.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sum,
    Avg,
    Wts,
    Acts,
}

impl From<Method> for MergeKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Sum => MergeKind::Sum,
            Method::Avg => MergeKind::Avg,
            Method::Wts => MergeKind::OtWts,
            Method::Acts => MergeKind::OtActs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Exact,
    Sinkhorn,
}

#[derive(Args)]
struct MergeArgs {
    /// Adapter files; the first one is the anchor.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, value_enum, default_value = "exact")]
    solver: SolverArg,
    /// Sinkhorn regularization (default 0.05 · mean cost).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Probe container, required by --method acts.
    #[arg(long)]
    probe: Option<PathBuf>,
    /// Keep only inputs whose track is NAME.
    #[arg(long, value_name = "NAME")]
    same_track: Option<String>,
    /// Append biases to the weight rows compared by --method wts.
    #[arg(long)]
    include_bias: bool,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the JSON merge report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenCommand {
    Adapter {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "relu")]
        nonlinearity: String,
        #[arg(long, default_value = "")]
        track: String,
        /// Defaults to adapter-<seed>.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    Probe {
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// A track of synthetic tasks as JSON.
    Tasks {
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        n_tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "track")]
        track: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    n_adapters: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Spec file; the bundled default is used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_default_spec")]
    out: Option<PathBuf>,
    /// Print the bundled default spec and exit.
    #[arg(long)]
    print_default_spec: bool,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn user(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let user = match &e {
            // unreadable or missing paths come from the command line
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied | std::io::ErrorKind::IsADirectory
            ),
            other => other.is_user_error(),
        };
        Failure {
            code: if user { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn in_file(path: &Path, e: Error) -> Failure {
    let mut f = Failure::from(e);
    if !f.message.starts_with(&path.display().to_string()) {
        f.message = format!("{}: {}", path.display(), f.message);
    }
    f
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn cmd_merge(a: MergeArgs) -> CmdResult {
    let kind = MergeKind::from(a.method);
    let mut inputs = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        inputs.push((p, store::read_adapter(p).map_err(|e| in_file(p, e))?));
    }
    if let Some(track) = &a.same_track {
        inputs.retain(|(_, s)| &s.metadata.track == track);
        if inputs.is_empty() {
            return Err(Error::EmptySelection(format!("no input belongs to track '{track}'")).into());
        }
    }
    let anchor = inputs[0].1.config;
    if let Some((p, s)) = inputs.iter().find(|(_, s)| s.config != anchor) {
        return Err(Failure::user(format!(
            "{}: config {:?} differs from the anchor's {:?}",
            p.display(),
            s.config,
            anchor
        )));
    }
    let stacks: Vec<_> = inputs.into_iter().map(|(_, s)| s).collect();
    if kind.metric().is_some() && stacks.len() < 2 {
        return Err(Failure::user(format!(
            "--method {} needs at least two inputs, got {}",
            kind.name(),
            stacks.len()
        )));
    }
    let probe = match (&a.probe, kind) {
        (None, MergeKind::OtActs) => return Err(Failure::user("--method acts requires --probe <FILE>")),
        (Some(p), _) => Some(store::read_probe(p).map_err(|e| in_file(p, e))?),
        (None, _) => None,
    };
    let solver = match a.solver {
        SolverArg::Exact => {
            if a.epsilon.is_some() {
                return Err(Failure::user("--epsilon only applies to --solver sinkhorn"));
            }
            Solver::Exact
        }
        SolverArg::Sinkhorn => Solver::Sinkhorn(SinkhornParams {
            epsilon: a.epsilon,
            ..Default::default()
        }),
    };
    let mut strategy = MergeStrategy::new(kind).with_solver(solver);
    strategy.include_bias_in_cost = a.include_bias;

    let (merged, report) = merge(&stacks, &strategy, probe.as_ref())?;
    write_bytes(&a.out, &store::encode_adapter(&merged)?)?;
    if let Some(r) = &a.report {
        store::write_report(&report, r)?;
    }
    let cost = report
        .total_transport_cost
        .map_or_else(|| "-".to_string(), |c| format!("{c:.6e}"));
    println!(
        "method={} n={} total_transport_cost={cost}",
        kind.name(),
        report.n_inputs
    );
    Ok(())
}

fn cmd_gen(what: GenCommand) -> CmdResult {
    match what {
        GenCommand::Adapter {
            d,
            r,
            layers,
            seed,
            nonlinearity,
            track,
            name,
            out,
        } => {
            let nl = Nonlinearity::parse(&nonlinearity).ok_or_else(|| {
                Failure::user(format!("unknown nonlinearity '{nonlinearity}' (relu, gelu, identity)"))
            })?;
            let cfg = AdapterConfig::new(d, r, layers, nl)?;
            let mut stack = synth::gen_adapter(&cfg, seed);
            stack.metadata.track = track;
            if let Some(name) = name {
                stack.metadata.name = name;
            }
            write_bytes(&out, &store::encode_adapter(&stack)?)
        }
        GenCommand::Probe {
            d,
            n,
            layers,
            seed,
            out,
        } => {
            if d == 0 || n == 0 || layers == 0 {
                return Err(Failure::user("--d, --n and --layers must be positive"));
            }
            write_bytes(&out, &store::encode_probe(&synth::gen_probe(d, n, layers, seed)))
        }
        GenCommand::Tasks {
            d,
            n_tasks,
            seed,
            track,
            out,
        } => {
            if d == 0 || n_tasks == 0 {
                return Err(Failure::user("--d and --n-tasks must be positive"));
            }
            let tasks = synth::gen_track(&track, n_tasks, d, seed);
            let mut text = serde_json::to_string(&tasks).map_err(Error::from)?;
            text.push('\n');
            write_bytes(&out, text.as_bytes())
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn cmd_inspect(path: &Path) -> CmdResult {
    let bytes = read_file(path)?;
    if bytes.starts_with(store::PROBE_MAGIC) {
        let probe = store::decode_probe(&bytes).map_err(|e| in_file(path, e))?;
        println!("probe: n={} d={} layers={}", probe.n(), probe.d(), probe.layer_count());
        println!("finite: yes");
        return Ok(());
    }
    let header = store::read_adapter_header(&bytes).map_err(|e| in_file(path, e))?;
    println!("{}", serde_json::to_string_pretty(&header).map_err(Error::from)?);
    println!();
    println!(
        "{:<16} {:>10} {:>10} {:>12} {:>12}",
        "tensor", "shape", "offset", "min", "max"
    );
    // header problems are reported before the payload is looked at
    store::validate_header(&header).map_err(|e| in_file(path, e))?;
    let stack = store::decode_adapter(&bytes).map_err(|e| in_file(path, e))?;
    for (l, layer) in stack.layers.iter().enumerate() {
        for ((name, _, data), entry) in layer.tensors().into_iter().zip(&header.tensors[4 * l..]) {
            let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
            let shape = entry.shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x");
            println!(
                "{:<16} {:>10} {:>10} {:>12.5} {:>12.5}",
                format!("layer{l}/{name}"),
                shape,
                entry.offset_bytes,
                lo,
                hi
            );
        }
    }
    println!("finite: yes");
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> CmdResult {
    let cfg = AdapterConfig::new(a.d, a.r, a.layers, Nonlinearity::Relu)?;
    if a.n_adapters == 0 {
        return Err(Failure::user("--n-adapters must be at least 1"));
    }
    let p = ParamReport::new(&cfg, a.n_adapters);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&p).map_err(Error::from)?);
        return Ok(());
    }
    let with_bias = param_count_with_bias(&cfg, ParamKind::Adapter, true);
    println!("d={} r={} layers={} n_adapters={}", p.d, p.r, p.layers, p.n_adapters);
    println!("{:<28} {:>14} {:>16}", "", "per layer", "total");
    println!(
        "{:<28} {:>14} {:>16}",
        "adapter", p.adapter_per_layer, p.single_adapter_total
    );
    println!(
        "{:<28} {:>14} {:>16}",
        "merged adapter", p.adapter_per_layer, p.merged_total
    );
    println!(
        "{:<28} {:>14} {:>16}",
        "composition layer",
        p.composition_per_layer,
        p.composition_per_layer * p.layers as u64
    );
    println!(
        "{:<28} {:>14} {:>16}",
        "adapterfusion",
        p.n_adapters as u64 * p.adapter_per_layer + p.composition_per_layer,
        p.fusion_total
    );
    println!("composition/adapter ratio: {}", p.composition_to_adapter_ratio);
    println!("adapter per layer with biases: {with_bias}");
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> CmdResult {
    if a.print_default_spec {
        print!("{}", synth::DEFAULT_SPEC_JSON);
        return Ok(());
    }
    let spec = match &a.spec {
        Some(p) => {
            let text = String::from_utf8(read_file(p)?)
                .map_err(|_| Failure::user(format!("{}: spec is not UTF-8", p.display())))?;
            ExperimentSpec::from_json(&text).map_err(|e| in_file(p, e))?
        }
        None => ExperimentSpec::default(),
    };
    let out = a.out.expect("clap enforces --out");
    fs::create_dir_all(&out).map_err(|e| {
        Failure::from(Error::Io {
            path: out.clone(),
            source: e,
        })
    })?;
    let result = synth::run_directional_experiment(&spec)?;
    let json = |v: &serde_json::Value| -> Result<Vec<u8>, Failure> {
        let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
        s.push('\n');
        Ok(s.into_bytes())
    };
    for s in &result.seeds {
        let v = serde_json::to_value(s).map_err(Error::from)?;
        write_bytes(&out.join(format!("seed-{}.json", s.seed)), &json(&v)?)?;
    }
    let agg = serde_json::json!({ "spec": result.spec, "aggregate": result.aggregate });
    write_bytes(&out.join("aggregate.json"), &json(&agg)?)?;
    let table = result.summary_table();
    write_bytes(&out.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Merge(a) => cmd_merge(a),
        Command::Gen { what } => cmd_gen(what),
        Command::Inspect { file } => cmd_inspect(&file),
        Command::Params(a) => cmd_params(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("adapter-merge: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("adapter-merge: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
