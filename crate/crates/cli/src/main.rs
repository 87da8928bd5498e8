use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nbp_core::bp::{bp_decode, prior_llr, DecodeResult, TannerGraph, DEFAULT_CLIP};
use nbp_core::codes::{bicycle_code, hypergraph_product, toric_code, ClassicalCode, CssCode};
use nbp_core::eval::{
    classify_outcome, compare_csv, sweep, Decoder, DecodingSetup, Outcome, MIN_PRIOR_RATE,
};
use nbp_core::gf2::BitVector;
use nbp_core::nbp::{load_checkpoint, NbpModel, ParamKind};
use nbp_core::sector::{Sector, SectorData, SectorPolicy};
use nbp_core::train::{run_training, TrainConfig};
use nbp_core::Error;

#[derive(Parser)]
#[command(name = "nbp", version, about = "Neural belief-propagation decoders for quantum LDPC codes")]
struct Cli {
    /// Configuration file (training runs).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's seed when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct a code and write it as JSON.
    BuildCode {
        #[command(subcommand)]
        family: Family,
    },
    /// Train a model from a JSON config.
    Train,
    /// Estimate failure rates at one physical error rate.
    Evaluate {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        p: f64,
    },
    /// Estimate failure rates over a list of physical error rates.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated rates, strictly increasing.
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["from", "to", "count"])]
        rates: Option<Vec<f64>>,
        #[arg(long, requires_all = ["to", "count"])]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Export cvvc weights with lattice coordinates as CSV.
    InspectWeights {
        #[arg(long)]
        code: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SectorArg::X)]
        sector: SectorArg,
    },
    /// Decode a single error or syndrome and print the result as JSON.
    DecodeOne {
        #[arg(long)]
        code: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SectorArg::X)]
        sector: SectorArg,
        /// Error support, comma-separated qubit indices ("" for none).
        #[arg(long, conflicts_with = "syndrome", required_unless_present = "syndrome")]
        error: Option<String>,
        /// Syndrome support, comma-separated check indices ("" for none).
        #[arg(long)]
        syndrome: Option<String>,
        #[arg(long, default_value_t = 0.01)]
        p: f64,
        /// BP iterations when no checkpoint is given.
        #[arg(long, default_value_t = 12)]
        iterations: usize,
    },
}

#[derive(Subcommand)]
enum Family {
    Toric {
        #[arg(long = "L")]
        l: usize,
    },
    /// Random bicycle code; uses the global --seed (default 0).
    Bicycle {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        w: usize,
    },
    /// Hypergraph product of two named classical codes
    /// (hamming743, bch1575, parity<n>, repetition<n>).
    Hgp {
        #[arg(long)]
        c1: String,
        #[arg(long)]
        c2: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SectorArg {
    X,
    Z,
}

impl SectorArg {
    fn sector(self) -> Sector {
        match self {
            SectorArg::X => Sector::X,
            SectorArg::Z => Sector::Z,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    X,
    Z,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    code: PathBuf,
    /// Trained model; without it the untrained BP baseline is evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Model for the Z sector under `--sector both` (default: same file).
    #[arg(long)]
    checkpoint_z: Option<PathBuf>,
    /// Tile a tied checkpoint trained on another toric size.
    #[arg(long)]
    retarget: bool,
    #[arg(long, value_enum, default_value_t = PolicyArg::X)]
    sector: PolicyArg,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Baseline BP iterations; defaults to the model's cycle count, else 12.
    #[arg(long)]
    iterations: Option<usize>,
    /// Emit baseline and model rows side by side.
    #[arg(long, requires = "checkpoint")]
    compare: bool,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Construction(_) => 3,
            Error::Numerical(_) => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    /// Writes to `--out` when given, otherwise to stdout.
    fn emit(&self, text: &str) -> CliResult {
        match &self.out {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(p, text)?;
            }
            None => print!("{text}"),
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out.clone(),
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::BuildCode { family } => build_code(&ctx, family),
        Command::Train => train(&ctx, cli.config.as_deref()),
        Command::Evaluate { eval, p } => evaluate(&ctx, &eval, &[p]),
        Command::Sweep {
            eval,
            rates,
            from,
            to,
            count,
        } => {
            let rates = match (rates, from, to, count) {
                (Some(r), ..) => r,
                (None, Some(a), Some(b), Some(c)) => nbp_core::train::evenly_spaced(a, b, c),
                _ => {
                    eprintln!("error: give --rates or --from/--to/--count");
                    return ExitCode::from(2);
                }
            };
            evaluate(&ctx, &eval, &rates)
        }
        Command::InspectWeights {
            code,
            checkpoint,
            sector,
        } => inspect_weights(&ctx, &code, &checkpoint, sector.sector()),
        Command::DecodeOne {
            code,
            checkpoint,
            sector,
            error,
            syndrome,
            p,
            iterations,
        } => decode_one(
            &ctx,
            &code,
            checkpoint.as_deref(),
            sector.sector(),
            error.as_deref(),
            syndrome.as_deref(),
            p,
            iterations,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn build_code(ctx: &Ctx, family: Family) -> CliResult {
    let code = match family {
        Family::Toric { l } => toric_code(l)?,
        Family::Bicycle { n, k, w } => bicycle_code(n, k, w, ctx.seed.unwrap_or(0))?,
        Family::Hgp { c1, c2 } => {
            hypergraph_product(&ClassicalCode::by_name(&c1)?, &ClassicalCode::by_name(&c2)?)?
        }
    };
    let out = ctx
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.json", code.name)));
    code.save(&out)?;
    let report = serde_json::to_string_pretty(&code.validate())?;
    if !ctx.quiet {
        println!("{report}");
    }
    Ok(())
}

fn train(ctx: &Ctx, config: Option<&Path>) -> CliResult {
    let path = config.ok_or_else(|| usage("train needs --config"))?;
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let out = ctx.out.clone().unwrap_or_else(|| PathBuf::from("train_out"));
    std::fs::create_dir_all(&out)?;
    let mut echo = serde_json::to_string_pretty(&cfg)?;
    echo.push('\n');
    std::fs::write(out.join("resolved_config.json"), echo)?;
    let (_, history) = run_training(&cfg, &out)?;
    if let Some(last) = history.last() {
        ctx.note(&format!(
            "trained {} minibatches, final mean loss {:.6e}",
            last.minibatch, last.mean_loss
        ));
    }
    Ok(())
}

fn sector_graph(code: &CssCode, sector: Sector) -> CliResult<TannerGraph> {
    Ok(TannerGraph::new(match sector {
        Sector::X => &code.b,
        Sector::Z => &code.a,
    })?)
}

fn load_model(code: &CssCode, sector: Sector, path: &Path, retarget: bool) -> CliResult<NbpModel> {
    let graph = sector_graph(code, sector)?;
    Ok(load_checkpoint(path, &graph, code.lattice.as_ref(), retarget)?)
}

fn evaluate(ctx: &Ctx, args: &EvalArgs, rates: &[f64]) -> CliResult {
    let code = CssCode::load(&args.code)?;
    let policy = match args.sector {
        PolicyArg::X => SectorPolicy::X,
        PolicyArg::Z => SectorPolicy::Z,
        PolicyArg::Both => SectorPolicy::Both,
    };
    let seed = ctx.seed.unwrap_or(0);
    let mut models = Vec::new();
    if let Some(path) = &args.checkpoint {
        for &s in policy.sectors() {
            let p = match (s, &args.checkpoint_z, policy) {
                (Sector::Z, Some(z), SectorPolicy::Both) => z,
                _ => path,
            };
            models.push((s, load_model(&code, s, p, args.retarget)?));
        }
    }
    let iterations = args
        .iterations
        .or_else(|| models.first().map(|(_, m)| m.n_cycles()))
        .unwrap_or(12);
    let baseline = DecodingSetup::new(&code, policy, |_| Decoder::Bp {
        iterations,
        clip: DEFAULT_CLIP,
    })?;
    let model_setup = if models.is_empty() {
        None
    } else {
        Some(DecodingSetup::new(&code, policy, |s| {
            let m = models.iter().find(|(ms, _)| *ms == s).expect("loaded above");
            Decoder::Nbp(m.1.clone())
        })?)
    };
    let csv = match (&model_setup, args.compare) {
        (Some(m), true) => {
            let base = sweep(&baseline, rates, args.trials, seed)?;
            let model = sweep(m, rates, args.trials, seed)?;
            compare_csv(&[("baseline", &base), ("model", &model)])?
        }
        (Some(m), false) => sweep(m, rates, args.trials, seed)?.to_csv(),
        (None, _) => sweep(&baseline, rates, args.trials, seed)?.to_csv(),
    };
    ctx.emit(&csv)
}

fn inspect_weights(ctx: &Ctx, code_path: &Path, checkpoint: &Path, sector: Sector) -> CliResult {
    let code = CssCode::load(code_path)?;
    let lattice = code
        .lattice
        .ok_or_else(|| usage("inspect-weights needs a toric code with a lattice map"))?;
    let graph = sector_graph(&code, sector)?;
    let model = load_checkpoint(checkpoint, &graph, Some(&lattice), false)?;
    let mut csv = String::from("cycle,vx,vy,orientation,in_edge,out_edge,weight\n");
    for i in 0..model.n_params() {
        if let ParamKind::Cvvc { cycle, pair } = model.param_kind(i) {
            let (ein, eout) = model.pairs()[pair];
            let (cin, v) = graph.edge(ein);
            let (cout, _) = graph.edge(eout);
            let (x, y, o) = lattice.edge_coord(v);
            let _ = writeln!(
                csv,
                "{cycle},{x},{y},{},{cin},{cout},{:.16e}",
                o.label(),
                model.params()[i]
            );
        }
    }
    ctx.emit(&csv)
}

fn parse_support(text: &str, len: usize, what: &str) -> CliResult<BitVector> {
    let mut idx = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let i: usize = part
            .parse()
            .map_err(|_| usage(format!("bad {what} index {part:?}")))?;
        idx.push(i);
    }
    BitVector::from_support(len, &idx)
        .map_err(|_| usage(format!("{what} index out of range (length {len})")))
}

#[derive(Serialize)]
struct DecodeOneReport {
    sector: Sector,
    decoder: String,
    syndrome: Vec<usize>,
    #[serde(flatten)]
    result: DecodeResult,
    /// Only known when the true error was given.
    outcome: Option<Outcome>,
}

#[allow(clippy::too_many_arguments)]
fn decode_one(
    ctx: &Ctx,
    code_path: &Path,
    checkpoint: Option<&Path>,
    sector: Sector,
    error: Option<&str>,
    syndrome: Option<&str>,
    p: f64,
    iterations: usize,
) -> CliResult {
    let code = CssCode::load(code_path)?;
    let data = SectorData::new(&code, sector)?;
    let error = error.map(|e| parse_support(e, data.n(), "error")).transpose()?;
    let syndrome = match (&error, syndrome) {
        (Some(e), _) => data.syndrome(e)?,
        (None, Some(s)) => parse_support(s, data.check.rows(), "syndrome")?,
        (None, None) => return Err(usage("give --error or --syndrome")),
    };
    if !(0.0..1.0).contains(&p) {
        return Err(usage(format!("rate {p} outside [0, 1)")));
    }
    let priors = vec![prior_llr(p.max(MIN_PRIOR_RATE))?; data.n()];
    let (decoder, result) = match checkpoint {
        Some(path) => {
            let model = load_checkpoint(path, &data.graph, code.lattice.as_ref(), false)?;
            let trace = model.forward(&data.graph, &syndrome, &priors)?;
            let inferred = trace.inferred();
            let syndrome_matched = data.graph.syndrome_of(&inferred)? == syndrome;
            (
                Decoder::Nbp(model).id(),
                DecodeResult {
                    inferred,
                    marginals: trace.final_marginals().to_vec(),
                    iterations_used: trace.n_cycles(),
                    syndrome_matched,
                },
            )
        }
        None => (
            Decoder::bp(iterations).id(),
            bp_decode(&data.graph, &syndrome, &priors, iterations, DEFAULT_CLIP, false)?,
        ),
    };
    let outcome = match &error {
        Some(e) => Some(classify_outcome(e, &result.inferred, &data.check, &data.stabilizers)?),
        None => None,
    };
    let report = DecodeOneReport {
        sector,
        decoder,
        syndrome: syndrome.support(),
        result,
        outcome,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    ctx.emit(&text)
}
