//! Command-line front end. Exit codes: 0 success, 1 bad input or
//! configuration, 2 runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use gem_core::config::GemConfig;
use gem_core::dataset::{generate_toy_dataset, read_graphs, write_graphs_file, Dataset};
use gem_core::energy::{EnergyModel, Potential};
use gem_core::geodesics::{compare_pairs, endpoint_pairs, summarize_bins, write_path_csv};
use gem_core::graph::GraphSpec;
use gem_core::guidance::{
    edge_count_property, score_guided, train_regressor, write_guided_csv, Bands, ConditionalPotential,
    GuidanceConfig, PropertyRegressor,
};
use gem_core::metrics::{stat_distance, vun_metrics};
use gem_core::oracle::mixing_tv;
use gem_core::proposals::ProposalConfig;
use gem_core::sampler::{sample, SamplerConfig, SamplerReport};
use gem_core::training::{calibrate_sampler, train};
use gem_core::{GemError, Result};

#[derive(Parser)]
#[command(name = "gem", version, about = "Energy-based graph generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; every field is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<GemConfig> {
        match &self.config {
            Some(p) => GemConfig::load(p),
            None => Ok(GemConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset of valid graphs as JSONL.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an energy model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Continue from an existing checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Grid-search mixing hyperparameters for a trained model.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Table of every configuration and its mean final energy.
        #[arg(long)]
        out: PathBuf,
        /// Write the winning proposal settings as JSON.
        #[arg(long)]
        best: Option<PathBuf>,
    },
    /// Draw graphs from a trained model.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Training graphs; node counts for noise starts, states for data starts.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Property-guided sampling over a sweep of guidance weights.
    Guide {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV, one row per guidance weight.
        #[arg(long)]
        out: PathBuf,
        /// Trained regressor; fitted to edge counts of the data when absent.
        #[arg(long)]
        regressor: Option<PathBuf>,
        #[arg(long)]
        save_regressor: Option<PathBuf>,
    },
    /// Compare energy-weighted and cost-only paths between dataset graphs.
    Geodesic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-path report CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Validity, uniqueness, novelty and distribution distance of samples.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
        /// Training graphs, for novelty and the distance reference.
        #[arg(long)]
        data: PathBuf,
        /// Kernel bandwidth of the distribution distance.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
    /// Mixing-chain total variation against the exact Gibbs law.
    OracleCheck {
        /// Untrained 3-node model with 2 node and 2 edge classes.
        #[arg(long)]
        tiny: bool,
        /// Model to check instead; its spec must be small enough to enumerate.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 1_000_000)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| GemError::InvalidArgument(format!("cannot create {}: {e}", path.display())))
}

fn load_data(path: &Path, spec: GraphSpec) -> Result<Dataset> {
    let d = Dataset::read_jsonl(path, spec)?;
    if d.is_empty() {
        return Err(GemError::Empty(format!("{} holds no graphs", path.display())));
    }
    Ok(d)
}

fn load_model(path: &Path, cfg: &GemConfig) -> Result<EnergyModel> {
    let m = EnergyModel::load(path)?;
    if *m.spec() != cfg.spec {
        return Err(GemError::Config(format!("{} was trained for {:?}, config has {:?}", path.display(), m.spec(), cfg.spec)));
    }
    Ok(m)
}

fn sampler_for(cfg: &GemConfig, model: &EnergyModel) -> SamplerConfig {
    let mut s = cfg.sampler.sampler;
    if cfg.sampler.use_model_threshold && s.v_threshold == f64::NEG_INFINITY {
        if let Some(t) = model.calibration.v_threshold {
            s.v_threshold = t;
        }
    }
    s
}

fn draw<P: Potential + ?Sized>(p: &P, cfg: &GemConfig, s: &SamplerConfig, data: &Dataset, record: bool) -> Result<SamplerReport> {
    let sc = &cfg.sampler;
    sample(p, sc.init, &data.node_count_histogram(), &data.graphs, s, sc.chains, sc.steps, sc.seed, record, sc.threads)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, size, seed } => {
            let cfg = common.load()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.data.seed));
            let d = generate_toy_dataset(&cfg.spec, &cfg.rules, &cfg.data.toy, size.unwrap_or(cfg.data.size), &mut rng)?;
            d.write_jsonl(&out)?;
            println!("wrote {} graphs to {}", d.len(), out.display());
        }
        Command::Train { common, data, out, history, checkpoint_dir, resume, steps } => {
            let mut cfg = common.load()?;
            if let Some(s) = steps {
                cfg.training.steps = s;
                cfg.training.n_warmup = cfg.training.n_warmup.min(s);
            }
            let data = load_data(&data, cfg.spec)?;
            let mut model = match resume {
                Some(p) => load_model(&p, &cfg)?,
                None => EnergyModel::new(cfg.spec, cfg.model.hidden, cfg.model.layers, cfg.model.seed)?,
            };
            if let Some(dir) = &checkpoint_dir {
                std::fs::create_dir_all(dir)?;
            }
            let total = cfg.training.steps;
            let every = (total / 20).max(1);
            let report = train(&mut model, &data, &cfg.training, checkpoint_dir.as_deref(), |row| {
                if (row.step + 1) % every == 0 {
                    eprintln!(
                        "step {}/{} flow {:.4} cl {} V_th {:.3}",
                        row.step + 1,
                        total,
                        row.flow_loss,
                        row.cl_loss.map_or("-".into(), |c| format!("{c:.4}")),
                        row.v_threshold
                    );
                }
            })?;
            model.save(&out, total)?;
            if let Some(h) = history {
                report.history.write_csv(writer(&h)?)?;
            }
            println!("{}", serde_json::to_string(&model.calibration)?);
        }
        Command::Calibrate { common, model, data, out, best } => {
            let cfg = common.load()?;
            let model = load_model(&model, &cfg)?;
            let data = load_data(&data, cfg.spec)?;
            let c = &cfg.calibration;
            let base = sampler_for(&cfg, &model);
            let r = calibrate_sampler(
                &model,
                &data.node_count_histogram(),
                &base,
                &c.search,
                c.chains,
                c.steps,
                c.seed,
                cfg.sampler.threads,
            )?;
            r.write_csv(writer(&out)?)?;
            let text = serde_json::to_string_pretty(&r.best)?;
            if let Some(p) = best {
                std::fs::write(&p, &text)?;
            }
            println!("{text}");
        }
        Command::Sample { common, model, data, out, trace, chains, steps, seed, threads } => {
            let mut cfg = common.load()?;
            let sc = &mut cfg.sampler;
            sc.chains = chains.unwrap_or(sc.chains);
            sc.steps = steps.unwrap_or(sc.steps);
            sc.seed = seed.unwrap_or(sc.seed);
            sc.threads = threads.or(sc.threads);
            let model = load_model(&model, &cfg)?;
            let data = load_data(&data, cfg.spec)?;
            let s = sampler_for(&cfg, &model);
            let r = draw(&model, &cfg, &s, &data, trace.is_some())?;
            write_graphs_file(&out, &r.final_graphs())?;
            if let Some(t) = trace {
                r.write_trace_csv(writer(&t)?)?;
            }
            let e = r.final_energies();
            println!("wrote {} graphs, mean energy {:.4}", e.len(), e.iter().sum::<f64>() / e.len() as f64);
        }
        Command::Guide { common, model, data, out, regressor, save_regressor } => {
            let cfg = common.load()?;
            let model = load_model(&model, &cfg)?;
            let data = load_data(&data, cfg.spec)?;
            let reg = match regressor {
                Some(p) => PropertyRegressor::load(&p)?,
                None => {
                    let labels: Vec<f64> = data.graphs.iter().map(edge_count_property).collect();
                    train_regressor(&cfg.spec, &data.graphs, &labels, "edge_count", &cfg.guidance.regressor)?
                }
            };
            if let Some(p) = save_regressor {
                reg.save(&p, cfg.guidance.regressor.steps)?;
            }
            let bands = if reg.time_conditioned() { Some(Bands::from_calibration(&model.calibration)?) } else { None };
            let s = sampler_for(&cfg, &model);
            let mut rows = Vec::new();
            for &lambda in &cfg.guidance.lambdas {
                let g = GuidanceConfig { zeta: cfg.guidance.zeta, lambda_prop: lambda, constraint: cfg.guidance.constraint };
                let pot = ConditionalPotential::new(&model, &reg, g, bands)?;
                let r = draw(&pot, &cfg, &s, &data, false)?;
                let score =
                    score_guided(&r.final_graphs(), &data.graphs, &cfg.rules, g.constraint, edge_count_property, lambda);
                println!(
                    "lambda {lambda}: satisfaction {:.3} validity {:.3} satisfied-vu {:.3}",
                    score.satisfaction, score.vun.validity, score.satisfied_vu
                );
                rows.push(score);
            }
            write_guided_csv(writer(&out)?, &rows)?;
        }
        Command::Geodesic { common, model, data, out, pairs } => {
            let cfg = common.load()?;
            let model = load_model(&model, &cfg)?;
            let data = load_data(&data, cfg.spec)?;
            let g = &cfg.geodesic;
            let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
            let chosen = endpoint_pairs(&data.graphs, pairs.unwrap_or(g.pairs), &mut rng);
            if chosen.is_empty() {
                return Err(GemError::Empty("no pair of distinct graphs with equal node counts".into()));
            }
            let records = compare_pairs(&model, &data.graphs, &chosen, &g.geodesic, &cfg.rules, g.seed)?;
            write_path_csv(writer(&out)?, &records)?;
            for b in summarize_bins(&records) {
                println!(
                    "bin {}: {} pairs, validity energy {:.3} cost {:.3}, sign-test p {:.4}",
                    b.bin, b.pairs, b.energy_validity, b.cost_validity, b.p_value
                );
            }
        }
        Command::Evaluate { common, samples, data, sigma } => {
            let cfg = common.load()?;
            let f = File::open(&samples)
                .map_err(|e| GemError::InvalidArgument(format!("cannot open {}: {e}", samples.display())))?;
            let graphs = read_graphs(std::io::BufReader::new(f), &cfg.spec)?;
            let data = load_data(&data, cfg.spec)?;
            let v = vun_metrics(&graphs, &data.graphs, &cfg.rules);
            let d = stat_distance(&graphs, &data.graphs, &cfg.spec, sigma);
            println!("{}", json!({ "samples": graphs.len(), "vun": v, "stat_distance": d }));
        }
        Command::OracleCheck { tiny, model, n, steps, seed, tolerance } => {
            let (model, n, cfg) = match (tiny, model) {
                (true, None) => {
                    let spec = GraphSpec::new(3, 2, 2)?;
                    (EnergyModel::new(spec, 8, 1, 2024)?, 3, ProposalConfig::fixed(1.0, 0.5, 0.5, 1.0))
                }
                (false, Some(p)) => (EnergyModel::load(&p)?, n, ProposalConfig::fixed(1.0, 0.5, 0.5, 1.0)),
                _ => return Err(GemError::InvalidArgument("pass exactly one of --tiny or --model".into())),
            };
            let tv = mixing_tv(&model, n, &cfg, steps, seed)?;
            let ok = tv < tolerance;
            println!("TV {tv:.5} over {steps} steps: {}", if ok { "PASS" } else { "FAIL" });
            if !ok {
                return Err(GemError::CheckFailed(format!("total variation {tv} exceeds {tolerance}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
