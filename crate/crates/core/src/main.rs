use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use rcmodal::bench::{self, BenchError, SpeedConfig};
use rcmodal::dataset::{self, Dataset, DatasetConfig, DatasetError};
use rcmodal::modal::{decompose, ModalError, TransferFunction};
use rcmodal::netgen::{
    assemble_nodal, extract_transfer_function, generate_network, NetgenError, RcNetwork, Topology,
};
use rcmodal::refsim::{simulate, DriverKind, DriverModel, SimConfig, SimError};
use rcmodal::surrogate::{self, SurrogateBundle, SurrogateConfig, SurrogateError};
use rcmodal::waveform::Waveform;

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "RCMODAL_OUT";
const DEFAULT_OUT: &str = "rcmodal-out";

#[derive(Parser)]
#[command(name = "rcmodal", version, about = "Modal analysis, reference simulation and neural surrogates for RC interconnect")]
struct Cli {
    /// Random seed for generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (single-artifact commands) or directory. Directory
    /// commands default to $RCMODAL_OUT, then ./rcmodal-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random RC network as JSON.
    Netgen {
        #[arg(long)]
        order: usize,
        #[arg(long, default_value = "ladder")]
        topology: Topology,
    },
    /// Partial-fraction decomposition of a transfer-function or network JSON.
    Decompose {
        #[arg(long)]
        input: PathBuf,
    },
    /// Transient step response of a network; writes waveform CSV.
    Simulate {
        #[arg(long)]
        network: PathBuf,
        #[command(flatten)]
        driver: DriverArgs,
        /// Time step in seconds.
        #[arg(long)]
        dt: Option<f64>,
        /// Window length in seconds.
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Dataset operations.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train the base predictor and residual cascade; writes bundle.json.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Highest residual module to train.
        #[arg(long, default_value_t = 3)]
        max_order: usize,
    },
    /// Predict a step response with a trained bundle; writes waveform CSV.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        /// Transfer-function or network JSON.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        driver: DriverArgs,
        /// Time step in seconds.
        #[arg(long, default_value_t = 10e-12)]
        dt: f64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Allow orders beyond the trained cascade.
        #[arg(long)]
        extrapolate: bool,
    },
    /// Experiments.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Build order-stratified NDJSON files plus manifest.json.
    Build {
        /// Orders as `a..b` (inclusive) or a comma list.
        #[arg(long)]
        orders: Option<String>,
        #[arg(long)]
        per_order: Option<usize>,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Per-order R² of a bundle on held-out dataset orders.
    Generalize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "4..9")]
        orders: String,
    },
    /// Refsim versus surrogate wall time per order.
    Speed {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        orders: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Args)]
struct DriverArgs {
    /// ideal_step or saturating.
    #[arg(long, default_value = "ideal_step")]
    driver: DriverKind,
    #[arg(long, default_value_t = 1.1)]
    vdd: f64,
    /// Knee voltage of the saturating driver.
    #[arg(long, default_value_t = 0.6)]
    knee: f64,
}

impl DriverArgs {
    fn model(&self, net: &RcNetwork) -> DriverModel {
        match self.driver {
            DriverKind::IdealStep => DriverModel::ideal_step(self.vdd),
            DriverKind::Saturating => DriverModel::matched_saturating(self.vdd, self.knee, net),
        }
    }
}

enum Failure {
    Validation(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<ModalError> for Failure {
    fn from(e: ModalError) -> Self {
        match e {
            ModalError::NonConvergence { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<NetgenError> for Failure {
    fn from(e: NetgenError) -> Self {
        match e {
            NetgenError::ResampleExhausted(_) | NetgenError::SingularSystem => {
                Failure::Runtime(e.to_string())
            }
            NetgenError::Modal(m) => m.into(),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) => Failure::Validation(e.to_string()),
            SimError::Network(n) => n.into(),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(_) | DatasetError::ResampleExhausted { .. } => {
                Failure::Runtime(e.to_string())
            }
            DatasetError::Sim(s) => s.into(),
            DatasetError::Netgen(n) => n.into(),
            DatasetError::Modal(m) => m.into(),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<SurrogateError> for Failure {
    fn from(e: SurrogateError) -> Self {
        match e {
            SurrogateError::Io(_) | SurrogateError::NonFiniteLoss { .. } => {
                Failure::Runtime(e.to_string())
            }
            SurrogateError::Dataset(d) => d.into(),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Io(_) | BenchError::Sim(_) => Failure::Runtime(e.to_string()),
            BenchError::Dataset(d) => d.into(),
            BenchError::Surrogate(s) => s.into(),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Netgen { order, topology } => {
            let net = generate_network(*order, *topology, cli.seed.unwrap_or(0))?;
            emit(cli.out.as_deref(), &(net.to_json() + "\n"))
        }
        Command::Decompose { input } => {
            let h = read_transfer_function(input)?;
            let d = decompose(&h)?;
            emit(cli.out.as_deref(), &(d.to_json() + "\n"))
        }
        Command::Simulate {
            network,
            driver,
            dt,
            t_end,
        } => {
            let net = RcNetwork::from_json(&read(network)?)?;
            let mut cfg: SimConfig = load_config(cli)?.unwrap_or_default();
            cfg.dt = dt.unwrap_or(cfg.dt);
            cfg.t_end = t_end.unwrap_or(cfg.t_end);
            let w = simulate(&net, &driver.model(&net), &cfg)?;
            emit_waveform(cli.out.as_deref(), &w)
        }
        Command::Dataset {
            command: DatasetCommand::Build { orders, per_order },
        } => {
            let mut cfg: DatasetConfig = load_config(cli)?.unwrap_or_default();
            if let Some(o) = orders {
                cfg.orders = parse_orders(o)?;
            }
            cfg.samples_per_order = per_order.unwrap_or(cfg.samples_per_order);
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let dir = out_dir(cli);
            let manifest = dataset::build_dataset(&cfg, &dir)?;
            log::info!(
                "wrote {} orders to {} (mean nonlinear deviation {:.3})",
                manifest.orders.len(),
                dir.display(),
                manifest.mean_nonlinear_deviation
            );
            Ok(())
        }
        Command::Train { data, max_order } => {
            let mut cfg: SurrogateConfig = load_config(cli)?.unwrap_or_default();
            cfg.train.seed = cli.seed.unwrap_or(cfg.train.seed);
            let data = Dataset::load(data)?;
            let bundle = surrogate::train(&data, &cfg, *max_order)?;
            let dir = out_dir(cli);
            fs::create_dir_all(&dir)?;
            bundle.save(&dir.join("bundle.json"))?;
            log::info!(
                "trained {} parameters into {}",
                bundle.parameter_count(),
                dir.join("bundle.json").display()
            );
            Ok(())
        }
        Command::Infer {
            bundle,
            input,
            driver,
            dt,
            steps,
            extrapolate,
        } => {
            let bundle = SurrogateBundle::load(bundle)?;
            let h = read_transfer_function(input)?;
            let gains = rcmodal::modal::to_gain_form(&decompose(&h)?)?;
            let times = Waveform::uniform_grid(*dt, *steps);
            let (w, _) = bundle.infer(&gains, driver.driver.label(), &times, driver.vdd, *extrapolate)?;
            emit_waveform(cli.out.as_deref(), &w)
        }
        Command::Bench {
            command: BenchCommand::Generalize { bundle, data, orders },
        } => {
            let bundle = SurrogateBundle::load(bundle)?;
            let data = Dataset::load(data)?;
            let orders = parse_orders(orders)?;
            let (report, pairs) = bench::run_generalization_experiment(&bundle, &data, &orders)?;
            let dir = out_dir(cli);
            report.write(&dir, "generalization")?;
            bench::emit_plots(&dir.join("plots"), &pairs)?;
            for o in &report.orders {
                println!("order {}: R² = {:.4}", o.order, o.r_squared);
            }
            Ok(())
        }
        Command::Bench {
            command: BenchCommand::Speed { bundle, orders, steps },
        } => {
            let bundle = SurrogateBundle::load(bundle)?;
            let mut cfg: SpeedConfig = load_config(cli)?.unwrap_or_default();
            if let Some(o) = orders {
                cfg.orders = parse_orders(o)?;
            }
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let report = bench::run_speed_experiment(&bundle, &cfg)?;
            report.write(&out_dir(cli), "speed")?;
            for r in &report.runtimes {
                println!(
                    "order {:>2}: refsim {:.3e} s, surrogate {:.3e} s, speedup {:.3}x",
                    r.order, r.oracle_seconds, r.surrogate_seconds, r.speedup
                );
            }
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_config<T: DeserializeOwned>(cli: &Cli) -> Result<Option<T>, Failure> {
    match &cli.config {
        Some(path) => Ok(Some(serde_json::from_str(&read(path)?)?)),
        None => Ok(None),
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_waveform(out: Option<&Path>, w: &Waveform) -> Outcome {
    match out {
        Some(path) => w.write_csv(io::BufWriter::new(fs::File::create(path)?))?,
        None => w.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

/// Accepts a transfer-function document or a network document.
fn read_transfer_function(path: &Path) -> Result<TransferFunction, Failure> {
    let text = read(path)?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    if doc.get("den").is_some() {
        Ok(TransferFunction::from_json(&text)?)
    } else if doc.get("r").is_some() {
        let net = RcNetwork::from_json(&text)?;
        Ok(extract_transfer_function(&assemble_nodal(&net)?)?)
    } else {
        Err(invalid(format!(
            "{}: neither a transfer function nor a network",
            path.display()
        )))
    }
}

fn parse_orders(spec: &str) -> Result<Vec<usize>, Failure> {
    let bad = || invalid(format!("cannot parse orders `{spec}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let orders: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(num).collect::<Result<_, _>>()?
    };
    if orders.is_empty() {
        return Err(bad());
    }
    Ok(orders)
}
