use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ratelearn::campaign::{run_campaign, ExperimentConfig};
use ratelearn::inner::oracle_rates;
use ratelearn::meanfield::{evaluate_grid, representative_link, PolicyGrid};
use ratelearn::orchestrator::{run, PolicySpec, RunConfig};
use ratelearn::topology::{generate_network_with, graph_stats, GeneratorOptions, NetworkInstance};

/// Rate allocation with learned link capacities.
#[derive(Debug, Parser)]
#[command(name = "ratelearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random network instance as JSON.
    Generate(GenerateArgs),
    /// Run the closed loop on one instance and write the trace as CSV.
    Run(RunArgs),
    /// Run every (network, seed, policy) combination of a config file.
    Campaign(CampaignArgs),
    /// Compute the optimal rates for the true capacities.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct SizeArgs {
    #[arg(long, default_value_t = 12)]
    links: usize,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 4)]
    route_length: usize,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    size: SizeArgs,
    /// Generator options as JSON; missing fields take their defaults.
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyKind {
    Greedy,
    Foresighted,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Instance file; without it one is generated from --seed and the size flags.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[command(flatten)]
    size: SizeArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyKind::Foresighted)]
    policy: PolicyKind,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long)]
    steps: Option<usize>,
    /// Run parameters as JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the policy grid evaluated at the start of the run.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct CampaignArgs {
    /// Campaign config as JSON. Without it the desk-scale defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let options: GeneratorOptions = match &args.options {
        Some(p) => read_json(p)?,
        None => GeneratorOptions::default(),
    };
    let inst = generate_network_with(args.seed, args.size.links, args.size.users, args.size.route_length, &options)?;
    inst.save(&args.output)?;
    let stats = graph_stats(&inst.topology);
    eprintln!(
        "wrote {} ({} links, {} users, mean route length {:.3}, coupled links {:.3})",
        args.output.display(),
        inst.num_links(),
        inst.num_users(),
        stats.route_length,
        stats.coupled_links
    );
    Ok(())
}

fn load_or_generate(instance: &Option<PathBuf>, seed: u64, size: &SizeArgs) -> Result<NetworkInstance> {
    Ok(match instance {
        Some(p) => NetworkInstance::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => generate_network_with(seed, size.links, size.users, size.route_length, &GeneratorOptions::default())?,
    })
}

fn run_one(args: RunArgs) -> Result<()> {
    let inst = load_or_generate(&args.instance, args.seed, &args.size)?;
    let mut config: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(steps) = args.steps {
        config.total_steps = steps;
    }
    let spec = match args.policy {
        PolicyKind::Greedy => PolicySpec::Greedy,
        PolicyKind::Foresighted => PolicySpec::Foresighted { gamma: args.gamma },
    };
    if let (Some(path), PolicySpec::Foresighted { gamma }) = (&args.grid, &spec) {
        let (belief, link) = representative_link(&inst.prior, &inst.congestion.kappa, inst.congestion.rho)?;
        let grid = PolicyGrid::for_links(inst.num_links());
        evaluate_grid(&belief, link, graph_stats(&inst.topology), *gamma, &grid)?.write_csv(BufWriter::new(File::create(path)?))?;
    }
    let trace = match run(&inst, &spec, &config, args.seed) {
        Ok(trace) => trace,
        Err(failure) => {
            // Keep whatever was recorded for diagnosis.
            failure.partial.write_csv(BufWriter::new(File::create(&args.output)?))?;
            bail!("{failure}; partial trace written to {}", args.output.display());
        }
    };
    trace.write_csv(BufWriter::new(File::create(&args.output)?))?;
    if let Some(last) = trace.last() {
        eprintln!(
            "{} steps, {} outer updates: e_links {:.3}%, e_users {:.3}%",
            last.t, last.outer_updates, last.e_links, last.e_users
        );
    }
    Ok(())
}

fn campaign(args: CampaignArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(steps) = args.steps {
        config.run.total_steps = steps;
    }
    if args.print_config {
        println!("{}", config.to_json()?);
        return Ok(());
    }
    let summary = run_campaign(&config)?;
    for g in &summary.groups {
        match (g.final_e_links, g.final_e_users) {
            (Some(l), Some(u)) => eprintln!(
                "{} M={}: {} runs, final e_links {:.2} ± {:.2}%, e_users {:.2} ± {:.2}%",
                g.policy, g.links, g.completed, l.mean, l.std, u.mean, u.std
            ),
            _ => eprintln!("{} M={}: no completed runs", g.policy, g.links),
        }
    }
    for f in &summary.failures {
        eprintln!("failed: {} M={} seed {} at step {}: {}", f.policy, f.links, f.seed, f.step, f.error);
    }
    eprintln!("results in {}", config.output_dir.display());
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let inst = NetworkInstance::load(&args.instance).with_context(|| format!("loading {}", args.instance.display()))?;
    let sol = oracle_rates(&inst)?;
    if !sol.converged {
        bail!("inner loop did not settle within {} steps", sol.iterations);
    }
    let out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user", "x_star"])?;
    for (n, x) in sol.state.x.iter().enumerate() {
        w.write_record([n.to_string(), x.to_string()])?;
    }
    w.flush()?;
    eprintln!("settled after {} steps", sol.iterations);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run_one(a),
        Command::Campaign(a) => campaign(a),
        Command::Oracle(a) => oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
