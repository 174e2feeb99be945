use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsefed::commands::{
    certify_grid, certify_row, cmd_paired, cmd_run, cmd_sweep, cmd_tune_k, Artifacts, Axis, CertifyArgs, RunOptions,
    TuneArgs,
};
use sparsefed::error::CliError;
use sparsefed_core::certify::Recurrence;
use sparsefed_core::simulator::Schedule;

#[derive(Parser)]
#[command(name = "sparsefed", version, about = "Federated learning simulator with sparsified, clipped aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override a config key, e.g. `--set protocol.T=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; beats the config's output.dir and $SPARSEFED_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            config: self.config.clone(),
            overrides: self.overrides.clone(),
            out: self.out.clone(),
            threads: self.threads,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Proof,
    Printed,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run the benign and poisoned executions of an experiment and measure drift.
    Paired(Common),
    /// Certified radius for the given constants.
    Certify {
        #[arg(long)]
        rho: f64,
        /// Coordinate-wise Lipschitz constant.
        #[arg(long, default_value_t = 0.25)]
        c: f64,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        d: usize,
        #[arg(long = "rounds", visible_alias = "T")]
        rounds: usize,
        /// Constant learning rate; the default schedule is triangular.
        #[arg(long, conflicts_with_all = ["peak", "warmup"])]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
        #[arg(long, default_value_t = 0.2)]
        warmup: f64,
        #[arg(long, value_enum, default_value_t = Variant::Proof)]
        variant: Variant,
        /// Emit a CSV table over these k values.
        #[arg(long, value_delimiter = ',')]
        k_grid: Vec<usize>,
        /// Emit a CSV table over these round counts.
        #[arg(long, value_delimiter = ',')]
        t_grid: Vec<usize>,
        /// Emit a CSV table over these budgets.
        #[arg(long, value_delimiter = ',')]
        rho_grid: Vec<f64>,
    },
    /// Choose the sparsity k for a loss-fraction tolerance.
    TuneK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        omega: f64,
        /// Grid ratio: candidates are multiples of d/r.
        #[arg(long, default_value_t = 10)]
        r: usize,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Run a grid of experiments and summarize them in one CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis `key=v1,v2,...`. Repeatable; points are the cartesian product.
        #[arg(long = "grid", value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        /// Run every point as a benign/poisoned pair.
        #[arg(long)]
        paired: bool,
    },
}

fn report(a: &Artifacts) -> Result<(), CliError> {
    let r = &a.summary.run;
    println!("run dir {}", a.dir.display());
    println!("status {} after {} rounds", r.status, r.rounds_completed);
    println!("test_acc {}", r.final_test_acc);
    println!("attack_acc {}", r.final_attack_acc);
    if let Some(oif) = r.oif {
        println!("oif {oif}");
    }
    if let Some(d) = &a.summary.drift {
        println!("drift {} (radius {})", d.final_l1, d.final_radius.map_or("inf".into(), |r| format!("{r:.6e}")));
    }
    a.dnc().map_or(Ok(()), Err)
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run(c) => report(&cmd_run(&c.options())?),
        Command::Paired(c) => report(&cmd_paired(&c.options())?),
        Command::Certify { rho, c, gamma, k, d, rounds, lambda, peak, warmup, variant, k_grid, t_grid, rho_grid } => {
            let schedule = match lambda {
                Some(lambda) => Schedule::Constant { lambda },
                None => Schedule::Triangular { peak, warmup_frac: warmup },
            };
            let variant = match variant {
                Variant::Proof => Recurrence::Proof,
                Variant::Printed => Recurrence::Printed,
            };
            let args = CertifyArgs { rho, c, gamma, k, d, rounds, schedule, variant };
            if k_grid.is_empty() && t_grid.is_empty() && rho_grid.is_empty() {
                let r = certify_row(&args, rho, k, rounds)?;
                println!("recurrence {}", r.recurrence);
                println!("closed_form {}", r.closed_form);
                println!("closed_form_dense {}", r.closed_form_dense);
            } else {
                print!("{}", certify_grid(&args, &rho_grid, &k_grid, &t_grid)?);
            }
            Ok(())
        }
        Command::TuneK { common, omega, r, samples, batch } => {
            let (sel, d) = cmd_tune_k(&common.options(), &TuneArgs { omega, r, samples, batch })?;
            if sel.unattainable {
                eprintln!("warning: no k below d = {d} keeps the loss fraction under {omega}; using k = d");
            }
            println!("k {}", sel.k);
            println!("loss_fraction {}", sel.loss_fraction);
            Ok(())
        }
        Command::Sweep { common, grid, paired } => {
            let axes = grid.iter().map(|g| Axis::parse(g)).collect::<Result<Vec<_>, _>>()?;
            let (dir, points) = cmd_sweep(&common.options(), &axes, paired)?;
            let failed = points.iter().filter(|p| p.error.is_some()).count();
            println!("sweep dir {}", dir.display());
            println!("{} points, {failed} failed", points.len());
            Ok(())
        }
    }
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
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
