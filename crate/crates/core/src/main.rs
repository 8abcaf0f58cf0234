use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attenuator::cli::{
    self, parse_complex, CliError, CliResult, ComplexValue, Engine, Format, OutputOptions, Overrides,
    Preset, Scenario,
};

#[derive(Parser)]
#[command(name = "attenuator", version, about = "Simulate single-photon generation by nonlinear absorption")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario (TOML file, run manifest, or flags alone).
    Run {
        scenario: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Run a scenario over a grid of rates and amplitudes given in its [sweep] table.
    Sweep {
        file: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Reproduce a figure's runs.
    Preset {
        #[arg(value_enum)]
        name: Preset,
        #[command(flatten)]
        output: OutputArgs,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Parse and validate a scenario or sweep file.
    Validate { file: PathBuf },
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Also write plot.svg.
    #[arg(long)]
    svg: bool,
}

impl OutputArgs {
    fn options(&self) -> OutputOptions {
        OutputOptions {
            format: self.format,
            svg: self.svg,
        }
    }
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long, value_enum)]
    engine: Option<Engine>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed integration step; disables step-size control.
    #[arg(long = "fixed-step", value_name = "DT")]
    fixed_step: Option<f64>,
    /// Coherent amplitude, `re` or `re,im`.
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    alpha: Option<ComplexValue>,
    /// Rate assignments such as `e=1,q=0.05`.
    #[arg(long)]
    rates: Option<String>,
    #[arg(long)]
    tmax: Option<f64>,
    #[arg(long)]
    nmax: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    u1: Option<f64>,
}

impl OverrideArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            engine: self.engine,
            seed: self.seed,
            fixed_step: self.fixed_step,
            alpha: self.alpha,
            rates: self.rates.clone(),
            t_max: self.tmax,
            nmax: self.nmax,
            samples: self.samples,
            u1: self.u1,
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run {
            scenario,
            output,
            overrides,
        } => {
            let base = match &scenario {
                Some(path) => cli::load_scenario(path)?,
                None => Scenario::default(),
            };
            let s = overrides.overrides().apply(base)?;
            let result = cli::run(&s, &output.out, output.options())?;
            if let (Some(&t), Some(&mean), Some(&std)) = (
                result.series.t.last(),
                result.series.mean_n.last(),
                result.series.std_n.last(),
            ) {
                println!("{}: t={t} mean_n={mean:.10} std_n={std:.10}", s.label());
            }
            println!("wrote {}", output.out.display());
        }
        Command::Sweep { file, output, jobs } => {
            let (base, spec) = cli::load_sweep(&file)?;
            let outcome = cli::sweep(&base, &spec, jobs)?;
            for note in &outcome.monotonicity_notes {
                eprintln!("monotonicity: {note}");
            }
            cli::write_sweep(&output.out, &base, &spec, &outcome, output.format)?;
            println!("{} points, wrote {}", outcome.rows.len(), output.out.display());
        }
        Command::Preset {
            name,
            output,
            overrides,
        } => {
            let runs = cli::run_preset(name, &overrides.overrides(), &output.out, output.options())?;
            for r in &runs {
                let s = &r.result.series;
                let last = s.len() - 1;
                println!(
                    "{}: mean_n={:.10} std_n={:.10} p1={:.10}",
                    r.scenario.label(),
                    s.mean_n[last],
                    s.std_n[last],
                    s.populations[last].get(1).copied().unwrap_or(0.0)
                );
            }
            println!("wrote {}", output.out.display());
        }
        Command::Validate { file } => {
            cli::validate_file(&file)?;
            println!("{}: ok", file.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match dispatch(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &CliError) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
