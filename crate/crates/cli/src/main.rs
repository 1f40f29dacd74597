use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use symctl::abstraction::{abstraction_stats, build_abstraction_with, AbstractionOptions};
use symctl::closed_loop::{check_spec, simulate_batch, Status};
use symctl::config::Config;
use symctl::growth::validate_bound;
use symctl::par;
use symctl::relations::{max_relation, mc_theorem_check, RelationHeader, RelationKind};
use symctl::synthesis::{reach_and_stay, Controller, ControllerHeader};
use symctl::transition::{FiniteSystem, TransitionSystem};
use symctl::Error;

#[derive(Parser)]
#[command(
    name = "symctl",
    version,
    about = "Symbolic controller synthesis for sampled control systems"
)]
struct Cli {
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the finite abstraction and write the system file.
    Abstract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a reach-and-stay controller on a system file.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the system file named in the config.
        #[arg(long)]
        system: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the closed loop from every configured initial condition.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        system: Option<PathBuf>,
        #[arg(long)]
        controller: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the growth bound and the sampled relation between plant and
    /// abstraction.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        system: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sampled relation trials; overrides the config.
        #[arg(long)]
        trials: Option<usize>,
        /// Growth bound trials; overrides the config.
        #[arg(long)]
        bound_trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Check an abstraction built with the ball radius reduced to
        /// `beta(theta, tau)`, which should be caught.
        #[arg(long)]
        inject_radius_bug: bool,
    },
    /// Maximal relation between two system files.
    Relation {
        /// Two system files: the first is simulated by the second.
        #[arg(long, num_args = 2, required = true, value_names = ["A", "B"])]
        system: Vec<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = Mode::Alt)]
        mode: Mode,
        /// Output file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sim,
    Alt,
}

enum Failure {
    Invalid(String),
    Runtime(String),
    Negative(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Negative(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) | Failure::Negative(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Integration { .. } | Error::Abstraction { .. } | Error::Io(_) => {
                Failure::Runtime(msg)
            }
            Error::CannotRemain => Failure::Negative(msg),
            _ => Failure::Invalid(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.workers == Some(0) {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(1);
    }
    match par::with_workers(cli.workers, || run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Abstract { config, out } => cmd_abstract(&config, out),
        Command::Synth {
            config,
            system,
            out,
        } => cmd_synth(&config, system, out),
        Command::Simulate {
            config,
            system,
            controller,
            out,
        } => cmd_simulate(&config, system, controller, out),
        Command::Verify {
            config,
            system,
            out,
            trials,
            bound_trials,
            seed,
            inject_radius_bug,
        } => cmd_verify(
            &config,
            system,
            out,
            trials,
            bound_trials,
            seed,
            inject_radius_bug,
        ),
        Command::Relation {
            system,
            epsilon,
            mode,
            out,
        } => cmd_relation(&system[0], &system[1], epsilon, mode, out),
    }
}

struct Paths {
    dir: PathBuf,
    system: PathBuf,
    controller: PathBuf,
}

fn paths(cfg: &Config, out: Option<PathBuf>) -> Paths {
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.outputs.dir));
    Paths {
        system: dir.join(&cfg.outputs.system),
        controller: dir.join(&cfg.outputs.controller),
        dir,
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    Config::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::Runtime(format!("cannot read {}: {io}", path.display())),
        other => Failure::Invalid(format!("{}: {other}", path.display())),
    })
}

fn load_system(path: &Path) -> Result<FiniteSystem, Failure> {
    FiniteSystem::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::Runtime(format!("cannot read {}: {io}", path.display())),
        other => Failure::Invalid(format!("{}: {other}", path.display())),
    })
}

/// The system file must come from the same quantization and domain.
fn check_system_matches(cfg: &Config, abs: &FiniteSystem) -> CmdResult {
    if abs.params() != &cfg.quantization || abs.domain() != &cfg.sets.domain {
        return Err(Failure::Invalid(
            "system file was built from different quantization parameters or domain".into(),
        ));
    }
    Ok(())
}

fn cmd_abstract(config: &Path, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config)?;
    let paths = paths(&cfg, out);
    let sys = cfg.build_system()?;
    let gb = cfg.growth_bound(&sys)?;
    let abs = build_abstraction_with(
        &sys,
        &gb,
        &cfg.sets.domain,
        &cfg.quantization,
        &cfg.abstraction_options(),
    )?;
    create_dir(&paths.dir)?;
    abs.save(&paths.system)?;
    println!("{}", abstraction_stats(&abs));
    println!("digest {}", abs.digest());
    println!("wrote {}", paths.system.display());
    Ok(())
}

fn cmd_synth(config: &Path, system: Option<PathBuf>, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config)?;
    let paths = paths(&cfg, out);
    let abs = load_system(system.as_deref().unwrap_or(&paths.system))?;
    check_system_matches(&cfg, &abs)?;
    let spec = cfg.spec()?;
    let header = ControllerHeader {
        system: abs.digest(),
        params: *abs.params(),
        spec: spec.digest(),
    };
    let ctrl = match reach_and_stay(&abs, &spec) {
        Ok(ctrl) => ctrl,
        Err(Error::CannotRemain) => {
            println!("winning 0 of {} states", abs.state_count());
            println!("the target has no controlled-invariant core");
            return Err(Failure::Negative("specification is unwinnable".into()));
        }
        Err(e) => return Err(e.into()),
    };
    create_dir(&paths.dir)?;
    ctrl.save(&paths.controller, &header)?;
    println!(
        "winning {} of {} states",
        ctrl.winning_count(),
        abs.state_count()
    );
    for x0 in &cfg.simulation.initial_conditions {
        let k = symctl::geometry::nearest_grid_point(x0, abs.eta());
        let winning = abs
            .states()
            .position(&k.index)
            .is_some_and(|x| ctrl.is_winning(x));
        println!(
            "initial {x0:?}: {}",
            if winning { "winning" } else { "not winning" }
        );
    }
    println!("wrote {}", paths.controller.display());
    if ctrl.winning_count() == 0 {
        return Err(Failure::Negative("winning set is empty".into()));
    }
    Ok(())
}

fn cmd_simulate(
    config: &Path,
    system: Option<PathBuf>,
    controller: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let cfg = load_config(config)?;
    let paths = paths(&cfg, out);
    let abs = load_system(system.as_deref().unwrap_or(&paths.system))?;
    check_system_matches(&cfg, &abs)?;
    let ctrl_path = controller.unwrap_or_else(|| paths.controller.clone());
    let (header, ctrl) = Controller::load(&ctrl_path).map_err(|e| match e {
        Error::Io(io) => Failure::Runtime(format!("cannot read {}: {io}", ctrl_path.display())),
        other => Failure::Invalid(format!("{}: {other}", ctrl_path.display())),
    })?;
    let spec = cfg.spec()?;
    if header.system != abs.digest() {
        return Err(Failure::Invalid(
            "controller was synthesized on a different system file".into(),
        ));
    }
    if header.spec != spec.digest() {
        return Err(Failure::Invalid(
            "controller was synthesized for a different specification".into(),
        ));
    }
    if cfg.simulation.initial_conditions.is_empty() {
        return Err(Failure::Invalid(
            "config lists no initial conditions".into(),
        ));
    }
    let sys = cfg.build_system()?;
    let trajectories = simulate_batch(
        &sys,
        &ctrl,
        &abs,
        &spec,
        &cfg.simulation.initial_conditions,
        cfg.synthesis.max_steps,
        cfg.synthesis.stay_horizon,
    )?;
    create_dir(&paths.dir)?;
    let mut failed = 0;
    for (i, traj) in trajectories.iter().enumerate() {
        let csv = format!("trajectory_{i}.csv");
        let image = format!("trajectory_{i}.png");
        fs::write(paths.dir.join(&csv), traj.to_csv()).map_err(Error::from)?;
        fs::write(
            paths.dir.join(format!("trajectory_{i}.gp")),
            traj.plot_script(&spec, &csv, &image),
        )
        .map_err(Error::from)?;
        let verdict = check_spec(traj, &spec, cfg.synthesis.stay_horizon);
        let pass = verdict.passed() && traj.status == Status::SpecSatisfied;
        failed += !pass as usize;
        println!(
            "trajectory {i} from {:?}: {} after {} samples, {verdict}",
            cfg.simulation.initial_conditions[i],
            traj.status,
            traj.samples.len()
        );
    }
    println!(
        "{} of {} trajectories satisfied the specification",
        trajectories.len() - failed,
        trajectories.len()
    );
    if failed > 0 {
        return Err(Failure::Negative(format!("{failed} trajectories failed")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    config: &Path,
    system: Option<PathBuf>,
    out: Option<PathBuf>,
    trials: Option<usize>,
    bound_trials: Option<usize>,
    seed: Option<u64>,
    inject_radius_bug: bool,
) -> CmdResult {
    let cfg = load_config(config)?;
    let paths = paths(&cfg, out);
    let trials = trials.unwrap_or(cfg.verify.trials);
    let bound_trials = bound_trials.unwrap_or(cfg.verify.bound_trials);
    let seed = seed.unwrap_or(cfg.verify.seed);
    if trials == 0 || bound_trials == 0 {
        return Err(Failure::Invalid("trial counts must be positive".into()));
    }
    let sys = cfg.build_system()?;
    let gb = cfg.growth_bound(&sys)?;
    let q = &cfg.quantization;

    let bound = validate_bound(
        &sys,
        &gb,
        &cfg.sets.domain,
        q.tau,
        bound_trials,
        cfg.abstraction.finite_input_mode,
        seed,
    )?;
    println!(
        "growth bound: {} violations in {} checks over {} trials, worst margin {:.6}",
        bound.violation_count, bound.checks, bound.trials, bound.worst_margin
    );
    for v in bound.violations.iter().take(10) {
        println!(
            "  trial {} t={} x={:?} x'={:?}: distance {:.6} > bound {:.6}",
            v.trial, v.t, v.x, v.x_other, v.distance, v.bound
        );
    }

    let abs = if inject_radius_bug {
        let options = AbstractionOptions {
            radius_override: Some(gb.beta(q.theta, q.tau)?),
            ..cfg.abstraction_options()
        };
        println!("checking an abstraction with the radius reduced to beta(theta, tau)");
        build_abstraction_with(&sys, &gb, &cfg.sets.domain, q, &options)?
    } else {
        let abs = load_system(system.as_deref().unwrap_or(&paths.system))?;
        check_system_matches(&cfg, &abs)?;
        abs
    };
    let report = mc_theorem_check(&sys, &gb, &abs, q, trials, seed)?;
    println!("{report}");
    if !bound.passed() || !report.passed() {
        return Err(Failure::Negative("verification found violations".into()));
    }
    Ok(())
}

fn cmd_relation(a: &Path, b: &Path, epsilon: f64, mode: Mode, out: Option<PathBuf>) -> CmdResult {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Failure::Invalid(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    let sa = load_system(a)?;
    let sb = load_system(b)?;
    let kind = match mode {
        Mode::Sim => RelationKind::Simulation,
        Mode::Alt => RelationKind::Alternating,
    };
    let rel = max_relation(&sa, &sb, epsilon, kind)?;
    let text = rel.dump(&RelationHeader {
        kind,
        epsilon,
        system_a: sa.digest(),
        system_b: sb.digest(),
    });
    let total = rel.is_total(sa.state_count());
    match out {
        Some(path) => {
            fs::write(&path, text).map_err(Error::from)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    let summary = format!(
        "{} pairs, total {}",
        rel.len(),
        if total { "yes" } else { "no" }
    );
    eprintln!("{summary}");
    Ok(())
}
