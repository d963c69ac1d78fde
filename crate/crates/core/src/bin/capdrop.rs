use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use capdrop::controller::compute_schedule;
use capdrop::harness::{run_monte_carlo, scenario_checks, write_outputs, ScenarioChecks};
use capdrop::theory::{check_theorem_conditions, default_gamma_grid, error_bound_y, kappa, r_tilde, TheoremReport};
use capdrop::translator::{translate, TranslateRequest};
use capdrop::{ControllerKind, Scenario};

#[derive(Parser)]
#[command(name = "capdrop", version, about = "Probe-and-release control of a capacity-drop bottleneck")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run replications and write CSV/JSON outputs.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Also write per-step trajectories.
        #[arg(long)]
        trajectories: bool,
    },
    /// Stability conditions for the configured controller.
    Check {
        config: PathBuf,
        /// Exit with status 2 when a condition fails.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Error bound, kappa terms and R_tilde at one gamma.
    Theory {
        config: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Phase lengths of one probe-and-release round.
    Schedule { config: PathBuf },
    /// Translate one step into vehicle instructions (JSON in, JSON lines out).
    Translate {
        /// Request file; stdin when omitted. One request per line is accepted.
        input: Option<PathBuf>,
        /// Write the updated pipeline of the last request here.
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path) -> capdrop::Result<Scenario> {
    Scenario::from_path(path)
}

fn run(cli: Cli) -> capdrop::Result<ExitCode> {
    match cli.cmd {
        Cmd::Simulate { config, seed, reps, out_dir, trajectories } => {
            let mut sc = load(&config)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let n = reps.unwrap_or(sc.replications);
            let out = run_monte_carlo(&sc, n, trajectories)?;
            write_outputs(&out, &out_dir)?;
            let a = &out.summary.aggregate;
            println!("scenario {} seed {} replications {}", sc.name, sc.seed, n);
            println!("time-average l1   {:.4} (sd {:.4})", a.time_avg_l1.mean, a.time_avg_l1.std);
            println!("throughput        {:.4} (sd {:.4})", a.throughput.mean, a.throughput.std);
            println!("delay proxy [s]   {:.1} (sd {:.1})", a.delay_proxy_s.mean, a.delay_proxy_s.std);
            if let Some(t) = a.tail_e2 {
                println!("tail |e|^2        {:.5} (sd {:.5}); Y = {:.5}", t.mean, t.std, out.summary.checks.y);
            }
            println!("outputs in {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { config, strict, json, rollouts } => {
            let mut sc = load(&config)?;
            if let Some(r) = rollouts {
                sc.theory.rollouts = r;
            }
            let checks = scenario_checks(&sc)?;
            let theorem = match sc.controller {
                ControllerKind::ProbeRelease => {
                    Some(check_theorem_conditions(&sc.theory_inputs(), &default_gamma_grid(), &sc.theory_options())?)
                }
                ControllerKind::NoCoordination => None,
            };
            let assumptions =
                theorem.as_ref().map(|t| sc.prior.check_against(&sc.flow, &sc.noise, &sc.demand, Some(t.r_tilde)));
            if json {
                let v = serde_json::json!({
                    "scenario": sc.name,
                    "checks": checks,
                    "assumptions": assumptions,
                    "theorem": theorem,
                });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                print_checks(&sc, &checks, theorem.as_ref(), assumptions.as_ref());
            }
            let ok = match &theorem {
                Some(t) => t.cond_i && t.cond_ii && t.cond_iii,
                None => checks.baseline.stable,
            };
            Ok(if strict && !ok { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Cmd::Theory { config, gamma, rollouts } => {
            let sc = load(&config)?;
            let inp = sc.theory_inputs();
            let opts = sc.theory_options();
            let g = gamma.unwrap_or(opts.gamma);
            let sigma2 = sc.noise.sigma2();
            let y = error_bound_y(inp.lambda, sigma2, sc.flow.r, sc.flow.alpha, sc.flow.gap())?;
            let k = kappa(g, &inp)?;
            let rhs = capdrop::theory::noise_variance_rhs(g, &inp)?;
            let rt = r_tilde(
                &sc.flow,
                &sc.demand,
                &sc.noise,
                &sc.prior,
                g,
                rollouts.unwrap_or(opts.rollouts),
                opts.seed,
                opts.rollout_estimates,
            )?;
            println!("gamma    {g}");
            println!("sigma^2  {sigma2:.6}");
            println!("Y        {y:.6}");
            println!("p        {:.6}", k.p);
            println!("p'       {:.6}", k.p_prime);
            println!("kappa    {:.6}  (ewma {:.6}, p {:.6}, p' {:.6})", k.kappa, k.ewma_term, k.p_term, k.p_prime_term);
            println!("rhs      {rhs:.6}");
            println!(
                "R_tilde  {:.4} +- {:.4}  ({} rollouts of {} steps)",
                rt.value, rt.ci_half_width, rt.rollouts, rt.m
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Schedule { config } => {
            let sc = load(&config)?;
            let s = compute_schedule(&sc.prior, sc.estimator.k)?;
            let [c1, c2, c3, c4] = s.t_clean;
            println!("T_clean   = ({c1}, {c2}, {c3}, {c4})");
            println!("T_release = {}", s.t_release);
            println!("T_round   = {}  (k = {})", s.t_round, s.k);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Translate { input, state_out } => {
            let reader: Box<dyn Read> = match &input {
                Some(p) => Box::new(std::fs::File::open(p)?),
                None => Box::new(std::io::stdin()),
            };
            let mut text = String::new();
            BufReader::new(reader).read_to_string(&mut text)?;
            let requests = parse_requests(&text)?;
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            let mut last = None;
            for req in &requests {
                let resp = translate(req)?;
                for ins in &resp.instructions {
                    writeln!(w, "{}", serde_json::to_string(ins)?)?;
                }
                last = Some(resp.pipeline);
            }
            if let (Some(path), Some(p)) = (state_out, last) {
                std::fs::write(path, serde_json::to_string_pretty(&p)? + "\n")?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// A single JSON document, or one request per line.
fn parse_requests(text: &str) -> capdrop::Result<Vec<TranslateRequest>> {
    if let Ok(one) = serde_json::from_str::<TranslateRequest>(text) {
        return Ok(vec![one]);
    }
    text.as_bytes()
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILS"
    }
}

fn print_checks(
    sc: &Scenario,
    c: &ScenarioChecks,
    t: Option<&TheoremReport>,
    a: Option<&capdrop::controller::AssumptionReport>,
) {
    println!("scenario {}", sc.name);
    let b = &c.baseline;
    println!("no-coordination baseline:");
    println!("  mean demand {:.4} < R {:.4}: {}", b.demand_mean, sc.flow.r, mark(b.cond_1));
    println!(
        "  uncongested start, peak demand {:.4} <= Q - eps {:.4}: {}",
        b.peak_demand,
        sc.flow.q() - sc.noise.eps_max,
        mark(b.cond_2)
    );
    println!("  stable: {}", b.stable);
    if let Some(s) = &c.schedule {
        println!("schedule: T_clean {:?}, T_release {}, T_round {}", s.t_clean, s.t_release, s.t_round);
    }
    println!("error bound Y = {:.6}", c.y);
    let Some(t) = t else { return };
    println!("probe-and-release:");
    println!(
        "  (i)   mean demand {:.4} < R_tilde {:.4} +- {:.4}: {}",
        t.demand_mean,
        t.r_tilde,
        t.r_tilde_ci,
        mark(t.cond_i)
    );
    println!("  (ii)  A_max {:.4} < {:.4}: {}", t.a_max, t.cond_ii_bound, mark(t.cond_ii));
    println!(
        "  (iii) sigma^2 {:.4} < rhs {:.4} at gamma {:.4}: {}",
        t.sigma2,
        t.rhs_iii,
        t.gamma_used,
        mark(t.cond_iii)
    );
    println!(
        "  kappa {:.6} (p {:.4}, p' {:.4}), mu2 {:.6}, beta {:.6e}",
        t.kappa.kappa, t.kappa.p, t.kappa.p_prime, t.mu2, t.beta
    );
    if let Some(a) = a {
        println!("prior bounds:");
        println!("  delta1 <= {:.4}: {}", a.delta1_bound, mark(a.delta1_ok));
        if let (Some(ok), Some(bound)) = (a.delta2_ok, a.delta2_bound) {
            println!("  delta2 <= {:.4}: {}", bound, mark(ok));
        }
        println!("  Lambda >= {:.4}: {}", a.lambda_bound, mark(a.lambda_ok));
        println!("  x0_c within [x0_min, x0_max]: {}", mark(a.x0_c_in_probe_range));
    }
}
