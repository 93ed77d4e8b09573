//! Command implementations behind the `fluidbench` binary.

pub mod args;

use std::fs;
use std::net::SocketAddr;
use std::path::Path;

use anyhow::{anyhow, Context};
use fluidbench_client::{profile_prefill, run_load, ClientError, LoadOptions, StreamClient};
use fluidbench_core::prefill::{default_profile_lengths, fit_quadratic, medians_by_length};
use fluidbench_core::report::{build_report, ReportBundle};
use fluidbench_core::solver::{capacity_search, CapacityError, CapacityOptions, CapacityStatus};
use fluidbench_core::trace::{load_run, save_run};
use fluidbench_core::workload::{fixed_interval_schedule, generate_requests, poisson_schedule};
use fluidbench_core::{ArrivalSchedule, RunRecord};
use fluidbench_mock::{BurstSpec, MockError, MockProfile, PrefillCoefficients, StallSpec};

use crate::args::{AnalyzeArgs, Arrivals, CapacityArgs, Cli, Command, MockArgs, ProfileArgs, RunArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_ENDPOINT: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;

/// A command failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

trait ExitCodeExt<T> {
    fn usage(self) -> Result<T, Failure>;
    fn endpoint(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitCodeExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_USAGE,
            error: e.into(),
        })
    }

    fn endpoint(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_ENDPOINT,
            error: e.into(),
        })
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
        .usage()
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::ProfilePrefill(a) => profile(a),
        Command::Run(a) => run(a),
        Command::Analyze(a) => analyze(a),
        Command::Capacity(a) => capacity(a),
        Command::MockServe(a) => mock_serve(a),
    }
}

fn client_error(e: ClientError) -> Failure {
    let code = match e {
        ClientError::Config(_) | ClientError::MissingAuth(_) => EXIT_USAGE,
        _ => EXIT_ENDPOINT,
    };
    Failure { code, error: e.into() }
}

fn profile(args: ProfileArgs) -> Result<(), Failure> {
    let client = StreamClient::new(args.endpoint.config().usage()?).map_err(client_error)?;
    let lengths = if args.lengths.is_empty() {
        default_profile_lengths()
    } else {
        args.lengths.clone()
    };
    let rt = runtime()?;
    let outcome = rt
        .block_on(profile_prefill(&client, &lengths, args.repeats))
        .map_err(client_error)?;
    if !outcome.failures.is_empty() {
        eprintln!(
            "{} of {} profiling requests failed:",
            outcome.failures.len(),
            lengths.len() * args.repeats as usize
        );
        for f in &outcome.failures {
            eprintln!("  length {} repeat {}: {}", f.prompt_tokens, f.repeat, f.reason);
        }
    }
    for (len, ttft) in medians_by_length(&outcome.samples) {
        eprintln!("  {len:>6} tokens: median TTFT {:.4} s", ttft);
    }
    let curve = fit_quadratic(&outcome.samples)
        .context("fitting prefill curve")
        .endpoint()?;
    curve.save(&args.out).usage()?;
    println!(
        "prefill curve: a={:e} b={:e} c={:e} rmse={:.4} s -> {}",
        curve.a,
        curve.b,
        curve.c,
        curve.rmse,
        args.out.display()
    );
    if !curve.is_monotone() {
        eprintln!("warning: fitted curve is not increasing over the profiled range");
    }
    Ok(())
}

fn schedule(arrivals: Arrivals, qps: f64, count: usize, seed: u64) -> anyhow::Result<ArrivalSchedule> {
    Ok(match arrivals {
        Arrivals::Poisson => poisson_schedule(qps, count, seed)?,
        Arrivals::Uniform => fixed_interval_schedule(qps, count)?,
    })
}

fn print_summary(report: &ReportBundle) {
    let s = &report.summary;
    eprintln!(
        "requests {} (completed {}, errored {}, timed out {})",
        s.requests, s.completed, s.errored, s.timed_out
    );
    if let Some(t) = s.ttft_s {
        eprintln!(
            "TTFT  mean {:.4} s  median {:.4} s  p99 {:.4} s",
            t.mean, t.median, t.p99
        );
    }
    if let Some(t) = s.tbt_s {
        eprintln!(
            "TBT   mean {:.4} s  median {:.4} s  p99 {:.4} s",
            t.mean, t.median, t.p99
        );
    }
    if let Some(f) = s.satisfied_fraction {
        eprintln!(
            "SLO satisfied at {:.0} ms decode deadline: {:.3}",
            report.deadline.decode_deadline * 1000.0,
            f
        );
    }
    if let Some(r) = &s.rates {
        let saturated = if r.fluid_deadline.saturated { " (saturated)" } else { "" };
        println!(
            "fluid token rate {:.2} tokens/s (decode deadline {:.3} s){saturated}",
            r.fluid_rate, r.fluid_deadline.deadline_s
        );
    }
}

fn write_report(run: &RunRecord, report: &ReportBundle, dir: &Path) -> Result<(), Failure> {
    report
        .write_dir(dir)
        .with_context(|| format!("writing report to {}", dir.display()))
        .usage()?;
    print_summary(report);
    if !run.traces.is_empty() && run.completed().next().is_none() {
        return Err(Failure {
            code: EXIT_ENDPOINT,
            error: anyhow!("no request completed; check the endpoint"),
        });
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let client = StreamClient::new(args.endpoint.config().usage()?).map_err(client_error)?;
    let spec = args.workload.spec().usage()?;
    let options = args.analysis.options(&args.deadline, &args.slo).usage()?;
    let requests = generate_requests(&spec).usage()?;
    let schedule = schedule(args.workload.arrivals, args.qps, requests.len(), spec.seed).usage()?;

    let rt = runtime()?;
    let run = rt
        .block_on(run_load(
            &client,
            &requests,
            &schedule,
            &LoadOptions {
                workload_seed: spec.seed,
            },
        ))
        .map_err(client_error)?;
    save_run(&run, &args.out_run)
        .with_context(|| format!("writing run file {}", args.out_run.display()))
        .usage()?;
    let report = build_report(&run, &options).usage()?;
    write_report(&run, &report, &args.report_dir)
}

fn analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let options = args.analysis.options(&args.deadline, &args.slo).usage()?;
    let run = load_run(&args.run)
        .with_context(|| format!("reading run file {}", args.run.display()))
        .usage()?;
    let report = build_report(&run, &options).usage()?;
    report
        .write_dir(&args.out)
        .with_context(|| format!("writing report to {}", args.out.display()))
        .usage()?;
    print_summary(&report);
    Ok(())
}

fn capacity(args: CapacityArgs) -> Result<(), Failure> {
    let client = StreamClient::new(args.endpoint.config().usage()?).map_err(client_error)?;
    let mut spec = args.workload.spec().usage()?;
    spec.count = args.probe_requests;
    let requests = generate_requests(&spec).usage()?;
    let config = args.deadline.config().usage()?;
    let slo = args.slo.slo(Some(args.deadline.decode_deadline_s())).usage()?;
    if args.warmup >= requests.len() {
        return Err(anyhow!(
            "--warmup {} leaves no scored requests out of {}",
            args.warmup,
            requests.len()
        ))
        .usage();
    }
    if let Some(dir) = &args.runs_dir {
        fs::create_dir_all(dir).usage()?;
    }

    let rt = runtime()?;
    let arrivals = args.workload.arrivals;
    let runner = |qps: f64| -> Result<RunRecord, ClientError> {
        eprintln!("probing {qps:.3} QPS ...");
        let schedule =
            schedule(arrivals, qps, requests.len(), spec.seed).map_err(|e| ClientError::Config(e.to_string()))?;
        let run = rt.block_on(run_load(
            &client,
            &requests,
            &schedule,
            &LoadOptions {
                workload_seed: spec.seed,
            },
        ))?;
        if let Some(dir) = &args.runs_dir {
            let path = dir.join(format!("probe-{qps:.4}.jsonl"));
            if let Err(e) = save_run(&run, &path) {
                eprintln!("warning: could not save {}: {e}", path.display());
            }
        }
        Ok(run)
    };
    let options = CapacityOptions {
        relative_tolerance: args.tolerance,
        warmup: args.warmup,
    };
    let result = match capacity_search(runner, &config, &slo, (args.qps_lo, args.qps_hi), options) {
        Ok(r) => r,
        Err(CapacityError::Solver(e)) => return Err(e).usage(),
        Err(CapacityError::Runner {
            qps,
            source,
            trajectory,
        }) => {
            for p in &trajectory {
                eprintln!("  {:.3} QPS: satisfied {:.3}", p.qps, p.satisfied_fraction);
            }
            let mut f = client_error(source);
            f.error = f.error.context(format!("probe at {qps:.3} QPS failed"));
            return Err(f);
        }
    };
    let json = serde_json::to_string_pretty(&result).usage()? + "\n";
    fs::write(&args.out, json)
        .with_context(|| format!("writing {}", args.out.display()))
        .usage()?;
    for p in &result.trajectory {
        eprintln!(
            "  {:.3} QPS: satisfied {:.3} {}",
            p.qps,
            p.satisfied_fraction,
            if p.passed { "pass" } else { "fail" }
        );
    }
    match result.status {
        CapacityStatus::BelowLowerBound => Err(Failure {
            code: EXIT_INFEASIBLE,
            error: anyhow!("SLO not met even at the lower bound {} QPS", args.qps_lo),
        }),
        CapacityStatus::Unsaturated => {
            println!("capacity >= {:.3} QPS (upper bound met the SLO)", result.capacity_qps);
            Ok(())
        }
        CapacityStatus::Bracketed => {
            println!("capacity {:.3} QPS", result.capacity_qps);
            Ok(())
        }
    }
}

fn mock_profile(args: &MockArgs) -> anyhow::Result<MockProfile> {
    let mut profile = match &args.profile {
        Some(path) => MockProfile::load(path).with_context(|| format!("loading mock profile {}", path.display()))?,
        None => MockProfile::default(),
    };
    if let Some(ms) = args.cadence_ms {
        profile.decode_cadence_s = ms / 1000.0;
    }
    if let Some(ms) = args.jitter_ms {
        profile.jitter_s = ms / 1000.0;
    }
    if let Some(p) = &args.prefill {
        profile.prefill = PrefillCoefficients {
            a: p[0],
            b: p[1],
            c: p[2],
        };
    }
    if let Some(tokens) = args.burst {
        profile.burst = Some(BurstSpec { tokens });
    }
    if let (Some(every), Some(ms)) = (args.stall_every, args.stall_ms) {
        profile.stall = Some(StallSpec {
            every,
            extra_s: ms / 1000.0,
        });
    }
    if args.knee_qps.is_some() {
        profile.knee_qps = args.knee_qps;
    }
    if let Some(seed) = args.seed {
        profile.seed = seed;
    }
    profile.validate()?;
    Ok(profile)
}

fn mock_serve(args: MockArgs) -> Result<(), Failure> {
    let profile = mock_profile(&args).usage()?;
    let addr = SocketAddr::new(args.host, args.port);
    let rt = runtime()?;
    match rt.block_on(fluidbench_mock::serve(profile, addr, args.log.as_deref())) {
        Ok(()) => Ok(()),
        Err(e @ MockError::Profile(_)) => Err(e).usage(),
        Err(e) => Err(e).endpoint(),
    }
}

/// Parse arguments and run, returning the process exit code.
pub fn main_with<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}
