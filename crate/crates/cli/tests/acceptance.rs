//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! Set `ACCEPTANCE_ONLY=4,6` to run a subset.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fluidbench_client::{run_load, EndpointConfig, LoadOptions, StreamClient};
use fluidbench_core::metrics::{deadline_timeline_oracle, fluidity_index, fluidity_with_deadlines, PrefillDeadline};
use fluidbench_core::prefill::default_profile_lengths;
use fluidbench_core::solver::{
    capacity_search, min_feasible_deadline, score_probe, slo_satisfied_fraction, CapacityOptions, CapacityProbe,
    CapacityStatus, PreparedRun, MAX_DECODE_DEADLINE_S,
};
use fluidbench_core::trace::inter_token_times;
use fluidbench_core::workload::{fixed_interval_schedule, generate_requests, WorkloadSpec};
use fluidbench_core::{DeadlineConfig, RequestStatus, RequestTrace, RunMetadata, RunRecord, SloSpec, TokenEvent};
use fluidbench_mock::{MockProfile, MockServer, PrefillCoefficients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
}

fn meta() -> RunMetadata {
    RunMetadata {
        endpoint: "synthetic".into(),
        model: "none".into(),
        workload_seed: 0,
        target_qps: 1.0,
        start_wall_clock: String::new(),
        harness_version: String::new(),
        achieved_qps: None,
        dispatch_lateness_median_s: None,
    }
}

/// A gap series mixing on-time tokens, zeros, bursts and 10x stalls.
fn random_series(rng: &mut ChaCha8Rng, d_d: f64, len: usize) -> Vec<f64> {
    let aligned = rng.random_bool(0.2);
    let unit = d_d / 8.0;
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let gap = match rng.random_range(0..10) {
            0..=4 => rng.random_range(0.0..1.2 * d_d),
            5 => 0.0,
            6 | 7 => {
                // A burst: one gap followed by zeros.
                out.push(rng.random_range(0.0..3.0 * d_d));
                out.extend(std::iter::repeat_n(0.0, rng.random_range(1..4)));
                continue;
            }
            8 => 10.0 * d_d * rng.random_range(0.9..1.1),
            _ => d_d * f64::from(rng.random_range(1..6u32)),
        };
        // Some series sit exactly on multiples of D_d / 8 so boundary ties
        // are exercised, not just approached.
        out.push(if aligned { (gap / unit).round() * unit } else { gap });
    }
    out.truncate(len);
    out
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    for i in 0..n {
        // Power-of-two deadlines keep aligned series exact in binary.
        let d_d = if rng.random_bool(0.5) {
            [1.0 / 64.0, 1.0 / 32.0, 1.0 / 16.0][rng.random_range(0..3)]
        } else {
            rng.random_range(0.005..0.2)
        };
        let d_p = rng.random_range(0.0..2.0);
        let sd = if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(0.0..0.1)
        };
        let len = rng.random_range(1..=512);
        let gaps = random_series(&mut rng, d_d, len);
        let cfg = DeadlineConfig::new(d_d, sd, PrefillDeadline::Fixed(d_p)).map_err(|e| e.to_string())?;
        let a = fluidity_index(&gaps, &cfg, 1).map_err(|e| e.to_string())?;
        let b = deadline_timeline_oracle(&gaps, &cfg, 1).map_err(|e| e.to_string())?;
        ensure(
            (a.total_deadlines, a.missed_deadlines) == (b.total_deadlines, b.missed_deadlines),
            format!("series {i}: scorer {a:?} vs oracle {b:?}"),
        )?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("{n} series identical, {:.1} s", elapsed.as_secs_f64()))
}

fn criterion_2() -> Check {
    let ms = |v: &[f64]| v.iter().map(|x| x / 1000.0).collect::<Vec<_>>();
    let mut slow = vec![100.0; 11];
    slow.push(150.0);
    let r = fluidity_with_deadlines(&ms(&slow), 0.1, 0.1).map_err(|e| e.to_string())?;
    ensure(
        (r.total_deadlines, r.missed_deadlines) == (12, 1) && r.index == 11.0 / 12.0,
        format!("100 ms system: {r:?}"),
    )?;

    let mut fast = vec![100.0];
    fast.extend([10.0; 10]);
    fast.push(150.0);
    let r = fluidity_with_deadlines(&ms(&fast), 0.1, 0.1).map_err(|e| e.to_string())?;
    ensure(
        r.index == 1.0 && r.missed_deadlines == 0,
        format!("10 ms system: {r:?}"),
    )?;

    let r = fluidity_with_deadlines(&ms(&[100.0, 350.0]), 0.1, 0.1).map_err(|e| e.to_string())?;
    ensure(
        (r.total_deadlines, r.missed_deadlines) == (4, 3) && r.index == 0.25,
        format!("stall: {r:?}"),
    )?;
    Ok("11/12, 1.0 and 0.25 (3 misses) reproduced".into())
}

fn random_run(rng: &mut ChaCha8Rng) -> RunRecord {
    let n = rng.random_range(5..40);
    let traces = (0..n)
        .map(|i| {
            let cadence = rng.random_range(0.005..0.12);
            let tokens = rng.random_range(1..100);
            let mut t = rng.random_range(0.0..5.0);
            let dispatch = t;
            let mut events = Vec::with_capacity(tokens);
            for k in 0..tokens {
                t += if k == 0 {
                    rng.random_range(0.05..1.0)
                } else if rng.random_bool(0.03) {
                    cadence * rng.random_range(3.0..12.0)
                } else {
                    cadence * rng.random_range(0.5..1.5)
                };
                events.push(TokenEvent::new(t, rng.random_range(1..3)));
            }
            let status = match rng.random_range(0..50) {
                0 => RequestStatus::Errored,
                1 => RequestStatus::TimedOut,
                _ => RequestStatus::Completed,
            };
            RequestTrace {
                request_id: format!("r{i}"),
                dispatch_time: dispatch,
                prompt_token_count: 100,
                events,
                status,
            }
        })
        .collect();
    RunRecord {
        metadata: meta(),
        traces,
    }
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let resolution = 0.001;
    let steps = (MAX_DECODE_DEADLINE_S / resolution).round() as u64;
    let mut saturated = 0;
    for i in 0..1000 {
        let run = random_run(&mut rng);
        let template = DeadlineConfig::new(0.02, 0.05, PrefillDeadline::Fixed(rng.random_range(0.1..1.0)))
            .map_err(|e| e.to_string())?;
        let slo = SloSpec {
            fluidity_threshold: rng.random_range(0.5..1.0),
            request_fraction: [0.5, 0.9, 0.99, 1.0][rng.random_range(0..4)],
            decode_deadline: None,
        };

        let mut last = 0.0;
        for k in 1..=50 {
            let cfg = template.with_decode_deadline(k as f64 * 0.005);
            let f = slo_satisfied_fraction(&run, &cfg, &slo).map_err(|e| e.to_string())?;
            ensure(
                f >= last,
                format!("run {i}: fraction fell from {last} to {f} at {} ms", k * 5),
            )?;
            last = f;
        }

        let prepared = PreparedRun::new(&run.traces);
        let meets = |k: u64| -> Result<bool, String> {
            let cfg = template.with_decode_deadline(k as f64 * resolution);
            let f = prepared.satisfied_fraction(&cfg, &slo).map_err(|e| e.to_string())?;
            Ok(f >= slo.request_fraction)
        };
        let mut linear = None;
        for k in 1..=steps {
            if meets(k)? {
                linear = Some(k);
                break;
            }
        }
        let found = min_feasible_deadline(&run, &template, &slo, resolution).map_err(|e| e.to_string())?;
        match linear {
            Some(k) => ensure(
                !found.saturated && found.grid_steps == k,
                format!("run {i}: binary search {found:?}, sweep {k}"),
            )?,
            None => {
                saturated += 1;
                ensure(
                    found.saturated,
                    format!("run {i}: sweep found nothing but search gave {found:?}"),
                )?;
            }
        }
    }
    Ok(format!(
        "1000 runs monotone over 50 points; binary search = sweep ({saturated} saturated)"
    ))
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fluidbench"));
    c.env_remove("FLUIDBENCH_API_KEY");
    c
}

fn run_cli(cmd: &mut Command) -> Result<(), String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "fluidbench exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn start_mock(rt: &tokio::runtime::Runtime, profile: MockProfile) -> Result<MockServer, String> {
    rt.block_on(MockServer::start(profile, "127.0.0.1:0".parse().unwrap()))
        .map_err(|e| e.to_string())
}

fn criterion_4() -> Check {
    let start = Instant::now();
    let rt = runtime();
    let server = start_mock(&rt, MockProfile::default())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = dir.path().join("report");
    run_cli(
        cli()
            .args([
                "run",
                "--endpoint",
                &server.base_url(),
                "--requests",
                "100",
                "--qps",
                "4",
            ])
            .args(["--max-tokens", "128", "--prefill-deadline-ms", "50", "--seed", "4"])
            .arg("--out-run")
            .arg(dir.path().join("run.jsonl"))
            .arg("--report-dir")
            .arg(&report),
    )?;
    let summary = read_json(&report.join("summary.json"))?;
    let rates = &summary["summary"]["rates"];
    let rate = rates["fluid_rate"].as_f64().ok_or("no fluid rate")?;
    let steps = rates["fluid_deadline"]["grid_steps"].as_u64().ok_or("no grid steps")?;
    let deadline = rates["fluid_deadline"]["deadline_s"].as_f64().ok_or("no deadline")?;
    ensure(
        summary["summary"]["completed"] == 100,
        format!("completed {}", summary["summary"]["completed"]),
    )?;
    ensure(
        (20..=21).contains(&steps),
        format!("D_d* = {steps} ms, rate {rate:.3} tokens/s"),
    )?;
    ensure(rate * deadline == 1.0, "rate is not the inverse of the deadline")?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "D_d* = {steps} ms, fluid rate {rate:.2} tokens/s, {:.0} s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let rt = runtime();
    let planted = PrefillCoefficients {
        a: 1e-7,
        b: 2e-4,
        c: 0.05,
    };
    let server = start_mock(
        &rt,
        MockProfile {
            prefill: planted,
            ..MockProfile::default()
        },
    )?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let curve_path = dir.path().join("curve.json");
    run_cli(
        cli()
            .args([
                "profile-prefill",
                "--endpoint",
                &server.base_url(),
                "--repeats",
                "3",
                "--out",
            ])
            .arg(&curve_path),
    )?;
    let curve = read_json(&curve_path)?;
    let get = |k: &str| curve[k].as_f64().ok_or(format!("curve has no {k}"));
    let (a, b, c, rmse) = (get("a")?, get("b")?, get("c")?, get("rmse")?);
    let samples = curve["samples"].as_u64().unwrap_or(0) as usize;
    let expected_samples = 3 * default_profile_lengths().len();
    let rel = |got: f64, want: f64| (got - want).abs() / want;
    let detail = format!(
        "a {a:.4e} ({:.2}%), b {b:.4e} ({:.2}%), c {c:.5} ({:.2}%), rmse {:.2} ms",
        100.0 * rel(a, planted.a),
        100.0 * rel(b, planted.b),
        100.0 * rel(c, planted.c),
        rmse * 1000.0
    );
    ensure(samples == expected_samples, format!("{samples} samples; {detail}"))?;
    ensure(
        rel(a, planted.a) < 0.01 && rel(b, planted.b) < 0.01 && rel(c, planted.c) < 0.01,
        detail.clone(),
    )?;
    ensure(rmse < 0.005, detail.clone())?;
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(120),
        format!("took {elapsed:?}; {detail}"),
    )?;
    Ok(format!("{detail}, {:.0} s", elapsed.as_secs_f64()))
}

const KNEE_QPS: f64 = 4.0;
const KNEE_PROBE_REQUESTS: usize = 120;
const KNEE_WARMUP: usize = 20;

fn knee_profile() -> MockProfile {
    MockProfile {
        knee_qps: Some(KNEE_QPS),
        ..MockProfile::default()
    }
}

/// One probe at `qps` against a fresh knee mock. Arrivals are evenly
/// spaced; see the README for why Poisson arrivals blur this knee.
async fn knee_probe(qps: f64) -> Result<RunRecord, String> {
    let server = MockServer::start(knee_profile(), "127.0.0.1:0".parse().unwrap())
        .await
        .map_err(|e| e.to_string())?;
    let client = StreamClient::new(EndpointConfig::new(server.base_url(), "mock")).map_err(|e| e.to_string())?;
    let spec = WorkloadSpec::uniform(KNEE_PROBE_REQUESTS, 256, 8192, 6);
    let requests = generate_requests(&spec).map_err(|e| e.to_string())?;
    let schedule = fixed_interval_schedule(qps, requests.len()).map_err(|e| e.to_string())?;
    let run = run_load(&client, &requests, &schedule, &LoadOptions { workload_seed: 6 })
        .await
        .map_err(|e| e.to_string())?;
    server.shutdown().await.map_err(|e| e.to_string())?;
    Ok(run)
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ProbeError(String);

fn criterion_6() -> Check {
    let start = Instant::now();
    let rt = runtime();
    let config = DeadlineConfig::new(0.025, 0.05, PrefillDeadline::Fixed(0.05)).map_err(|e| e.to_string())?;
    let slo = SloSpec {
        decode_deadline: Some(0.025),
        ..SloSpec::default()
    };
    let tolerance = 0.1;
    let result = capacity_search(
        |qps| rt.block_on(knee_probe(qps)).map_err(ProbeError),
        &config,
        &slo,
        (2.0, 6.0),
        CapacityOptions {
            relative_tolerance: tolerance,
            warmup: KNEE_WARMUP,
        },
    )
    .map_err(|e| e.to_string())?;
    let cap = result.capacity_qps;
    let probed: Vec<String> = result
        .trajectory
        .iter()
        .map(|p| format!("{:.2}{}", p.qps, if p.passed { "+" } else { "-" }))
        .collect();

    // Exhaustive sweep oracle, three independent mocks at a time.
    let grid: Vec<f64> = (0..9).map(|i| 3.0 + 0.25 * f64::from(i)).collect();
    let mut sweep: Vec<CapacityProbe> = Vec::new();
    for batch in grid.chunks(3) {
        let runs = rt.block_on(futures::future::join_all(batch.iter().map(|&q| knee_probe(q))));
        for (&q, run) in batch.iter().zip(runs) {
            let p = score_probe(q, &run?, &config.with_decode_deadline(0.025), &slo, KNEE_WARMUP)
                .map_err(|e| e.to_string())?;
            sweep.push(p);
        }
    }
    let swept: Vec<String> = sweep
        .iter()
        .map(|p| format!("{:.2}:{:.3}", p.qps, p.satisfied_fraction))
        .collect();
    let first_fail = sweep.iter().position(|p| !p.passed);
    let oracle = match first_fail {
        Some(0) => return Err(format!("sweep fails everywhere: {swept:?}")),
        Some(i) => sweep[i - 1].qps,
        None => return Err(format!("sweep never fails: {swept:?}")),
    };
    let detail = format!(
        "capacity {cap:.3} QPS ({:?}), probes [{}], sweep oracle {oracle:.2} QPS [{}]",
        result.status,
        probed.join(" "),
        swept.join(" ")
    );
    ensure(result.status == CapacityStatus::Bracketed, detail.clone())?;
    ensure((3.6..=4.4).contains(&cap), detail.clone())?;
    // The search brackets the onset in (cap, cap * (1 + tol)], the sweep in
    // (oracle, oracle + 0.25]; the two must overlap.
    ensure(cap < oracle + 0.25 && cap * (1.0 + tolerance) > oracle, detail.clone())?;
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(600),
        format!("took {elapsed:?}; {detail}"),
    )?;
    Ok(format!("{detail}, {:.0} s", elapsed.as_secs_f64()))
}

fn criterion_7() -> Check {
    let trace = RequestTrace {
        request_id: "burst".into(),
        dispatch_time: 0.0,
        prompt_token_count: 1,
        events: vec![TokenEvent::new(1.0, 1), TokenEvent::new(1.3, 3)],
        status: RequestStatus::Completed,
    };
    let gaps = inter_token_times(&trace).map_err(|e| e.to_string())?;
    ensure(
        gaps.len() == 4 && gaps[0] == 1.0 && gaps[2] == 0.0 && gaps[3] == 0.0,
        format!("series {gaps:?}"),
    )?;
    ensure((gaps[1] - 0.3).abs() < 1e-12, format!("series {gaps:?}"))?;
    let cfg = DeadlineConfig::new(0.1, 0.0, PrefillDeadline::Fixed(1.0)).map_err(|e| e.to_string())?;
    let r = fluidity_index(&gaps, &cfg, 1).map_err(|e| e.to_string())?;
    let o = deadline_timeline_oracle(&gaps, &cfg, 1).map_err(|e| e.to_string())?;
    ensure(
        (r.total_deadlines, r.missed_deadlines) == (6, 3) && r.index == 0.5 && r == o,
        format!("scorer {r:?}, oracle {o:?}"),
    )?;
    Ok("series [1.0, 0.3, 0, 0]; total 6, missed 3, index 0.5 (scorer = oracle)".into())
}

fn criterion_8() -> Check {
    let data = data_dir();
    let golden = data.join("golden_report");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("report");
    run_cli(
        cli()
            .arg("analyze")
            .arg("--run")
            .arg(data.join("golden_run.jsonl"))
            .arg("--prefill-curve")
            .arg(data.join("golden_curve.json"))
            .args(["--deadline", "medium", "--request-fraction", "0.9"])
            .arg("--out")
            .arg(&out),
    )?;
    let mut names: Vec<String> = fs::read_dir(&golden)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    ensure(names.len() == 6, format!("golden report has {names:?}"))?;
    for name in &names {
        let want = fs::read(golden.join(name)).map_err(|e| e.to_string())?;
        let got = fs::read(out.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(want == got, format!("{name} differs from the golden copy"))?;
    }
    Ok(format!("{} report files byte-identical", names.len()))
}

const CRITERIA: [Criterion; 8] = [
    (1, "scorer/oracle equivalence", criterion_1),
    (2, "worked examples", criterion_2),
    (3, "monotone sweep and deadline search", criterion_3),
    (4, "fluid-rate recovery", criterion_4),
    (5, "prefill-curve recovery", criterion_5),
    (6, "capacity-knee recovery", criterion_6),
    (7, "burst semantics", criterion_7),
    (8, "report determinism", criterion_8),
];

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    panic::set_hook(Box::new(|_| {}));

    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {id} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
