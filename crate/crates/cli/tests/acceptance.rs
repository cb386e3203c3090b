//! End-to-end acceptance run: one PASS/FAIL line per criterion and a final
//! tally. A failed criterion is reported but does not fail the target; only
//! a broken setup does. Takes a little over an hour on one core.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use advpit::data::{self, GenConfig, SeparationExample, Split};
use advpit::dsp::StftConfig;
use advpit::metrics;
use advpit::models::{Separator, SeparatorConfig};
use advpit::tensor::Graph;
use advpit::train;
use serde_json::Value;

const CHECK_BUDGET: Duration = Duration::from_secs(600);
const TRAIN_BUDGET: Duration = Duration::from_secs(2 * 3600);
const MASK_TOL: f64 = 1e-6;
const BYPASS_TOL: f64 = 1e-6;
const BOUND_MIN_DB: f64 = 20.0;
const PIT_FRACTION: f64 = 0.25;
const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];
/// Both bypass-signature windows, dB.
const BYPASS_WINDOW_DB: f64 = 2.0;
const COMBO_SLACK_DB: f64 = 1.0;

struct Outcome {
    passed: bool,
}

fn report(id: &str, passed: bool, detail: String) -> Outcome {
    println!("{} {id}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { passed }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp paths")
}

fn cli(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_advpit"))
        .args(args)
        .env("ADVPIT_QUIET", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(start.elapsed())
    } else {
        Err(format!(
            "advpit {} exited with {:?}: {}",
            args.first().copied().unwrap_or(""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn db(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("report has no {key}"))
}

fn c1_checks(work: &Path) -> Outcome {
    let out = work.join("check");
    match cli(&["check", "--suite", "all", "--out", p(&out)]) {
        Ok(t) => report(
            "C1 oracle suites",
            t < CHECK_BUDGET,
            format!("all suites green in {:.0} s (budget {} s)", t.as_secs_f64(), CHECK_BUDGET.as_secs()),
        ),
        Err(e) => report("C1 oracle suites", false, e),
    }
}

/// Largest `| Σ_k |Ŝ_k| − |M| |` over one forward pass.
fn mask_residual(sep: &Separator, mixes: &[&[f64]]) -> Result<f64, String> {
    let mut g = Graph::new();
    let v = sep.params.bind(&mut g, false);
    let out = sep.forward_bound(&mut g, &v, mixes).map_err(|e| e.to_string())?;
    let est = g.value(out.est_mag).data();
    let k = sep.cfg.k;
    let n = out.spectra.frames * out.spectra.bins;
    let mut worst: f64 = 0.0;
    for b in 0..out.spectra.batch {
        for i in 0..n {
            let sum: f64 = (0..k).map(|j| est[(b * k + j) * n + i]).sum();
            worst = worst.max((sum - out.spectra.mag[b * n + i]).abs());
        }
    }
    Ok(worst)
}

fn c2_mask_invariant(test: &[SeparationExample], trained: Option<&Separator>) -> Outcome {
    let run = || -> Result<(f64, usize), String> {
        let mut worst: f64 = 0.0;
        let mut forwards = 0;
        let mut models = vec![];
        for k in [2, 4] {
            for seed in 0..3 {
                models.push(Separator::new(SeparatorConfig::desk(k), seed).map_err(|e| e.to_string())?);
            }
        }
        models.extend(trained.cloned());
        for sep in &models {
            for group in test.chunks(8).take(5) {
                let mixes: Vec<&[f64]> = group.iter().map(|e| e.mix.as_slice()).collect();
                worst = worst.max(mask_residual(sep, &mixes)?);
                forwards += 1;
            }
        }
        Ok((worst, forwards))
    };
    match run() {
        Ok((worst, n)) => report(
            "C2 softmax-mask invariant",
            worst <= MASK_TOL && trained.is_some(),
            format!(
                "max |sum_k |S_k| - |M|| = {worst:.3e} over {n} forwards (tol {MASK_TOL:e}){}",
                if trained.is_some() { ", trained model included" } else { ", trained model missing" }
            ),
        ),
        Err(e) => report("C2 softmax-mask invariant", false, e),
    }
}

/// 200 multi-source desk mixes written as a split directory.
fn multi_source_split(dir: &Path) -> Result<(), String> {
    let cfg = GenConfig::desk();
    let examples: Vec<_> = data::generate_split(&cfg, Split::Test, 400)
        .into_iter()
        .filter(|e| e.k_active >= 2)
        .take(200)
        .collect();
    if examples.len() < 200 {
        return Err(format!("only {} multi-source mixes generated", examples.len()));
    }
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let entries = examples
        .iter()
        .map(|e| data::write_example(dir, e, cfg.sample_rate))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    data::write_manifest(&dir.join("manifest.jsonl"), &entries).map_err(|e| e.to_string())
}

fn c3_bypass(work: &Path) -> (Outcome, Option<PathBuf>) {
    let run = || -> Result<(f64, u64, PathBuf), String> {
        let dir = work.join("multi");
        multi_source_split(&dir)?;
        let out = work.join("bypass");
        cli(&["eval", "--bypass", "--data", p(&dir), "--out", p(&out)])?;
        let r = read_json(&out.join("report.json"))?;
        Ok((db(&r, "si_snr_i")?, r["n_multi_source"].as_u64().unwrap_or(0), dir))
    };
    match run() {
        Ok((i, n, dir)) => (
            report(
                "C3 bypass baseline",
                i.abs() <= BYPASS_TOL && n == 200,
                format!("SI-SNR_I = {i:.3e} dB on {n} multi-source mixes (tol {BYPASS_TOL:e})"),
            ),
            Some(dir),
        ),
        Err(e) => (report("C3 bypass baseline", false, e), None),
    }
}

fn bound_json(test: &[SeparationExample]) -> Result<(f64, String), String> {
    let r = metrics::ideal_mask_bound(test, &StftConfig::desk()).map_err(|e| e.to_string())?;
    let i = r.si_snr_i.ok_or("no multi-source mixes in the test split")?;
    Ok((i, serde_json::to_string(&r).expect("report serializes")))
}

fn c4_bound(test: &[SeparationExample]) -> (Outcome, Option<f64>) {
    match bound_json(test) {
        Ok((i, _)) => (
            report(
                "C4 ideal-mask bound",
                i >= BOUND_MIN_DB,
                format!("bound SI-SNR_I = {i:.2} dB on the disjoint-bands test split (need >= {BOUND_MIN_DB})"),
            ),
            Some(i),
        ),
        Err(e) => (report("C4 ideal-mask bound", false, e), None),
    }
}

struct RunResult {
    si_snr_i: f64,
    si_snr_s: f64,
    elapsed: Duration,
}

/// Trains with `overrides` on the K=2 dataset, then scores `best.ckpt` on the test split.
fn train_and_eval(data_dir: &Path, out: &Path, overrides: &[String]) -> Result<RunResult, String> {
    let run = out.join("run");
    let mut args = vec!["train", "--data", p(data_dir), "--out", p(&run)];
    for o in overrides {
        args.extend(["--set", o.as_str()]);
    }
    let elapsed = cli(&args)?;
    let ev = out.join("eval");
    cli(&["eval", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(data_dir), "--split", "test", "--out", p(&ev)])?;
    let r = read_json(&ev.join("report.json"))?;
    Ok(RunResult {
        si_snr_i: db(&r, "si_snr_i")?,
        si_snr_s: db(&r, "si_snr_s")?,
        elapsed,
    })
}

fn c5_pit(data_dir: &Path, out: &Path, bound: Option<f64>) -> (Outcome, Option<f64>) {
    let Some(bound) = bound else {
        return (report("C5 PIT-only training", false, "no ideal-mask bound to compare with".into()), None);
    };
    let need = PIT_FRACTION * bound;
    match train_and_eval(data_dir, out, &[]) {
        Ok(r) => (
            report(
                "C5 PIT-only training",
                r.si_snr_i >= need && r.elapsed < TRAIN_BUDGET,
                format!(
                    "test SI-SNR_I = {:.2} dB (need >= {need:.2} = {PIT_FRACTION} x bound) in {:.0} s",
                    r.si_snr_i,
                    r.elapsed.as_secs_f64()
                ),
            ),
            Some(r.si_snr_i),
        ),
        Err(e) => (report("C5 PIT-only training", false, e), None),
    }
}

fn context_wave(i: usize) -> String {
    format!(r#"{{"domain":"wave","kind":"context","m_conditioned":true,"i":{i},"k":2,"channels":[16,32,32,64]}}"#)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn c6_sweep(data_dir: &Path, work: &Path) -> Outcome {
    let bypass_s = data::load_split(&data_dir.join("test"), 2)
        .map_err(|e| e.to_string())
        .and_then(|t| metrics::bypass_report(&t).map_err(|e| e.to_string()))
        .and_then(|r| r.si_snr_s.ok_or_else(|| "no single-source mixes".to_string()));
    let bypass_s = match bypass_s {
        Ok(v) => v,
        Err(e) => return report("C6 I-sweep trend", false, e),
    };
    let mut means = [0.0; 2];
    let mut signature = true;
    let mut lines = vec![];
    for i in [0usize, 1] {
        let mut scores = vec![];
        for seed in SWEEP_SEEDS {
            let overrides = vec![
                format!("train.recipe.discriminators=[{}]", context_wave(i)),
                "train.recipe.pit_enabled=false".into(),
                format!("train.seed={seed}"),
            ];
            let r = match train_and_eval(data_dir, &work.join(format!("sweep_i{i}_s{seed}")), &overrides) {
                Ok(r) => r,
                Err(e) => return report("C6 I-sweep trend", false, e),
            };
            println!(
                "     I={i} seed={seed}: SI-SNR_I {:.2} dB, SI-SNR_S {:.2} dB ({:.0} s)",
                r.si_snr_i,
                r.si_snr_s,
                r.elapsed.as_secs_f64()
            );
            if i == 0 {
                signature &= r.si_snr_i.abs() <= BYPASS_WINDOW_DB && (r.si_snr_s - bypass_s).abs() <= BYPASS_WINDOW_DB;
            }
            scores.push(r.si_snr_i);
        }
        means[i] = mean(&scores);
        lines.push(format!("I={i} mean {:.2} dB", means[i]));
    }
    report(
        "C6 I-sweep trend",
        means[1] > means[0] && signature,
        format!(
            "{}; I=1 beats I=0: {}; I=0 bypass signature (|SI-SNR_I| <= {BYPASS_WINDOW_DB}, SI-SNR_S within {BYPASS_WINDOW_DB} of bypass {bypass_s:.2}): {signature}",
            lines.join(", "),
            means[1] > means[0]
        ),
    )
}

fn c7_combo(data_dir: &Path, work: &Path, pit: Option<f64>) -> Outcome {
    let Some(pit) = pit else {
        return report("C7 combined recipe", false, "no PIT-only result to compare with".into());
    };
    let inst = r#"{"domain":"wave","kind":"instance","m_conditioned":false,"i":0,"k":2,"channels":[16,32,32,64]}"#;
    let overrides = vec![format!("train.recipe.discriminators=[{},{inst}]", context_wave(1))];
    match train_and_eval(data_dir, &work.join("combo"), &overrides) {
        Ok(r) => report(
            "C7 combined recipe",
            r.si_snr_i >= pit - COMBO_SLACK_DB && r.elapsed < TRAIN_BUDGET,
            format!(
                "ctx wave + inst wave + PIT: {:.2} dB vs PIT-only {pit:.2} dB (slack {COMBO_SLACK_DB} dB) in {:.0} s",
                r.si_snr_i,
                r.elapsed.as_secs_f64()
            ),
        ),
        Err(e) => report("C7 combined recipe", false, e),
    }
}

fn same_bytes(a: &Path, b: &Path) -> Result<bool, String> {
    let read = |x: &Path| fs::read(x).map_err(|e| format!("{}: {e}", x.display()));
    Ok(read(a)? == read(b)?)
}

fn c8_determinism(work: &Path, multi: Option<&Path>, data_dir: &Path, test: &[SeparationExample]) -> Outcome {
    let run = || -> Result<Vec<String>, String> {
        let mut diffs = vec![];
        let multi = multi.ok_or("C3 data missing")?;
        let again = work.join("bypass_again");
        cli(&["eval", "--bypass", "--data", p(multi), "--out", p(&again)])?;
        if !same_bytes(&work.join("bypass/report.json"), &again.join("report.json"))? {
            diffs.push("C3 bypass report".to_string());
        }
        let regen_dir = work.join("k2_again");
        cli(&["gen", "--preset", "desk-disjoint2", "--out", p(&regen_dir), "--seed", "0"])?;
        let regenerated = data::load_split(&regen_dir.join("test"), 2).map_err(|e| e.to_string())?;
        if bound_json(test)?.1 != bound_json(&regenerated)?.1 {
            diffs.push("C4 bound report".to_string());
        }
        let second = work.join("pit_again");
        train_and_eval(data_dir, &second, &[])?;
        for f in ["run/train_log.jsonl", "run/best.ckpt", "run/last.ckpt", "eval/report.json"] {
            if !same_bytes(&work.join("pit").join(f), &second.join(f))? {
                diffs.push(format!("C5 {f}"));
            }
        }
        Ok(diffs)
    };
    match run() {
        Ok(d) if d.is_empty() => report(
            "C8 determinism",
            true,
            "bypass report, bound report, training log, checkpoints and eval report repeat byte-for-byte".into(),
        ),
        Ok(d) => report("C8 determinism", false, format!("differing outputs: {}", d.join(", "))),
        Err(e) => report("C8 determinism", false, e),
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are accepted and ignored.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let work = tmp.path();
    let start = Instant::now();
    let mut outcomes = vec![c1_checks(work)];

    let data_dir = work.join("k2");
    let test = cli(&["gen", "--preset", "desk-disjoint2", "--out", p(&data_dir), "--seed", "0"])
        .and_then(|_| data::load_split(&data_dir.join("test"), 2).map_err(|e| e.to_string()));
    let test = match test {
        Ok(t) => t,
        Err(e) => {
            println!("FAIL setup: {e}");
            return ExitCode::FAILURE;
        }
    };

    let (c3, multi) = c3_bypass(work);
    let (c4, bound) = c4_bound(&test);
    let (c5, pit) = c5_pit(&data_dir, &work.join("pit"), bound);
    let trained = train::load_checkpoint(&work.join("pit/run/best.ckpt")).ok().map(|(s, _)| s.separator);
    outcomes.push(c2_mask_invariant(&test, trained.as_ref()));
    outcomes.extend([c3, c4, c5]);
    outcomes.push(c6_sweep(&data_dir, work));
    outcomes.push(c7_combo(&data_dir, work, pit));
    outcomes.push(c8_determinism(work, multi.as_deref(), &data_dir, &test));

    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!(
        "{} of {} criteria passed in {:.0} s",
        outcomes.len() - failed,
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        println!("failed criteria are listed above with their measured values");
    }
    ExitCode::SUCCESS
}
