//! Acceptance suite. Every test prints one `PASS` or `FAIL` line for its
//! criterion straight to stderr, so the lines show up even when output is
//! captured.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use incft::checkpoint::Checkpoint;
use incft::cli::{run_experiment, ExperimentResults};
use incft::config::RunConfig;
use incft::corpus_dir::{read_corpus, write_corpus};
use incft::data::{generate_corpus, GeneratorConfig, LabeledImage, SessionCorpus};
use incft::experiment::{
    make_inter_plan, make_intra_plan, permute_plan, permute_plan_fixed_eval, run_protocol, unit_images, PlanData,
    SplitMode, SplitPlan,
};
use incft::network::{build_default_network, FreezeMode, NetworkSpec};
use incft::optim::{accuracy, train_phase, AdamState, TrainConfig, LR_INITIAL};
use incft::pgm::{decode_pgm, encode_pgm};
use incft::rng::Prng;
use tempfile::TempDir;

fn report(n: u32, title: &str, outcome: &Result<String, String>) {
    let line = match outcome {
        Ok(detail) => format!("criterion {n} ({title}): PASS  {detail}"),
        Err(detail) => format!("criterion {n} ({title}): FAIL  {detail}"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn conclude(n: u32, title: &str, outcome: Result<String, String>) {
    report(n, title, &outcome);
    if let Err(detail) = outcome {
        panic!("criterion {n} failed: {detail}");
    }
}

/// Collects failed checks of one criterion.
#[derive(Default)]
struct Checks {
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn finish(self) -> Result<String, String> {
        if self.failures.is_empty() {
            Ok(self.notes.join("; "))
        } else {
            Err(self.failures.join("; "))
        }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------------------
// Cross-validated fast-profile runs shared by criteria 2 and 4 to 7.

struct CvRun {
    results: ExperimentResults,
    /// Results JSON with the timing object removed.
    json: String,
    checkpoints: TempDir,
    elapsed: Duration,
}

fn fast_corpus() -> &'static SessionCorpus {
    static CORPUS: OnceLock<SessionCorpus> = OnceLock::new();
    CORPUS.get_or_init(|| generate_corpus(&GeneratorConfig::fast_profile()).unwrap())
}

fn deterministic_json(results: &ExperimentResults) -> String {
    let mut value = serde_json::to_value(results).unwrap();
    value.as_object_mut().unwrap().remove("timing").expect("timing object");
    serde_json::to_string_pretty(&value).unwrap()
}

fn run_cv(mode: SplitMode) -> CvRun {
    let config = RunConfig::fast_profile(mode);
    let checkpoints = TempDir::new().unwrap();
    let started = Instant::now();
    let results = run_experiment(&config, fast_corpus(), Some(checkpoints.path()), &mut std::io::sink()).unwrap();
    let elapsed = started.elapsed();
    CvRun {
        json: deterministic_json(&results),
        results,
        checkpoints,
        elapsed,
    }
}

fn inter_run() -> &'static CvRun {
    static RUN: OnceLock<CvRun> = OnceLock::new();
    RUN.get_or_init(|| run_cv(SplitMode::InterSession))
}

fn intra_run() -> &'static CvRun {
    static RUN: OnceLock<CvRun> = OnceLock::new();
    RUN.get_or_init(|| run_cv(SplitMode::IntraSession))
}

fn phase_stats(run: &CvRun) -> Vec<(String, f64, f64)> {
    run.results
        .report
        .phases
        .iter()
        .map(|p| (p.phase.clone(), p.mean, p.std))
        .collect()
}

fn fmt_phases(stats: &[(String, f64, f64)]) -> String {
    stats
        .iter()
        .map(|(name, mean, std)| format!("{name} {:.2}±{:.2}%", mean * 100.0, std * 100.0))
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut checks = Checks::default();
    for (i, (name, spec)) in layer_kind_cases().into_iter().enumerate() {
        let params = random_params(&spec, 100 + i as u64);
        let [c, h, w] = spec.input_shape();
        let input = random_input(&[2, c, h, w], 200 + i as u64);
        let f32_report = fd_check(&spec, &params, &input, 40, 300 + i as u64);
        let f64_report = fd_check_f64(&spec, &params, &input, 40, 300 + i as u64);
        checks.check(f32_report.ok() && f32_report.checked > 0, format!("{name} f32: {}", f32_report.summary()));
        checks.check(f64_report.ok(), format!("{name} f64: {}", f64_report.summary()));
    }
    let spec = NetworkSpec::default_for([1, 32, 32], 5).unwrap();
    let params = random_params(&spec, 11);
    let input = random_input(&[2, 1, 32, 32], 12);
    let composed = fd_check_f64(&spec, &params, &input, 12, 13);
    checks.check(composed.ok() && composed.checked >= 140, format!("default net 1×32×32: {}", composed.summary()));
    let elapsed = started.elapsed();
    checks.check(elapsed < Duration::from_secs(120), format!("{:.1}s", secs(elapsed)));
    conclude(1, "gradient correctness", checks.finish());
}

#[test]
fn criterion_2_frozen_tensors_are_untouched() {
    let mut checks = Checks::default();

    // Conv freeze: the fast-profile inter-session run's own checkpoints.
    let run = inter_run();
    for r in 0..run.results.report.repeats.len() {
        let load = |phase: &str| Checkpoint::load(run.checkpoints.path().join(format!("repeat{r}_{phase}.sfck"))).unwrap();
        let (vanilla, ft2) = (load("vanilla"), load("ft2"));
        let mut conv = 0;
        let mut same = true;
        for (a, b) in vanilla.params.iter().zip(ft2.params.iter()) {
            if a.name.starts_with("conv") {
                conv += 1;
                same &= a.tensor.data().iter().map(|v| v.to_bits()).eq(b.tensor.data().iter().map(|v| v.to_bits()));
            }
        }
        checks.check(same && conv == 10, format!("repeat {r}: {conv} conv tensors identical"));
    }

    // All-but-last freeze on a smaller corpus.
    let mut config = RunConfig::fast_profile(SplitMode::InterSession);
    config.corpus = GeneratorConfig {
        resolution: [32, 32],
        images_per_class_per_round: 4,
        ..GeneratorConfig::fast_profile()
    };
    config.experiment.freeze_mode = FreezeMode::FreezeAllButLast;
    let corpus = generate_corpus(&config.corpus).unwrap();
    let plan = make_inter_plan(7).unwrap();
    let protocol = run_protocol(&config.experiment, &corpus, &plan, 21).unwrap();
    let vanilla = &protocol.phases[0].params;
    let ft2 = &protocol.phases[2].params;
    let last = vanilla.len() - 2;
    let mut ok = true;
    for (i, (a, b)) in vanilla.iter().zip(ft2.iter()).enumerate() {
        let equal = a.tensor.data().iter().map(|v| v.to_bits()).eq(b.tensor.data().iter().map(|v| v.to_bits()));
        ok &= equal == (i < last);
    }
    checks.check(ok, format!("all-but-last: {last} leading tensors identical, output layer moved"));
    conclude(2, "freeze integrity", checks.finish());
}

#[test]
fn criterion_3_loss_and_overfit_sanity() {
    let started = Instant::now();
    let mut checks = Checks::default();

    let data = unit_images(fast_corpus(), SplitMode::InterSession, 1, &[1]).unwrap();
    let (spec, mut params) = build_default_network([1, 64, 64], 5, 3).unwrap();
    let mut state = AdamState::new(&params, LR_INITIAL);
    let one_epoch = TrainConfig {
        epochs: 1,
        batch_size: 32,
    };
    let trace = train_phase(&spec, &mut params, &mut state, &data, one_epoch, &mut Prng::from_seed(4)).unwrap();
    let ln5 = 5f64.ln();
    let loss = trace[0].mean_loss as f64;
    checks.check(
        (loss - ln5).abs() <= 0.1 * ln5,
        format!("first-epoch loss {loss:.4} vs ln 5 = {ln5:.4}"),
    );

    let small = generate_corpus(&GeneratorConfig {
        resolution: [32, 32],
        images_per_class_per_round: 2,
        ..GeneratorConfig::fast_profile()
    })
    .unwrap();
    // Session 1: 5 rounds of 2 images per class.
    let fifty: Vec<&LabeledImage> = small.images().filter(|i| i.session_id == 1).collect();
    let (spec, mut params) = build_default_network([1, 32, 32], 5, 8).unwrap();
    let mut state = AdamState::new(&params, LR_INITIAL);
    let config = TrainConfig {
        epochs: 30,
        batch_size: 5,
    };
    let trace = train_phase(&spec, &mut params, &mut state, &fifty, config, &mut Prng::from_seed(9)).unwrap();
    let final_epoch = trace.last().unwrap().accuracy;
    let (first_loss, last_loss) = (trace[0].mean_loss, trace.last().unwrap().mean_loss);
    checks.check(
        last_loss < first_loss,
        format!("overfit loss {first_loss:.4} → {last_loss:.4}"),
    );
    let after = accuracy(&spec, &params, &fifty).unwrap();
    checks.check(
        fifty.len() == 50 && final_epoch >= 0.99 && after >= 0.99,
        format!("overfit {} images: final epoch {:.3}, after training {:.3}", fifty.len(), final_epoch, after),
    );
    let elapsed = started.elapsed();
    checks.check(elapsed < Duration::from_secs(180), format!("{:.1}s", secs(elapsed)));
    conclude(3, "loss sanity", checks.finish());
}

#[test]
fn criterion_4_inter_session_fine_tuning_helps() {
    let run = inter_run();
    let stats = phase_stats(run);
    let (v, f1, f2) = (stats[0].1, stats[1].1, stats[2].1);
    let mut checks = Checks::default();
    checks.check(run.results.report.repeats.len() == 5, format!("{} repeats", run.results.report.repeats.len()));
    checks.check(v < f1 && f1 < f2, fmt_phases(&stats));
    checks.check(f2 - v >= 0.05, format!("ft2 − vanilla {:+.2} pp", (f2 - v) * 100.0));
    checks.check(run.elapsed < Duration::from_secs(20 * 60), format!("{:.0}s", secs(run.elapsed)));
    conclude(4, "inter-session fine-tuning gain", checks.finish());
}

#[test]
fn criterion_5_intra_session_ordering() {
    let run = intra_run();
    let stats = phase_stats(run);
    let (v, f1, f2) = (stats[0].1, stats[1].1, stats[2].1);
    let inter_vanilla = phase_stats(inter_run())[0].1;
    let mut checks = Checks::default();
    checks.check(f2 >= f1 && f1 >= v, fmt_phases(&stats));
    checks.check(
        v > inter_vanilla,
        format!("intra vanilla {:.2}% vs inter vanilla {:.2}%", v * 100.0, inter_vanilla * 100.0),
    );
    checks.check(run.elapsed < Duration::from_secs(15 * 60), format!("{:.0}s", secs(run.elapsed)));
    conclude(5, "intra-session ordering", checks.finish());
}

#[test]
fn criterion_6_fine_tuning_shrinks_spread() {
    let stats = phase_stats(inter_run());
    let (v, f2) = (stats[0].2, stats[2].2);
    let outcome = if f2 <= v {
        Ok(format!("std ft2 {:.2}% ≤ vanilla {:.2}%", f2 * 100.0, v * 100.0))
    } else {
        Err(format!("std ft2 {:.2}% > vanilla {:.2}%", f2 * 100.0, v * 100.0))
    };
    conclude(6, "std shrinkage", outcome);
}

fn same_checkpoints(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in &names {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{name:?}: {e}"))?;
        if x != y {
            return Err(format!("{name:?} differs"));
        }
    }
    Ok(names.len())
}

#[test]
fn criterion_7_reruns_are_byte_identical() {
    let mut checks = Checks::default();
    for (label, first, mode) in [
        ("inter", inter_run(), SplitMode::InterSession),
        ("intra", intra_run(), SplitMode::IntraSession),
    ] {
        let again = run_cv(mode);
        checks.check(first.json == again.json, format!("{label} results JSON identical ({} bytes)", first.json.len()));
        match same_checkpoints(first.checkpoints.path(), again.checkpoints.path()) {
            Ok(n) => checks.check(n == 15, format!("{label}: {n} checkpoints identical")),
            Err(e) => checks.check(false, format!("{label}: {e}")),
        }
    }
    conclude(7, "determinism", checks.finish());
}

#[test]
fn criterion_8_formats_roundtrip_and_detect_damage() {
    let mut checks = Checks::default();
    let dir = TempDir::new().unwrap();

    let config = GeneratorConfig {
        resolution: [32, 32],
        images_per_class_per_round: 2,
        ..GeneratorConfig::fast_profile()
    };
    let corpus = generate_corpus(&config).unwrap();
    let spec = NetworkSpec::default_for([1, 32, 32], 5).unwrap();
    let (_, params) = build_default_network([1, 32, 32], 5, 8).unwrap();
    let mut ck = Checkpoint::new(spec, params, 1);
    ck.optimizer = Some(AdamState::new(&ck.params, LR_INITIAL));
    let path = dir.path().join("model.sfck");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bits_equal = ck.params.iter().zip(back.params.iter()).all(|(a, b)| {
        a.name == b.name
            && a.trainable == b.trainable
            && a.tensor.shape() == b.tensor.shape()
            && a.tensor.data().iter().map(|v| v.to_bits()).eq(b.tensor.data().iter().map(|v| v.to_bits()))
    });
    checks.check(
        bits_equal && back.to_bytes() == std::fs::read(&path).unwrap(),
        "checkpoint roundtrip bitwise",
    );

    let bytes = std::fs::read(&path).unwrap();
    let truncated = Checkpoint::from_bytes(&bytes[..bytes.len() - 100]);
    checks.check(
        matches!(&truncated, Err(e) if e.to_string().contains("CRC")),
        format!("truncated checkpoint rejected: {}", truncated.err().map(|e| e.to_string()).unwrap_or_default()),
    );

    let pgm_ok = corpus.images().all(|img| {
        let encoded = encode_pgm(&img.pixels).unwrap();
        decode_pgm(&encoded).map(|t| t == img.pixels).unwrap_or(false)
    });
    checks.check(pgm_ok, format!("PGM roundtrip of {} images", corpus.total_images()));

    let first = write_corpus(&corpus, Some(&config), dir.path().join("a")).unwrap();
    let regenerated = generate_corpus(&config).unwrap();
    let second = write_corpus(&regenerated, Some(&config), dir.path().join("b")).unwrap();
    let (loaded, manifest) = read_corpus(dir.path().join("a")).unwrap();
    checks.check(
        first.digest == second.digest && manifest.digest == first.digest && loaded == corpus,
        format!("manifest digest {}… stable", &first.digest[..12]),
    );
    conclude(8, "format integrity", checks.finish());
}

fn plan_has_no_leakage(corpus: &SessionCorpus, plan: &SplitPlan) -> bool {
    PlanData::resolve(corpus, plan, 1).and_then(|d| d.check_leakage()).is_ok()
}

#[test]
fn criterion_9_split_plans() {
    let mut checks = Checks::default();
    let intra = make_intra_plan(5).unwrap();
    checks.check(
        intra
            == SplitPlan {
                mode: SplitMode::IntraSession,
                train_units: vec![1, 2],
                ft_phases: vec![vec![3], vec![4]],
                eval_unit: 5,
            },
        "intra golden",
    );
    let inter = make_inter_plan(7).unwrap();
    checks.check(
        inter
            == SplitPlan {
                mode: SplitMode::InterSession,
                train_units: vec![1, 2, 3, 4],
                ft_phases: vec![vec![5], vec![6]],
                eval_unit: 7,
            },
        "inter golden",
    );
    let corpus = generate_corpus(&GeneratorConfig {
        resolution: [32, 32],
        images_per_class_per_round: 1,
        ..GeneratorConfig::fast_profile()
    })
    .unwrap();
    let mut rng = Prng::from_seed(2024);
    let mut clean = 0;
    for _ in 0..100 {
        for base in [&intra, &inter] {
            for plan in [permute_plan(base, &mut rng), permute_plan_fixed_eval(base, &mut rng)] {
                if plan_has_no_leakage(&corpus, &plan) {
                    clean += 1;
                }
            }
        }
    }
    checks.check(clean == 400, format!("{clean}/400 permuted plans free of leakage"));
    conclude(9, "split plans", checks.finish());
}
