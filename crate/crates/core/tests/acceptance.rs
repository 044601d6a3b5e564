use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use prosody_mdn::checkpoint::Checkpoint;
use prosody_mdn::gmm::{self, DiagGmm, RawGmmParams};
use prosody_mdn::metrics::{self, SpeakerPair};
use prosody_mdn::model::{ModelConfig, PredictorParams};
use prosody_mdn::predictor::PhoneSeq;
use prosody_mdn::synthdata::{gen_corpus, OracleSpec};
use prosody_mdn::training::{GradCheckConfig, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS_SEED: u64 = 1;
const TRAIN_SEED: u64 = 7;

struct Outcome {
    id: &'static str,
    name: &'static str,
    passed: bool,
    detail: String,
}

// bypasses test output capture
fn report(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn record(out: &mut Vec<Outcome>, id: &'static str, name: &'static str, passed: bool, detail: String) {
    report(&format!("[{}] {id} {name}: {detail}", if passed { "PASS" } else { "FAIL" }));
    out.push(Outcome {
        id,
        name,
        passed,
        detail,
    });
}

fn random_raw(rng: &mut ChaCha8Rng, m: usize, d: usize, a: f64, mu: f64, v: (f64, f64)) -> RawGmmParams {
    RawGmmParams::new(
        (0..m).map(|_| rng.random_range(-a..a)).collect(),
        (0..m * d).map(|_| rng.random_range(-mu..mu)).collect(),
        (0..m * d).map(|_| rng.random_range(v.0..v.1)).collect(),
    )
    .unwrap()
}

fn gradient_check(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let report = GradCheckConfig::default().run(1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let err = report.max_rel_error();
    record(
        out,
        "1",
        "gradient correctness",
        report.passed && err < 1e-3 && secs < 30.0,
        format!("max relative error {err:.2e} (< 1e-3) over {} arrays in {secs:.2} s (< 30 s)", report.arrays.len()),
    );
}

fn mixture_invariants(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut simplex_err, mut post_err, mut min_var) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..10_000 {
        let m = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let raw = random_raw(&mut rng, m, d, 50.0, 20.0, (-30.0, 30.0));
        let g = gmm::activate(&raw).unwrap();
        simplex_err = simplex_err.max((g.weights().iter().sum::<f64>() - 1.0).abs());
        min_var = g.variances().iter().copied().fold(min_var, f64::min);
        let e: Vec<f64> = (0..d).map(|_| rng.random_range(-20.0..20.0)).collect();
        let post = gmm::posterior(&g, &e).unwrap();
        post_err = post_err.max((post.iter().sum::<f64>() - 1.0).abs());
    }
    record(
        out,
        "2",
        "mixture invariants",
        simplex_err < 1e-12 && min_var > 0.0 && post_err < 1e-12,
        format!(
            "10000 calls: simplex error {simplex_err:.1e} (< 1e-12), min variance {min_var:.2e} (> 0), posterior error {post_err:.1e} (< 1e-12)"
        ),
    );
}

fn direct_log_density(g: &DiagGmm, e: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..g.components() {
        let mut p = g.weights()[i];
        for ((x, m), v) in e.iter().zip(g.mean(i)).zip(g.variance(i)) {
            p *= (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        }
        total += p;
    }
    total.ln()
}

fn density_oracle(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=6);
        let d = rng.random_range(1..=6);
        let raw = random_raw(&mut rng, m, d, 3.0, 2.0, (-1.0, 1.0));
        let g = gmm::activate(&raw).unwrap();
        let e: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let direct = direct_log_density(&g, &e);
        assert!(direct.is_finite());
        worst = worst.max((gmm::log_density(&g, &e).unwrap() - direct).abs());
    }
    record(
        out,
        "3",
        "density oracle equivalence",
        worst < 1e-10,
        format!("1000 cases: max |log-sum-exp - direct| = {worst:.2e} (< 1e-10)"),
    );
}

/// Expected distance between two independent draws of N(0, I_d).
fn unit_gaussian_pair_distance(d: usize) -> f64 {
    // Gamma((d+1)/2) / Gamma(d/2) by recursion from d = 1 and d = 2
    let mut ratio = if d % 2 == 1 {
        1.0 / std::f64::consts::PI.sqrt()
    } else {
        std::f64::consts::PI.sqrt() / 2.0
    };
    let mut k = if d % 2 == 1 { 1 } else { 2 };
    while k < d {
        // ratio(k + 2) = ratio(k) * (k+1)/2 / (k/2)... via Gamma(x+1) = x Gamma(x)
        ratio *= ((k + 1) as f64 / 2.0) / (k as f64 / 2.0);
        k += 2;
    }
    2.0 * ratio
}

fn constant_unit_gaussian(dim: usize) -> PredictorParams {
    let cfg = ModelConfig::new(1, dim, 3, 3, 2, 1);
    let mut p = PredictorParams::init(&cfg, 0).unwrap();
    p.si_weight.fill(0.0);
    p.si_bias.fill(0.0);
    p
}

#[test]
fn acceptance() {
    let mut out = Vec::new();
    gradient_check(&mut out);
    mixture_invariants(&mut out);
    density_oracle(&mut out);

    // likelihood versus component count
    let t = Instant::now();
    let corpus = gen_corpus(&OracleSpec::desk_single_speaker(CORPUS_SEED)).unwrap();
    let one = prosody_mdn::training::train(&corpus, &TrainConfig::desk(1, false, TRAIN_SEED)).unwrap();
    let five = prosody_mdn::training::train(&corpus, &TrainConfig::desk(5, false, TRAIN_SEED)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let table = metrics::ll_curves(&[one.history.clone(), five.history.clone()]).unwrap();
    let (r1, r5) = (table.row(1).unwrap(), table.row(5).unwrap());
    let oracle = corpus.oracle().unwrap();
    let oracle_test = prosody_mdn::synthdata::oracle_mean_loglik(&oracle, &corpus.test).unwrap();
    record(
        &mut out,
        "4a",
        "M=5 beats M=1 in test log-likelihood",
        r5.test_ll - r1.test_ll >= 1.0 && secs < 300.0,
        format!(
            "test LL M=1 {:.4}, M=5 {:.4}, oracle {oracle_test:.4}; margin {:.4} (>= 1.0) nat/phone; both runs {secs:.1} s (< 300 s)",
            r1.test_ll,
            r5.test_ll,
            r5.test_ll - r1.test_ll
        ),
    );
    record(
        &mut out,
        "4b",
        "M=1 train-test gap exceeds M=5 gap",
        r1.gap > r5.gap,
        format!("gap M=1 {:.4}, M=5 {:.4}", r1.gap, r5.gap),
    );

    // diversity
    let div1 = metrics::corpus_diversity(&one.params, &corpus.test, false, 3, 11).unwrap();
    let div5 = metrics::corpus_diversity(&five.params, &corpus.test, false, 3, 11).unwrap();
    record(
        &mut out,
        "7a",
        "M=5 samples are more diverse than M=1 samples",
        div5 > div1,
        format!("mean pairwise distance M=1 {div1:.4}, M=5 {div5:.4}"),
    );
    let dim = corpus.spec.dim;
    let expected = unit_gaussian_pair_distance(dim);
    let unit = constant_unit_gaussian(dim);
    let phones = PhoneSeq((0..200).map(|k| k % 2).collect());
    let measured = metrics::diversity(&unit, &phones, None, 20, 12).unwrap();
    let rel = (measured - expected).abs() / expected;
    record(
        &mut out,
        "7b",
        "single-Gaussian diversity matches chi closed form",
        rel < 0.05,
        format!("measured {measured:.4}, closed form {expected:.4}, relative error {rel:.4} (< 0.05)"),
    );

    // active components
    let c1 = metrics::count_active(&[1.0], &[0.1, 0.01]);
    let c20 = metrics::count_active(&[0.05; 20], &[0.1, 0.01]);
    let trained = metrics::active_components(&five.params, &corpus.test, false, &[0.1, 0.01]).unwrap();
    record(
        &mut out,
        "9",
        "active component statistic",
        c1 == [1, 1] && c20 == [0, 20],
        format!(
            "M=1 {c1:?}, uniform M=20 {c20:?}; trained M=5 model ({:.2}, {:.2})",
            trained[0], trained[1]
        ),
    );

    // cloning on two speakers
    let corpus2 = gen_corpus(&OracleSpec::desk_two_speaker(CORPUS_SEED)).unwrap();
    let oracle2 = corpus2.oracle().unwrap();
    let t = Instant::now();
    let multi = prosody_mdn::training::train(&corpus2, &TrainConfig::desk(5, true, TRAIN_SEED)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pairs = [
        SpeakerPair { source: 0, target: 1 },
        SpeakerPair { source: 1, target: 0 },
    ];
    let rep = metrics::cloning_report(&corpus2.test, &multi.params, &oracle2, &pairs, 13).unwrap();
    record(
        &mut out,
        "5",
        "cloning accuracy and correlation",
        rep.component_accuracy >= 0.9
            && rep.mean_correlation >= 0.8
            && rep.component_accuracy > rep.random_index_accuracy
            && rep.mean_correlation > rep.random_index_correlation
            && rep.mean_correlation > rep.sampled_correlation,
        format!(
            "accuracy {:.4} (>= 0.9; random indices {:.4}, chance 0.2), correlation {:.4} (>= 0.8; random indices {:.4}, sampled {:.4}); {} phones, training {secs:.1} s",
            rep.component_accuracy,
            rep.random_index_accuracy,
            rep.mean_correlation,
            rep.random_index_correlation,
            rep.sampled_correlation,
            rep.phones
        ),
    );
    record(
        &mut out,
        "6",
        "speaker affinity",
        rep.affinity_margin >= 1.0,
        format!("target minus source oracle log-density {:.4} (>= 1.0) nat/phone", rep.affinity_margin),
    );

    determinism(&mut out);

    let failed: Vec<String> = out
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{} {}: {}", o.id, o.name, o.detail))
        .collect();
    report(&format!("{} of {} criteria passed", out.len() - failed.len(), out.len()));
    assert!(failed.is_empty(), "failing criteria:\n{}", failed.join("\n"));
}

fn cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_prosody-mdn"))
        .args(args)
        .output()
        .unwrap();
    assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

fn cli_outputs(dir: &Path) -> Vec<Vec<u8>> {
    let f = |n: &str| dir.join(n).display().to_string();
    std::fs::write(
        dir.join("spec.json"),
        r#"{"phones": 4, "speakers": 2, "components": 3, "dim": 2, "separation": 6.0,
            "min_len": 3, "max_len": 6, "train_size": 40, "test_size": 10}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("train.json"),
        r#"{"components": 3, "hidden": 6, "recurrent": 6, "multi_speaker": true,
            "epochs": 2, "batch_size": 8, "lr": 0.01, "warmup_steps": 3}"#,
    )
    .unwrap();
    cli(&["gen-data", "--seed", "5", "--config", &f("spec.json"), "--out", &f("corpus.jsonl")]);
    cli(&[
        "train", "--seed", "6", "--config", &f("train.json"), "--corpus", &f("corpus.jsonl"),
        "--out", &f("model.json"), "--history", &f("history.csv"),
    ]);
    cli(&[
        "eval", "--seed", "7", "--checkpoint", &f("model.json"), "--corpus", &f("corpus.jsonl"),
        "--out", &f("eval.json"),
    ]);
    cli(&[
        "sample", "--seed", "8", "--checkpoint", &f("model.json"), "--phones", "1,0,3",
        "--speaker", "0", "--count", "3", "--out", &f("sample.json"),
    ]);
    cli(&[
        "clone", "--seed", "9", "--checkpoint", &f("model.json"), "--corpus", &f("corpus.jsonl"),
        "--utterance", "test:1", "--target", "1", "--sample", "--out", &f("clone.json"),
    ]);
    cli(&["gradcheck", "--seed", "10", "--out", &f("gradcheck.json")]);
    ["corpus.jsonl", "model.json", "history.csv", "eval.json", "sample.json", "clone.json", "gradcheck.json"]
        .iter()
        .map(|n| std::fs::read(dir.join(n)).unwrap())
        .collect()
}

fn determinism(out: &mut Vec<Outcome>) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let same_files = cli_outputs(a.path()) == cli_outputs(b.path());

    let corpus = gen_corpus(&OracleSpec {
        train_size: 60,
        test_size: 10,
        ..OracleSpec::desk_two_speaker(3)
    })
    .unwrap();
    let mut cfg = TrainConfig::desk(3, true, 4);
    cfg.epochs = 4;
    let mut full = TrainState::new(&corpus, &cfg).unwrap();
    full.run(&corpus).unwrap();
    let mut part = TrainState::new(&corpus, &cfg).unwrap();
    part.run_epoch(&corpus).unwrap();
    part.run_epoch(&corpus).unwrap();
    let bytes = Checkpoint::Training(Box::new(part)).to_json_bytes().unwrap();
    let Checkpoint::Training(resumed) = Checkpoint::from_json_slice(&bytes).unwrap() else {
        panic!("training checkpoint expected");
    };
    let mut resumed = *resumed;
    resumed.run(&corpus).unwrap();
    let resume_exact = resumed == full;
    record(
        out,
        "8",
        "determinism",
        same_files && resume_exact,
        format!(
            "repeated CLI runs byte-identical: {same_files}; save/load/continue matches uninterrupted training: {resume_exact}"
        ),
    );
}
