//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;

use ledo_verify::*;
use ledo::dataset::{PredictiveDistribution, Pos, TaggedToken};
use ledo::evalmetrics::{classification_metrics, ranking_metrics, relative_recall_change, RankedQuery, ScoredPrediction};
use ledo::mlp::{Model, ModelSpec};
use ledo::noisebench::{NoiseKind, ScenarioConfig};
use ledo::pipeline::{self, PipelineConfig, SweepGrid};
use ledo::policy::{
    decide_filter, decide_overwrite, decide_quantile, BinaryLabel, FilterThresholds, OverwriteThresholds,
    QuantileThresholds, Verdict,
};
use ledo::sdgmask::{select_masks, MaskRule};
use ledo::uncertainty::{summarize, ChannelStats, EvidenceSummary, UncertaintySummary};

const PIN_TOLERANCE: f64 = 0.02;
const MIN_PRECISION: f64 = 0.80;
const MIN_GAIN: f64 = 0.02;
const MAX_WALL_CLOCK: Duration = Duration::from_secs(60);

/// Recorded first-run values per seed: (seed, baseline accuracy, cleaned
/// accuracy, detection precision).
const SYMMETRIC_PINS: [(u64, f64, f64, f64); 3] = [
    (0, 0.9740, 0.9720, 0.9686),
    (1, 0.9720, 0.9720, 0.9887),
    (2, 0.9840, 0.9760, 0.9469),
];
const DIRECTIONAL_PINS: [(u64, f64, f64, f64); 3] = [
    (0, 0.5000, 0.9680, 0.9789),
    (1, 0.5020, 0.9740, 0.9542),
    (2, 0.5000, 0.9860, 0.9588),
];

fn headline_metric_definitions() -> Check {
    let rrc = relative_recall_change(0.5, 0.55).map_err(|e| e.to_string())?;
    ensure((rrc - 0.1).abs() < 1e-12, || format!("relative recall change {rrc}"))?;
    let q = |r| RankedQuery { query_id: "q".into(), relevant_rank: r };
    let m = ranking_metrics(&[q(Some(2)), q(Some(4))]).map_err(|e| e.to_string())?;
    ensure(m.mrr == 0.375 && m.avg_rank == Some(3.0), || format!("ranking {m:?}"))?;
    let preds: Vec<ScoredPrediction> = [(0.9, true), (0.8, false), (0.3, true), (0.2, false)]
        .iter()
        .enumerate()
        .map(|(i, &(s, g))| ScoredPrediction::new(format!("x{i}"), s, g))
        .collect();
    let c = classification_metrics(&preds, 0.5).map_err(|e| e.to_string())?;
    ensure((c.average_precision - 5.0 / 6.0).abs() < 1e-12, || format!("ap {}", c.average_precision))?;
    ensure((c.pr_auc - 19.0 / 24.0).abs() < 1e-12, || format!("pr_auc {}", c.pr_auc))?;
    Ok("production-scale numbers out of reach; MRR, PR AUC, AP and relative recall definitions verified".into())
}

fn benchmark_config(seed: u64, directional: bool) -> PipelineConfig {
    let mut scenario = ScenarioConfig::default();
    if directional {
        scenario.noise.kind = NoiseKind::Asymmetric;
        scenario.noise.transition = Some(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
    }
    let mut config = PipelineConfig::benchmark(scenario);
    config.seed = seed;
    config.sweep = Some(SweepGrid::default());
    config
}

fn noise_recovery() -> Check {
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for (name, directional, pins) in [("symmetric", false, SYMMETRIC_PINS), ("directional 1->0", true, DIRECTIONAL_PINS)] {
        for (seed, pin_base, pin_clean, pin_prec) in pins {
            let start = Instant::now();
            let report = pipeline::run_pipeline(&benchmark_config(seed, directional)).map_err(|e| e.to_string())?;
            let elapsed = start.elapsed();
            let base = report.baseline.as_ref().unwrap().accuracy;
            let clean = report.cleaned.as_ref().unwrap().accuracy;
            let det = report.detection.as_ref().unwrap();
            let gain = clean - base;
            let line = format!(
                "{name} seed {seed}: precision {:.4} recall {:.4} baseline {base:.4} cleaned {clean:.4} gain {gain:+.4} in {:.2}s",
                det.precision,
                det.recall,
                elapsed.as_secs_f64()
            );
            let mut problems = Vec::new();
            if det.precision < MIN_PRECISION {
                problems.push(format!("precision below {MIN_PRECISION}"));
            }
            if gain < MIN_GAIN {
                problems.push(format!("gain below {MIN_GAIN}"));
            }
            for (what, got, pin) in [("baseline", base, pin_base), ("cleaned", clean, pin_clean), ("precision", det.precision, pin_prec)] {
                if (got - pin).abs() > PIN_TOLERANCE {
                    problems.push(format!("{what} {got:.4} off pin {pin:.4}"));
                }
            }
            if elapsed >= MAX_WALL_CLOCK {
                problems.push(format!("took {elapsed:?}"));
            }
            if !problems.is_empty() {
                failures.push(format!("{name} seed {seed}: {}", problems.join(", ")));
            }
            lines.push(line);
        }
    }
    for line in &lines {
        println!("    {line}");
    }
    if failures.is_empty() {
        Ok(format!("{} runs within pins", lines.len()))
    } else {
        Err(failures.join("; "))
    }
}

fn degeneracy() -> Check {
    let mut r = rng(41);
    let mut compared = 0;
    for trial in 0..50 {
        let spec = ModelSpec {
            input_dim: r.random_range(1..=4),
            hidden_dims: vec![r.random_range(1..=8); r.random_range(1..=2)],
            class_count: 2,
            dropout_rate: 0.0,
        };
        let model = Model::init(spec.clone(), r.random()).map_err(|e| e.to_string())?;
        for i in 0..20 {
            let x: Vec<f64> = (0..spec.input_dim).map(|_| r.random_range(-3.0..3.0)).collect();
            let dist = model.mcd_predict(&format!("d{i}"), &x, 10, r.random()).map_err(|e| e.to_string())?;
            ensure(dist.passes.iter().all(|row| *row == dist.passes[0]), || format!("trial {trial}: rows differ"))?;
            let s = summarize(&dist);
            ensure(s.std.iter().all(|v| *v == 0.0), || format!("trial {trial}: std {:?}", s.std))?;
            ensure(s.variation_ratio == 0.0, || format!("trial {trial}: variation ratio {}", s.variation_ratio))?;
            let th = OverwriteThresholds {
                t1: r.random_range(0.0..0.5),
                s1: r.random_range(1e-6..0.5),
                t2: r.random_range(0.5..1.0),
                s2: r.random_range(1e-6..0.5),
            };
            for label in [BinaryLabel::Positive, BinaryLabel::Negative] {
                let d = decide_overwrite(&s, label, &th).map_err(|e| e.to_string())?;
                let mean = s.mean[1];
                let expected = match label {
                    BinaryLabel::Positive if mean < th.t1 => Verdict::Overwrite(0),
                    BinaryLabel::Negative if mean > th.t2 => Verdict::Overwrite(1),
                    _ => Verdict::Keep,
                };
                ensure(d.verdict == expected, || format!("trial {trial}: {d:?} vs {expected:?}"))?;
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} exact comparisons"))
}

fn oracle_equivalence() -> Check {
    let pr = pr_oracle_check(1000, 51)?;
    let q = quantile_oracle_check(1000, 52)?;
    let v = variation_ratio_oracle_check(1000, 53)?;
    let d = detection_oracle_check(1000, 54)?;
    Ok(format!("pr [{pr}], quantile [{q}], variation ratio [{v}], detection [{d}]"))
}

fn gradients() -> Check {
    let worst = gradient_check(20, 61)?;
    Ok(format!("20 configurations, worst relative error {worst:.2e}"))
}

fn determinism() -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut config = benchmark_config(7, false);
    let mut folds = Vec::new();
    for dir in &dirs {
        let run = pipeline::execute(&config).map_err(|e| e.to_string())?;
        pipeline::write_run(&run, dir.path()).map_err(|e| e.to_string())?;
        folds.push(run.folds.unwrap());
    }
    for name in [pipeline::DECISIONS_FILE, pipeline::CLEANED_FILE] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        ensure(!a.is_empty() && a == b, || format!("{name} differs between runs"))?;
    }
    let reports: Vec<serde_json::Value> = dirs
        .iter()
        .map(|d| {
            let mut v: serde_json::Value =
                serde_json::from_slice(&std::fs::read(d.path().join(pipeline::REPORT_JSON_FILE)).unwrap()).unwrap();
            v["generated_at"] = 0.into();
            v
        })
        .collect();
    ensure(reports[0] == reports[1], || "reports differ outside generated_at".into())?;
    ensure(folds[0] == folds[1], || "fold assignment differs between runs".into())?;
    config.seed = 8;
    let other = pipeline::execute(&config).map_err(|e| e.to_string())?.folds.unwrap();
    ensure(other.fold_of != folds[0].fold_of, || "seed change left fold assignment unchanged".into())?;
    Ok("decisions, cleaned data and report (minus generated_at) identical; new seed reassigns folds".into())
}

fn evidence(pos: (f64, f64), neg: (f64, f64)) -> EvidenceSummary {
    EvidenceSummary {
        example_id: "e".into(),
        positive: ChannelStats { mean: pos.0, std: pos.1 },
        negative: ChannelStats { mean: neg.0, std: neg.1 },
    }
}

fn binary_summary(mean_pos: f64, std_pos: f64) -> UncertaintySummary {
    UncertaintySummary {
        example_id: "e".into(),
        mean: vec![1.0 - mean_pos, mean_pos],
        std: vec![std_pos, std_pos],
        variation_ratio: 0.0,
        modal_class: 0,
        per_pass_argmax: vec![],
    }
}

fn votes(classes: &[usize]) -> PredictiveDistribution {
    let rows = classes
        .iter()
        .map(|&c| {
            let mut row = vec![0.1; 3];
            row[c] = 0.8;
            row
        })
        .collect();
    PredictiveDistribution::new("e", rows)
}

fn policy_vectors() -> Check {
    let f = FilterThresholds { t1: 0.75, s1: 0.2, t2: 0.7, s2: 0.2 };
    let o = OverwriteThresholds { t1: 0.3, s1: 0.15, t2: 0.75, s2: 0.15 };
    let q = QuantileThresholds::default();
    let (bad, neutral, good) = (0, 1, 2);
    let err = |e: ledo::Error| e.to_string();
    let cases: Vec<(&str, Verdict, Verdict)> = vec![
        ("filter remove", decide_filter(&evidence((0.1, 0.0), (0.8, 0.15)), BinaryLabel::Positive, &f).map_err(err)?.verdict, Verdict::Remove),
        ("filter boundary", decide_filter(&evidence((0.1, 0.0), (0.75, 0.15)), BinaryLabel::Positive, &f).map_err(err)?.verdict, Verdict::Keep),
        ("filter std", decide_filter(&evidence((0.9, 0.3), (0.1, 0.0)), BinaryLabel::Negative, &f).map_err(err)?.verdict, Verdict::Keep),
        ("overwrite positive", decide_overwrite(&binary_summary(0.2, 0.1), BinaryLabel::Positive, &o).map_err(err)?.verdict, Verdict::Overwrite(0)),
        ("overwrite negative", decide_overwrite(&binary_summary(0.8, 0.1), BinaryLabel::Negative, &o).map_err(err)?.verdict, Verdict::Overwrite(1)),
        ("overwrite boundary", decide_overwrite(&binary_summary(0.3, 0.1), BinaryLabel::Positive, &o).map_err(err)?.verdict, Verdict::Keep),
        ("quantile good", decide_quantile(&votes(&[neutral, neutral, neutral, neutral, neutral, neutral, neutral, neutral, neutral, good]), good, &q).map_err(err)?.verdict, Verdict::Remove),
        ("quantile bad", decide_quantile(&votes(&[good; 10]), bad, &q).map_err(err)?.verdict, Verdict::Remove),
        ("quantile keep", decide_quantile(&votes(&[good, good, good, good, good, good, good, good, neutral, neutral]), good, &q).map_err(err)?.verdict, Verdict::Keep),
    ];
    for (name, got, want) in &cases {
        ensure(got == want, || format!("{name}: {got:?} vs {want:?}"))?;
    }
    Ok(format!("{} vectors exact", cases.len()))
}

fn tagged(words: &str, tag: impl Fn(usize, &str) -> TaggedToken) -> Vec<TaggedToken> {
    words.split(' ').enumerate().map(|(i, w)| tag(i, w)).collect()
}

fn sdg_rules() -> Check {
    let recipe = tagged("Can someone recommend me a good recipe for alfredo sauce", |_, w| match w {
        "recipe" | "alfredo" | "sauce" => TaggedToken::new(w, Pos::Noun),
        "recommend" => TaggedToken::new(w, Pos::Verb),
        _ => TaggedToken::new(w, Pos::Other),
    });
    let p = select_masks(&recipe, MaskRule::NounRun).map_err(|e| e.to_string())?;
    ensure(
        p.iter().any(|m| m.spans == [(6, 6)] && m.rendered == "Can someone recommend me a good [MASK] for alfredo sauce"),
        || format!("rule 2 proposals {p:?}"),
    )?;
    let smoothie = tagged("What is your favorite strawberry smoothie recipe", |_, w| match w {
        "strawberry" => TaggedToken::new(w, Pos::Noun).compound_head(),
        "smoothie" | "recipe" => TaggedToken::new(w, Pos::Noun),
        "is" => TaggedToken::new(w, Pos::Verb),
        _ => TaggedToken::new(w, Pos::Other),
    });
    let p = select_masks(&smoothie, MaskRule::CompoundHead).map_err(|e| e.to_string())?;
    ensure(
        p.len() == 1 && p[0].spans == [(4, 4)] && p[0].rendered == "What is your favorite [MASK] smoothie recipe",
        || format!("rule 1 proposals {p:?}"),
    )?;
    let property = rule4_check(100, 81)?;
    Ok(format!("recipe and strawberry examples exact; rule 4 over {property}"))
}

fn monotonicity() -> Check {
    let cases = random_summaries(1000, 91);
    let mut r = rng(92);
    monotonicity_check(&cases, &mut r, 20)
}

fn main() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 9] = [
        ("1 headline metrics (definitions only)", headline_metric_definitions),
        ("2 noise-recovery benchmark", noise_recovery),
        ("3 degeneracy at dropout 0", degeneracy),
        ("4 oracle equivalence", oracle_equivalence),
        ("5 gradient check", gradients),
        ("6 determinism", determinism),
        ("7 policy fidelity vectors", policy_vectors),
        ("8 mask rule conformance", sdg_rules),
        ("9 threshold monotonicity", monotonicity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
