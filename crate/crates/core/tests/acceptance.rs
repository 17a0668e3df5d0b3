//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Exits nonzero on failure only when `DELO_ACCEPTANCE_STRICT=1`.

mod support;

use std::time::Instant;

use delo::eval::{ap_11point, confidence_profile, recall_at_k, split_ap, Protocol, SceneResult, Scored};
use delo::generator::Ablation;
use delo::geometry::{iou, BoundingBox};
use delo::pipeline::{evaluate_all, finish_arm, make_bundle, pretrain, run_base, run_pipeline, train_arm_generator};
use delo::pipeline::{ExperimentConfig, ProtocolReports};
use delo::resample::build_resampled_set;
use delo::synth::ObjectLabel;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ARMS: [&str; 6] = ["vanilla", "bs1", "bs2", "bs3", "full", "nu0"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, &str, u64) = (0.0, "", 0);
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..20 {
        for (name, r) in support::all_checks(seed) {
            checked += r.checked;
            skipped += r.skipped;
            if r.max_rel_err >= worst.0 {
                worst = (r.max_rel_err, name, seed);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        // A kink-skipped coordinate is unchecked, so skips must stay rare.
        pass: worst.0 < 1e-4 && secs < 60.0 && skipped * 100 <= checked + skipped,
        detail: format!(
            "20 seeds, {checked} coordinates ({skipped} skipped at ReLU kinks), worst rel err {:.2e} ({} seed {}), {secs:.1} s",
            worst.0, worst.1, worst.2
        ),
    }
}

fn metric_oracles() -> Outcome {
    let bx = |x, y, w, h| BoundingBox::new(x, y, w, h).unwrap();
    let mut errs = Vec::new();
    let i = iou(&bx(0.1, 0.1, 0.2, 0.2), &bx(0.2, 0.2, 0.2, 0.2));
    if (i - 1.0 / 7.0).abs() >= 1e-12 {
        errs.push(format!("iou {i}"));
    }
    let ap = ap_11point(&[true, false, true], 2);
    if (ap - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() >= 1e-12 {
        errs.push(format!("ap {ap}"));
    }
    if ap_11point(&[true, true], 2) != 1.0 || ap_11point(&[], 2) != 0.0 {
        errs.push("trivial ap".into());
    }
    let g = [ObjectLabel { bbox: bx(0.5, 0.5, 0.2, 0.2), class_id: 0 }];
    let far = Scored { bbox: bx(0.58, 0.5, 0.2, 0.2), confidence: 0.9, class_id: 0 };
    let exact = Scored { bbox: g[0].bbox, ..far };
    let r = |d: Scored, gts: &[ObjectLabel]| {
        recall_at_k(&[SceneResult { dets: vec![d], gts }], 100, 0.5, false).unwrap()
    };
    if r(far, &g) != 0.0 || r(exact, &g) != 1.0 || r(far, &[]) != 1.0 {
        errs.push("recall".into());
    }
    let perfect = split_ap(&[SceneResult { dets: vec![exact], gts: &g }], None).unwrap();
    if perfect != 1.0 {
        errs.push(format!("oracle detections ap {perfect}"));
    }
    Outcome {
        pass: errs.is_empty(),
        detail: if errs.is_empty() {
            format!("iou 1/7 and ap {ap:.10} exact to 1e-12, recall and trivial cases hold")
        } else {
            errs.join("; ")
        },
    }
}

fn resampling_contract() -> Outcome {
    let cfg = ExperimentConfig::default();
    let bundle = make_bundle(&cfg).unwrap();
    let (det, _) = pretrain(&cfg, &bundle).unwrap();
    let pool = build_resampled_set(&bundle.train, &det, cfg.resample.ratio).unwrap();
    let audit = support::audit_gates(&bundle.train, &det, &pool.points);
    Outcome {
        pass: audit.violations.is_empty() && audit.background <= audit.foreground && audit.foreground > 0,
        detail: format!(
            "{} foreground, {} background, {} gate violations",
            audit.foreground,
            audit.background,
            audit.violations.len()
        ),
    }
}

/// Overall AP per protocol for every arm, plus confidence profiles, for one seed.
struct SeedRun {
    ap: Vec<[f64; 3]>,
    seen_conf: f64,
    unseen_conf: (f64, f64),
    bg_conf: (f64, f64),
    secs: f64,
}

fn aps(r: &ProtocolReports) -> [f64; 3] {
    [r[&Protocol::Ts].overall_ap, r[&Protocol::Tu].overall_ap, r[&Protocol::Tm].overall_ap]
}

fn run_seed(seed: u64) -> SeedRun {
    let start = Instant::now();
    let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    let base = run_base(&cfg).unwrap();
    let bundle = &base.bundle;
    let mut ap = vec![aps(&evaluate_all(&cfg, bundle, &base.vanilla, None).unwrap())];
    let mut full = None;
    for ablation in [Ablation::Bs1, Ablation::Bs2, Ablation::Bs3, Ablation::Full] {
        let (g, trace) = train_arm_generator(&cfg, &base, ablation).unwrap();
        let arm = finish_arm(&cfg, &base, g.clone(), trace.clone(), cfg.synthesis).unwrap();
        ap.push(aps(&evaluate_all(&cfg, bundle, &arm.detector, Some(&arm.aux)).unwrap()));
        if ablation == Ablation::Full {
            let mut none = cfg.synthesis;
            none.n_unseen = 0;
            let nu0 = finish_arm(&cfg, &base, g, trace, none).unwrap();
            ap.push(aps(&evaluate_all(&cfg, bundle, &nu0.detector, Some(&nu0.aux)).unwrap()));
            full = Some(arm);
        }
    }
    let full = full.unwrap();
    let vs = confidence_profile(&base.vanilla, &bundle.test_seen).unwrap();
    let vu = confidence_profile(&base.vanilla, &bundle.test_unseen).unwrap();
    let du = confidence_profile(&full.detector, &bundle.test_unseen).unwrap();
    SeedRun {
        ap,
        seen_conf: vs.object_mean,
        unseen_conf: (vu.object_mean, du.object_mean),
        bg_conf: (vu.background_mean, du.background_mean),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn experiments() -> [Outcome; 4] {
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let arm = |name: &str| ARMS.iter().position(|a| *a == name).unwrap();
    let med = |a: usize, p: usize| median(runs.iter().map(|r| r.ap[a][p] * 100.0).collect());
    let gain = |a: usize, b: usize, p: usize| median(runs.iter().map(|r| (r.ap[a][p] - r.ap[b][p]) * 100.0).collect());

    println!("overall AP (%), median over seeds {SEEDS:?}");
    println!("{:<8} {:>6} {:>6} {:>6}", "arm", "TS", "TU", "TM");
    for (i, name) in ARMS.iter().enumerate() {
        println!("{name:<8} {:>6.1} {:>6.1} {:>6.1}", med(i, 0), med(i, 1), med(i, 2));
    }
    for (s, r) in SEEDS.iter().zip(&runs) {
        let row: Vec<String> = ARMS
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{a} {:.1}/{:.1}/{:.1}", r.ap[i][0] * 100.0, r.ap[i][1] * 100.0, r.ap[i][2] * 100.0))
            .collect();
        println!("  seed {s} ({:.0} s): {}", r.secs, row.join(", "));
    }

    let (full, van) = (arm("full"), arm("vanilla"));
    let (dts, dtu, dtm) = (gain(full, van, 0), gain(full, van, 1), gain(full, van, 2));
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let c4 = Outcome {
        pass: dtu >= 3.0 && dtm > 0.0 && dts >= -1.0 && slowest < 900.0,
        detail: format!(
            "median DELO - vanilla: TU {dtu:+.2}, TM {dtm:+.2}, TS {dts:+.2} pts; slowest seed {slowest:.0} s for all arms"
        ),
    };
    let full_bs1 = gain(full, arm("bs1"), 1);
    let c5 = Outcome {
        pass: med(full, 1) >= med(arm("bs1"), 1),
        detail: format!(
            "median TU: bs1 {:.2}, bs2 {:.2}, bs3 {:.2}, full {:.2} (paired full - bs1 {full_bs1:+.2})",
            med(arm("bs1"), 1),
            med(arm("bs2"), 1),
            med(arm("bs3"), 1),
            med(full, 1)
        ),
    };
    let gap = med(full, 1) - med(arm("nu0"), 1);
    let c6 = Outcome {
        pass: gap >= 2.0,
        detail: format!("median TU: default {:.2}, n_unseen=0 {:.2}, gap {gap:.2} pts", med(full, 1), med(arm("nu0"), 1)),
    };
    let m = |f: &dyn Fn(&SeedRun) -> f64| median(runs.iter().map(f).collect());
    let (s, u0, u1) = (m(&|r| r.seen_conf), m(&|r| r.unseen_conf.0), m(&|r| r.unseen_conf.1));
    let dbg = m(&|r| r.bg_conf.1 - r.bg_conf.0);
    let every = runs
        .iter()
        .filter(|r| r.unseen_conf.0 < r.seen_conf && r.unseen_conf.1 > r.unseen_conf.0 && r.bg_conf.1 - r.bg_conf.0 < 0.1)
        .count();
    let c7 = Outcome {
        pass: u0 < s && u1 > u0 && dbg < 0.1,
        detail: format!(
            "median vanilla conf seen {s:.3} > unseen {u0:.3}; retrained unseen {u1:.3}; background shift {dbg:+.4}; holds on {every}/{} seeds",
            runs.len()
        ),
    };
    [c4, c5, c6, c7]
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, a.path()).unwrap();
    run_pipeline(&cfg, b.path()).unwrap();
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    Outcome {
        pass: ra == rb,
        detail: format!("two run-all invocations, report.json {} bytes, identical: {}", ra.len(), ra == rb),
    }
}

fn main() {
    let mut lines: Vec<(&str, Outcome)> = vec![
        ("gradient suite", gradient_suite()),
        ("metric oracles", metric_oracles()),
        ("resampling contract", resampling_contract()),
    ];
    let [c4, c5, c6, c7] = experiments();
    lines.push(("DELO beats vanilla", c4));
    lines.push(("ablation ordering", c5));
    lines.push(("no-unseen arm gap", c6));
    lines.push(("confidence shift", c7));
    lines.push(("run-all determinism", determinism()));

    println!();
    let mut failed = 0;
    for (i, (name, o)) in lines.iter().enumerate() {
        println!("[{}] {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{}/{} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 && std::env::var("DELO_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
