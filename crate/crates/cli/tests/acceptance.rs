//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Criterion 7 trains six 50-epoch models and dominates the runtime.

use std::path::Path;
use std::time::Instant;

use casc_cli::commands;
use casc_cli::config::RunConfig;
use casc_core::consensus::{consensus_partition, distill};
use casc_core::grid::{BinaryMask, FeatureMap, PixelGrid, RgbImage, Size};
use casc_core::loss::{
    contrastive_loss, omega_c, omega_sim, omega_sim_range, total_loss, weighted_dice_bce, ContrastiveMode,
    ObjectiveConfig, TrainingMode, OMEGA_C_RANGE,
};
use casc_core::metrics::{dice_score, instance_f1, wilcoxon_signed_rank};
use casc_core::model::{encode_input, ModelState};
use casc_core::noisegen::{
    extract_contours, inject_fp, remove_fn, synth_dataset, StainMatrix, SynthParams,
};
use casc_core::noisegen::inject::{injection_limit, NoiseRecipe};
use casc_core::rng;
use casc_core::trainer::Split;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_mask(r: &mut rng::Rng, w: usize, h: usize, p: f64) -> BinaryMask {
    BinaryMask::from_bits(w, h, (0..w * h).map(|_| rng::unit(r) < p).collect()).unwrap()
}

fn random_grid(r: &mut rng::Rng, w: usize, h: usize) -> PixelGrid {
    PixelGrid::from_vec(w, h, (0..w * h).map(|_| rng::unit(r)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

/// Objective with the pixel weight held at `weight`, matching the detached
/// weights of the analytic gradient.
fn frozen_objective(m: &ModelState, x: &FeatureMap, y: &BinaryMask, weight: &PixelGrid, cfg: &ObjectiveConfig) -> f64 {
    let out = m.forward(x).unwrap();
    let sup = weighted_dice_bce(&out.confidence, y, weight).unwrap().total();
    let df = distill(&out.features, &out.confidence, y, cfg.k).unwrap().expect("consensus exists");
    sup + cfg.lambda_con * contrastive_loss(&df.f_cell, df.f_noise(), cfg.contrastive, cfg.margin).unwrap()
}

fn gradient_fidelity(mode: ContrastiveMode) -> (f64, usize) {
    let (side, classes) = (16, 4);
    let mut r = rng::seeded(101);
    let data: Vec<u8> = (0..side * side * 3).map(|_| rng::below(&mut r, 256) as u8).collect();
    let image = RgbImage::new(side, side, data).unwrap();
    let x = encode_input(&image, 1, classes).unwrap();
    let mut y = BinaryMask::empty(side, side);
    for (cx, cy, rad) in [(4i64, 5i64, 2i64), (11, 10, 3)] {
        for py in 0..side as i64 {
            for px in 0..side as i64 {
                if (px - cx).pow(2) + (py - cy).pow(2) <= rad * rad {
                    y.set(px as usize, py as usize, true);
                }
            }
        }
    }
    let mut m = ModelState::init(102, 4, classes).unwrap();
    // keep pre-activations away from relu kinks
    for p in m.params_mut() {
        if p.name.ends_with("bias") {
            for (i, v) in p.value.iter_mut().enumerate() {
                *v = 0.05 * ((i as f64) * 1.3 + 0.7).sin() + 0.01;
            }
        }
    }
    let cfg = ObjectiveConfig {
        contrastive: mode,
        ..ObjectiveConfig::casc(8)
    };
    let out = m.forward_cached(&x).unwrap();
    let (breakdown, grads) = total_loss(&out.confidence, &out.features, &y, &cfg).unwrap();
    assert!(breakdown.consensus);
    let weight = breakdown.omega_c.zip_map(&breakdown.omega_sim, |a, b| a * b).unwrap();
    let gl = grads.logits(&out.confidence).unwrap();
    m.backward(&gl, &grads.features).unwrap();
    let base = frozen_objective(&m, &x, &y, &weight, &cfg);
    assert!((base - breakdown.total).abs() < 1e-12, "frozen objective reproduces the loss");

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut count = 0;
    for pi in 0..m.params().len() {
        for j in 0..m.params()[pi].len() {
            let mut plus = m.clone();
            plus.params_mut()[pi].value[j] += h;
            let mut minus = m.clone();
            minus.params_mut()[pi].value[j] -= h;
            let numeric = (frozen_objective(&plus, &x, &y, &weight, &cfg)
                - frozen_objective(&minus, &x, &y, &weight, &cfg))
                / (2.0 * h);
            let analytic = m.params()[pi].grad[j];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            count += 1;
        }
    }
    (worst, count)
}

/// Gradients below this magnitude are compared absolutely.
const GRAD_FLOOR: f64 = 1e-7;

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for mode in [ContrastiveMode::Separative, ContrastiveMode::Literal] {
        let (err, n) = gradient_fidelity(mode);
        worst = worst.max(err);
        parts.push(format!("{mode}: max rel err {err:.2e} over {n} params"));
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 60.0, format!("{} in {secs:.1}s", parts.join(", ")))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(2);
    let mut bad = 0;
    for bits in 0u32..512 {
        let y = BinaryMask::from_bits(3, 3, (0..9).map(|i| bits >> i & 1 == 1).collect()).unwrap();
        for g in 0..100 {
            let mut c = random_grid(&mut r, 3, 3);
            if g == 0 {
                // exact threshold hits
                c = PixelGrid::filled(3, 3, 0.5);
            }
            let p = consensus_partition(&c, &y, 0.5).unwrap();
            for i in 0..9 {
                let hits = [&p.cp, &p.cn, &p.dm, &p.dh].iter().filter(|m| m.bits()[i]).count();
                if hits != 1 {
                    bad += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(bad == 0 && secs < 10.0, format!("51200 grids, {bad} bad pixels, {secs:.2}s"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(3);
    let (side, ch) = (8, 5);
    let mut failures = 0;
    let mut checked = 0;
    while checked < 1000 {
        let y = random_mask(&mut r, side, side, 0.4);
        if !y.any() {
            continue;
        }
        let c = random_grid(&mut r, side, side);
        let f = FeatureMap::from_vec(ch, side, side, (0..ch * side * side).map(|_| rng::uniform(&mut r, -2.0, 2.0)).collect())
            .unwrap();
        let k = 2 * (1 + rng::below(&mut r, side * side / 2));
        let df = distill(&f, &c, &y, k).unwrap().expect("annotated pixels have positive score");
        checked += 1;

        // sort-and-average oracle
        let mut order: Vec<usize> = (0..side * side).collect();
        let score = |i: usize| if y.bits()[i] { c.as_slice()[i] } else { 0.0 };
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        let oracle: Vec<f64> = (0..ch)
            .map(|q| order[..k].iter().map(|&i| f.at(q, i)).sum::<f64>() / k as f64)
            .collect();
        let cell_ok = oracle.iter().zip(df.f_cell.iter()).all(|(a, b)| (a - b).abs() < 1e-12);

        let wsum: f64 = df.noise_weights().iter().sum();
        let weights_ok = (wsum - 1.0).abs() <= 1e-9 && df.noise_weights().iter().all(|w| *w >= 0.0);
        let hull_ok = (0..ch).all(|q| {
            let vals: Vec<f64> = df.noise_indices().map(|i| f.at(q, i)).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = df.f_noise()[q];
            v >= lo - 1e-12 && v <= hi + 1e-12
        });
        if !(cell_ok && weights_ok && hull_ok) {
            failures += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(failures == 0 && secs < 30.0, format!("{checked} instances, {failures} failures, {secs:.2}s"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut r = rng::seeded(4);
    let n = 100_000;
    let side = 100;
    let mut c = random_grid(&mut r, side, side * 10);
    // include the closed endpoints
    c.as_mut_slice()[0] = 0.0;
    c.as_mut_slice()[1] = 1.0;
    let y = random_mask(&mut r, side, side * 10, 0.5);
    let mut sc: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
    let mut sn: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
    (sc[0], sn[0], sc[1], sn[1]) = (1.0, -1.0, -1.0, 1.0);
    let sc = PixelGrid::from_vec(side, side * 10, sc).unwrap();
    let sn = PixelGrid::from_vec(side, side * 10, sn).unwrap();
    let wc = omega_c(&c, &y).unwrap();
    let ws = omega_sim(&sc, &sn).unwrap();
    let (clo, chi) = OMEGA_C_RANGE;
    let (slo, shi) = omega_sim_range();
    let eps = 1e-12;
    let bad_c = wc.as_slice().iter().filter(|w| **w < clo - eps || **w > chi + eps).count();
    let bad_s = ws.as_slice().iter().filter(|w| **w < slo - eps || **w > shi + eps).count();
    check(
        bad_c + bad_s == 0,
        format!("{n} pixels, {bad_c} omega_c and {bad_s} omega_sim violations"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut problems = Vec::new();
    // remove_fn on masks of n isolated blobs
    for n in 0..=24usize {
        let mut mask = BinaryMask::empty(40, 40);
        for i in 0..n {
            let (x, y) = (1 + 3 * (i % 12), 1 + 3 * (i / 12) * 2);
            mask.set(x, y, true);
            mask.set(x + 1, y, true);
        }
        assert_eq!(extract_contours(&mask).len(), n);
        for (tenths, r) in [(0usize, 0.0), (3, 0.3), (5, 0.5), (10, 1.0)] {
            let out = remove_fn(&mask, r, 7 + n as u64).unwrap();
            let expected = (10 - tenths) * n / 10;
            let got = extract_contours(&out.mask).len();
            if got != expected || out.kept != expected {
                problems.push(format!("remove_fn n={n} r={r}: kept {got}, want {expected}"));
            }
        }
    }
    // inject_fp on synthetic patches
    let ds = synth_dataset(&SynthParams::new(Size::new(64, 64), 200, 20, 5)).unwrap();
    let stains = StainMatrix::default();
    let mut added = 0;
    for (i, p) in ds.patches.iter().enumerate() {
        let recipe = NoiseRecipe::for_size(p.clean.size(), i as u64);
        let inj = inject_fp(&p.image, &p.clean, &recipe, &stains).unwrap();
        let cells = extract_contours(&p.clean).len();
        if inj.added.intersection_count(&p.clean).unwrap() != 0 {
            problems.push(format!("{}: injection overlaps the label", p.id));
        }
        let adds = inj.events.len();
        if adds > injection_limit(recipe.rho_fp, cells) {
            problems.push(format!("{}: {adds} additions for {cells} cells", p.id));
        }
        for e in &inj.events {
            if e.area < recipe.area_min || e.area > recipe.area_max {
                problems.push(format!("{}: added area {} outside bounds", p.id, e.area));
            }
        }
        if inj.mask != p.clean.or(&inj.added).unwrap() {
            problems.push(format!("{}: mask is not label ∪ additions", p.id));
        }
        added += adds;
    }
    if added == 0 {
        problems.push("no false positives were injected at all".into());
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("remove_fn exact for n ≤ 24, {added} injections on 200 patches")
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 6

fn blob_mask(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> BinaryMask {
    let mut m = BinaryMask::empty(w, h);
    for &(x0, y0, x1, y1) in rects {
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn criterion_6() -> Outcome {
    let mut problems = Vec::new();
    let mut r = rng::seeded(6);
    for _ in 0..10_000 {
        let a = random_mask(&mut r, 3, 3, 0.5);
        let b = random_mask(&mut r, 3, 3, 0.5);
        let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
        let total = a.bits().iter().filter(|x| **x).count() + b.bits().iter().filter(|x| **x).count();
        let oracle = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
        if (dice_score(&a, &b).unwrap() - oracle).abs() > 1e-15 {
            problems.push("dice mismatch".to_string());
            break;
        }
    }

    let gt = blob_mask(10, 10, &[(1, 1, 4, 4)]);
    let cases = [
        ("equal blob", gt.clone(), 1.0),
        ("extra blob", blob_mask(10, 10, &[(1, 1, 4, 4), (6, 6, 9, 9)]), 2.0 / 3.0),
        ("no prediction", BinaryMask::empty(10, 10), 0.0),
    ];
    for (name, pred, want) in cases {
        let got = instance_f1(&pred, &gt, 0.5).unwrap();
        if (got - want).abs() > 1e-12 {
            problems.push(format!("instance_f1 {name}: {got} != {want}"));
        }
    }

    let mut compared = 0;
    for n in 5..=8usize {
        for _ in 0..50 {
            // small integer magnitudes produce ties
            let d: Vec<f64> = (0..n)
                .map(|_| {
                    let mag = 1 + rng::below(&mut r, 4);
                    if rng::unit(&mut r) < 0.5 { -(mag as f64) } else { mag as f64 }
                })
                .collect();
            let zeros = vec![0.0; n];
            let w = wilcoxon_signed_rank(&d, &zeros).unwrap();
            let ranks = casc_core::metrics::average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
            let mut at_most = 0u32;
            for signs in 0u32..(1 << n) {
                let wp: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
                if wp <= w.statistic + 1e-9 {
                    at_most += 1;
                }
            }
            let oracle = (2.0 * at_most as f64 / (1u32 << n) as f64).min(1.0);
            if !w.exact || (w.p_value - oracle).abs() > 1e-12 {
                problems.push(format!("wilcoxon n={n}: p {} vs enumeration {oracle}", w.p_value));
            }
            compared += 1;
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("10000 dice pairs, 3 instance cases, {compared} wilcoxon enumerations")
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 7

/// Settings shared by both arms of the trend experiment.
const TREND_SETTINGS: &[(&str, &str)] = &[
    ("patch_size", "64"),
    ("patches", "100"),
    ("slides", "21"),
    ("rho_fp", "0.5"),
    ("missing_ratio", "0.3"),
    ("epochs", "50"),
    ("lr", "0.003"),
];
const TREND_SEEDS: [u64; 3] = [1, 2, 3];

struct ArmResult {
    test_dice: f64,
    fp_iou: f64,
    fn_iou: f64,
    secs: f64,
}

fn run_pipeline(dir: &Path, settings: &[(&str, &str)], seed: u64, mode: TrainingMode) -> (commands::EvalSummary, f64) {
    let mut cfg = RunConfig {
        data_dir: dir.join("data"),
        run_dir: dir.join("run"),
        ..RunConfig::default()
    };
    for (k, v) in settings {
        cfg.set(k, v).unwrap();
    }
    cfg.experiment.seed = seed;
    cfg.experiment.mode = mode;
    cfg.experiment.validate().unwrap();
    let t = Instant::now();
    commands::synth(&cfg, false).unwrap();
    commands::inject(&cfg).unwrap();
    commands::train(&cfg).unwrap();
    let summary = commands::eval(&cfg, None).unwrap();
    (summary, t.elapsed().as_secs_f64())
}

fn arm(seed: u64, mode: TrainingMode) -> ArmResult {
    let dir = tempfile::tempdir().unwrap();
    let (s, secs) = run_pipeline(dir.path(), TREND_SETTINGS, seed, mode);
    let all = |split: Split| s.classes.iter().find(|c| c.split == split && c.class == "all").unwrap().clone();
    let train = all(Split::Train);
    ArmResult {
        test_dice: all(Split::Test).dice.0,
        fp_iou: train.fp_iou.map_or(f64::NAN, |v| v.0),
        fn_iou: train.fn_iou.map_or(f64::NAN, |v| v.0),
        secs,
    }
}

fn criterion_7() -> Outcome {
    let mut sup = Vec::new();
    let mut casc = Vec::new();
    for seed in TREND_SEEDS {
        sup.push(arm(seed, TrainingMode::Supervised));
        casc.push(arm(seed, TrainingMode::Casc));
    }
    let mean = |v: &[ArmResult], f: fn(&ArmResult) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let (sd, cd) = (mean(&sup, |a| a.test_dice), mean(&casc, |a| a.test_dice));
    let (sfp, cfp) = (mean(&sup, |a| a.fp_iou), mean(&casc, |a| a.fp_iou));
    let (sfn, cfn) = (mean(&sup, |a| a.fn_iou), mean(&casc, |a| a.fn_iou));
    let slowest = sup.iter().chain(&casc).map(|a| a.secs).fold(0.0, f64::max);
    for (seed, (s, c)) in TREND_SEEDS.iter().zip(sup.iter().zip(&casc)) {
        println!(
            "    seed {seed}: dice {:.4} vs {:.4}, fp_iou {:.4} vs {:.4}, fn_iou {:.4} vs {:.4} (supervised vs casc)",
            s.test_dice, c.test_dice, s.fp_iou, c.fp_iou, s.fn_iou, c.fn_iou
        );
    }
    let a = cd >= sd + 0.01;
    let b = cfp < sfp;
    let c = cfn > sfn;
    check(
        a && b && c && slowest < 20.0 * 60.0,
        format!(
            "test dice {:.2} vs {:.2} ({}), fp_iou {sfp:.4} -> {cfp:.4} ({}), fn_iou {sfn:.4} -> {cfn:.4} ({}), slowest run {slowest:.0}s",
            100.0 * sd,
            100.0 * cd,
            if a { "ok" } else { "short" },
            if b { "ok" } else { "not lower" },
            if c { "ok" } else { "not higher" },
        ),
    )
}

// ---------------------------------------------------------------- 8

const SMALL_SETTINGS: &[(&str, &str)] = &[
    ("patch_size", "32"),
    ("patches", "20"),
    ("slides", "10"),
    ("epochs", "3"),
    ("channels", "4"),
    ("lr", "0.01"),
];

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), SMALL_SETTINGS, 8, TrainingMode::Casc);
    run_pipeline(b.path(), SMALL_SETTINGS, 8, TrainingMode::Casc);
    let mut diffs = Vec::new();
    for f in ["run/history.csv", "run/metrics.csv", "run/checkpoint.casc", "data/manifest.csv", "data/noise_report.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        if x != y {
            diffs.push(f);
        }
    }
    check(
        diffs.is_empty(),
        if diffs.is_empty() {
            "history, metrics, checkpoint and data reports byte-identical".into()
        } else {
            format!("differing files: {}", diffs.join(", "))
        },
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient fidelity", criterion_1),
        ("consensus partition", criterion_2),
        ("distillation oracles", criterion_3),
        ("weight bounds", criterion_4),
        ("noise generator contracts", criterion_5),
        ("metric oracles", criterion_6),
        ("corrective trend", criterion_7),
        ("determinism", criterion_8),
    ];
    let only: Option<Vec<usize>> = std::env::var("CASC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n} SKIP {name}");
            continue;
        }
        match f() {
            Ok(d) => println!("criterion {n} PASS {name}: {d}"),
            Err(d) => {
                println!("criterion {n} FAIL {name}: {d}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
