//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::time::{Duration, Instant};

use gaussmarker::bench::{run_benchmark, BenchmarkConfig, BenchmarkModels, BenchmarkReport, Distortion, Variant};
use gaussmarker::freq::{build_ring_pattern, dft2_centered, idft2_centered, ring_radius_sq};
use gaussmarker::fusion::{train_fuser, FuserModel, FuserTrainConfig};
use gaussmarker::key::WatermarkKey;
use gaussmarker::pipeline::Watermarker;
use gaussmarker::restorer::{train, GnrTrainConfig, RestorerModel, TransformFamily};
use gaussmarker::spatial::{downsample, upsample, UpsampleLayout, WatermarkBits};
use gaussmarker::stats::{bit_accuracy, choose_threshold, evaluate, fpr_exact, Identifier, UserRegistry};
use gaussmarker::{apply_transform, sample_gaussian, Shape, SignalMap, TransformKind, TransformSpec};

const KEY_SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn watermarker(l: usize) -> Watermarker {
    Watermarker::new(&WatermarkKey::generate(l, Shape::DEFAULT, 4, KEY_SEED).unwrap()).unwrap()
}

fn clean_round_trip() -> Outcome {
    let start = Instant::now();
    let wm = watermarker(256);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut worst: f64 = 1.0;
    for i in 0..200u64 {
        let z = wm.sample_watermarked(i).unwrap();
        let est = wm.read_bits(&z, None).unwrap();
        worst = worst.min(bit_accuracy(&est, wm.bits()).unwrap());
        pos.push(gaussmarker::spatial::score_spatial(&est, wm.bits()).unwrap());
        let n = sample_gaussian(Shape::DEFAULT, 1_000_000 + i).unwrap();
        let est = wm.read_bits(&n, None).unwrap();
        neg.push(gaussmarker::spatial::score_spatial(&est, wm.bits()).unwrap());
    }
    let tpr = evaluate(&pos, &neg, 0.01).unwrap().tpr_at_fpr;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst == 1.0 && tpr == 1.0 && secs < 30.0,
        format!("min bit accuracy {worst:.4}, TPR@1%FPR {tpr:.3}, {secs:.1} s"),
    )
}

fn worked_examples() -> Outcome {
    let flat = |n| Shape::new(1, 1, n).unwrap();
    let two = UpsampleLayout::new(2, flat(7)).unwrap();
    let up = upsample(&WatermarkBits::new(vec![0, 1]).unwrap(), &two).unwrap();
    let observed = SignalMap::new(flat(7), vec![0, 0, 1, 1, 0, 1, 1]).unwrap();
    let down = downsample(&observed, &two).unwrap();
    let one = UpsampleLayout::new(1, flat(4)).unwrap();
    let single = downsample(&SignalMap::new(flat(4), vec![0, 0, 1, 0]).unwrap(), &one).unwrap();
    let pass = up.bits() == [0, 0, 0, 1, 1, 1, 1] && down == [1.0 / 3.0, 3.0 / 4.0] && single == [0.25];
    outcome(pass, format!("up {:?}, down {down:?}, single {single:?}", up.bits()))
}

fn binomial_tail(tau: usize, l: usize) -> f64 {
    let mut c = 1u128;
    let mut total = 0u128;
    for i in 0..=l {
        if i > tau {
            total += c;
        }
        c = c * (l - i) as u128 / (i + 1) as u128;
    }
    total as f64 / (1u128 << l) as f64
}

fn fpr_formula() -> Outcome {
    let mut worst: f64 = 0.0;
    for l in 1..=20 {
        for tau in 0..=l {
            let exact = binomial_tail(tau, l);
            let got = fpr_exact(tau, l).unwrap();
            let err = if exact == 0.0 { got.abs() } else { (got - exact).abs() / exact };
            worst = worst.max(err);
        }
    }
    let values: Vec<f64> = (0..=256).map(|t| fpr_exact(t, 256).unwrap()).collect();
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        worst <= 1e-12 && monotone,
        format!("max relative error {worst:.2e}, monotone for l=256: {monotone}"),
    )
}

struct Trained {
    full: RestorerModel,
    full_time: Duration,
    no_rotation: RestorerModel,
    no_rotation_time: Duration,
}

fn train_restorers(wm: &Watermarker) -> Trained {
    let full_cfg = GnrTrainConfig {
        seed: 1,
        ..GnrTrainConfig::default()
    };
    let start = Instant::now();
    let (full, _) = train(&full_cfg, wm).unwrap();
    let full_time = start.elapsed();
    let no_rot_cfg = GnrTrainConfig {
        family: TransformFamily {
            rotation: None,
            ..TransformFamily::default()
        },
        ..full_cfg
    };
    let start = Instant::now();
    let (no_rotation, _) = train(&no_rot_cfg, wm).unwrap();
    Trained {
        full,
        full_time,
        no_rotation,
        no_rotation_time: start.elapsed(),
    }
}

fn benchmark(wm: &Watermarker, gnr: &RestorerModel, distortions: Vec<Distortion>, variants: Vec<Variant>) -> BenchmarkReport {
    let config = BenchmarkConfig {
        distortions,
        variants,
        seed: 7,
        ..BenchmarkConfig::default()
    };
    let models = BenchmarkModels {
        gnr: Some(gnr.clone()),
        ..BenchmarkModels::default()
    };
    run_benchmark(&config, wm, &models).unwrap()
}

fn rotation_ablation(report: &BenchmarkReport, t: &Trained) -> Outcome {
    let spatial = report.row(Variant::Spatial, "rotate75").unwrap();
    let dual = report.row(Variant::DualGnr, "rotate75").unwrap();
    let mins = t.full_time.as_secs_f64() / 60.0;
    let pass = (0.45..=0.60).contains(&spatial.bit_accuracy)
        && dual.bit_accuracy >= 0.95
        && dual.tpr_at_fpr >= 0.95
        && mins < 30.0;
    outcome(
        pass,
        format!(
            "spatial-only bit accuracy {:.4}; dual+gnr bit accuracy {:.4}, TPR@1%FPR {:.3}; GNR training {mins:.1} min",
            spatial.bit_accuracy, dual.bit_accuracy, dual.tpr_at_fpr
        ),
    )
}

fn crop_ablation(report: &BenchmarkReport) -> Outcome {
    let dual = report.row(Variant::DualGnr, "crop0.75").unwrap();
    outcome(
        dual.bit_accuracy >= 0.95,
        format!("dual+gnr bit accuracy {:.4}, TPR@1%FPR {:.3}", dual.bit_accuracy, dual.tpr_at_fpr),
    )
}

fn family_study(wm: &Watermarker, report: &BenchmarkReport, t: &Trained) -> Outcome {
    let rotate = vec![Distortion::new("rotate75", TransformKind::Rotate { angle: 75.0 })];
    let no_rot = benchmark(wm, &t.no_rotation, rotate, vec![Variant::DualGnr]);
    let without = no_rot.row(Variant::DualGnr, "rotate75").unwrap().bit_accuracy;
    let with = report.row(Variant::DualGnr, "rotate75").unwrap().bit_accuracy;
    outcome(
        (0.45..=0.60).contains(&without) && with >= 0.95,
        format!(
            "trained without rotation {without:.4}, with (-180,180) {with:.4}; no-rotation training {:.1} min",
            t.no_rotation_time.as_secs_f64() / 60.0
        ),
    )
}

fn fusion_dominance(report: &BenchmarkReport) -> Outcome {
    let mut pass = true;
    let mut worst_margin = f64::INFINITY;
    for variant in [Variant::Dual, Variant::DualGnr] {
        for row in report.rows.iter().filter(|r| r.variant == variant.name()) {
            let margin = row.auc - row.auc_spatial.max(row.auc_freq);
            worst_margin = worst_margin.min(margin);
            pass &= margin >= -0.01;
        }
    }
    let avg = |v| report.average_tpr(v);
    let (dg, s, f) = (avg(Variant::DualGnr), avg(Variant::Spatial), avg(Variant::Freq));
    pass &= dg >= s && dg >= f;
    outcome(
        pass,
        format!("worst fused-minus-best-single AUC {worst_margin:+.4}; average TPR dual+gnr {dg:.3}, spatial {s:.3}, freq {f:.3}"),
    )
}

fn mean_accuracy(l: usize, transform: Option<TransformSpec>, n: u64) -> f64 {
    let wm = watermarker(l);
    let mut total = 0.0;
    for i in 0..n {
        let mut z = wm.sample_watermarked(50_000 + i).unwrap();
        if let Some(t) = &transform {
            z = apply_transform(&z, &t.clone().with_seed(i)).unwrap();
        }
        total += bit_accuracy(&wm.read_bits(&z, None).unwrap(), wm.bits()).unwrap();
    }
    total / n as f64
}

fn capacity_trend() -> Outcome {
    let flip = Some(TransformSpec::sign_flip(0.35));
    let short = mean_accuracy(128, flip.clone(), 50);
    let long = mean_accuracy(4096, flip, 50);
    let clean_min = [1, 2, 16, 64, 100, 128]
        .iter()
        .map(|&l| mean_accuracy(l, None, 20))
        .fold(1.0f64, f64::min);
    outcome(
        short >= long && clean_min == 1.0,
        format!("flip 0.35: l=128 {short:.4}, l=4096 {long:.4}; worst clean accuracy for l<=128 {clean_min:.4}"),
    )
}

fn identification() -> Outcome {
    let wm = watermarker(256);
    let registry = UserRegistry::generate(1000, 256, 99).unwrap();
    let identifier = Identifier::new(&registry, wm.bits()).unwrap();
    let policy = choose_threshold(256, 0.01, registry.len()).unwrap();
    let mut correct = 0;
    let mut total = 0;
    for user in registry.users() {
        let bits = registry.user_watermark(user.user_id, wm.bits()).unwrap();
        for k in 0..5u64 {
            let z = sample_gaussian(Shape::DEFAULT, ((user.user_id as u64) << 8) | k).unwrap();
            let est = wm.read_bits(&wm.embed_bits(&z, &bits).unwrap(), None).unwrap();
            correct += (identifier.identify(&est, &policy).unwrap().user == Some(user.user_id)) as usize;
            total += 1;
        }
    }
    let mut rejected = 0;
    let negatives = 1000;
    for i in 0..negatives {
        let z = sample_gaussian(Shape::DEFAULT, 7_000_000 + i as u64).unwrap();
        let est = wm.read_bits(&z, None).unwrap();
        rejected += identifier.identify(&est, &policy).unwrap().user.is_none() as usize;
    }
    let acc = correct as f64 / total as f64;
    let rej = rejected as f64 / negatives as f64;
    outcome(
        acc == 1.0 && rej >= 0.99,
        format!("identification {acc:.4} over {total}, rejection {rej:.4} (tau {})", policy.tau),
    )
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn numerics() -> Outcome {
    let shape = Shape::new(4, 16, 16).unwrap();
    let gnr = RestorerModel::new(4, shape, 3).unwrap();
    let s = sample_gaussian(shape, 4).map(|z| gaussmarker::sign_map(&z)).unwrap();
    let (_, grad) = gnr.output_sum_and_gradient(&s).unwrap();
    // Small enough that no probe crosses a ReLU kink.
    let eps = 1e-4;
    let mut gnr_worst: f64 = 0.0;
    for (block, g) in grad.iter().enumerate() {
        for index in [0, g.len() / 2, g.len() - 1] {
            let fd = (gnr.output_sum_perturbed(&s, block, index, eps).unwrap()
                - gnr.output_sum_perturbed(&s, block, index, -eps).unwrap())
                / (2.0 * eps);
            gnr_worst = gnr_worst.max(relative(g[index], fd));
        }
    }

    let pos: Vec<(f64, f64)> = (0..100).map(|i| (-(i as f64) * 0.1, -(i % 7) as f64)).collect();
    let neg: Vec<(f64, f64)> = (0..100).map(|i| (-20.0 - i as f64 * 0.2, -10.0 - (i % 5) as f64)).collect();
    let fuser: FuserModel = train_fuser(
        &FuserTrainConfig {
            steps: 50,
            ..FuserTrainConfig::default()
        },
        &pos,
        &neg,
    )
    .unwrap();
    let mut fuser_worst: f64 = 0.0;
    for &(rs, rf) in &[(-3.0, -2.0), (-25.0, -12.0)] {
        let (_, grad) = fuser.score_and_gradient(rs, rf);
        for (block, g) in grad.iter().enumerate() {
            for index in 0..g.len() {
                let fd = (fuser.score_perturbed(rs, rf, block, index, 1e-5)
                    - fuser.score_perturbed(rs, rf, block, index, -1e-5))
                    / 2e-5;
                fuser_worst = fuser_worst.max(relative(g[index], fd));
            }
        }
    }

    let z = sample_gaussian(Shape::DEFAULT, 5).unwrap();
    let (back, _) = idft2_centered(&dft2_centered(&z));
    let dft_err = back.max_abs_diff(&z);

    let wm = watermarker(256);
    let fp = build_ring_pattern(Shape::DEFAULT, wm.signal(), 11, 4).unwrap();
    let (c, w, h) = (4, 64, 64);
    let mut ring_exact = true;
    for ch in 0..c {
        let mut first = std::collections::HashMap::new();
        for i in 0..w {
            for j in 0..h {
                let v = fp.pattern().get(ch, i, j);
                let r = ring_radius_sq(i, j, w, h);
                ring_exact &= *first.entry(r).or_insert(v) == v;
            }
        }
    }

    outcome(
        gnr_worst <= 1e-3 && fuser_worst <= 1e-3 && dft_err <= 1e-5 && ring_exact,
        format!(
            "GNR grad rel err {gnr_worst:.2e}, fuser {fuser_worst:.2e}, DFT round trip {dft_err:.2e}, ring equality exact: {ring_exact}"
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "clean round trip", clean_round_trip());
    report(2, "worked examples", worked_examples());
    report(3, "false-positive formula", fpr_formula());

    let wm = watermarker(256);
    let trained = train_restorers(&wm);
    let main_report = benchmark(&wm, &trained.full, Distortion::standard(), Variant::ALL.to_vec());
    print!("{}", main_report.summary());
    report(4, "rotation ablation", rotation_ablation(&main_report, &trained));
    report(5, "crop ablation", crop_ablation(&main_report));
    report(6, "transform-family study", family_study(&wm, &main_report, &trained));
    report(7, "fusion dominance", fusion_dominance(&main_report));
    report(8, "capacity trend", capacity_trend());
    report(9, "multi-user identification", identification());
    report(10, "numerics", numerics());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
