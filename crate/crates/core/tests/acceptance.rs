//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::Instant;

use candle_core::{DType, Device};
use common::{overfit_config, overfit_data, random_mask_pairs, tiny_config, SetOracle};
use decornet_core::data::synthetic::{write_synthetic_corpus, SyntheticCorpus};
use decornet_core::data::{load_partition, read_manifest, read_split_file};
use decornet_core::decor::{channel_correlation, decor_loss, decor_loss_forward, DEFAULT_EPSILON};
use decornet_core::experiments::probe_correlation;
use decornet_core::metrics::confusion_counts;
use decornet_core::model::{build_network, count_parameters, BlockKind};
use decornet_core::train::{
    evaluate_volumes, load_checkpoint, train, train_on, PlateauScheduler, BEST_CHECKPOINT, LOG_FILE, SPLIT_FILE,
};
use decornet_core::{ChannelConfig, FeatureMap, Network, NetworkSpec};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0));
    FeatureMap::new(data, 0).unwrap()
}

/// Loss from nested loops with the row normalisers supplied by the caller.
fn oracle_loss(h: &Array3<f64>, z: &[f64]) -> f64 {
    let (c, hh, ww) = h.dim();
    let mut loss = 0.0;
    for i in 0..c {
        let row: Vec<f64> = (0..c)
            .map(|j| {
                let mut s = 0.0;
                for y in 0..hh {
                    for x in 0..ww {
                        s += h[[i, y, x]] * h[[j, y, x]];
                    }
                }
                s
            })
            .collect();
        let denom: f64 = row.iter().map(|v| (v / z[i]).exp()).sum();
        loss -= ((row[i] / z[i]).exp() / denom).ln();
    }
    loss
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let maps = 24;
    for k in 0..maps {
        let c = [2, 4, 8][k % 3];
        let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
        let fm = random_map(&mut rng, c, h, w);
        let res = decor_loss(&fm, DEFAULT_EPSILON).unwrap();
        let z = channel_correlation(&fm).unwrap().row_normalizers.to_vec();
        for idx in ndarray::indices((c, h, w)) {
            let mut plus = fm.data().clone();
            plus[idx] += step;
            let mut minus = fm.data().clone();
            minus[idx] -= step;
            let fd = (oracle_loss(&plus, &z) - oracle_loss(&minus, &z)) / (2.0 * step);
            let g = res.gradient[idx];
            worst = worst.max((fd - g).abs() / g.abs().max(fd.abs()).max(1e-3));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && secs < 10.0,
        format!("max relative error {worst:.2e} over {maps} maps in {secs:.2} s"),
    )
}

fn scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_loss: f64 = 0.0;
    let mut worst_map: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..5 {
        let fm = random_map(&mut rng, 6, 5, 4);
        let base = decor_loss(&fm, DEFAULT_EPSILON).unwrap();
        let gmax = base.gradient.iter().fold(0f64, |m, v| m.max(v.abs()));
        for s in [0.5, 3.0, 100.0] {
            let scaled = decor_loss(&fm.scaled(s).unwrap(), DEFAULT_EPSILON).unwrap();
            worst_loss = worst_loss.max((scaled.loss - base.loss).abs());
            let dmap = &scaled.probability_map.values - &base.probability_map.values;
            worst_map = worst_map.max(dmap.iter().fold(0f64, |m, v| m.max(v.abs())));
            let dgrad = &scaled.gradient * s - &base.gradient;
            worst_grad = worst_grad.max(dgrad.iter().fold(0f64, |m, v| m.max(v.abs())) / gmax);
        }
    }
    outcome(
        worst_loss <= 1e-9 && worst_map <= 1e-9 && worst_grad <= 1e-8,
        format!("loss diff {worst_loss:.1e}, map diff {worst_map:.1e}, gradient·s relative diff {worst_grad:.1e}"),
    )
}

fn loss_ordering() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for c in [2usize, 4] {
        let identical = FeatureMap::new(Array3::from_shape_fn((c, 2, 3), |(_, y, x)| (y * 3 + x) as f64 + 1.0), 0).unwrap();
        let orthogonal = FeatureMap::new(
            Array3::from_shape_fn((c, 1, c), |(i, _, x)| if i == x { 1.0 } else { 0.0 }),
            0,
        )
        .unwrap();
        let li = decor_loss_forward(&identical, DEFAULT_EPSILON).unwrap().loss;
        let lo = decor_loss_forward(&orthogonal, DEFAULT_EPSILON).unwrap().loss;
        let cf = c as f64;
        let ei = cf * cf.ln();
        let e = std::f64::consts::E;
        let eo = cf * ((e + cf - 1.0) / e).ln();
        pass &= (li - ei).abs() <= 1e-9 && (lo - eo).abs() <= 1e-9 && li > lo;
        if c == 2 {
            pass &= (li - 1.386294).abs() <= 1e-6 && (lo - 0.626523).abs() <= 1e-6;
        }
        parts.push(format!("C={c}: identical {li:.9} vs {ei:.9}, orthogonal {lo:.9} vs {eo:.9}"));
    }
    outcome(pass, parts.join("; "))
}

fn probability_map_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for c in [1, 2, 5, 16] {
        let fm = random_map(&mut rng, c, 4, 4);
        let fwd = decor_loss_forward(&fm, DEFAULT_EPSILON).unwrap();
        worst = worst.max(fwd.probability_map.row_sums().iter().fold(0f64, |m, v| m.max((v - 1.0).abs())));
    }
    let mut data = Array3::from_shape_fn((4, 3, 3), |_| rng.random_range(-1.0..1.0));
    data.index_axis_mut(ndarray::Axis(0), 2).fill(0.0);
    let dead = decor_loss(&FeatureMap::new(data, 0).unwrap(), DEFAULT_EPSILON).unwrap();
    let uniform = dead.probability_map.values.row(2).iter().all(|&v| v == 0.25);
    let finite = dead.loss.is_finite()
        && dead.gradient.iter().all(|v| v.is_finite())
        && dead.probability_map.values.iter().all(|v| v.is_finite());
    worst = worst.max(dead.probability_map.row_sums().iter().fold(0f64, |m, v| m.max((v - 1.0).abs())));
    outcome(
        worst <= 1e-9 && uniform && finite,
        format!("max row-sum error {worst:.1e}; dead channel row uniform: {uniform}, all finite: {finite}"),
    )
}

fn parameter_budget() -> Outcome {
    let base = NetworkSpec::with_channels(ChannelConfig::BASELINE);
    let rew = NetworkSpec::with_channels(ChannelConfig::REWEIGHTED);
    let built = |s: &NetworkSpec| count_parameters(&build_network(s, 0, DType::F32, &Device::Cpu).unwrap());
    let (nb, nr) = (built(&base), built(&rew));
    let consistent = nb == base.parameter_count() && nr == rew.parameter_count();
    let within = |n: usize, reference: f64| (n as f64 / reference - 1.0).abs() <= 0.10;
    outcome(
        consistent && nr as f64 <= 1.01 * nb as f64 && within(nb, 6.495e6) && within(nr, 6.457e6),
        format!("baseline {nb}, re-weighted {nr} (ratio {:.4}); reference 6.495 M / 6.457 M", nr as f64 / nb as f64),
    )
}

struct OverfitRun {
    network: Network,
    best_dice: f64,
    seconds: f64,
    iterations: usize,
}

fn overfit_run(lambda: f64, block: BlockKind) -> OverfitRun {
    let (slices, val) = overfit_data();
    let mut cfg = overfit_config(lambda, 0);
    cfg.model.block_kind = block;
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = train_on(&cfg, &slices, &val, dir.path()).unwrap();
    OverfitRun {
        best_dice: out.best.val_metrics.unwrap().dice,
        iterations: out.log.last().unwrap().iterations,
        network: out.network,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn overfit(run: &OverfitRun) -> Outcome {
    outcome(
        run.best_dice > 0.95 && run.iterations <= 200 && run.seconds < 300.0,
        format!(
            "training Dice {:.4} after {} iterations in {:.1} s",
            run.best_dice, run.iterations, run.seconds
        ),
    )
}

fn scheduler() -> Outcome {
    let mut flat = PlateauScheduler::new(1e-4, 5.0, 30, 5e-3);
    flat.step(1.0).unwrap();
    let drops: Vec<usize> = (1..=59).filter(|_| flat.step(1.0).unwrap()).collect();
    let mut improving = PlateauScheduler::new(1e-4, 5.0, 30, 5e-3);
    let improving_drops = (0..100).filter(|&e| improving.step(2.0 - 5e-3 * e as f64).unwrap()).count();
    outcome(
        drops == [30] && (flat.lr() - 2e-5).abs() < 1e-18 && improving_drops == 0,
        format!("flat run drops at epochs {drops:?} (lr {:e}); improving run drops {improving_drops} times", flat.lr()),
    )
}

fn metrics_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut identity: f64 = 0.0;
    let pairs = random_mask_pairs(100, 8, 2024);
    for (p, g) in &pairs {
        let c = confusion_counts(p, g).unwrap();
        let o = SetOracle::new(p, g);
        mismatches += [
            c.dice() == o.dice,
            c.iou() == o.iou,
            c.precision() == o.precision,
            c.recall() == o.recall,
        ]
        .iter()
        .filter(|ok| !**ok)
        .count();
        identity = identity.max((c.dice() - 2.0 * c.iou() / (1.0 + c.iou())).abs());
    }
    outcome(
        mismatches == 0 && identity <= 1e-12,
        format!("{} pairs, {mismatches} mismatches, max |dice - 2iou/(1+iou)| {identity:.1e}", pairs.len()),
    )
}

fn diagonal_mass(network: &Network) -> f64 {
    let (slices, _) = overfit_data();
    let images: Vec<Array2<f32>> = slices.iter().map(|s| s.image.clone()).collect();
    probe_correlation(network, &images, 2, 4, DEFAULT_EPSILON).unwrap().mean_diagonal_mass
}

fn decorrelation_effect(with: &OverfitRun, without: &OverfitRun) -> Outcome {
    let (a, b) = (diagonal_mass(&with.network), diagonal_mass(&without.network));
    outcome(
        a > b,
        format!("layer-2 mean diagonal mass {a:.6} with λ=0.01 vs {b:.6} with λ=0"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = SyntheticCorpus {
        volumes: 6,
        slices_per_volume: 2,
        size: 32,
        ..SyntheticCorpus::default()
    };
    let manifest = write_synthetic_corpus(&tmp.path().join("data"), &corpus).unwrap();
    let mut cfg = tiny_config();
    cfg.data.manifest = Some(manifest.clone());
    cfg.data.augmentation.enabled = true;
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        train(&cfg, &dir).unwrap();
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let logs_equal = std::fs::read(a.join(LOG_FILE)).unwrap() == std::fs::read(b.join(LOG_FILE)).unwrap();

    let (net, meta) = load_checkpoint(&a.join(BEST_CHECKPOINT), &Device::Cpu).unwrap();
    let split = read_split_file(&a.join(SPLIT_FILE)).unwrap();
    let entries = read_manifest(&manifest).unwrap();
    let vols = load_partition(&entries, &split.test, meta.config.data.window).unwrap();
    let eval = || serde_json::to_string(&evaluate_volumes(&net, &vols, 0.5, 4, true).unwrap()).unwrap();
    let eval_stable = eval() == eval();
    outcome(
        logs_equal && eval_stable,
        format!("epoch logs identical: {logs_equal}; repeated eval identical: {eval_stable}"),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient exactness", gradient_exactness());
    report(2, "scale invariance", scale_invariance());
    report(3, "loss ordering", loss_ordering());
    report(4, "probability map", probability_map_rows());
    report(5, "parameter budget", parameter_budget());
    let with = overfit_run(0.01, BlockKind::Residual);
    report(6, "overfit smoke test", overfit(&with));
    report(7, "plateau scheduler", scheduler());
    report(8, "metrics oracle", metrics_oracle());
    let without = overfit_run(0.0, BlockKind::Residual);
    report(9, "decorrelation effect", decorrelation_effect(&with, &without));
    report(10, "determinism", determinism());

    // Not a criterion: the same comparison without shortcut connections.
    let (pw, pn) = (overfit_run(0.01, BlockKind::Plain), overfit_run(0.0, BlockKind::Plain));
    println!(
        "note: plain blocks give layer-2 mean diagonal mass {:.6} with λ=0.01 vs {:.6} with λ=0",
        diagonal_mass(&pw.network),
        diagonal_mass(&pn.network)
    );

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
