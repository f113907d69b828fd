//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use consult::bank::greedy_coreset;
use consult::extractor::{attention_heatmap, Extractor, ExtractorConfig, PatchFeatureGrid};
use consult::harness::{
    execute, generate_surrogate, phantom_brain, run_experiment, DataSource, ExperimentConfig, ExperimentRun,
    PhantomConfig,
};
use consult::losses::{
    anchor_loss, koleo_loss, ssl_loss, tritanh_loss, AnchorParams, ContrastiveDistances, SfaParams, TritanhParams,
};
use consult::synthlab::{bezier_hull, generate_defect, locate_brain_default, DefectSpec};
use consult::trainer::{EpochStats, TrainConfig};
use consult::nn::WeightSet;

const SEEDS: [u64; 3] = [0, 1, 2];
const IMAGE_SIZE: usize = 128;

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

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

// Criterion 1: each loss against a direct evaluation.
fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dp: f64 = rng.random_range(0.0..4.0);
        let dn: f64 = rng.random_range(0.0..4.0);
        let d = ContrastiveDistances::new(dp, dn);

        let tp = TritanhParams {
            lambda0: rng.random_range(0.1..3.0),
            lambda1: rng.random_range(0.1..3.0),
            m0: rng.random_range(0.0..2.0),
            m1: rng.random_range(0.0..2.0),
        };
        let (a, b) = ((tp.lambda0 * dp).exp(), (tp.lambda1 * dn).exp());
        worst = worst.max(rel_err(tritanh_loss(&d, &tp), (a - b + tp.m0) / (a + b + tp.m1)));

        let ap = AnchorParams {
            alpha0: rng.random_range(0.1..3.0),
            alpha1: rng.random_range(0.1..3.0),
            m: rng.random_range(0.0..2.0),
        };
        let hinge = ap.alpha0 * dp - ap.alpha1 * dn + ap.m;
        let want = if hinge > 0.0 { hinge } else { 0.0 };
        let got = anchor_loss(&d, &ap);
        worst = worst.max(if want == 0.0 { got.abs() } else { rel_err(got, want) });

        // Self-similarity: every ordered pair of distinct cells.
        let (h, w, dim) = (rng.random_range(1..5), rng.random_range(2..5), rng.random_range(1..6));
        let data: Vec<f64> = (0..h * w * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grid = PatchFeatureGrid::new(h, w, dim, data.clone()).unwrap();
        let n = h * w;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let sq: f64 = (0..dim).map(|k| (data[i * dim + k] - data[j * dim + k]).powi(2)).sum();
                    pairs += sq / dim as f64;
                }
            }
        }
        worst = worst.max(rel_err(ssl_loss(&grid).unwrap(), pairs / (n * (n - 1)) as f64));

        let sp = SfaParams::default();
        let feats: Vec<Vec<f64>> = (0..n).map(|i| data[i * dim..(i + 1) * dim].to_vec()).collect();
        let want = -feats
            .iter()
            .map(|f| (f.iter().map(|x| x * x).sum::<f64>().sqrt() + sp.eps).ln())
            .sum::<f64>()
            / n as f64;
        worst = worst.max(rel_err(koleo_loss(feats.iter().map(|f| f.as_slice()), &sp), want));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-6 && secs < 10.0, format!("max rel err {worst:.2e}, {secs:.2}s"))
}

// Criterion 2: strict lower bound, upper bound and finite-difference signs.
fn tritanh_bound_and_signs() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0usize;
    let n = 100_000;
    for _ in 0..n {
        let m1: f64 = rng.random_range(0.0..5.0);
        let p = TritanhParams {
            lambda0: rng.random_range(0.1..3.0),
            lambda1: rng.random_range(0.1..3.0),
            m0: rng.random_range(0.0..=m1 + 2.0),
            m1,
        };
        let dp: f64 = rng.random_range(0.0..4.0);
        let dn: f64 = rng.random_range(0.0..4.0);
        let f = |a: f64, b: f64| tritanh_loss(&ContrastiveDistances::new(a, b), &p);
        let v = f(dp, dn);
        let h = 1e-6;
        let g_pull = (f(dp + h, dn) - f((dp - h).max(0.0), dn)) / (dp + h - (dp - h).max(0.0));
        let g_push = (f(dp, dn + h) - f(dp, (dn - h).max(0.0))) / (dn + h - (dn - h).max(0.0));
        if !(v > -1.0 && v <= 1.0 && g_pull > 0.0 && g_push < 0.0) {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(bad == 0 && secs < 30.0, format!("{bad} of {n} points violate, {secs:.2}s"))
}

// Criterion 3: distinct zero-loss points with nonzero pull distance.
fn anchor_degeneracy() -> Outcome {
    let p = AnchorParams::default();
    let mut witnesses = Vec::new();
    for i in 1..=20 {
        let dp = 0.05 * i as f64;
        let dn = (p.alpha0 * dp + p.m) / p.alpha1 + 0.1 * i as f64;
        if anchor_loss(&ContrastiveDistances::new(dp, dn), &p) == 0.0 && dp != 0.0 {
            witnesses.push((dp, dn));
        }
    }
    witnesses.dedup();
    outcome(
        witnesses.len() >= 10,
        format!("{} zero-loss points, e.g. {:?}", witnesses.len(), witnesses.first()),
    )
}

fn radius(points: &[f64], dim: usize, sel: &[usize]) -> f64 {
    let n = points.len() / dim;
    let mut r: f64 = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for &s in sel {
            let d: f64 = (0..dim).map(|k| (points[i * dim + k] - points[s * dim + k]).powi(2)).sum();
            best = best.min(d);
        }
        r = r.max(best.sqrt());
    }
    r
}

fn best_radius(points: &[f64], dim: usize, k: usize) -> f64 {
    let n = points.len() / dim;
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        best = best.min(radius(points, dim, &idx));
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

// Criterion 4: greedy k-center is within twice the exhaustive optimum.
fn coreset_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ratio: f64 = 0.0;
    let mut instances = 0;
    for _ in 0..300 {
        let n = rng.random_range(2..=20);
        let dim = rng.random_range(1..=3);
        let k = rng.random_range(1..=4.min(n));
        let pts: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let sel = greedy_coreset(&pts, dim, k, rng.random_range(0..n));
        let opt = best_radius(&pts, dim, k);
        let got = radius(&pts, dim, &sel);
        let ratio = if opt == 0.0 { if got == 0.0 { 1.0 } else { f64::INFINITY } } else { got / opt };
        worst_ratio = worst_ratio.max(ratio);
        instances += 1;
    }
    let mut line = greedy_coreset(&[0.0, 1.0, 10.0], 1, 2, 0);
    line.sort_unstable();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_ratio <= 2.0 + 1e-12 && line == vec![0, 2] && secs < 60.0,
        format!("worst greedy/optimal {worst_ratio:.3} over {instances} instances; {{0,1,10}} pick 2 -> {line:?}; {secs:.2}s"),
    )
}

// Criterion 5: containment, locality and control-point interpolation.
fn synthesis_geometry() -> Outcome {
    let mut outside = 0usize;
    let mut touched = 0usize;
    let mut interp: f64 = 0.0;
    for seed in 0..500u64 {
        let img = phantom_brain(IMAGE_SIZE, 10_000 + seed);
        let brain = locate_brain_default(&img).unwrap();
        let (out, mask) = generate_defect(&img, &DefectSpec::default().with_seed(seed)).unwrap();
        for i in 0..img.pixels().len() {
            if mask.as_slice()[i] && !brain.as_slice()[i] {
                outside += 1;
            }
            if !mask.as_slice()[i] && out.pixels()[i] != img.pixels()[i] {
                touched += 1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..rng.random_range(3..9))
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
            .collect();
        let hull = bezier_hull(&pts, rng.random_range(0.0..0.3), 24).unwrap();
        for p in &pts {
            let d = hull
                .iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            interp = interp.max(d);
        }
    }
    outcome(
        outside == 0 && touched == 0 && interp < 1e-6,
        format!("{outside} mask pixels outside brain, {touched} pixels changed outside mask, interpolation err {interp:.1e}"),
    )
}

fn scaled_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        shots: 2,
        seed,
        heatmaps: 0,
        data: DataSource::Phantom(PhantomConfig {
            size: IMAGE_SIZE,
            test_healthy: 20,
            test_anomalous: 20,
            ..PhantomConfig::default()
        }),
        extractor: ExtractorConfig {
            base_width: 16,
            ..ExtractorConfig::default()
        },
        train: TrainConfig {
            epochs: 50,
            iters_per_epoch: 8,
            batch_size: 4,
            n_normal_aug: 8,
            n_anomalous: 8,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

struct SeedRuns {
    tuned: ExperimentRun,
    frozen_auroc: f64,
}

// Criterion 6: fine-tuned versus frozen backbone at K=2.
fn directional(runs: &[SeedRuns], secs: f64) -> Outcome {
    let mut deltas: Vec<f64> = runs.iter().map(|r| r.tuned.report.auroc - r.frozen_auroc).collect();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3} vs {:.3}", r.tuned.report.auroc, r.frozen_auroc))
        .collect();
    deltas.sort_by(f64::total_cmp);
    let median = deltas[deltas.len() / 2];
    outcome(
        median >= 0.03 && secs <= 3.0 * 3600.0,
        format!(
            "median delta {median:+.3} (tuned vs frozen per seed: {}), {secs:.0}s at {IMAGE_SIZE}x{IMAGE_SIZE}",
            per_seed.join(", ")
        ),
    )
}

fn window_mean(stats: &[EpochStats], f: impl Fn(&EpochStats) -> f64, tail: bool) -> f64 {
    let w = 5.min(stats.len());
    let s = if tail { &stats[stats.len() - w..] } else { &stats[..w] };
    s.iter().map(f).sum::<f64>() / w as f64
}

// Criterion 7: the training loss falls and the push/pull ratio grows.
fn training_sanity(runs: &[SeedRuns]) -> Outcome {
    let mut ok = 0;
    let mut details = Vec::new();
    for r in runs {
        let s = &r.tuned.stats;
        let finite = s.len() == 50 && s.iter().all(EpochStats::is_finite);
        let (l0, l1) = (window_mean(s, |e| e.total, false), window_mean(s, |e| e.total, true));
        let (r0, r1) = (s[0].d_push / s[0].d_pull, s[s.len() - 1].d_push / s[s.len() - 1].d_pull);
        if finite && l1 < l0 && r1 > r0 {
            ok += 1;
        }
        details.push(format!("loss {l0:.3}->{l1:.3} ratio {r0:.1}->{r1:.1}"));
    }
    outcome(ok == runs.len(), format!("{ok}/{} seeds; {}", runs.len(), details.join("; ")))
}

fn mean_heatmap(ex: &Extractor, img: &consult::GrayImage, stages: &[usize]) -> Vec<f64> {
    let (_, state) = ex.grid_with_state(img).unwrap();
    let mut acc = vec![0.0; img.width() * img.height()];
    for &s in stages {
        let (_, _, m) = attention_heatmap(&state, s).unwrap();
        acc.iter_mut().zip(m).for_each(|(a, v)| *a += v / stages.len() as f64);
    }
    acc
}

fn paired_inside_outside(ws: &WeightSet, cfg: &ExtractorConfig) -> (usize, f64, f64) {
    let held_out = generate_surrogate(
        &PhantomConfig {
            size: IMAGE_SIZE,
            pool_size: 0,
            test_healthy: 0,
            test_anomalous: 60,
            ..PhantomConfig::default()
        },
        777,
    )
    .unwrap();
    let ex = Extractor::new(cfg, ws).unwrap();
    let diffs: Vec<f64> = held_out
        .test
        .iter()
        .map(|t| {
            let mask = t.mask.as_ref().unwrap().as_slice();
            let hm = mean_heatmap(&ex, &t.image, &cfg.stages_used);
            let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
            for (v, &m) in hm.iter().zip(mask) {
                if m {
                    si += v;
                    ni += 1.0;
                } else {
                    so += v;
                    no += 1.0;
                }
            }
            si / ni - so / no
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
    (diffs.len(), mean, p)
}

// Criterion 8: trained attention concentrates on held-out lesions.
fn attention_focus(run: &ExperimentRun) -> Outcome {
    let cfg = &run.report.config.extractor;
    let (n, mean, p) = paired_inside_outside(&run.weights, cfg);
    let (_, mean0, p0) = paired_inside_outside(&run.init_weights, cfg);
    outcome(
        n >= 50 && mean > 0.0 && p < 0.05,
        format!("{n} lesion images, mean inside-outside {mean:+.4}, p={p:.2e} (untrained {mean0:+.4}, p={p0:.2e})"),
    )
}

// Criterion 9: a second run with the same seed reproduces every score.
fn determinism(first: &ExperimentRun) -> Outcome {
    let again = run_experiment(&scaled_config(first.report.config.seed), None).unwrap();
    let a = &first.report.scores;
    let b = &again.scores;
    let worst = a
        .iter()
        .zip(b)
        .map(|(x, y)| if x.id == y.id { (x.score - y.score).abs().max((x.raw_score - y.raw_score).abs()) } else { f64::INFINITY })
        .fold(0.0, f64::max);
    outcome(a.len() == b.len() && worst <= 1e-6, format!("{} scores, max diff {worst:.1e}", a.len()))
}

// Criterion 10: every bank vector is its recorded source patch.
fn bank_traceability(run: &ExperimentRun) -> Outcome {
    let ex = Extractor::new(&run.report.config.extractor, &run.weights).unwrap();
    let grids = ex.grids(&run.few).unwrap();
    let bank = &run.bank;
    let mut ok = 0;
    for (i, src) in bank.sources.iter().enumerate() {
        let want = grids[src.image].cell(src.cell);
        let got = bank.vector(i);
        if want.iter().zip(got).all(|(w, &g)| (w - g as f64).abs() <= 1e-5 * w.abs().max(1.0)) {
            ok += 1;
        }
    }
    outcome(ok == bank.len() && ok > 0, format!("{ok}/{} vectors re-derived", bank.len()))
}

fn main() {
    // Accept and ignore libtest flags such as `--nocapture`.
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "loss oracles", loss_oracles());
    record(2, "tritanh bound and monotonicity", tritanh_bound_and_signs());
    record(3, "anchor loss degeneracy", anchor_degeneracy());
    record(4, "coreset optimality", coreset_optimality());
    record(5, "synthesis geometry", synthesis_geometry());

    let start = Instant::now();
    let runs: Vec<SeedRuns> = SEEDS
        .iter()
        .map(|&seed| {
            let cfg = scaled_config(seed);
            let frozen = run_experiment(&ExperimentConfig { skip_training: true, ..cfg.clone() }, None).unwrap();
            let tuned = execute(&cfg, None).unwrap();
            SeedRuns {
                tuned,
                frozen_auroc: frozen.auroc,
            }
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    record(6, "fine-tuned beats frozen backbone", directional(&runs, secs));
    record(7, "training sanity", training_sanity(&runs));
    record(8, "attention focus", attention_focus(&runs[0].tuned));
    record(9, "determinism", determinism(&runs[0].tuned));
    record(10, "bank traceability", bank_traceability(&runs[0].tuned));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
