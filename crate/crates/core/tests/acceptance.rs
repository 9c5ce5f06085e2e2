//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::time::{Duration, Instant};

use asmil::anchor::{stabilization_loss_on_tape, AnchorState};
use asmil::attention::{entmax_slice, nsf_slice, softmax_slice, AttentionMap, ENTMAX_TOLERANCE};
use asmil::data::{cv_split, generate_synthetic, parse_bagds, SyntheticBagSpec};
use asmil::diagnostics::{affine_dependence_of, stability_curve, AFFINE_TOLERANCE};
use asmil::metrics::{c_index, macro_auc, macro_f1, pairwise_auc, RiskTies, SurvivalRecord};
use asmil::model::{
    forward, init_params, token_drop_mask, Architecture, Bag, DropMask, ModelConfig,
    OnlineAttention,
};
use asmil::tape::GradTape;
use asmil::theorem::{
    sample_score_set, softmax_low_supremum, suppression_worst_case, sweep_nsf_bounds,
    temperature_feasibility, FeasibilityTargets, ScoreSetSpec,
};
use asmil::trainer::{fit, loss_and_gradients, total_loss, Stabilizer, TrainConfig};
use asmil::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let within = elapsed <= limit;
    let ok = pass && within;
    println!(
        "criterion {id} [{name}]: {} ({detail}; {:.2}s of {:.0}s allowed)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(within, "criterion {id} exceeded its time budget");
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut raw_worst: f64 = 0.0;
    let mut checked = 0;
    for trial in 0..20 {
        let d = [4, 8][rng.random_range(0..2)];
        let m = [3, 12][rng.random_range(0..2)];
        let n = [2, 4][rng.random_range(0..2)];
        let k = [2, 3][rng.random_range(0..2)];
        let model = ModelConfig {
            architecture: if trial % 4 == 3 {
                Architecture::Abmil
            } else {
                Architecture::Asmil
            },
            input_dim: d,
            hidden_dim: 5,
            n_tokens: n,
            n_classes: k,
            embed_dim: (trial % 3 == 0).then_some(6),
            online_attention: if trial % 2 == 0 {
                OnlineAttention::Softmax
            } else {
                OnlineAttention::Mixed
            },
        };
        let cfg = TrainConfig {
            beta: 0.5 + rng.random::<f64>(),
            ..TrainConfig::new(model.clone())
        };
        let params = init_params(&model, trial).unwrap();
        // An anchor from a different initialization so the stabilization term is active.
        let other = init_params(&model, trial + 1000).unwrap();
        let anchor = AnchorState::from_online(&other, 0.99, AttentionMap::Nsf).unwrap();
        let bag = Bag::new("g", gaussian_matrix(&mut rng, m, d), rng.random_range(0..k)).unwrap();
        let mask = match model.architecture {
            Architecture::Asmil => Some(token_drop_mask(n, 0.5, &mut rng).unwrap()),
            Architecture::Abmil => None,
        };
        let out = loss_and_gradients(
            &bag,
            &params,
            Stabilizer::Anchor(&anchor),
            &cfg,
            mask.as_ref(),
        )
        .unwrap();
        assert!(out.loss.stabilization > 0.0);
        let loss_at = |p: &asmil::model::ParamSet| {
            total_loss(&bag, p, Stabilizer::Anchor(&anchor), &cfg, mask.as_ref())
                .unwrap()
                .total
        };
        // The difference quotient carries rounding error near |L|·ε/h, so a
        // 1e-5 relative error is only resolvable for |g| above 1e5 times that.
        let resolution = 1e5 * out.loss.total.abs() * f64::EPSILON / h;
        for (t, g) in out.grads.0.iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = params.clone();
                plus.tensors_mut().nth(t).unwrap().data_mut()[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut().nth(t).unwrap().data_mut()[i] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let analytic = g.data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-300);
                raw_worst = raw_worst.max((analytic - numeric).abs() / denom);
                let resolved = denom.max(resolution);
                worst = worst.max((analytic - numeric).abs() / resolved);
                checked += 1;
            }
        }
    }
    report(
        1,
        "gradient correctness",
        worst < 1e-5,
        start.elapsed(),
        Duration::from_secs(30),
        format!(
            "max relative error {worst:.2e} over {checked} coordinates \
             ({raw_worst:.2e} without the rounding floor)"
        ),
    );
}

#[test]
fn criterion_02_stabilization_gradient_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..30);
        let z = random_scores(&mut rng, n, 2.0);
        let anchor_alpha = nsf_slice(&random_scores(&mut rng, n, 2.0));
        let mut tape = GradTape::new();
        let zv = tape.leaf(DenseMatrix::row_vector(z.clone()));
        let online = tape.softmax_rows(zv, 1.0).unwrap();
        let target = tape.leaf(DenseMatrix::row_vector(anchor_alpha.clone()));
        let target = tape.stop_gradient(target);
        let loss = stabilization_loss_on_tape(&mut tape, online, target).unwrap();
        let g = tape.backward(loss).unwrap().wrt(zv);
        let alpha = softmax_slice(&z, 1.0);
        for i in 0..n {
            worst = worst.max((g.data()[i] - (alpha[i] - anchor_alpha[i])).abs());
        }
    }
    report(
        2,
        "stabilization gradient identity",
        worst < 1e-10,
        start.elapsed(),
        Duration::from_secs(5),
        format!("max abs error {worst:.2e} over 1000 pairs"),
    );
}

#[test]
fn criterion_03_nsf_bounds_and_softmax_supremum() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let temperatures = [0.25, 0.5, 1.0, 2.0];
    let mut samples = 0;
    let mut violations = 0;
    let mut over_supremum = 0;
    let mut worst_gap: f64 = 0.0;
    for tau in [0.5, 1.0, 2.0, 3.0] {
        for gamma in [0.5, 1.0, 4.0] {
            for high in [1, 3, 5] {
                for low in [1, 5] {
                    let spec = ScoreSetSpec::new(tau, gamma, high, low, 3).unwrap();
                    let sweep = sweep_nsf_bounds(&spec, 1500, &mut rng).unwrap();
                    samples += sweep.samples;
                    violations += sweep.violations;
                    for _ in 0..200 {
                        let z = sample_score_set(&spec, &mut rng).unwrap();
                        for &t in &temperatures {
                            let sup = softmax_low_supremum(tau, t, high).unwrap();
                            let a = softmax_slice(z.as_slice(), t);
                            if a[spec.lows()].iter().any(|&w| w > sup * (1.0 + 1e-12)) {
                                over_supremum += 1;
                            }
                        }
                    }
                    let worst = suppression_worst_case(&spec);
                    for &t in &temperatures {
                        let sup = softmax_low_supremum(tau, t, high).unwrap();
                        let reached = softmax_slice(&worst, t)[spec.high];
                        if reached > sup * (1.0 + 1e-12) {
                            over_supremum += 1;
                        }
                        worst_gap = worst_gap.max(1.0 - reached / sup);
                    }
                }
            }
        }
    }
    report(
        3,
        "score-set bounds",
        samples >= 100_000 && violations == 0 && over_supremum == 0 && worst_gap < 0.01,
        start.elapsed(),
        Duration::from_secs(60),
        format!(
            "{violations} violations in {samples} samples, {over_supremum} supremum breaches, \
             worst case within {:.3}% of supremum",
            100.0 * worst_gap
        ),
    );
}

#[test]
fn criterion_04_single_temperature_infeasibility() {
    let start = Instant::now();
    let spec = ScoreSetSpec::new(1.0, 4.0, 3, 5, 2).unwrap();
    let targets = FeasibilityTargets::nsf_achieved(&spec);
    let r = temperature_feasibility(&spec, &targets).unwrap();
    report(
        4,
        "single-temperature infeasibility",
        !r.feasible && r.grid_feasible == 0 && r.witness.is_some(),
        start.elapsed(),
        Duration::from_secs(30),
        format!(
            "T_min {:.3} vs T_max {:.3}; {} of {} grid temperatures feasible",
            r.t_min,
            r.t_max_sharp,
            r.grid_feasible,
            r.grid.len()
        ),
    );
}

#[test]
fn criterion_05_musk1_benchmark() {
    let start = Instant::now();
    let text = include_str!("data/musk1.bagds");
    let ds = parse_bagds(text).unwrap();
    assert_eq!(
        (ds.bags.len(), ds.dim, ds.class_counts()),
        (92, 166, vec![45, 47])
    );
    let model = ModelConfig::abmil(ds.dim, ds.n_classes);
    let cfg = TrainConfig {
        lr: 5e-4,
        epochs: 40,
        beta: 1.0,
        anchor_map: AttentionMap::Nsf,
        standardize: true,
        probe_bags: 0,
        ..TrainConfig::new(model)
    };
    let split = cv_split(&ds.labels(), 10, 0).unwrap();
    let mut accs = Vec::new();
    for k in 0..10 {
        let (train_idx, test_idx) = split.fold(k);
        let train = ds.subset(&train_idx);
        let test = ds.subset(&test_idx);
        let out = fit(&train, &[], &cfg).unwrap();
        accs.push(out.evaluate(&test).unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let sd =
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt();
    report(
        5,
        "MUSK1 10-fold accuracy",
        mean >= 0.85,
        start.elapsed(),
        Duration::from_secs(600),
        format!("mean accuracy {mean:.3} ± {sd:.3}"),
    );
}

#[test]
fn criterion_06_anchor_reduces_attention_drift() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let data = generate_synthetic(&SyntheticBagSpec {
            n_bags: 200,
            min_instances: 20,
            max_instances: 60,
            dim: 32,
            witness_rate: 0.1,
            signal_shift: 2.0,
            noise_scale: 1.0,
            seed,
        })
        .unwrap()
        .dataset;
        let split = cv_split(&data.labels(), 4, seed).unwrap();
        let (train_idx, test_idx) = split.fold(0);
        let train = data.subset(&train_idx);
        let test = data.subset(&test_idx);
        let model = ModelConfig::asmil(data.dim, data.n_classes);
        let base = TrainConfig {
            lr: 1e-3,
            epochs: 60,
            seed,
            trace_all: true,
            ..TrainConfig::new(model)
        };
        let mut jsd = [0.0; 2];
        let mut auc = [0.0; 2];
        for (i, beta) in [1.0, 0.0].into_iter().enumerate() {
            let out = fit(
                &train,
                &test,
                &TrainConfig {
                    beta,
                    ..base.clone()
                },
            )
            .unwrap();
            jsd[i] = stability_curve(&out.trace, 10).unwrap().final_window_mean;
            auc[i] = out.metrics.last().unwrap().val_macro_auc.unwrap();
        }
        let ok = jsd[0] < jsd[1] && auc[0] >= auc[1] - 0.02;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: JSD {:.2e} vs {:.2e}, AUC {:.3} vs {:.3}",
            jsd[0], jsd[1], auc[0], auc[1]
        ));
    }
    report(
        6,
        "anchor reduces attention drift",
        pass,
        start.elapsed(),
        Duration::from_secs(900),
        lines.join("; "),
    );
}

#[test]
fn criterion_07_token_drop_statistics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let draws = 100_000;
    let mut pass = true;
    let mut lines = Vec::new();
    for (n, b) in [(8usize, 0.5), (16, 0.25)] {
        let total: usize = (0..draws)
            .map(|_| token_drop_mask(n, b, &mut rng).unwrap().kept_count())
            .sum();
        let mean = total as f64 / draws as f64;
        let expected = (1.0 - b) * n as f64;
        let se = (n as f64 * b * (1.0 - b) / draws as f64).sqrt();
        let z = (mean - expected) / se;
        pass &= z.abs() < 3.0;
        lines.push(format!(
            "N={n} B={b}: mean {mean:.4} vs {expected} ({z:+.2} SE)"
        ));
    }
    let cfg = ModelConfig {
        n_tokens: 8,
        ..ModelConfig::asmil(6, 2)
    };
    let params = init_params(&cfg, 7).unwrap();
    let bag = Bag::new("b", gaussian_matrix(&mut rng, 9, 6), 0).unwrap();
    let inference = forward(&bag, &params, None).unwrap();
    let all_kept = forward(&bag, &params, Some(&DropMask::all(8))).unwrap();
    let same = inference == all_kept;
    pass &= same;
    lines.push(format!("full mask matches inference: {same}"));
    report(
        7,
        "token drop statistics",
        pass,
        start.elapsed(),
        Duration::from_secs(10),
        lines.join("; "),
    );
}

#[test]
fn criterion_08_affine_dependence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut flagged = 0;
    let mut worst: f64 = 0.0;
    let mut min_shift = f64::INFINITY;
    for _ in 0..100 {
        let d = rng.random_range(2..12);
        let m = d + rng.random_range(2..10);
        let x = gaussian_matrix(&mut rng, m, d);
        let r = affine_dependence_of(&x, AFFINE_TOLERANCE);
        let Some(w) = r.witness else { continue };
        flagged += 1;
        let alpha = softmax_slice(&random_scores(&mut rng, m, 1.0), 1.0);
        let amin = alpha.iter().copied().fold(f64::MAX, f64::min);
        let pmax = w.psi.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let eps = 0.5 * amin / pmax;
        let alpha2: Vec<f64> = alpha.iter().zip(&w.psi).map(|(a, p)| a + eps * p).collect();
        assert!(alpha2.iter().all(|&a| a > 0.0));
        assert!((alpha2.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pooled = |a: &[f64]| -> Vec<f64> {
            let row = DenseMatrix::row_vector(a.to_vec());
            row.matmul(&x).unwrap().into_data()
        };
        let s1 = softmax_slice(&pooled(&alpha), 1.0);
        let s2 = softmax_slice(&pooled(&alpha2), 1.0);
        for (a, b) in s1.iter().zip(&s2) {
            worst = worst.max((a - b).abs());
        }
        let shift = alpha
            .iter()
            .zip(&alpha2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        min_shift = min_shift.min(shift);
    }
    report(
        8,
        "affine dependence",
        flagged == 100 && worst < 1e-9 && min_shift > 0.0,
        start.elapsed(),
        Duration::from_secs(10),
        format!(
            "{flagged}/100 bags dependent, pooled softmax gap {worst:.1e}, \
             smallest attention change {min_shift:.1e}"
        ),
    );
}

#[test]
fn criterion_09_metric_oracles() {
    let start = Instant::now();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let recs = |t: &[f64], e: &[bool], r: &[f64]| -> Vec<SurvivalRecord> {
        t.iter()
            .zip(e)
            .zip(r)
            .map(|((&time, &event), &risk)| SurvivalRecord { time, event, risk })
            .collect()
    };
    let t = [1.0, 2.0, 3.0];
    let all = [true; 3];
    let checks = [
        (
            "perfect F1",
            close(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0),
        ),
        (
            "mixed F1",
            close(
                macro_f1(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap(),
                (0.8 + 2.0 / 3.0) / 2.0,
            ),
        ),
        (
            "constant F1",
            close(
                macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(),
                1.0 / 3.0,
            ),
        ),
        (
            "perfect AUC",
            macro_auc(
                &[vec![0.1, 0.9], vec![0.8, 0.2], vec![0.3, 0.7]],
                &[1, 0, 1],
                2,
            )
            .unwrap()
            .macro_auc
                == Some(1.0),
        ),
        (
            "tied AUC",
            macro_auc(&vec![vec![0.5, 0.5]; 4], &[0, 1, 0, 1], 2)
                .unwrap()
                .macro_auc
                == Some(0.5),
        ),
        (
            "ranked AUC",
            pairwise_auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]) == Some(0.75),
        ),
        (
            "concordant C-index",
            close(
                c_index(&recs(&t, &all, &[3.0, 2.0, 1.0]), RiskTies::Strict).unwrap(),
                1.0,
            ),
        ),
        (
            "discordant C-index",
            close(
                c_index(&recs(&t, &all, &[1.0, 2.0, 3.0]), RiskTies::Strict).unwrap(),
                0.0,
            ),
        ),
        (
            "censored C-index",
            close(
                c_index(
                    &recs(&t, &[true, false, true], &[3.0, 1.0, 2.0]),
                    RiskTies::Strict,
                )
                .unwrap(),
                1.0,
            ),
        ),
        (
            "tied C-index",
            close(
                c_index(&recs(&t, &all, &[1.0; 3]), RiskTies::Half).unwrap(),
                0.5,
            ),
        ),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        9,
        "metric oracles",
        failed.is_empty(),
        start.elapsed(),
        Duration::from_secs(1),
        if failed.is_empty() {
            format!("{} examples reproduced", checks.len())
        } else {
            format!("mismatches: {}", failed.join(", "))
        },
    );
}

/// Threshold for `Σ [((a−1)/a)(zᵢ − τ)]₊^{1/(a−1)} = 1` by repeated grid refinement.
fn entmax_grid_oracle(z: &[f64], a: f64) -> Vec<f64> {
    let mass = |tau: f64| -> f64 {
        z.iter()
            .map(|&v| (((a - 1.0) / a) * (v - tau)).max(0.0).powf(1.0 / (a - 1.0)))
            .sum()
    };
    let zmax = z.iter().copied().fold(f64::MIN, f64::max);
    let (mut lo, mut hi) = (zmax - 10.0, zmax);
    for _ in 0..12 {
        let steps = 1000;
        let width = (hi - lo) / steps as f64;
        let best = (0..=steps)
            .map(|i| lo + i as f64 * width)
            .min_by(|x, y| (mass(*x) - 1.0).abs().total_cmp(&(mass(*y) - 1.0).abs()))
            .unwrap();
        lo = best - width;
        hi = best + width;
    }
    let tau = 0.5 * (lo + hi);
    z.iter()
        .map(|&v| (((a - 1.0) / a) * (v - tau)).max(0.0).powf(1.0 / (a - 1.0)))
        .collect()
}

#[test]
fn criterion_10_entmax_limits() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut near_softmax: f64 = 0.0;
    let mut sparse_gap: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..20);
        let z = random_scores(&mut rng, n, 1.5);
        let (p, _) = entmax_slice(&z, 1.0001, ENTMAX_TOLERANCE).unwrap();
        let s = softmax_slice(&z, 1.0);
        for (a, b) in p.iter().zip(&s) {
            near_softmax = near_softmax.max((a - b).abs());
        }
        let (p, _) = entmax_slice(&z, 2.0, ENTMAX_TOLERANCE).unwrap();
        let oracle = entmax_grid_oracle(&z, 2.0);
        for (a, b) in p.iter().zip(&oracle) {
            sparse_gap = sparse_gap.max((a - b).abs());
        }
    }
    report(
        10,
        "entmax limits",
        near_softmax < 1e-3 && sparse_gap < 1e-6,
        start.elapsed(),
        Duration::from_secs(10),
        format!("a=1.0001 vs softmax {near_softmax:.1e}, a=2 vs grid oracle {sparse_gap:.1e}"),
    );
}
