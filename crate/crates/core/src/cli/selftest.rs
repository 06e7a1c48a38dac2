//! Quick invariant checks across the pipeline, run by the `selftest` subcommand.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{chi_square_sf, glm_fit, kmeans};
use crate::autodiff::{grad_check, Mode, Tape, Tensor};
use crate::fcgraph::io::{decode_dfcg, encode_dfcg};
use crate::fcgraph::{build_dynamic_graph, RoiTimeseries, WindowConfig};
use crate::stagin::{
    checkpoint::{decode_checkpoint, encode_checkpoint}, composite_loss, forward, predict, Bound, ModelConfig, ModelState, Readout,
    Sample,
};
use crate::train::{auroc, one_cycle_lr, stratified_kfold, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn random_series(rng: &mut ChaCha8Rng, n: usize, t: usize) -> RoiTimeseries {
    let values = (0..n * t).map(|_| rng.random_range(-1.0..1.0)).collect();
    RoiTimeseries::unlabeled(n, t, values, 1.0).expect("valid series")
}

fn small_windows() -> WindowConfig {
    WindowConfig {
        gamma: 5,
        stride: 4,
        edge_percentile: 30.0,
    }
}

fn small_model(readout: Readout) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 8,
        readout,
        lambda_ortho: 0.3,
        dropout_rep: 0.0,
        dropout_attn: 0.0,
        ..ModelConfig::new(4, 2)
    }
}

fn loss_gradients(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<_> = (0..2)
        .map(|_| {
            let ts = random_series(&mut rng, 4, 13);
            let g = build_dynamic_graph(&ts, &small_windows()).expect("graph");
            (ts, g)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for readout in [Readout::Sero, Readout::Garo, Readout::Mean] {
        let mut state = ModelState::init(small_model(readout), &mut rng);
        for layer in 0..2 {
            state.params.get_mut(&format!("gin.{layer}.eps")).expect("eps").data_mut()[0] = 0.15 + 0.1 * layer as f64;
        }
        let batch: Vec<Sample> = data.iter().map(|(s, g)| Sample { series: s, graph: g }).collect();
        let err = grad_check(
            |tape, vars| {
                let bound = Bound::from_vars(&state.params, vars.to_vec());
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let pass = forward(tape, &state, &bound, &batch, Mode::Train, &mut rng).expect("forward");
                Ok(composite_loss(tape, &pass, &[0, 1], 0.3).expect("loss").0)
            },
            state.params.tensors(),
            1e-6,
        );
        worst = worst.max(err.unwrap_or(f64::INFINITY));
    }
    check("loss gradients", worst < 1e-4, format!("max relative error {worst:.2e}"))
}

fn primitive_gradients(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0));
    let err = grad_check(
        |tape, v| {
            let m = tape.matmul(v[0], v[1])?;
            let g = tape.gelu(m);
            let s = tape.softmax_last(g);
            let t = tape.tanh(s);
            Ok(tape.sum_all(t))
        },
        &[a, b],
        1e-6,
    )
    .unwrap_or(f64::INFINITY);
    check("primitive gradients", err < 1e-4, format!("max relative error {err:.2e}"))
}

fn attention_stochastic(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut in_range = true;
    for i in 0..20 {
        let readout = [Readout::Sero, Readout::Garo][i % 2];
        let state = ModelState::init(small_model(readout), &mut rng);
        let ts = random_series(&mut rng, 4, 21);
        let g = build_dynamic_graph(&ts, &small_windows()).expect("graph");
        let p = predict(&state, &ts, &g).expect("predict");
        for row in p.record.z_time.chunks(p.record.n_steps) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        in_range &= p.record.z_space.iter().all(|z| (0.0..=1.0).contains(z));
    }
    check(
        "attention stochasticity",
        worst < 1e-5 && in_range,
        format!("max row-sum deviation {worst:.2e}, node attention in [0, 1]: {in_range}"),
    )
}

fn ortho_zero(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Columns of a scaled permutation matrix are orthogonal with equal norms.
    let n = 6;
    let scale = rng.random_range(0.5..3.0);
    let h = Tensor::from_fn(&[1, n, n], |i| if (i / n + 1) % n == i % n { scale } else { 0.0 });
    let mut tape = Tape::new();
    let v = tape.constant(h);
    let value = crate::stagin::layers::ortho_loss(&mut tape, v)
        .ok()
        .flatten()
        .map_or(f64::NAN, |l| tape.value(l).item());
    check("orthogonal penalty", value.abs() < 1e-10, format!("penalty {value:.2e} on orthogonal columns"))
}

fn auroc_brute(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..20);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8))).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        pos[0] = true;
        pos[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| pos[i]) {
            for j in (0..n).filter(|&j| !pos[j]) {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        if auroc(&scores, &pos).ok() != Some(wins / pairs) {
            mismatches += 1;
        }
    }
    check("AUROC vs all pairs", mismatches == 0, format!("{mismatches} mismatches in 200 instances"))
}

fn glm_normal_equations(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, n) = (30, 5);
    let design: Vec<f64> = (0..t).flat_map(|i| if (i / 5) % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let attn: Vec<f64> = (0..t * n).map(|_| rng.random()).collect();
    let fit = glm_fit(&attn, t, n, &design);
    // With indicator columns the least-squares coefficients are the group means.
    let mut worst: f64 = if fit.is_ok() { 0.0 } else { f64::INFINITY };
    if let Ok(fit) = fit {
        for r in 0..n {
            for (col, on) in [(0, 1.0), (1, 0.0)] {
                let rows: Vec<usize> = (0..t).filter(|&i| design[2 * i] == on).collect();
                let mean = rows.iter().map(|&i| attn[i * n + r]).sum::<f64>() / rows.len() as f64;
                worst = worst.max((fit.beta[col * n + r] - mean).abs());
            }
        }
    }
    check("GLM vs normal equations", worst < 1e-8, format!("max coefficient error {worst:.2e}"))
}

fn kmeans_monotone(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..120).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut ok = true;
    for k in [2, 3, 5, 7] {
        match kmeans(&samples, k, seed + k as u64, 100) {
            Ok(r) => ok &= r.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-12),
            Err(_) => ok = false,
        }
    }
    check("k-means inertia", ok, "non-increasing for k in {2, 3, 5, 7}".to_string())
}

fn chi_square_reference() -> CheckOutcome {
    // Closed form for two degrees of freedom: exp(-x / 2).
    let worst = [0.5, 1.0, 3.0, 6.0, 10.0]
        .iter()
        .map(|&x: &f64| (chi_square_sf(x, 2) - (-x / 2.0).exp()).abs())
        .fold(0.0, f64::max);
    check("chi-square tail", worst < 1e-10, format!("max deviation {worst:.2e} at 2 dof"))
}

fn formats_round_trip(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = ModelState::init(small_model(Readout::Sero), &mut rng);
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), serde_json::json!(seed));
    let bytes = encode_checkpoint(&state, &meta);
    let ckpt = decode_checkpoint(&bytes).is_ok_and(|(s, _)| encode_checkpoint(&s, &meta) == bytes);
    let ts = random_series(&mut rng, 6, 40);
    let g = build_dynamic_graph(&ts, &WindowConfig {
        gamma: 10,
        ..WindowConfig::default()
    }).expect("graph");
    let dfcg = decode_dfcg(&encode_dfcg(&g)).is_ok_and(|d| d == g);
    check(
        "checkpoint and DFCG round trip",
        ckpt && dfcg,
        format!("checkpoint {ckpt}, dfcg {dfcg}"),
    )
}

fn schedule_and_folds(seed: u64) -> CheckOutcome {
    let cfg = TrainConfig::default();
    let total = 300;
    let lr: Vec<f64> = (0..total).filter_map(|s| one_cycle_lr(s, total, &cfg).ok()).collect();
    let peak = lr.iter().copied().fold(0.0, f64::max);
    let lr_ok = (lr[0] - cfg.lr_base).abs() < 1e-12
        && (peak - cfg.lr_peak).abs() < 1e-12
        && (lr[total - 1] - cfg.lr_final).abs() < 1e-12;
    let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
    let folds_ok = stratified_kfold(&labels, 2, 5, seed).is_ok_and(|s| {
        let mut seen: Vec<usize> = s.folds.iter().flat_map(|f| f.test.iter().copied()).collect();
        seen.sort_unstable();
        seen == (0..50).collect::<Vec<_>>() && s.folds.iter().all(|f| f.test_counts == vec![5, 5])
    });
    check(
        "schedule and folds",
        lr_ok && folds_ok,
        format!("one-cycle endpoints {lr_ok}, stratified partition {folds_ok}"),
    )
}

fn window_count() -> CheckOutcome {
    let cfg = WindowConfig::default();
    let count = cfg.window_count(1200);
    check("window count", count == 383, format!("{count} windows on 1200 timepoints"))
}

/// Runs every check; all are deterministic for a given seed.
pub fn selftest(seed: u64) -> Vec<CheckOutcome> {
    vec![
        primitive_gradients(seed),
        loss_gradients(seed),
        attention_stochastic(seed),
        ortho_zero(seed),
        auroc_brute(seed),
        glm_normal_equations(seed),
        kmeans_monotone(seed),
        chi_square_reference(),
        formats_round_trip(seed),
        schedule_and_folds(seed),
        window_count(),
    ]
}
