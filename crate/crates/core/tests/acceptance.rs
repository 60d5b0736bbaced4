//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) and then asserts. Tests hold a shared lock so the
//! measured runtimes are not inflated by each other.
//!
//! The full-length synthetic run (criterion 7 at L = 672) takes hours on a
//! single core and is `#[ignore]`d; run it with
//! `cargo test --release -p toa-core --test acceptance -- --ignored`.

use std::io::Write as _;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toa_core::attention::{backward, forward_head, forward_head_with_drops, forward_multihead};
use toa_core::operators::{
    build_harmonic_continuation, build_latent_demixing, collapse_probe, fit_softmax_baseline, realization_error,
    realize_with_toa, square_suite, CanonicalOperator, CaseLabel, GapConfig,
};
use toa_core::synthetic::{
    extract_operator, regime_examples, train, ModelConfig, SyntheticSpec, TrainConfig, TrainOutcome,
};
use toa_core::tensor::{grad_check, softmax_rows, DEFAULT_FD_STEP};
use toa_core::{sor, HeadParams, Matrix, MultiHeadParams, SorConfig, SorState, ToaVariant};

// Tolerances, pinned.
const COLLAPSE_TOL: f64 = 1e-8;
const INVARIANT_TOL: f64 = 1e-9;
const CLOSED_FORM_TOL: f64 = 1e-12;
const REALIZATION_TOL: f64 = 1e-10;
const GAP_MIN_REL_ERROR: f64 = 0.1;
const GRAD_REL_TOL: f64 = 1e-4;
const SOR_MEAN_SIGMAS: f64 = 3.0;
const SOR_VAR_REL_TOL: f64 = 0.05;
const SHORT_GAP_RATIO: f64 = 3.0;
const FULL_GAP_RATIO: f64 = 5.0;
const FULL_RELU_RATIO: f64 = 1.5;
const FULL_GATED_ABS: f64 = 0.02;
const NEGATIVE_WITNESS: f64 = -1e-3;
const SOR_ABLATION_RATIO: f64 = 1.1;
const REDUCTION_TOL: f64 = 1e-12;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Prints the verdict line, then fails the test if the criterion failed.
fn verdict(n: &str, passed: bool, elapsed: Duration, budget_s: f64, detail: &str) {
    let in_time = elapsed.as_secs_f64() < budget_s;
    let ok = passed && in_time;
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n}: {} {detail} [{:.1}s, budget {budget_s}s{}]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        if in_time { "" } else { ", over budget" }
    );
    assert!(ok, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_01_simplex_collapse() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..50 {
        let mut r = rng(seed);
        let head = HeadParams::init(ToaVariant::SoftmaxBaseline, 12, 6, 4, 3, 0.0, &mut r);
        let h = Matrix::random_normal(12, 6, 3.0, &mut r);
        let point = &collapse_probe(&head, &h, &[1e-6]).unwrap()[0];
        worst = worst.max(point.max_deviation);
    }
    verdict(
        "1",
        worst < COLLAPSE_TOL,
        t.elapsed(),
        5.0,
        &format!("max |kernel − 1/N| at α=1e-6 over 50 seeds = {worst:.3e} (< {COLLAPSE_TOL:e})"),
    );
}

fn max_abs_row_sum(m: &Matrix) -> f64 {
    m.row_sums().iter().fold(0.0, |a, s| a.max(s.abs()))
}

#[test]
fn criterion_02_canonical_invariants() {
    let _g = serial();
    let t = Instant::now();
    let suite = square_suite().unwrap();
    let mut zero_sum: Vec<&CanonicalOperator> = suite
        .iter()
        .filter(|op| {
            matches!(
                op.case_label,
                CaseLabel::HarmonicContinuation | CaseLabel::Residualization | CaseLabel::LocalQuadrature
            )
        })
        .collect();
    let rectangular = build_harmonic_continuation(48, 12, &[24.0, 8.0]).unwrap();
    zero_sum.push(&rectangular);
    let row_sum = zero_sum
        .iter()
        .map(|op| max_abs_row_sum(&op.matrix))
        .fold(0.0, f64::max);

    let mut idem = 0.0_f64;
    let mut sym = 0.0_f64;
    for op in suite.iter().filter(|op| op.case_label == CaseLabel::LatentDemixing) {
        let p = &op.matrix;
        idem = idem.max(p.matmul(p).unwrap().max_abs_diff(p).unwrap());
        sym = sym.max(p.transpose().max_abs_diff(p).unwrap());
    }
    let p = build_latent_demixing(&Matrix::column_vector(&[1.0, -1.0]))
        .unwrap()
        .matrix;
    let closed = Matrix::from_rows(&[[0.5, -0.5], [-0.5, 0.5]]).unwrap();
    let closed_err = p.max_abs_diff(&closed).unwrap();

    verdict(
        "2",
        row_sum <= INVARIANT_TOL && idem <= INVARIANT_TOL && sym <= INVARIANT_TOL && closed_err <= CLOSED_FORM_TOL,
        t.elapsed(),
        5.0,
        &format!(
            "A/B/E max |row sum| = {row_sum:.2e}; C ‖P²−P‖∞ = {idem:.2e}, ‖Pᵀ−P‖∞ = {sym:.2e}; \
             C closed form error = {closed_err:.2e}"
        ),
    );
}

#[test]
fn criterion_03_realization_exactness() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0_f64;
    let mut count = 0;
    for (i, op) in square_suite().unwrap().iter().enumerate() {
        let r = realize_with_toa(op).unwrap();
        let err = realization_error(op, &r, 100, 1000 + i as u64)
            .unwrap()
            .expect("square operators realize");
        worst = worst.max(err);
        count += 1;
    }
    verdict(
        "3",
        worst <= REALIZATION_TOL,
        t.elapsed(),
        10.0,
        &format!("{count} square operators × 100 vectors, max abs error = {worst:.2e} (≤ {REALIZATION_TOL:e})"),
    );
}

#[test]
fn criterion_04_impossibility_gap() {
    let _g = serial();
    let t = Instant::now();
    let cfg = GapConfig::default();
    assert_eq!((cfg.steps, cfg.restarts), (2000, 5));
    let mut min_baseline = f64::INFINITY;
    let mut max_toa = 0.0_f64;
    for (i, op) in square_suite().unwrap().iter().enumerate() {
        let fit = fit_softmax_baseline(
            op,
            &GapConfig {
                seed: 40 + i as u64,
                ..cfg
            },
        )
        .unwrap();
        min_baseline = min_baseline.min(fit.best_rel_error);
        let r = realize_with_toa(op).unwrap();
        max_toa = max_toa.max(realization_error(op, &r, 100, 7).unwrap().unwrap());
    }
    verdict(
        "4",
        min_baseline >= GAP_MIN_REL_ERROR && max_toa <= REALIZATION_TOL,
        t.elapsed(),
        300.0,
        &format!("smallest softmax best-fit relative error = {min_baseline:.3}; largest TOA error = {max_toa:.2e}"),
    );
}

/// Worst relative error over every parameter and the input of one layer,
/// with the SOR masks of the first forward replayed for each probe.
fn layer_grad_error(variant: ToaVariant, sor_cfg: SorConfig, seed: u64) -> f64 {
    let p = MultiHeadParams::init(variant, 6, 4, 2, 3, 2, 0.2, &mut rng(seed));
    let h = Matrix::random_normal(6, 4, 1.0, &mut rng(seed + 1));
    let upstream = Matrix::random_normal(6, 4, 1.0, &mut rng(seed + 2));
    let (_, cache) = forward_multihead(&h, &p, &mut SorState::new(sor_cfg)).unwrap();
    let (grads, dh) = backward(&upstream, &cache, &p).unwrap();

    let replay = |params: &MultiHeadParams, input: &Matrix| {
        let blocks: Vec<Matrix> = params
            .heads
            .iter()
            .zip(cache.heads())
            .map(|(hp, hc)| forward_head_with_drops(input, hp, variant, hc.drops()).map(|(o, _)| o))
            .collect::<toa_core::Result<_>>()?;
        Matrix::hstack(&blocks)?
            .matmul(&params.w_o)?
            .hadamard(&upstream)
            .map(|m| m.sum())
    };

    let grad_list: Vec<Matrix> = grads.named_params().into_iter().map(|(_, m)| m.clone()).collect();
    let mut worst = 0.0_f64;
    for (idx, g) in grad_list.iter().enumerate() {
        let point = p.named_params()[idx].1.clone();
        let report = grad_check(
            |m: &Matrix| {
                let mut q = p.clone();
                *q.params_mut()[idx] = m.clone();
                replay(&q, &h)
            },
            &point,
            g,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    let report = grad_check(|m: &Matrix| replay(&p, m), &h, &dh, DEFAULT_FD_STEP).unwrap();
    worst.max(report.max_rel_error)
}

#[test]
fn criterion_05_gradient_suite() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for (i, v) in ToaVariant::ALL.into_iter().enumerate() {
        let configs = [
            SorConfig::disabled(),
            SorConfig {
                seed: 11,
                ..SorConfig::default()
            },
            SorConfig {
                seed: 12,
                shared_p: false,
                ..SorConfig::default()
            },
        ];
        for (j, cfg) in configs.into_iter().enumerate() {
            worst = worst.max(layer_grad_error(v, cfg, 500 + 10 * i as u64 + j as u64));
            cases += 1;
        }
    }
    verdict(
        "5",
        worst < GRAD_REL_TOL,
        t.elapsed(),
        120.0,
        &format!("{cases} variant/SOR configurations, max relative error = {worst:.2e} (< {GRAD_REL_TOL:e})"),
    );
}

#[test]
fn criterion_06_sor_statistics() {
    let _g = serial();
    let t = Instant::now();
    let m = Matrix::from_rows(&[[0.8, -1.3, 0.05], [2.0, -0.4, 1.1]]).unwrap();
    let draws = 100_000;
    let mut worst_sigmas = 0.0_f64;
    let mut worst_var = 0.0_f64;
    for (k, p) in [0.1, 0.5, 0.9].into_iter().enumerate() {
        let mut state = SorState::for_stream(
            SorConfig {
                seed: 77,
                ..SorConfig::default()
            },
            k as u64,
        );
        let mut sum = Matrix::zeros(2, 3);
        let mut sum_sq = Matrix::zeros(2, 3);
        for _ in 0..draws {
            let mask = state.sample_mask_with_rate(p, 2, 3);
            let x = sor::apply(&m, p, &mask).unwrap();
            sum.add_scaled_assign(&x, 1.0).unwrap();
            sum_sq.add_scaled_assign(&x.hadamard(&x).unwrap(), 1.0).unwrap();
        }
        let n = draws as f64;
        for (idx, &mv) in m.data().iter().enumerate() {
            let mean = sum.data()[idx] / n;
            let var = sum_sq.data()[idx] / n - mean * mean;
            let law = p / (1.0 - p) * mv * mv;
            worst_sigmas = worst_sigmas.max((mean - mv).abs() / (law / n).sqrt());
            worst_var = worst_var.max((var - law).abs() / law);
        }
    }
    verdict(
        "6",
        worst_sigmas <= SOR_MEAN_SIGMAS && worst_var <= SOR_VAR_REL_TOL,
        t.elapsed(),
        30.0,
        &format!(
            "p ∈ {{0.1, 0.5, 0.9}}, 10⁵ masks: worst mean offset = {worst_sigmas:.2}σ, \
             worst variance deviation = {:.2}%",
            100.0 * worst_var
        ),
    );
}

struct SyntheticRuns {
    data: SyntheticSpec,
    baseline: TrainOutcome,
    gated: TrainOutcome,
    relu: Option<TrainOutcome>,
    elapsed: Duration,
}

/// Trains each variant with SOR off (see README) at the given budget.
fn synthetic_runs(data: SyntheticSpec, budget: &TrainConfig, with_relu: bool) -> SyntheticRuns {
    let t = Instant::now();
    let run = |v: ToaVariant| {
        let cfg = ModelConfig {
            sor: SorConfig::disabled(),
            ..ModelConfig::new(v)
        };
        train(&cfg, budget, &data).unwrap()
    };
    let baseline = run(ToaVariant::SoftmaxBaseline);
    let gated = run(ToaVariant::ToaGated);
    let relu = with_relu.then(|| run(ToaVariant::ToaRelu));
    SyntheticRuns {
        data,
        baseline,
        gated,
        relu,
        elapsed: t.elapsed(),
    }
}

fn short_runs() -> &'static SyntheticRuns {
    static RUNS: OnceLock<SyntheticRuns> = OnceLock::new();
    RUNS.get_or_init(|| synthetic_runs(SyntheticSpec::short(), &TrainConfig::short(), false))
}

#[test]
fn criterion_07_synthetic_gap_short() {
    let _g = serial();
    let runs = short_runs();
    let (b, g) = (runs.baseline.final_eval_mse, runs.gated.final_eval_mse);
    verdict(
        "7 (short, L=96)",
        b >= SHORT_GAP_RATIO * g,
        runs.elapsed,
        180.0,
        &format!(
            "eval MSE baseline = {b:.4}, toa-gated = {g:.4}, ratio = {:.2} (≥ {SHORT_GAP_RATIO})",
            b / g
        ),
    );
}

#[test]
#[ignore = "hours on a single core; run explicitly with --ignored"]
fn criterion_07_synthetic_gap_full() {
    let _g = serial();
    let runs = synthetic_runs(SyntheticSpec::default(), &TrainConfig::default(), true);
    let (b, g) = (runs.baseline.final_eval_mse, runs.gated.final_eval_mse);
    let r = runs.relu.as_ref().unwrap().final_eval_mse;
    verdict(
        "7 (full, L=672)",
        b >= FULL_GAP_RATIO * g && r <= FULL_RELU_RATIO * g && g <= FULL_GATED_ABS,
        runs.elapsed,
        1800.0,
        &format!("eval MSE baseline = {b:.4}, toa-relu = {r:.4}, toa-gated = {g:.4}"),
    );
    negative_witness("8 (full, L=672)", &runs);
}

fn negative_witness(label: &str, runs: &SyntheticRuns) {
    let t = Instant::now();
    let probes = regime_examples(&runs.data).unwrap();
    let min_over = |o: &TrainOutcome| {
        probes
            .iter()
            .flat_map(|s| extract_operator(&o.model, &s.noisy).unwrap())
            .map(|e| e.matrix.min_entry())
            .fold(f64::INFINITY, f64::min)
    };
    let (gated_min, baseline_min) = (min_over(&runs.gated), min_over(&runs.baseline));
    verdict(
        label,
        gated_min < NEGATIVE_WITNESS && baseline_min >= NEGATIVE_WITNESS,
        t.elapsed(),
        60.0,
        &format!("min operator entry toa-gated = {gated_min:.3e}, baseline = {baseline_min:.3e}"),
    );
}

#[test]
fn criterion_08_negative_weight_witness() {
    let _g = serial();
    negative_witness("8 (short, L=96)", short_runs());
}

#[test]
fn criterion_09_sor_ablation() {
    let _g = serial();
    let t = Instant::now();
    let mut ratios = Vec::new();
    for seed in 0..3u64 {
        let data = SyntheticSpec {
            noise_sigma: 1.0,
            seed: 900 + seed,
            ..SyntheticSpec::short()
        };
        let budget = TrainConfig {
            seed,
            train_samples: Some(64),
            eval_every: 0,
            ..TrainConfig::short()
        };
        let mse = |on: bool| {
            let sor = if on {
                SorConfig {
                    seed,
                    ..SorConfig::default()
                }
            } else {
                SorConfig::disabled()
            };
            let cfg = ModelConfig {
                sor,
                ..ModelConfig::new(ToaVariant::ToaRelu)
            };
            train(&cfg, &budget, &data).unwrap().final_eval_mse
        };
        let (with, without) = (mse(true), mse(false));
        ratios.push(with / without);
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    verdict(
        "9",
        worst <= SOR_ABLATION_RATIO,
        t.elapsed(),
        1200.0,
        &format!("σ = 1.0, toa-relu SOR/no-SOR eval MSE ratios = {ratios:.3?} (each ≤ {SOR_ABLATION_RATIO})"),
    );
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// The pre-operator ancestor of each variant, built from scratch.
fn ancestor(h: &Matrix, head: &HeadParams, variant: ToaVariant) -> Matrix {
    let scale = 1.0 / (head.w_q.rows() as f64).sqrt();
    let scores = |wq: &Matrix, wk: &Matrix| {
        let q = h.matmul_nt(wq).unwrap();
        let k = h.matmul_nt(wk).unwrap();
        q.matmul_nt(&k).unwrap().scale(scale)
    };
    let a = scores(&head.w_q, &head.w_k);
    let kernel = match variant {
        ToaVariant::SoftmaxBaseline | ToaVariant::ToaSoftmax => softmax_rows(&a),
        ToaVariant::ToaRelu => Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)].max(0.0)),
        ToaVariant::ToaGated => {
            let gate = head.gate.as_ref().unwrap();
            let r = scores(&gate.w_q_right, &gate.w_k_right);
            Matrix::from_fn(a.rows(), a.cols(), |i, j| softplus(r[(i, j)]) * a[(i, j)].max(0.0))
        }
    };
    kernel.matmul(&h.matmul_nt(&head.w_v).unwrap()).unwrap()
}

#[test]
fn criterion_10_zero_offset_reduction() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0_f64;
    for v in [ToaVariant::ToaSoftmax, ToaVariant::ToaRelu, ToaVariant::ToaGated] {
        for trial in 0..100u64 {
            let mut r = rng(3000 + trial);
            let head = HeadParams::init(v, 10, 5, 4, 3, 0.0, &mut r);
            assert_eq!(head.m1.max_abs() + head.m2.max_abs(), 0.0);
            if let Some(g) = &head.gate {
                assert_eq!(g.m1_right.max_abs(), 0.0);
            }
            let h = Matrix::random_normal(10, 5, 1.0, &mut r);
            let (out, _) = forward_head(&h, &head, v, &mut SorState::disabled()).unwrap();
            worst = worst.max(out.max_abs_diff(&ancestor(&h, &head, v)).unwrap());
        }
    }
    verdict(
        "10",
        worst <= REDUCTION_TOL,
        t.elapsed(),
        5.0,
        &format!("300 inputs over 3 TOA variants, max |TOA − ancestor| = {worst:.2e} (≤ {REDUCTION_TOL:e})"),
    );
}
