//! Named theory probes with measured values and pass/fail verdicts.
//!
//! Each probe builds its operators, measures the invariants that the theory
//! predicts, and records every measurement next to the threshold it was
//! judged against.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{HeadParams, ToaVariant};
use crate::error::{Error, Result};
use crate::operators::{
    build_gaussian_residual, build_harmonic_continuation, build_latent_demixing, build_local_quadrature,
    build_moving_average_residual, build_phase_warped, build_quadrature_projector, collapse_probe,
    fit_softmax_baseline, realization_error, realize_with_variant, simplex_report, square_suite, CanonicalOperator,
    GapConfig,
};
use crate::synthetic::{time_warp, Regime};
use crate::tensor::{rank, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCheck {
    pub name: String,
    pub measured: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub passed: bool,
}

impl ProbeCheck {
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            relation: Relation::AtMost,
            threshold,
            passed: measured <= threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            relation: Relation::AtLeast,
            threshold,
            passed: measured >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: Probe,
    pub checks: Vec<ProbeCheck>,
    /// Extra measurements that are reported but not judged.
    pub details: serde_json::Value,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    Prop1,
    CaseA,
    CaseB,
    CaseC,
    CaseD,
    CaseE,
    Realization,
    Gap,
}

impl Probe {
    pub const ALL: [Probe; 8] = [
        Probe::Prop1,
        Probe::CaseA,
        Probe::CaseB,
        Probe::CaseC,
        Probe::CaseD,
        Probe::CaseE,
        Probe::Realization,
        Probe::Gap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Probe::Prop1 => "prop1",
            Probe::CaseA => "caseA",
            Probe::CaseB => "caseB",
            Probe::CaseC => "caseC",
            Probe::CaseD => "caseD",
            Probe::CaseE => "caseE",
            Probe::Realization => "realization",
            Probe::Gap => "gap",
        }
    }
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Probe::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown probe {s:?}")))
    }
}

/// Settings shared by the probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub collapse_seeds: u64,
    pub realization_trials: usize,
    pub gap: GapConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            collapse_seeds: 50,
            realization_trials: 100,
            gap: GapConfig::default(),
        }
    }
}

pub const COLLAPSE_ALPHAS: [f64; 6] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-6];

pub fn run(probe: Probe, cfg: &ProbeConfig) -> Result<ProbeReport> {
    match probe {
        Probe::Prop1 => prop1(cfg),
        Probe::CaseA => case_a(),
        Probe::CaseB => case_b(),
        Probe::CaseC => case_c(),
        Probe::CaseD => case_d(),
        Probe::CaseE => case_e(),
        Probe::Realization => realization(cfg),
        Probe::Gap => gap(cfg),
    }
}

fn max_abs_row_sum(m: &Matrix) -> f64 {
    m.row_sums().iter().fold(0.0_f64, |a, s| a.max(s.abs()))
}

fn non_simplex_rows(m: &Matrix) -> f64 {
    simplex_report(m).violating_rows().len() as f64
}

fn idempotence_error(p: &Matrix) -> Result<f64> {
    p.matmul(p)?.max_abs_diff(p)
}

fn symmetry_error(p: &Matrix) -> Result<f64> {
    p.max_abs_diff(&p.transpose())
}

fn prop1(cfg: &ProbeConfig) -> Result<ProbeReport> {
    let (n, d) = (8, 6);
    let mut worst = vec![0.0_f64; COLLAPSE_ALPHAS.len()];
    for seed in 0..cfg.collapse_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = HeadParams::init(ToaVariant::SoftmaxBaseline, n, d, 4, 1, 0.0, &mut rng);
        let h = Matrix::random_normal(n, d, 1.0, &mut rng);
        for (w, point) in worst.iter_mut().zip(collapse_probe(&head, &h, &COLLAPSE_ALPHAS)?) {
            *w = w.max(point.max_deviation);
        }
    }
    let increases = worst.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(ProbeReport {
        probe: Probe::Prop1,
        checks: vec![
            ProbeCheck::at_most(
                "max |a_mn - 1/N| at alpha=1e-6 over all seeds",
                worst[worst.len() - 1],
                1e-8,
            ),
            ProbeCheck::at_most("deviation increases as alpha shrinks", increases as f64, 0.0),
        ],
        details: serde_json::json!({
            "seeds": cfg.collapse_seeds,
            "alphas": COLLAPSE_ALPHAS,
            "max_deviation": worst,
        }),
    })
}

fn case_a() -> Result<ProbeReport> {
    let small = build_harmonic_continuation(24, 8, &[24.0, 8.0])?;
    let full_length = build_harmonic_continuation(672, 96, &[24.0, 84.0, 168.0])?;
    Ok(ProbeReport {
        probe: Probe::CaseA,
        checks: vec![
            ProbeCheck::at_most("max |row sum| (L=24)", max_abs_row_sum(&small.matrix), 1e-9),
            ProbeCheck::at_most("max |row sum| (L=672)", max_abs_row_sum(&full_length.matrix), 1e-9),
            ProbeCheck::at_least("rows outside simplex (L=672)", non_simplex_rows(&full_length.matrix), 1.0),
        ],
        details: serde_json::json!({ "min_entry_l672": full_length.matrix.min_entry() }),
    })
}

fn case_b() -> Result<ProbeReport> {
    let ma = build_moving_average_residual(5, 3)?;
    let gauss = build_gaussian_residual(16, 2.0)?;
    let want_ma = Matrix::from_fn(5, 5, |i, j| {
        let dist = (i as isize - j as isize).rem_euclid(5);
        match dist {
            0 => 2.0 / 3.0,
            1 | 4 => -1.0 / 3.0,
            _ => 0.0,
        }
    });
    Ok(ProbeReport {
        probe: Probe::CaseB,
        checks: vec![
            ProbeCheck::at_most("moving average: max |row sum|", max_abs_row_sum(&ma.matrix), 1e-9),
            ProbeCheck::at_most(
                "moving average: closed form error",
                ma.matrix.max_abs_diff(&want_ma)?,
                1e-12,
            ),
            ProbeCheck::at_most("gaussian: max |row sum|", max_abs_row_sum(&gauss.matrix), 1e-9),
            ProbeCheck::at_most("gaussian: min entry", gauss.matrix.min_entry(), 0.0),
        ],
        details: serde_json::Value::Null,
    })
}

fn case_c() -> Result<ProbeReport> {
    let pair = build_latent_demixing(&Matrix::column_vector(&[1.0, -1.0]))?;
    let closed = Matrix::from_rows(&[[0.5, -0.5], [-0.5, 0.5]])?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let generic = build_latent_demixing(&Matrix::random_normal(6, 2, 1.0, &mut rng))?;
    Ok(ProbeReport {
        probe: Probe::CaseC,
        checks: vec![
            ProbeCheck::at_most("A=(1,-1): closed form error", pair.matrix.max_abs_diff(&closed)?, 1e-12),
            ProbeCheck::at_most(
                "random 6x2: idempotence error",
                idempotence_error(&generic.matrix)?,
                1e-9,
            ),
            ProbeCheck::at_most("random 6x2: symmetry error", symmetry_error(&generic.matrix)?, 1e-9),
            ProbeCheck::at_least(
                "random 6x2: rows outside simplex",
                non_simplex_rows(&generic.matrix),
                1.0,
            ),
        ],
        details: serde_json::Value::Null,
    })
}

fn case_d() -> Result<ProbeReport> {
    let (l, t, periods) = (48, 8, [16.0, 12.0]);
    let mut checks = Vec::new();
    let mut ranks = serde_json::Map::new();
    for regime in [Regime::Vibrato, Regime::Chirp] {
        let phase = 0.7;
        let op = build_phase_warped(l, t, &periods, phase, regime)?;
        let signal = |i: usize| {
            let tau = time_warp(i as f64, regime, l);
            periods
                .iter()
                .map(|p| (std::f64::consts::TAU / p * tau + phase).cos())
                .sum::<f64>()
        };
        let x = Matrix::column_vector(&(0..l).map(signal).collect::<Vec<_>>());
        let want = Matrix::column_vector(&(l..l + t).map(signal).collect::<Vec<_>>());
        checks.push(ProbeCheck::at_most(
            format!("{regime}: continuation error on in-span signal"),
            op.matrix.matmul(&x)?.max_abs_diff(&want)?,
            1e-8,
        ));
        checks.push(ProbeCheck::at_least(
            format!("{regime}: rows outside simplex"),
            non_simplex_rows(&op.matrix),
            1.0,
        ));
        ranks.insert(regime.to_string(), rank(&op.matrix, 1e-9).into());
    }
    Ok(ProbeReport {
        probe: Probe::CaseD,
        checks,
        details: serde_json::json!({ "operator_rank": ranks }),
    })
}

fn case_e() -> Result<ProbeReport> {
    let op = build_local_quadrature(32, 15.0, 8.0, std::f64::consts::TAU / 6.0, 0.4)?;
    let psi = [1.0, -1.0, 1.0, -1.0];
    let hand = build_quadrature_projector(&psi, &[1.0, 1.0, -1.0, -1.0])?;
    let fixed = hand.matrix.matmul(&Matrix::column_vector(&psi))?;
    Ok(ProbeReport {
        probe: Probe::CaseE,
        checks: vec![
            ProbeCheck::at_most("max |row sum|", max_abs_row_sum(&op.matrix), 1e-9),
            ProbeCheck::at_most("idempotence error", idempotence_error(&op.matrix)?, 1e-9),
            ProbeCheck::at_most("rank minus 2", (rank(&op.matrix, 1e-10) as f64 - 2.0).abs(), 0.0),
            ProbeCheck::at_most(
                "atom eigenvector error",
                fixed.max_abs_diff(&Matrix::column_vector(&psi))?,
                1e-9,
            ),
            ProbeCheck::at_least("rows outside simplex", non_simplex_rows(&op.matrix), 1.0),
        ],
        details: serde_json::Value::Null,
    })
}

fn operator_name(op: &CanonicalOperator) -> String {
    format!("{} {}x{}", op.case_label.tag(), op.matrix.rows(), op.matrix.cols())
}

fn realization(cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mut checks = Vec::new();
    for (i, op) in square_suite()?.iter().enumerate() {
        for variant in [ToaVariant::ToaRelu, ToaVariant::ToaGated] {
            let r = realize_with_variant(op, variant, 1)?;
            let err = realization_error(op, &r, cfg.realization_trials, i as u64)?
                .ok_or_else(|| Error::Precondition("square operator without head".into()))?;
            checks.push(ProbeCheck::at_most(
                format!("{} via {variant}: max abs error", operator_name(op)),
                err,
                1e-10,
            ));
        }
    }
    Ok(ProbeReport {
        probe: Probe::Realization,
        checks,
        details: serde_json::json!({ "trials": cfg.realization_trials }),
    })
}

fn gap(cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mut checks = Vec::new();
    let mut fits = Vec::new();
    for (i, op) in square_suite()?.iter().enumerate() {
        let name = operator_name(op);
        let gap_cfg = GapConfig {
            seed: cfg.gap.seed.wrapping_add(i as u64),
            ..cfg.gap
        };
        let fit = fit_softmax_baseline(op, &gap_cfg)?;
        let r = realize_with_variant(op, ToaVariant::ToaRelu, 1)?;
        let toa = realization_error(op, &r, cfg.realization_trials, i as u64)?.unwrap_or(f64::INFINITY);
        checks.push(ProbeCheck::at_least(
            format!("{name}: softmax best relative error"),
            fit.best_rel_error,
            0.1,
        ));
        checks.push(ProbeCheck::at_most(
            format!("{name}: TOA realization error"),
            toa,
            1e-10,
        ));
        fits.push(serde_json::json!({ "operator": name, "restart_errors": fit.restart_errors }));
    }
    Ok(ProbeReport {
        probe: Probe::Gap,
        checks,
        details: serde_json::json!({ "config": cfg.gap, "fits": fits }),
    })
}
