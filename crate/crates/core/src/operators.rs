//! Canonical non-simplex sequence operators and the probes around them.
//!
//! Each builder materializes a target operator `T*` that an ideal temporal
//! mixer should apply: harmonic continuation, residualization `I − G`,
//! latent-factor projection `P_A`, phase-warped continuation, local
//! quadrature projection, and patch differencing. [`simplex_report`] checks
//! row-wise simplex membership, [`collapse_probe`] evaluates softmax kernels
//! on shrinking inputs, and [`realize_with_toa`] builds head parameters whose
//! forward pass applies `T*` exactly. [`fit_softmax_baseline`] measures how
//! close plain softmax attention can get by optimization.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{forward_head, forward_softmax_baseline, head_backward, GateParams, HeadParams, ToaVariant};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::serial::MatrixDoc;
use crate::sor::SorState;
use crate::synthetic::{time_warp, Regime};
use crate::tensor::{lstsq_pinv_apply, Matrix};

/// Tolerance used for simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseLabel {
    HarmonicContinuation,
    Residualization,
    LatentDemixing,
    PhaseWarped,
    LocalQuadrature,
    PatchDifferencing,
    ChannelDemixing,
}

impl CaseLabel {
    /// Short case tag (A–E, or the tokenization scheme).
    pub fn tag(self) -> &'static str {
        match self {
            CaseLabel::HarmonicContinuation => "caseA",
            CaseLabel::Residualization => "caseB",
            CaseLabel::LatentDemixing => "caseC",
            CaseLabel::PhaseWarped => "caseD",
            CaseLabel::LocalQuadrature => "caseE",
            CaseLabel::PatchDifferencing => "patch",
            CaseLabel::ChannelDemixing => "channel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Smoother {
    /// Circular moving average over `width` taps centred on each position.
    MovingAverage {
        n: usize,
        width: usize,
    },
    /// Gaussian weights `exp(−(i−j)²/2σ²)` renormalized per row.
    Gaussian {
        n: usize,
        sigma: f64,
    },
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Construction {
    Harmonic {
        length: usize,
        horizon: usize,
        periods: Vec<f64>,
    },
    Residual {
        smoother: Smoother,
    },
    Demixing {
        mixing: MatrixDoc,
    },
    PhaseWarped {
        length: usize,
        horizon: usize,
        periods: Vec<f64>,
        phase: f64,
        regime: Regime,
    },
    LocalQuadrature {
        n: usize,
        center: f64,
        scale: f64,
        omega: f64,
        phase: f64,
    },
    Atoms {
        n: usize,
    },
    PatchDifferencing {
        n: usize,
        target: usize,
        reference: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalOperator {
    pub matrix: Matrix,
    pub case_label: CaseLabel,
    pub construction: Construction,
}

impl CanonicalOperator {
    pub fn is_square(&self) -> bool {
        self.matrix.rows() == self.matrix.cols()
    }

    pub fn simplex_report(&self) -> SimplexReport {
        simplex_report(&self.matrix)
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            case_label: CaseLabel,
            case: &'static str,
            construction: &'a Construction,
            matrix: MatrixDoc,
        }
        Ok(serde_json::to_string_pretty(&Doc {
            case_label: self.case_label,
            case: self.case_label.tag(),
            construction: &self.construction,
            matrix: (&self.matrix).into(),
        })?)
    }
}

fn check_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Quadrature features `[cos(ω_k s_t + φ), sin(ω_k s_t + φ)]_k` at sample
/// positions `s_t`.
fn quadrature_basis(positions: &[f64], periods: &[f64], phase: f64) -> Matrix {
    let mut m = Matrix::zeros(positions.len(), 2 * periods.len());
    for (t, &s) in positions.iter().enumerate() {
        for (k, &p) in periods.iter().enumerate() {
            let angle = TAU / p * s + phase;
            m[(t, 2 * k)] = angle.cos();
            m[(t, 2 * k + 1)] = angle.sin();
        }
    }
    m
}

/// Least-squares harmonic continuation `Φ_fcast Φ_obs⁺` (T×L).
///
/// Every period must divide `length` and `length ≥ 2·|periods|`; under those
/// conditions all rows sum to zero.
pub fn build_harmonic_continuation(length: usize, horizon: usize, periods: &[f64]) -> Result<CanonicalOperator> {
    if periods.is_empty() {
        return Err(Error::Precondition("at least one period is required".into()));
    }
    if length < 2 * periods.len() {
        return Err(Error::Precondition(format!(
            "length {length} is shorter than twice the number of periods ({})",
            periods.len()
        )));
    }
    for &p in periods {
        let cycles = length as f64 / p;
        if !(p > 0.0) || (cycles - cycles.round()).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "period {p} does not divide length {length}"
            )));
        }
    }
    let obs: Vec<f64> = (0..length).map(|t| t as f64).collect();
    let fcast: Vec<f64> = (length..length + horizon).map(|t| t as f64).collect();
    let matrix = lstsq_pinv_apply(
        &quadrature_basis(&obs, periods, 0.0),
        &quadrature_basis(&fcast, periods, 0.0),
    )?;
    check_finite(&matrix, "harmonic continuation")?;
    Ok(CanonicalOperator {
        matrix,
        case_label: CaseLabel::HarmonicContinuation,
        construction: Construction::Harmonic {
            length,
            horizon,
            periods: periods.to_vec(),
        },
    })
}

/// Least-squares continuation over the warped basis
/// `cos(ω_k τ(t) + φ), sin(ω_k τ(t) + φ)`, with forecast positions
/// `t = L … L+T−1` pushed through the same warp.
pub fn build_phase_warped(
    length: usize,
    horizon: usize,
    periods: &[f64],
    phase: f64,
    regime: Regime,
) -> Result<CanonicalOperator> {
    if periods.is_empty() || length < 2 * periods.len() {
        return Err(Error::Precondition(
            "need at least one period and length ≥ 2·|periods|".into(),
        ));
    }
    let warp = |t: usize| time_warp(t as f64, regime, length);
    let obs: Vec<f64> = (0..length).map(warp).collect();
    let fcast: Vec<f64> = (length..length + horizon).map(warp).collect();
    let matrix = lstsq_pinv_apply(
        &quadrature_basis(&obs, periods, phase),
        &quadrature_basis(&fcast, periods, phase),
    )?;
    check_finite(&matrix, "phase-warped continuation")?;
    Ok(CanonicalOperator {
        matrix,
        case_label: CaseLabel::PhaseWarped,
        construction: Construction::PhaseWarped {
            length,
            horizon,
            periods: periods.to_vec(),
            phase,
            regime,
        },
    })
}

pub fn moving_average(n: usize, width: usize) -> Result<Matrix> {
    if width == 0 || width.is_multiple_of(2) || width > n {
        return Err(Error::Precondition(format!(
            "moving-average width must be odd and ≤ {n}, got {width}"
        )));
    }
    let half = (width / 2) as isize;
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for k in -half..=half {
            let j = (i as isize + k).rem_euclid(n as isize) as usize;
            g[(i, j)] += 1.0 / width as f64;
        }
    }
    Ok(g)
}

pub fn gaussian_smoother(n: usize, sigma: f64) -> Result<Matrix> {
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!(
            "smoothing width must be positive, got {sigma}"
        )));
    }
    let mut g = Matrix::from_fn(n, n, |i, j| {
        let d = i as f64 - j as f64;
        (-d * d / (2.0 * sigma * sigma)).exp()
    });
    for r in 0..n {
        let total: f64 = g.row(r).iter().sum();
        g.row_mut(r).iter_mut().for_each(|v| *v /= total);
    }
    Ok(g)
}

fn build_residual(g: &Matrix, smoother: Smoother) -> Result<CanonicalOperator> {
    if g.rows() != g.cols() {
        return Err(Error::Precondition("smoothing kernel must be square".into()));
    }
    if g.min_entry() < 0.0 || g.row_sums().iter().any(|s| (s - 1.0).abs() > 1e-9) {
        return Err(Error::Precondition(
            "smoothing kernel must be entrywise nonnegative with unit row sums".into(),
        ));
    }
    let matrix = Matrix::identity(g.rows()).sub(g)?;
    Ok(CanonicalOperator {
        matrix,
        case_label: CaseLabel::Residualization,
        construction: Construction::Residual { smoother },
    })
}

/// Residualization `I − G` for a row-stochastic nonnegative smoother `G`.
pub fn build_residualization(g: &Matrix) -> Result<CanonicalOperator> {
    build_residual(g, Smoother::Custom)
}

pub fn build_moving_average_residual(n: usize, width: usize) -> Result<CanonicalOperator> {
    build_residual(&moving_average(n, width)?, Smoother::MovingAverage { n, width })
}

pub fn build_gaussian_residual(n: usize, sigma: f64) -> Result<CanonicalOperator> {
    build_residual(&gaussian_smoother(n, sigma)?, Smoother::Gaussian { n, sigma })
}

fn projector(a: &Matrix) -> Result<Matrix> {
    let p = lstsq_pinv_apply(a, a)?;
    // Symmetrize away the last-bit asymmetry of the solve.
    let pt = p.transpose();
    p.zip_with(&pt, "symmetrize", |x, y| 0.5 * (x + y))
}

/// Orthogonal projector `A(AᵀA)⁻¹Aᵀ` onto the columns of a C×r mixing matrix.
pub fn build_latent_demixing(a: &Matrix) -> Result<CanonicalOperator> {
    Ok(CanonicalOperator {
        matrix: projector(a)?,
        case_label: CaseLabel::LatentDemixing,
        construction: Construction::Demixing { mixing: a.into() },
    })
}

/// Same projector, labelled for inverted (channel) tokenization.
pub fn build_channel_demixing(a: &Matrix) -> Result<CanonicalOperator> {
    let mut op = build_latent_demixing(a)?;
    op.case_label = CaseLabel::ChannelDemixing;
    Ok(op)
}

/// Raised-cosine window, strictly positive on `|u| < scale`.
fn window(u: f64, scale: f64) -> f64 {
    if u.abs() < scale {
        (std::f64::consts::PI * u / (2.0 * scale)).cos().powi(2)
    } else {
        0.0
    }
}

/// Mean-removed local atom `w_r(t−c) cos(ω(t−c) + φ)`.
pub fn local_atom(n: usize, center: f64, scale: f64, omega: f64, phase: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|t| {
            let u = t as f64 - center;
            window(u, scale) * (omega * u + phase).cos()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    raw.into_iter().map(|v| v - mean).collect()
}

/// Rank-2 projector `(ψψᵀ + ψ′ψ′ᵀ) / ((‖ψ‖² + ‖ψ′‖²)/2)`, exact for an
/// orthogonal equal-norm atom pair. Unbalanced pairs need the inverse local
/// Gram matrix; see [`build_local_quadrature`].
pub fn build_quadrature_projector(psi: &[f64], psi_quad: &[f64]) -> Result<CanonicalOperator> {
    if psi.len() != psi_quad.len() {
        return Err(Error::Shape {
            op: "quadrature projector",
            left: (psi.len(), 1),
            right: (psi_quad.len(), 1),
        });
    }
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let (a, b) = (norm2(psi), norm2(psi_quad));
    if a == 0.0 || b == 0.0 {
        return Err(Error::Precondition("local atom has zero norm".into()));
    }
    let z = 0.5 * (a + b);
    let n = psi.len();
    let matrix = Matrix::from_fn(n, n, |i, j| (psi[i] * psi[j] + psi_quad[i] * psi_quad[j]) / z);
    Ok(CanonicalOperator {
        matrix,
        case_label: CaseLabel::LocalQuadrature,
        construction: Construction::Atoms { n },
    })
}

/// Local quadrature projector for the atom pair at phases `φ` and `φ + π/2`.
///
/// Windowed, mean-removed atoms are only approximately orthogonal with equal
/// norms, so this uses the Gram-corrected form `Ψ(ΨᵀΨ)⁻¹Ψᵀ`, which agrees with
/// [`build_quadrature_projector`] whenever the pair is exactly balanced.
pub fn build_local_quadrature(n: usize, center: f64, scale: f64, omega: f64, phase: f64) -> Result<CanonicalOperator> {
    if !(scale > 0.0) {
        return Err(Error::Precondition("window scale must be positive".into()));
    }
    let psi = local_atom(n, center, scale, omega, phase);
    let psi_quad = local_atom(n, center, scale, omega, phase + FRAC_PI_2);
    let atoms = Matrix::from_fn(n, 2, |t, k| if k == 0 { psi[t] } else { psi_quad[t] });
    let mut op = build_quadrature_projector(&psi, &psi_quad)?;
    op.matrix = projector(&atoms)?;
    op.construction = Construction::LocalQuadrature {
        n,
        center,
        scale,
        omega,
        phase,
    };
    Ok(op)
}

/// Identity with an extra `−1` at `(target, reference)`: row `target` becomes
/// `h_target − h_reference`.
pub fn build_patch_differencing(n: usize, target: usize, reference: usize) -> Result<CanonicalOperator> {
    if target >= n || reference >= n || target == reference {
        return Err(Error::Precondition(format!(
            "need distinct indices below {n}, got target {target} and reference {reference}"
        )));
    }
    let mut matrix = Matrix::identity(n);
    matrix[(target, reference)] = -1.0;
    Ok(CanonicalOperator {
        matrix,
        case_label: CaseLabel::PatchDifferencing,
        construction: Construction::PatchDifferencing { n, target, reference },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowVerdict {
    pub min_entry: f64,
    pub row_sum: f64,
    pub in_simplex: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexReport {
    pub rows: Vec<RowVerdict>,
}

impl SimplexReport {
    pub fn all_in_simplex(&self) -> bool {
        self.rows.iter().all(|r| r.in_simplex)
    }

    pub fn violating_rows(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.in_simplex)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn simplex_report(m: &Matrix) -> SimplexReport {
    let rows = (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let min_entry = row.iter().copied().fold(f64::INFINITY, f64::min);
            let row_sum: f64 = row.iter().sum();
            RowVerdict {
                min_entry,
                row_sum,
                in_simplex: min_entry >= -SIMPLEX_TOL && (row_sum - 1.0).abs() <= SIMPLEX_TOL,
            }
        })
        .collect();
    SimplexReport { rows }
}

#[derive(Debug, Clone)]
pub struct CollapsePoint {
    pub alpha: f64,
    pub kernel: Matrix,
    /// `max |a_{m,n} − 1/N|`.
    pub max_deviation: f64,
}

/// Softmax kernels of `αH` for each `α`, with unscaled logits.
pub fn collapse_probe(head: &HeadParams, h: &Matrix, alphas: &[f64]) -> Result<Vec<CollapsePoint>> {
    let mut probe_head = head.clone();
    probe_head.scaled = false;
    let uniform = 1.0 / h.rows() as f64;
    alphas
        .iter()
        .map(|&alpha| {
            let (_, cache) = forward_softmax_baseline(&h.scale(alpha), &probe_head)?;
            let kernel = cache.kernel().clone();
            let max_deviation = kernel.data().iter().fold(0.0_f64, |m, v| m.max((v - uniform).abs()));
            Ok(CollapsePoint {
                alpha,
                kernel,
                max_deviation,
            })
        })
        .collect()
}

/// TOA parameters that apply a square operator exactly.
///
/// Tokens are laid out as `H = [I_N | V]`: a one-hot position block followed
/// by the value channels. With `W_Q = W_K = [I_N | 0]` the score is `I_N`
/// for every `V`, so the activation factor is a positive multiple `c·I`
/// (`c = 1` for ReLU, `c = ln 2` for the gated product with a zeroed right
/// branch). Setting `M₂ = T*/c − I` and `W_V = [0 | I]` gives output `T* V`.
#[derive(Debug, Clone)]
pub struct Realization {
    pub variant: ToaVariant,
    /// `None` for non-square operators, where only the post-mixer exists.
    pub head: Option<HeadParams>,
    pub post_mixer: Matrix,
    pub value_dim: usize,
    pub note: Option<String>,
}

impl Realization {
    /// Builds tokens `[I_N | values]`.
    pub fn tokens(&self, values: &Matrix) -> Result<Matrix> {
        let n = self.post_mixer.rows();
        if values.rows() != n || values.cols() != self.value_dim {
            return Err(Error::Shape {
                op: "realization tokens",
                left: values.shape(),
                right: (n, self.value_dim),
            });
        }
        Matrix::hstack(&[Matrix::identity(n), values.clone()])
    }

    /// Runs the realized head on `values`; `None` when no head exists.
    pub fn apply(&self, values: &Matrix) -> Result<Option<Matrix>> {
        let Some(head) = &self.head else {
            return Ok(None);
        };
        let h = self.tokens(values)?;
        let (out, _) = forward_head(&h, head, self.variant, &mut SorState::disabled())?;
        Ok(Some(out))
    }
}

/// [`realize_with_variant`] with `ToaRelu` and scalar values.
pub fn realize_with_toa(t: &CanonicalOperator) -> Result<Realization> {
    realize_with_variant(t, ToaVariant::ToaRelu, 1)
}

pub fn realize_with_variant(t: &CanonicalOperator, variant: ToaVariant, value_dim: usize) -> Result<Realization> {
    let target = &t.matrix;
    if !t.is_square() {
        return Ok(Realization {
            variant,
            head: None,
            post_mixer: target.clone(),
            value_dim,
            note: Some(format!(
                "operator is {}x{}; only the post-mixer is returned and the forward-pipeline check is skipped",
                target.rows(),
                target.cols()
            )),
        });
    }
    let n = target.rows();
    let d = n + value_dim;
    let position_proj = Matrix::from_fn(n, d, |i, j| if i == j { 1.0 } else { 0.0 });
    let value_proj = Matrix::from_fn(value_dim, d, |i, j| if j == n + i { 1.0 } else { 0.0 });
    let gain = match variant {
        ToaVariant::ToaRelu => 1.0,
        ToaVariant::ToaGated => std::f64::consts::LN_2,
        other => {
            return Err(Error::Config(format!(
                "{other} normalizes its kernel rows and cannot be driven to a multiple of the identity"
            )))
        }
    };
    let m2 = target.scale(1.0 / gain).sub(&Matrix::identity(n))?;
    let gate = (variant == ToaVariant::ToaGated).then(|| GateParams {
        w_q_right: Matrix::zeros(n, d),
        w_k_right: Matrix::zeros(n, d),
        m1_right: Matrix::zeros(n, n),
    });
    let head = HeadParams {
        w_q: position_proj.clone(),
        w_k: position_proj,
        w_v: value_proj,
        m1: Matrix::zeros(n, n),
        m2: m2.clone(),
        gate,
        scaled: false,
    };
    Ok(Realization {
        variant,
        head: Some(head),
        post_mixer: m2.add_identity()?,
        value_dim,
        note: None,
    })
}

/// Max-abs error of a realization against `T*·v` over `trials` random
/// scalar value vectors.
pub fn realization_error(
    t: &CanonicalOperator,
    realization: &Realization,
    trials: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if realization.head.is_none() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t.matrix.rows();
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let v = Matrix::random_normal(n, realization.value_dim, 1.0, &mut rng);
        let want = t.matrix.matmul(&v)?;
        let got = realization.apply(&v)?.expect("head present");
        worst = worst.max(got.max_abs_diff(&want)?);
    }
    Ok(Some(worst))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub steps: usize,
    pub restarts: usize,
    pub batch: usize,
    pub eval_batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            restarts: 5,
            batch: 16,
            eval_batch: 256,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapResult {
    /// Relative error `‖o − T*v‖ / ‖T*v‖` over the evaluation batch, per restart.
    pub restart_errors: Vec<f64>,
    pub best_rel_error: f64,
}

fn positional_tokens(values: &Matrix) -> Result<Matrix> {
    Matrix::hstack(&[Matrix::identity(values.rows()), values.clone()])
}

/// Best-effort fit of single-head softmax attention to `v ↦ T* v`.
///
/// The baseline sees the same token layout as the realization, `[I_N | v]`,
/// so its scores can encode any positional pattern; only `W_Q`, `W_K` are
/// trained, with `W_V` fixed to read the value channel.
pub fn fit_softmax_baseline(t: &CanonicalOperator, cfg: &GapConfig) -> Result<GapResult> {
    if !t.is_square() {
        return Err(Error::Precondition("softmax fit needs a square operator".into()));
    }
    let n = t.matrix.rows();
    let d = n + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval: Vec<Matrix> = (0..cfg.eval_batch)
        .map(|_| Matrix::random_normal(n, 1, 1.0, &mut rng))
        .collect();
    let mut restart_errors = Vec::with_capacity(cfg.restarts);
    for _ in 0..cfg.restarts {
        let mut head = HeadParams::init(ToaVariant::SoftmaxBaseline, n, d, n, 1, 0.0, &mut rng);
        head.scaled = false;
        head.w_v = Matrix::from_fn(1, d, |_, j| if j == n { 1.0 } else { 0.0 });
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            [head.w_q.shape(), head.w_k.shape()],
        );
        for _ in 0..cfg.steps {
            let mut gq = Matrix::zeros(n, d);
            let mut gk = Matrix::zeros(n, d);
            for _ in 0..cfg.batch {
                let v = Matrix::random_normal(n, 1, 1.0, &mut rng);
                let target = t.matrix.matmul(&v)?;
                let (out, cache) = forward_softmax_baseline(&positional_tokens(&v)?, &head)?;
                let scale = 2.0 / (cfg.batch * n) as f64;
                let d_out = out.sub(&target)?.scale(scale);
                let (g, _) = head_backward(&d_out, &cache, &head)?;
                gq.add_scaled_assign(&g.w_q, 1.0)?;
                gk.add_scaled_assign(&g.w_k, 1.0)?;
            }
            opt.step(vec![&mut head.w_q, &mut head.w_k], &[&gq, &gk])?;
        }
        let (mut err2, mut norm2) = (0.0, 0.0);
        for v in &eval {
            let target = t.matrix.matmul(v)?;
            let (out, _) = forward_softmax_baseline(&positional_tokens(v)?, &head)?;
            err2 += out.sub(&target)?.data().iter().map(|x| x * x).sum::<f64>();
            norm2 += target.data().iter().map(|x| x * x).sum::<f64>();
        }
        restart_errors.push((err2 / norm2).sqrt());
    }
    let best_rel_error = restart_errors.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(GapResult {
        restart_errors,
        best_rel_error,
    })
}

/// The square canonical operators used by the theory probes, one or more per
/// case.
pub fn square_suite() -> Result<Vec<CanonicalOperator>> {
    let mixing = Matrix::from_rows(&[
        [1.0, 0.3],
        [-0.8, 1.1],
        [0.4, -1.2],
        [-1.5, 0.2],
        [0.6, 0.9],
        [0.2, -0.7],
    ])?;
    Ok(vec![
        build_harmonic_continuation(24, 24, &[24.0, 8.0])?,
        build_moving_average_residual(8, 3)?,
        build_gaussian_residual(10, 1.5)?,
        build_latent_demixing(&Matrix::column_vector(&[1.0, -1.0]))?,
        build_latent_demixing(&mixing)?,
        build_phase_warped(24, 24, &[24.0, 8.0], 0.7, Regime::Vibrato)?,
        build_local_quadrature(16, 7.5, 6.0, TAU / 5.0, 0.3)?,
        build_patch_differencing(6, 4, 1)?,
        build_channel_demixing(&Matrix::column_vector(&[1.0, 2.0, -1.0, 0.5]))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_sums_zero(m: &Matrix, tol: f64) -> bool {
        m.row_sums().iter().all(|s| s.abs() <= tol)
    }

    #[test]
    fn harmonic_continuation_rows_sum_to_zero() {
        let op = build_harmonic_continuation(24, 4, &[24.0]).unwrap();
        assert_eq!(op.matrix.shape(), (4, 24));
        assert!(row_sums_zero(&op.matrix, 1e-9));
        assert!(op.simplex_report().violating_rows().len() == 4);
        let ones = Matrix::filled(24, 1, 1.0);
        assert!(op.matrix.matmul(&ones).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn harmonic_continuation_extends_in_basis_signal() {
        let op = build_harmonic_continuation(24, 4, &[24.0]).unwrap();
        let x = Matrix::column_vector(&(0..24).map(|t| (TAU * t as f64 / 24.0).cos()).collect::<Vec<_>>());
        let pred = op.matrix.matmul(&x).unwrap();
        for (i, t) in (24..28).enumerate() {
            assert!((pred[(i, 0)] - (TAU * t as f64 / 24.0).cos()).abs() < 1e-8);
        }
    }

    #[test]
    fn harmonic_continuation_preconditions() {
        assert!(matches!(
            build_harmonic_continuation(24, 4, &[7.0]),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            build_harmonic_continuation(3, 4, &[3.0, 1.5]),
            Err(Error::Precondition(_))
        ));
        // Period 2 has a vanishing sine column.
        assert!(matches!(
            build_harmonic_continuation(24, 4, &[2.0]),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn residualization_cases() {
        let op = build_residualization(&Matrix::identity(5)).unwrap();
        assert_eq!(op.matrix.max_abs(), 0.0);

        let op = build_moving_average_residual(5, 3).unwrap();
        assert!(row_sums_zero(&op.matrix, 1e-12));
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j {
                    2.0 / 3.0
                } else if (i + 1) % 5 == j || (j + 1) % 5 == i {
                    -1.0 / 3.0
                } else {
                    0.0
                };
                assert!((op.matrix[(i, j)] - want).abs() < 1e-15);
            }
        }
        assert!(op.matrix.matmul(&Matrix::filled(5, 1, 2.5)).unwrap().max_abs() < 1e-12);
        assert!(!op.simplex_report().all_in_simplex());

        let bad = Matrix::from_rows(&[[1.2, -0.2], [0.5, 0.5]]).unwrap();
        assert!(matches!(build_residualization(&bad), Err(Error::Precondition(_))));
        assert!(moving_average(5, 2).is_err());
    }

    #[test]
    fn gaussian_residual_is_zero_sum() {
        let op = build_gaussian_residual(12, 2.0).unwrap();
        assert!(row_sums_zero(&op.matrix, 1e-12));
        assert!(op.matrix.min_entry() < 0.0);
    }

    #[test]
    fn latent_demixing_closed_form() {
        let op = build_latent_demixing(&Matrix::column_vector(&[1.0, -1.0])).unwrap();
        let want = Matrix::from_rows(&[[0.5, -0.5], [-0.5, 0.5]]).unwrap();
        assert!(op.matrix.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn latent_demixing_all_pass_exception() {
        let a = Matrix::from_rows(&[[1.0, 0.2], [1.0, -1.0], [1.0, 0.7], [1.0, 3.0]]).unwrap();
        let op = build_latent_demixing(&a).unwrap();
        let ones = Matrix::filled(4, 1, 1.0);
        assert!(op.matrix.matmul(&ones).unwrap().max_abs_diff(&ones).unwrap() < 1e-12);
    }

    #[test]
    fn latent_demixing_rejects_singular_mixing() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        assert!(matches!(build_latent_demixing(&a), Err(Error::Singular { .. })));
    }

    #[test]
    fn phase_warped_reduces_to_harmonic() {
        let a = build_harmonic_continuation(24, 6, &[24.0, 8.0]).unwrap();
        let d = build_phase_warped(24, 6, &[24.0, 8.0], 0.0, Regime::Stationary).unwrap();
        assert!(a.matrix.max_abs_diff(&d.matrix).unwrap() < 1e-10);
    }

    #[test]
    fn phase_warped_continues_shifted_signal() {
        let (l, t) = (48, 8);
        let omega = TAU / 16.0;
        let op = build_phase_warped(l, t, &[16.0], std::f64::consts::PI, Regime::Chirp).unwrap();
        let signal = |i: usize| (omega * time_warp(i as f64, Regime::Chirp, l) + std::f64::consts::PI).cos();
        let x = Matrix::column_vector(&(0..l).map(signal).collect::<Vec<_>>());
        let pred = op.matrix.matmul(&x).unwrap();
        for i in 0..t {
            assert!((pred[(i, 0)] - signal(l + i)).abs() < 1e-8);
        }
    }

    #[test]
    fn phase_warped_projector_is_phase_invariant() {
        // cos(θ+φ), sin(θ+φ) span the same plane for every φ, so the
        // least-squares operator cannot depend on φ.
        let a = build_phase_warped(48, 8, &[16.0, 12.0], 0.0, Regime::Vibrato).unwrap();
        let b = build_phase_warped(48, 8, &[16.0, 12.0], FRAC_PI_2, Regime::Vibrato).unwrap();
        assert!(a.matrix.max_abs_diff(&b.matrix).unwrap() < 1e-9);
        let c = build_phase_warped(48, 8, &[16.0, 12.0], 0.0, Regime::Chirp).unwrap();
        assert!(a.matrix.max_abs_diff(&c.matrix).unwrap() > 1e-3);
    }

    #[test]
    fn local_quadrature_rows_sum_to_zero_and_rank_two() {
        let op = build_local_quadrature(32, 15.0, 8.0, TAU / 6.0, 0.4).unwrap();
        assert!(row_sums_zero(&op.matrix, 1e-9));
        assert_eq!(crate::tensor::rank(&op.matrix, 1e-10), 2);
        assert!(op.matrix.max_abs_diff(&op.matrix.transpose()).unwrap() == 0.0);
    }

    #[test]
    fn local_quadrature_is_an_orthogonal_projector() {
        let op = build_local_quadrature(40, 20.0, 10.0, TAU / 7.0, 1.1).unwrap();
        let p = &op.matrix;
        assert!(p.matmul(p).unwrap().max_abs_diff(p).unwrap() < 1e-12);
        let psi = Matrix::column_vector(&local_atom(40, 20.0, 10.0, TAU / 7.0, 2.5));
        assert!(p.matmul(&psi).unwrap().max_abs_diff(&psi).unwrap() < 1e-12);
    }

    #[test]
    fn quadrature_projector_fixes_its_atom() {
        let psi = [1.0, -1.0, 1.0, -1.0];
        let quad = [1.0, 1.0, -1.0, -1.0];
        let op = build_quadrature_projector(&psi, &quad).unwrap();
        let out = op.matrix.matmul(&Matrix::column_vector(&psi)).unwrap();
        assert!(out.max_abs_diff(&Matrix::column_vector(&psi)).unwrap() < 1e-9);
        assert!(build_quadrature_projector(&[0.0; 4], &quad).is_err());
    }

    #[test]
    fn patch_differencing_construction() {
        let op = build_patch_differencing(5, 3, 1).unwrap();
        let h = Matrix::random_normal(5, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = op.matrix.matmul(&h).unwrap();
        for c in 0..2 {
            assert!((out[(3, c)] - (h[(3, c)] - h[(1, c)])).abs() < 1e-15);
        }
        assert_eq!(op.matrix.row_sums()[3], 0.0);
        assert_eq!(op.simplex_report().violating_rows(), vec![3]);
        assert!(build_patch_differencing(5, 2, 2).is_err());
        assert!(build_patch_differencing(5, 5, 1).is_err());
    }

    #[test]
    fn simplex_report_examples() {
        assert!(simplex_report(&Matrix::filled(3, 4, 0.25)).all_in_simplex());
        assert!(simplex_report(&Matrix::identity(4)).all_in_simplex());
        let r = simplex_report(&Matrix::from_rows(&[[0.5, 0.5 + 2e-9], [1.0 + 1e-10, -1e-10]]).unwrap());
        assert_eq!(r.violating_rows(), vec![0]);
    }

    #[test]
    fn collapse_probe_reaches_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = HeadParams::init(ToaVariant::SoftmaxBaseline, 6, 4, 3, 2, 0.0, &mut rng);
        let h = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let points = collapse_probe(&head, &h, &[1.0, 0.1, 0.01, 0.001, 1e-6, 0.0]).unwrap();
        for w in points.windows(2) {
            assert!(w[1].max_deviation <= w[0].max_deviation);
        }
        assert!(points[4].max_deviation < 1e-8);
        assert_eq!(points[5].max_deviation, 0.0);
    }

    #[test]
    fn realization_identity_gives_zero_offset() {
        let op = build_residualization(&Matrix::identity(4)).unwrap();
        let mut id = op.clone();
        id.matrix = Matrix::identity(4);
        let r = realize_with_toa(&id).unwrap();
        assert_eq!(r.head.unwrap().m2.max_abs(), 0.0);
    }

    #[test]
    fn realization_reproduces_operators() {
        for op in square_suite().unwrap() {
            for variant in [ToaVariant::ToaRelu, ToaVariant::ToaGated] {
                let r = realize_with_variant(&op, variant, 1).unwrap();
                let err = realization_error(&op, &r, 100, 5).unwrap().unwrap();
                assert!(err <= 1e-10, "{:?} {variant}: {err}", op.case_label);
            }
        }
        let op = build_latent_demixing(&Matrix::column_vector(&[1.0, -1.0])).unwrap();
        let r = realize_with_variant(&op, ToaVariant::ToaRelu, 3).unwrap();
        let v = Matrix::random_normal(2, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let out = r.apply(&v).unwrap().unwrap();
        assert!(out.max_abs_diff(&op.matrix.matmul(&v).unwrap()).unwrap() <= 1e-10);
    }

    #[test]
    fn realization_of_non_square_operator_is_post_mixer_only() {
        let op = build_harmonic_continuation(24, 4, &[24.0]).unwrap();
        let r = realize_with_toa(&op).unwrap();
        assert!(r.head.is_none());
        assert!(r.note.is_some());
        assert_eq!(r.post_mixer, op.matrix);
        assert!(realize_with_variant(&op, ToaVariant::ToaSoftmax, 1).is_ok());
        let sq = build_patch_differencing(3, 0, 1).unwrap();
        assert!(realize_with_variant(&sq, ToaVariant::ToaSoftmax, 1).is_err());
    }

    #[test]
    fn softmax_fit_cannot_reach_differencing() {
        let op = build_patch_differencing(4, 2, 0).unwrap();
        let cfg = GapConfig {
            steps: 200,
            restarts: 1,
            ..GapConfig::default()
        };
        let fit = fit_softmax_baseline(&op, &cfg).unwrap();
        assert!(fit.best_rel_error >= 0.1, "{fit:?}");
    }

    #[test]
    fn operator_json_carries_case() {
        let op = build_patch_differencing(3, 0, 2).unwrap();
        let json = op.to_json().unwrap();
        assert!(json.contains("\"case\": \"patch\""));
        assert!(json.contains("\"bits\""));
    }
}
