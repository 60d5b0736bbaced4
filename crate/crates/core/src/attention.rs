//! Softmax attention and the three temporal-operator variants.
//!
//! For one head with tokens `H` (N×d) the pre-activation score is
//! `A = H W_Qᵀ W_K Hᵀ` (times an optional `1/√d_h` temperature) and
//!
//! | variant            | output                                              |
//! |--------------------|-----------------------------------------------------|
//! | `SoftmaxBaseline`  | `softmax(A) · V`                                    |
//! | `ToaSoftmax`       | `softmax(A S₁) · S₂ V`                              |
//! | `ToaRelu`          | `ReLU(A S₁) · S₂ V`                                 |
//! | `ToaGated`         | `(softplus(R S₁ᴿ) ⊙ ReLU(L S₁ᴸ)) · S₂ V`           |
//!
//! with `V = H W_Vᵀ` and residual operators `S = I + M̃`, where `M̃` is the
//! (possibly SOR-masked) learnable offset. Products are associated so that no
//! N×N×N product is ever formed: `A S₁ = Q (S₁ᵀ K)ᵀ` and `K S₂ V = K (S₂ V)`.
//!
//! For the gated variant `w_q`, `w_k` and `m1` carry the left (ReLU) group and
//! [`GateParams`] carries the right (softplus) group.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial::MatrixDoc;
use crate::sor::{OffsetDrop, SorState};
use crate::tensor::{relu, softmax_rows, softplus_and_sigmoid, Matrix};

/// Initial scale of the operator offsets.
pub const DEFAULT_SIGMA_M: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToaVariant {
    #[serde(rename = "softmax")]
    SoftmaxBaseline,
    #[serde(rename = "toa-softmax")]
    ToaSoftmax,
    #[serde(rename = "toa-relu")]
    ToaRelu,
    #[serde(rename = "toa-gated")]
    ToaGated,
}

impl ToaVariant {
    pub const ALL: [ToaVariant; 4] = [
        ToaVariant::SoftmaxBaseline,
        ToaVariant::ToaSoftmax,
        ToaVariant::ToaRelu,
        ToaVariant::ToaGated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToaVariant::SoftmaxBaseline => "softmax",
            ToaVariant::ToaSoftmax => "toa-softmax",
            ToaVariant::ToaRelu => "toa-relu",
            ToaVariant::ToaGated => "toa-gated",
        }
    }

    /// Whether the variant carries the residual operators `S₁`, `S₂`.
    pub fn uses_operators(self) -> bool {
        !matches!(self, ToaVariant::SoftmaxBaseline)
    }
}

impl fmt::Display for ToaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToaVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {s:?}; expected one of softmax, toa-softmax, toa-relu, toa-gated"
            ))
        })
    }
}

/// Right-group projections and pre-mixer of a gated head.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w_q_right: Matrix,
    pub w_k_right: Matrix,
    pub m1_right: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub m1: Matrix,
    pub m2: Matrix,
    pub gate: Option<GateParams>,
    /// Multiply scores by `1/√d_h`. Disabled for the theory probes.
    pub scaled: bool,
}

impl HeadParams {
    /// Random initialization: projections ~ N(0, 1/d), offsets ~ N(0, σ_M²).
    pub fn init<R: Rng + ?Sized>(
        variant: ToaVariant,
        n: usize,
        d: usize,
        d_h: usize,
        d_v: usize,
        sigma_m: f64,
        rng: &mut R,
    ) -> Self {
        let proj_std = 1.0 / (d as f64).sqrt();
        let w_q = Matrix::random_normal(d_h, d, proj_std, rng);
        let w_k = Matrix::random_normal(d_h, d, proj_std, rng);
        let w_v = Matrix::random_normal(d_v, d, proj_std, rng);
        let m1 = Matrix::random_normal(n, n, sigma_m, rng);
        let m2 = Matrix::random_normal(n, n, sigma_m, rng);
        let gate = (variant == ToaVariant::ToaGated).then(|| GateParams {
            w_q_right: Matrix::random_normal(d_h, d, proj_std, rng),
            w_k_right: Matrix::random_normal(d_h, d, proj_std, rng),
            m1_right: Matrix::random_normal(n, n, sigma_m, rng),
        });
        Self {
            w_q,
            w_k,
            w_v,
            m1,
            m2,
            gate,
            scaled: true,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.m1.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.rows()
    }

    pub fn score_scale(&self) -> f64 {
        if self.scaled {
            1.0 / (self.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            m1: z(&self.m1),
            m2: z(&self.m2),
            gate: self.gate.as_ref().map(|g| GateParams {
                w_q_right: z(&g.w_q_right),
                w_k_right: z(&g.w_k_right),
                m1_right: z(&g.m1_right),
            }),
            scaled: self.scaled,
        }
    }

    /// Parameters in a fixed order, with names.
    pub fn named_params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("m1", &self.m1),
            ("m2", &self.m2),
        ];
        if let Some(g) = &self.gate {
            out.push(("w_q_right", &g.w_q_right));
            out.push(("w_k_right", &g.w_k_right));
            out.push(("m1_right", &g.m1_right));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.m1, &mut self.m2];
        if let Some(g) = &mut self.gate {
            out.push(&mut g.w_q_right);
            out.push(&mut g.w_k_right);
            out.push(&mut g.m1_right);
        }
        out
    }

    fn check_input(&self, h: &Matrix) -> Result<()> {
        let n = self.seq_len();
        if h.rows() != n || h.cols() != self.model_dim() {
            return Err(Error::Shape {
                op: "attention input",
                left: h.shape(),
                right: (n, self.model_dim()),
            });
        }
        let sq = |m: &Matrix| m.rows() == n && m.cols() == n;
        let dims_ok = self.w_k.shape() == self.w_q.shape()
            && self.w_v.cols() == self.model_dim()
            && sq(&self.m1)
            && sq(&self.m2)
            && self.gate.as_ref().is_none_or(|g| {
                g.w_q_right.shape() == self.w_q.shape() && g.w_k_right.shape() == self.w_q.shape() && sq(&g.m1_right)
            });
        if !dims_ok {
            return Err(Error::Config("inconsistent head parameter shapes".into()));
        }
        Ok(())
    }
}

/// Raw pre-activation score `H W_Qᵀ W_K Hᵀ` (no temperature).
pub fn score(h: &Matrix, head: &HeadParams) -> Result<Matrix> {
    let q = h.matmul_nt(&head.w_q)?;
    let k = h.matmul_nt(&head.w_k)?;
    q.matmul_nt(&k)
}

/// Per-head SOR draws used by one forward pass.
#[derive(Debug, Clone, Default)]
pub struct HeadDrops {
    pub m1: Option<OffsetDrop>,
    pub m2: Option<OffsetDrop>,
    pub m1_right: Option<OffsetDrop>,
}

impl HeadDrops {
    fn sample(sor: &mut SorState, variant: ToaVariant, n: usize, rate: Option<f64>) -> Self {
        if !variant.uses_operators() {
            return Self::default();
        }
        let m1 = sor.draw(n, n, rate);
        let m2 = sor.draw(n, n, rate);
        let m1_right = if variant == ToaVariant::ToaGated {
            sor.draw(n, n, rate)
        } else {
            None
        };
        Self { m1, m2, m1_right }
    }
}

fn masked(offset: &Matrix, drop: &Option<OffsetDrop>) -> Result<Matrix> {
    match drop {
        Some(d) => d.apply(offset),
        None => Ok(offset.clone()),
    }
}

fn unmask_grad(grad: Matrix, drop: &Option<OffsetDrop>) -> Result<Matrix> {
    match drop {
        Some(d) => d.backprop(&grad),
        None => Ok(grad),
    }
}

/// One score branch: `Z = s · Q (S̃₁ᵀ K)ᵀ`.
#[derive(Debug, Clone)]
struct Branch {
    q: Matrix,
    keys: Matrix,
    /// `S̃₁ᵀ K`, or `K` when there is no pre-mixer.
    mixed_keys: Matrix,
    pre_mix: Option<Matrix>,
    z: Matrix,
}

impl Branch {
    fn forward(h: &Matrix, w_q: &Matrix, w_k: &Matrix, pre_mix: Option<Matrix>, scale: f64) -> Result<Self> {
        let q = h.matmul_nt(w_q)?;
        let keys = h.matmul_nt(w_k)?;
        let mixed_keys = match &pre_mix {
            Some(m) => {
                let mut mk = m.matmul_tn(&keys)?;
                mk.add_scaled_assign(&keys, 1.0)?;
                mk
            }
            None => keys.clone(),
        };
        let mut z = q.matmul_nt(&mixed_keys)?;
        if scale != 1.0 {
            z = z.scale(scale);
        }
        Ok(Self {
            q,
            keys,
            mixed_keys,
            pre_mix,
            z,
        })
    }

    /// Returns `(dW_Q, dW_K, dM̃₁, dH)` for an upstream `dZ`.
    fn backward(
        &self,
        dz: &Matrix,
        h: &Matrix,
        w_q: &Matrix,
        w_k: &Matrix,
        scale: f64,
    ) -> Result<(Matrix, Matrix, Option<Matrix>, Matrix)> {
        let mut dq = dz.matmul(&self.mixed_keys)?;
        let mut d_mixed = dz.matmul_tn(&self.q)?;
        if scale != 1.0 {
            dq = dq.scale(scale);
            d_mixed = d_mixed.scale(scale);
        }
        let (dkeys, d_premix) = match &self.pre_mix {
            Some(m) => {
                let mut dk = m.matmul(&d_mixed)?;
                dk.add_scaled_assign(&d_mixed, 1.0)?;
                let dm = self.keys.matmul_nt(&d_mixed)?;
                (dk, Some(dm))
            }
            None => (d_mixed, None),
        };
        let dw_q = dq.matmul_tn(h)?;
        let dw_k = dkeys.matmul_tn(h)?;
        let mut dh = dq.matmul(w_q)?;
        dh.add_scaled_assign(&dkeys.matmul(w_k)?, 1.0)?;
        Ok((dw_q, dw_k, d_premix, dh))
    }
}

/// Intermediates of one head's forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    variant: ToaVariant,
    h: Matrix,
    scale: f64,
    left: Branch,
    right: Option<Branch>,
    /// Post-activation mixing kernel.
    kernel: Matrix,
    values: Matrix,
    /// `S̃₂ V`.
    mixed_values: Matrix,
    post_mix: Option<Matrix>,
    /// `softplus(Z_R)` and `sigmoid(Z_R)` for the gated variant.
    gate: Option<(Matrix, Matrix)>,
    drops: HeadDrops,
}

impl HeadCache {
    pub fn variant(&self) -> ToaVariant {
        self.variant
    }

    /// The post-activation kernel (softmax kernel for the softmax variants).
    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }

    pub fn drops(&self) -> &HeadDrops {
        &self.drops
    }
}

fn head_forward_with(
    h: &Matrix,
    head: &HeadParams,
    variant: ToaVariant,
    drops: HeadDrops,
    values_override: Option<&Matrix>,
) -> Result<(Matrix, HeadCache)> {
    head.check_input(h)?;
    let scale = head.score_scale();
    let ops = variant.uses_operators();
    let pre_mix = if ops { Some(masked(&head.m1, &drops.m1)?) } else { None };
    let left = Branch::forward(h, &head.w_q, &head.w_k, pre_mix, scale)?;
    let mut gate_cache = None;
    let (kernel, right) = match variant {
        ToaVariant::SoftmaxBaseline | ToaVariant::ToaSoftmax => (softmax_rows(&left.z), None),
        ToaVariant::ToaRelu => (relu(&left.z), None),
        ToaVariant::ToaGated => {
            let gate = head
                .gate
                .as_ref()
                .ok_or_else(|| Error::Config("toa-gated head is missing its right-group parameters".into()))?;
            let pre_mix_r = masked(&gate.m1_right, &drops.m1_right)?;
            let right = Branch::forward(h, &gate.w_q_right, &gate.w_k_right, Some(pre_mix_r), scale)?;
            let (sp, sig) = softplus_and_sigmoid(&right.z);
            let kernel = sp.hadamard(&relu(&left.z))?;
            gate_cache = Some((sp, sig));
            (kernel, Some(right))
        }
    };
    let values = match values_override {
        Some(v) => {
            if v.rows() != h.rows() {
                return Err(Error::Shape {
                    op: "value override",
                    left: v.shape(),
                    right: h.shape(),
                });
            }
            v.clone()
        }
        None => h.matmul_nt(&head.w_v)?,
    };
    let (mixed_values, post_mix) = if ops {
        let m2 = masked(&head.m2, &drops.m2)?;
        let mut mv = m2.matmul(&values)?;
        mv.add_scaled_assign(&values, 1.0)?;
        (mv, Some(m2))
    } else {
        (values.clone(), None)
    };
    let out = kernel.matmul(&mixed_values)?;
    let cache = HeadCache {
        variant,
        h: h.clone(),
        scale,
        left,
        right,
        kernel,
        values,
        mixed_values,
        post_mix,
        gate: gate_cache,
        drops,
    };
    Ok((out, cache))
}

/// Single-head forward for any variant, drawing SOR masks from `sor`.
pub fn forward_head(
    h: &Matrix,
    head: &HeadParams,
    variant: ToaVariant,
    sor: &mut SorState,
) -> Result<(Matrix, HeadCache)> {
    let rate = sor.layer_rate();
    let drops = HeadDrops::sample(sor, variant, head.seq_len(), rate);
    head_forward_with(h, head, variant, drops, None)
}

/// Kernel rows lie in the simplex; output is `softmax(A) H W_Vᵀ`.
/// Single-head forward with SOR draws fixed in advance, e.g. replayed from
/// an earlier [`HeadCache::drops`].
pub fn forward_head_with_drops(
    h: &Matrix,
    head: &HeadParams,
    variant: ToaVariant,
    drops: &HeadDrops,
) -> Result<(Matrix, HeadCache)> {
    head_forward_with(h, head, variant, drops.clone(), None)
}

pub fn forward_softmax_baseline(h: &Matrix, head: &HeadParams) -> Result<(Matrix, HeadCache)> {
    head_forward_with(h, head, ToaVariant::SoftmaxBaseline, HeadDrops::default(), None)
}

/// `softmax(A S̃₁) S̃₂ H W_Vᵀ`.
pub fn forward_toa_softmax(h: &Matrix, head: &HeadParams, sor: &mut SorState) -> Result<(Matrix, HeadCache)> {
    forward_head(h, head, ToaVariant::ToaSoftmax, sor)
}

/// `ReLU(A S̃₁) S̃₂ H W_Vᵀ`.
pub fn forward_toa_relu(h: &Matrix, head: &HeadParams, sor: &mut SorState) -> Result<(Matrix, HeadCache)> {
    forward_head(h, head, ToaVariant::ToaRelu, sor)
}

/// `(softplus(R S̃₁ᴿ) ⊙ ReLU(L S̃₁ᴸ)) S̃₂ H W_Vᵀ`.
pub fn forward_toa_gated(h: &Matrix, head: &HeadParams, sor: &mut SorState) -> Result<(Matrix, HeadCache)> {
    forward_head(h, head, ToaVariant::ToaGated, sor)
}

/// Effective N×N mixing matrix `W_mix(H)` of a head, obtained by pushing the
/// identity through the value path (no SOR).
pub fn effective_operator(h: &Matrix, head: &HeadParams, variant: ToaVariant) -> Result<Matrix> {
    let eye = Matrix::identity(h.rows());
    head_forward_with(h, head, variant, HeadDrops::default(), Some(&eye)).map(|(w, _)| w)
}

/// Gradients of one head given `∂loss/∂O`. Returns parameter gradients in a
/// `HeadParams`-shaped container and `∂loss/∂H`.
pub fn head_backward(d_out: &Matrix, cache: &HeadCache, head: &HeadParams) -> Result<(HeadParams, Matrix)> {
    if d_out.shape() != (cache.kernel.rows(), cache.mixed_values.cols()) {
        return Err(Error::Shape {
            op: "head_backward",
            left: d_out.shape(),
            right: (cache.kernel.rows(), cache.mixed_values.cols()),
        });
    }
    if cache.values.cols() != head.value_dim() || cache.h.cols() != head.model_dim() {
        return Err(Error::Config("cache does not match head parameters".into()));
    }
    let h = &cache.h;
    let mut grads = head.zeros_like();

    let d_kernel = d_out.matmul_nt(&cache.mixed_values)?;
    let d_mixed_values = cache.kernel.matmul_tn(d_out)?;
    let d_values = match &cache.post_mix {
        Some(m2) => {
            let mut dv = m2.matmul_tn(&d_mixed_values)?;
            dv.add_scaled_assign(&d_mixed_values, 1.0)?;
            let dm2 = d_mixed_values.matmul_nt(&cache.values)?;
            grads.m2 = unmask_grad(dm2, &cache.drops.m2)?;
            dv
        }
        None => d_mixed_values,
    };
    grads.w_v = d_values.matmul_tn(h)?;
    let mut dh = d_values.matmul(&head.w_v)?;

    let (dz_left, dz_right) = match cache.variant {
        ToaVariant::SoftmaxBaseline | ToaVariant::ToaSoftmax => {
            let k = &cache.kernel;
            let mut dz = Matrix::zeros(k.rows(), k.cols());
            for r in 0..k.rows() {
                let kr = k.row(r);
                let gr = d_kernel.row(r);
                let dot: f64 = kr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (o, (a, b)) in dz.row_mut(r).iter_mut().zip(kr.iter().zip(gr)) {
                    *o = a * (b - dot);
                }
            }
            (dz, None)
        }
        ToaVariant::ToaRelu => {
            let dz = d_kernel.zip_with(&cache.left.z, "relu backward", |g, z| if z > 0.0 { g } else { 0.0 })?;
            (dz, None)
        }
        ToaVariant::ToaGated => {
            let (sp, sig) = cache
                .gate
                .as_ref()
                .ok_or_else(|| Error::Config("gated cache without gate activations".into()))?;
            let zl = cache.left.z.data();
            let (sp, sig) = (sp.data(), sig.data());
            let g = d_kernel.data();
            let mut dl = Matrix::zeros(d_kernel.rows(), d_kernel.cols());
            let mut dr = Matrix::zeros(d_kernel.rows(), d_kernel.cols());
            for (i, (ol, or)) in dl.data_mut().iter_mut().zip(dr.data_mut().iter_mut()).enumerate() {
                if zl[i] > 0.0 {
                    *ol = g[i] * sp[i];
                    *or = g[i] * zl[i] * sig[i];
                }
            }
            (dl, Some(dr))
        }
    };

    let (dwq, dwk, dm1, dh_left) = cache.left.backward(&dz_left, h, &head.w_q, &head.w_k, cache.scale)?;
    grads.w_q = dwq;
    grads.w_k = dwk;
    if let Some(dm1) = dm1 {
        grads.m1 = unmask_grad(dm1, &cache.drops.m1)?;
    }
    dh.add_scaled_assign(&dh_left, 1.0)?;

    if let (Some(dzr), Some(right)) = (dz_right, &cache.right) {
        let gate = head
            .gate
            .as_ref()
            .ok_or_else(|| Error::Config("gated cache but head has no gate parameters".into()))?;
        let (dwq, dwk, dm1r, dh_right) = right.backward(&dzr, h, &gate.w_q_right, &gate.w_k_right, cache.scale)?;
        let g = grads.gate.as_mut().expect("zeros_like preserves gate");
        g.w_q_right = dwq;
        g.w_k_right = dwk;
        if let Some(dm) = dm1r {
            g.m1_right = unmask_grad(dm, &cache.drops.m1_right)?;
        }
        dh.add_scaled_assign(&dh_right, 1.0)?;
    }
    Ok((grads, dh))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    /// (H·d_v) × d output projection.
    pub w_o: Matrix,
    pub variant: ToaVariant,
}

impl MultiHeadParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        variant: ToaVariant,
        n: usize,
        d: usize,
        heads: usize,
        d_h: usize,
        d_v: usize,
        sigma_m: f64,
        rng: &mut R,
    ) -> Self {
        let hs: Vec<HeadParams> = (0..heads)
            .map(|_| HeadParams::init(variant, n, d, d_h, d_v, sigma_m, rng))
            .collect();
        let w_o = Matrix::random_normal(heads * d_v, d, 1.0 / ((heads * d_v) as f64).sqrt(), rng);
        Self {
            heads: hs,
            w_o,
            variant,
        }
    }

    pub fn set_scaled(&mut self, scaled: bool) {
        for h in &mut self.heads {
            h.scaled = scaled;
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads.iter().map(HeadParams::zeros_like).collect(),
            w_o: Matrix::zeros(self.w_o.rows(), self.w_o.cols()),
            variant: self.variant,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            for (name, m) in h.named_params() {
                out.push((format!("head{i}.{name}"), m));
            }
        }
        out.push(("w_o".to_string(), &self.w_o));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.heads.iter_mut().flat_map(|h| h.params_mut()).collect();
        out.push(&mut self.w_o);
        out
    }

    fn value_dims(&self) -> Vec<usize> {
        self.heads.iter().map(HeadParams::value_dim).collect()
    }
}

/// Intermediates of a multi-head forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    variant: ToaVariant,
    heads: Vec<HeadCache>,
    concat: Matrix,
}

impl LayerCache {
    pub fn heads(&self) -> &[HeadCache] {
        &self.heads
    }
}

/// `Concat(O¹, …, Oᴴ) W_O`. One drop rate is drawn per call when the SOR
/// configuration shares it.
pub fn forward_multihead(h: &Matrix, params: &MultiHeadParams, sor: &mut SorState) -> Result<(Matrix, LayerCache)> {
    let dims = params.value_dims();
    let total: usize = dims.iter().sum();
    if params.w_o.rows() != total {
        return Err(Error::Shape {
            op: "forward_multihead W_O",
            left: params.w_o.shape(),
            right: (total, h.cols()),
        });
    }
    let rate = sor.layer_rate();
    let mut outs = Vec::with_capacity(params.heads.len());
    let mut caches = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let drops = HeadDrops::sample(sor, params.variant, head.seq_len(), rate);
        let (o, c) = head_forward_with(h, head, params.variant, drops, None)?;
        outs.push(o);
        caches.push(c);
    }
    let concat = Matrix::hstack(&outs)?;
    let out = concat.matmul(&params.w_o)?;
    Ok((
        out,
        LayerCache {
            variant: params.variant,
            heads: caches,
            concat,
        },
    ))
}

/// Backward pass of [`forward_multihead`]. Reuses the SOR masks stored in the
/// cache.
pub fn backward(upstream: &Matrix, cache: &LayerCache, params: &MultiHeadParams) -> Result<(MultiHeadParams, Matrix)> {
    if cache.variant != params.variant || cache.heads.len() != params.heads.len() {
        return Err(Error::Config("layer cache does not match parameters".into()));
    }
    let mut grads = params.zeros_like();
    grads.w_o = cache.concat.matmul_tn(upstream)?;
    let d_concat = upstream.matmul_nt(&params.w_o)?;
    let mut dh: Option<Matrix> = None;
    let mut offset = 0;
    for (i, (hc, hp)) in cache.heads.iter().zip(&params.heads).enumerate() {
        let dv = hp.value_dim();
        let d_out = d_concat.column_block(offset, dv)?;
        offset += dv;
        let (g, dhi) = head_backward(&d_out, hc, hp)?;
        grads.heads[i] = g;
        match &mut dh {
            Some(acc) => acc.add_scaled_assign(&dhi, 1.0)?,
            None => dh = Some(dhi),
        }
    }
    let dh = dh.ok_or_else(|| Error::Config("attention layer without heads".into()))?;
    Ok((grads, dh))
}

// Serialization ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GateDoc {
    w_q_right: MatrixDoc,
    w_k_right: MatrixDoc,
    m1_right: MatrixDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadDoc {
    scaled: bool,
    w_q: MatrixDoc,
    w_k: MatrixDoc,
    w_v: MatrixDoc,
    m1: MatrixDoc,
    m2: MatrixDoc,
    gate: Option<GateDoc>,
}

/// JSON form of [`MultiHeadParams`]. Every matrix carries decimal values
/// and the hexadecimal IEEE-754 bit patterns; decoding uses the bits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadDoc {
    format: String,
    variant: String,
    heads: Vec<HeadDoc>,
    w_o: MatrixDoc,
}

const FORMAT_TAG: &str = "toa-attention/1";

impl From<&HeadParams> for HeadDoc {
    fn from(h: &HeadParams) -> Self {
        Self {
            scaled: h.scaled,
            w_q: (&h.w_q).into(),
            w_k: (&h.w_k).into(),
            w_v: (&h.w_v).into(),
            m1: (&h.m1).into(),
            m2: (&h.m2).into(),
            gate: h.gate.as_ref().map(|g| GateDoc {
                w_q_right: (&g.w_q_right).into(),
                w_k_right: (&g.w_k_right).into(),
                m1_right: (&g.m1_right).into(),
            }),
        }
    }
}

impl HeadDoc {
    fn decode(&self) -> Result<HeadParams> {
        Ok(HeadParams {
            w_q: self.w_q.decode()?,
            w_k: self.w_k.decode()?,
            w_v: self.w_v.decode()?,
            m1: self.m1.decode()?,
            m2: self.m2.decode()?,
            gate: match &self.gate {
                Some(g) => Some(GateParams {
                    w_q_right: g.w_q_right.decode()?,
                    w_k_right: g.w_k_right.decode()?,
                    m1_right: g.m1_right.decode()?,
                }),
                None => None,
            },
            scaled: self.scaled,
        })
    }
}

impl MultiHeadParams {
    pub fn to_doc(&self) -> MultiHeadDoc {
        MultiHeadDoc {
            format: FORMAT_TAG.to_string(),
            variant: self.variant.name().to_string(),
            heads: self.heads.iter().map(HeadDoc::from).collect(),
            w_o: (&self.w_o).into(),
        }
    }

    pub fn from_doc(doc: &MultiHeadDoc) -> Result<Self> {
        if doc.format != FORMAT_TAG {
            return Err(Error::Parse(format!("unsupported attention format {:?}", doc.format)));
        }
        let variant: ToaVariant = doc.variant.parse()?;
        let heads = doc.heads.iter().map(HeadDoc::decode).collect::<Result<Vec<_>>>()?;
        if variant == ToaVariant::ToaGated && heads.iter().any(|h| h.gate.is_none()) {
            return Err(Error::Parse("toa-gated head without gate parameters".into()));
        }
        Ok(Self {
            heads,
            w_o: doc.w_o.decode()?,
            variant,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MultiHeadDoc = serde_json::from_str(s)?;
        Self::from_doc(&doc)
    }
}
