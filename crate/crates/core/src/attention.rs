//! Fused attention (FAME): multi-headed scaled dot-product self-attention
//! and single-headed outer-product attention, combined by a learned
//! two-way softmax gate.
//!
//! For an input `X[N×d]` the block computes
//!
//! ```text
//! Z      = α₁·Z_self + α₂·Z_outer          (α₁, α₂) = softmax(fusion_logits)
//! Z_self = concat_h softmax(Q_h K_hᵀ / √d_head) V_h · W_O_self
//! Z_outer[q] = flatten(Σᵢ act((q ⊙ kᵢ)/√d) ⊗ vᵢ) · W_O_outer
//! ```
//!
//! `act` is a row-wise `tanh` or a softmax over the `d` components
//! ([`OpaScore`]). With [`OpaCombine::Hadamard`] the per-query `d×d` sum is
//! replaced by `Σᵢ act(..) ⊙ vᵢ`, which keeps the projection `d×d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{init, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OpaScore {
    #[default]
    Tanh,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OpaCombine {
    #[default]
    TrueOuterProjected,
    Hadamard,
}

impl std::str::FromStr for OpaScore {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "softmax" => Ok(Self::Softmax),
            _ => Err(Error::invalid(format!("unknown opa_score `{s}`"))),
        }
    }
}

impl std::str::FromStr for OpaCombine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true_outer_projected" => Ok(Self::TrueOuterProjected),
            "hadamard" => Ok(Self::Hadamard),
            _ => Err(Error::invalid(format!("unknown opa_combine `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FameConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub opa_score: OpaScore,
    pub opa_combine: OpaCombine,
    pub max_len: usize,
}

impl Default for FameConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            opa_score: OpaScore::Tanh,
            opa_combine: OpaCombine::TrueOuterProjected,
            max_len: 40,
        }
    }
}

impl FameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    keys: Vec<bool>,
    causal: bool,
}

impl AttnMask {
    /// Every position visible.
    pub fn all(n: usize) -> Self {
        Self {
            keys: vec![true; n],
            causal: false,
        }
    }

    /// `keys[i] == false` hides key position `i` from every query.
    pub fn from_keys(keys: Vec<bool>) -> Self {
        Self { keys, causal: false }
    }

    /// Query `t` sees only keys `0..=t`.
    pub fn causal(n: usize) -> Self {
        Self {
            keys: vec![true; n],
            causal: true,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[bool] {
        &self.keys
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.keys[key] && (!self.causal || key <= query)
    }

    fn is_full(&self) -> bool {
        !self.causal && self.keys.iter().all(|&k| k)
    }

    /// Fails when some query has no visible key.
    fn check(&self, n: usize) -> Result<()> {
        if self.keys.len() != n {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![n],
                rhs: vec![self.keys.len()],
            });
        }
        if (0..n).any(|q| !(0..n).any(|k| self.allows(q, k))) {
            return Err(Error::AllMasked);
        }
        Ok(())
    }

    /// `N×N` additive bias: 0 where allowed, −∞ where hidden.
    fn additive(&self, n: usize) -> Tensor {
        let data = (0..n * n)
            .map(|i| if self.allows(i / n, i % n) { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![n, n], data).expect("mask shape")
    }
}

/// Scaled dot-product attention over `n_heads` column blocks of the
/// already projected `q[Nq×d]`, `k[Nk×d]`, `v[Nk×d]`. Returns the
/// concatenated heads and the per-head weight matrices.
fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    bias: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    let dh = d / n_heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, inv);
        if let Some(b) = bias {
            s = g.add(s, b)?;
        }
        let a = g.softmax(s, 1)?;
        heads.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let z = if n_heads == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok((z, weights))
}

/// One FAME block. Parameter names live under `<prefix>.`.
#[derive(Clone, Debug)]
pub struct FameLayer {
    pub cfg: FameConfig,
    pub wq_self: ParamId,
    pub wk_self: ParamId,
    pub wv_self: ParamId,
    pub wo_self: ParamId,
    pub wq_outer: ParamId,
    pub wk_outer: ParamId,
    pub wv_outer: ParamId,
    pub wo_outer: ParamId,
    pub fusion_logits: ParamId,
}

impl FameLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: FameConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut w = |name: &str, rows: usize| store.add(format!("{prefix}.{name}"), init::xavier(rows, d, rng));
        let wq_self = w("wq_self", d)?;
        let wk_self = w("wk_self", d)?;
        let wv_self = w("wv_self", d)?;
        let wo_self = w("wo_self", d)?;
        let wq_outer = w("wq_outer", d)?;
        let wk_outer = w("wk_outer", d)?;
        let wv_outer = w("wv_outer", d)?;
        let wo_rows = match cfg.opa_combine {
            OpaCombine::TrueOuterProjected => d * d,
            OpaCombine::Hadamard => d,
        };
        let wo_outer = w("wo_outer", wo_rows)?;
        let fusion_logits = store.add(format!("{prefix}.fusion_logits"), Tensor::zeros(&[2]))?;
        Ok(Self {
            cfg,
            wq_self,
            wk_self,
            wv_self,
            wo_self,
            wq_outer,
            wk_outer,
            wv_outer,
            wo_outer,
            fusion_logits,
        })
    }

    fn check_input(&self, g: &Graph, x: Var, mask: &AttnMask) -> Result<usize> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.cfg.d_model {
            return Err(Error::Shape {
                op: "attention input",
                lhs: shape.to_vec(),
                rhs: vec![shape[0], self.cfg.d_model],
            });
        }
        let n = shape[0];
        mask.check(n)?;
        Ok(n)
    }

    fn msa_parts(&self, g: &mut Graph, x: Var, mask: &AttnMask) -> Result<(Var, Vec<Var>)> {
        let n = self.check_input(g, x, mask)?;
        let (wq, wk, wv, wo) = (
            g.param(self.wq_self),
            g.param(self.wk_self),
            g.param(self.wv_self),
            g.param(self.wo_self),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let bias = (!mask.is_full()).then(|| g.constant(mask.additive(n)));
        let (z, weights) = multi_head(g, q, k, v, self.cfg.n_heads, bias)?;
        Ok((g.matmul(z, wo)?, weights))
    }

    /// Multi-headed scaled dot-product self-attention.
    pub fn msa_forward(&self, g: &mut Graph, x: Var, mask: &AttnMask) -> Result<Var> {
        Ok(self.msa_parts(g, x, mask)?.0)
    }

    /// Per-head `N×N` attention weight matrices of the MSA branch.
    pub fn msa_weights(&self, g: &mut Graph, x: Var, mask: &AttnMask) -> Result<Vec<Tensor>> {
        let (_, ws) = self.msa_parts(g, x, mask)?;
        Ok(ws.into_iter().map(|w| g.value(w).clone()).collect())
    }

    /// Outer-product attention; masked keys contribute nothing.
    pub fn opa_forward(&self, g: &mut Graph, x: Var, mask: &AttnMask) -> Result<Var> {
        let n = self.check_input(g, x, mask)?;
        let d = self.cfg.d_model;
        let (wq, wk, wv, wo) = (
            g.param(self.wq_outer),
            g.param(self.wk_outer),
            g.param(self.wv_outer),
            g.param(self.wo_outer),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let inv = 1.0 / (d as f64).sqrt();
        let mut rows = Vec::with_capacity(n);
        for t in 0..n {
            let qt = g.slice_rows(q, t, 1)?;
            let p = g.mul_row_vec(k, qt)?;
            let p = g.scale(p, inv);
            let mut s = match self.cfg.opa_score {
                OpaScore::Tanh => g.tanh(p),
                OpaScore::Softmax => g.softmax(p, 1)?,
            };
            if (0..n).any(|i| !mask.allows(t, i)) {
                let keep: Vec<f64> = (0..n * d)
                    .map(|j| if mask.allows(t, j / d) { 1.0 } else { 0.0 })
                    .collect();
                let m = g.constant(Tensor::new(vec![n, d], keep)?);
                s = g.mul(s, m)?;
            }
            let z = match self.cfg.opa_combine {
                OpaCombine::TrueOuterProjected => {
                    // Σᵢ sᵢ ⊗ vᵢ = Sᵀ·V
                    let st = g.transpose(s)?;
                    let outer = g.matmul(st, v)?;
                    g.reshape(outer, &[1, d * d])?
                }
                OpaCombine::Hadamard => {
                    let sv = g.mul(s, v)?;
                    g.sum_rows(sv)?
                }
            };
            rows.push(z);
        }
        let stacked = g.concat_rows(&rows)?;
        g.matmul(stacked, wo)
    }

    /// `α₁·z_self + α₂·z_outer`.
    pub fn fuse(&self, g: &mut Graph, z_self: Var, z_outer: Var) -> Result<Var> {
        if g.shape(z_self) != g.shape(z_outer) {
            return Err(Error::Shape {
                op: "fame_fuse",
                lhs: g.shape(z_self).to_vec(),
                rhs: g.shape(z_outer).to_vec(),
            });
        }
        let logits = g.param(self.fusion_logits);
        let alpha = g.softmax(logits, 0)?;
        let a1 = g.index(alpha, 0)?;
        let a2 = g.index(alpha, 1)?;
        let s = g.scalar_mul(a1, z_self)?;
        let o = g.scalar_mul(a2, z_outer)?;
        g.add(s, o)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &AttnMask) -> Result<Var> {
        let zs = self.msa_forward(g, x, mask)?;
        let zo = self.opa_forward(g, x, mask)?;
        self.fuse(g, zs, zo)
    }

    /// Current gate weights `(α₁, α₂)`.
    pub fn alphas(&self, store: &ParamStore) -> (f64, f64) {
        let l = store.value(self.fusion_logits).data();
        let m = l[0].max(l[1]);
        let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
        (e0 / (e0 + e1), e1 / (e0 + e1))
    }
}

/// Standard multi-head attention from decoder queries onto encoder memory.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub n_heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::invalid("d_model must be a multiple of n_heads"));
        }
        let mut w = |name: &str| store.add(format!("{prefix}.{name}"), init::xavier(d, d, rng));
        Ok(Self {
            n_heads,
            wq: w("wq")?,
            wk: w("wk")?,
            wv: w("wv")?,
            wo: w("wo")?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var) -> Result<Var> {
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let (z, _) = multi_head(g, q, k, v, self.n_heads, None)?;
        g.matmul(z, wo)
    }
}
