//! Selective state-space recurrence.
//!
//! The continuous system `h' = A h + B x`, `y = C h` uses a diagonal `A`
//! stored per channel as `log(-A)`, so `A = -exp(a_log)` stays negative
//! under any update. Discretization uses `Ā = exp(ΔA)` and the first-order
//! input map `B̄ = ΔB`. With selection enabled, `B`, `C` and `Δ` are linear
//! functions of the current token, so `Ā, B̄, C̄` carry a time axis.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{join, Binder, Init};
use crate::tensor::Tensor;

/// Selection weights of one selective SSM over `D` channels and `N` states.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `log(-A)`, `[D, N]`.
    pub a_log: Var,
    /// `s_B`: `[D, N]`, maps a token to its `B` vector.
    pub b_proj: Var,
    /// `s_C`: `[D, N]`.
    pub c_proj: Var,
    /// `s_Δ`: `[D, D]`.
    pub dt_proj: Var,
    /// Additive term inside the softplus producing `Δ`, `[D]`.
    pub dt_bias: Var,
}

impl SsmParams {
    /// Registers parameters for `channels` channels and `state_dim` states.
    ///
    /// `-A` spans `1..=N` along the state axis and `softplus(dt_bias)` is
    /// uniform in `[0.001, 0.1]`.
    pub fn init(init: &mut Init<'_>, prefix: &str, channels: usize, state_dim: usize) -> Result<()> {
        if channels == 0 || state_dim == 0 {
            return Err(Error::invalid("ssm", "channel and state dimensions must be positive"));
        }
        let a_log = Tensor::from_fn(&[channels, state_dim], |i| ((i % state_dim) + 1) as f64)?.map(f64::ln);
        init.tensor(join(prefix, "a_log"), a_log);
        init.fan_in(join(prefix, "b_proj"), &[channels, state_dim], channels)?;
        init.fan_in(join(prefix, "c_proj"), &[channels, state_dim], channels)?;
        init.fan_in(join(prefix, "dt_proj"), &[channels, channels], channels)?;
        let rng = init.rng();
        let dt: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.001..=0.1)).collect();
        let bias = dt.into_iter().map(inverse_softplus).collect();
        init.tensor(join(prefix, "dt_bias"), Tensor::vector(bias)?);
        Ok(())
    }

    pub fn bind(b: &Binder<'_>, prefix: &str) -> Result<Self> {
        let p = SsmParams {
            a_log: b.get(&join(prefix, "a_log"))?,
            b_proj: b.get(&join(prefix, "b_proj"))?,
            c_proj: b.get(&join(prefix, "c_proj"))?,
            dt_proj: b.get(&join(prefix, "dt_proj"))?,
            dt_bias: b.get(&join(prefix, "dt_bias"))?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters from explicit tensors, as leaves of `g`.
    pub fn from_tensors(
        g: &Graph,
        a_log: Tensor,
        b_proj: Tensor,
        c_proj: Tensor,
        dt_proj: Tensor,
        dt_bias: Tensor,
    ) -> Result<Self> {
        let p = SsmParams {
            a_log: g.leaf(a_log),
            b_proj: g.leaf(b_proj),
            c_proj: g.leaf(c_proj),
            dt_proj: g.leaf(dt_proj),
            dt_bias: g.leaf(dt_bias),
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let [d, n] = self.a_log.shape() else {
            return Err(Error::invalid("ssm", format!("a_log must be [D, N], got {:?}", self.a_log.shape())));
        };
        let (d, n) = (*d, *n);
        let checks: [(&str, &Var, Vec<usize>); 4] = [
            ("b_proj", &self.b_proj, vec![d, n]),
            ("c_proj", &self.c_proj, vec![d, n]),
            ("dt_proj", &self.dt_proj, vec![d, d]),
            ("dt_bias", &self.dt_bias, vec![d]),
        ];
        for (name, v, want) in checks {
            if v.shape() != want.as_slice() {
                return Err(Error::invalid(
                    "ssm",
                    format!("{name} has shape {:?}, expected {want:?}", v.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(a_log)`.
    pub fn state_matrix(&self, g: &Graph) -> Result<Var> {
        let e = g.exp(&self.a_log)?;
        g.neg(&e)
    }
}

/// Per-timestep discretized parameters, each `[L, D, N]`.
#[derive(Clone, Debug)]
pub struct DiscreteParams {
    pub a_bar: Var,
    pub b_bar: Var,
    pub c_bar: Var,
}

impl DiscreteParams {
    pub fn len(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> Result<(usize, usize, usize)> {
        let s = self.a_bar.shape();
        if s.len() != 3 || self.b_bar.shape() != s || self.c_bar.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "discrete params",
                lhs: self.a_bar.shape().to_vec(),
                rhs: self.b_bar.shape().to_vec(),
            });
        }
        Ok((s[0], s[1], s[2]))
    }
}

/// Time-invariant discretized parameters, each `[D, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeInvariant {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
    pub c: Tensor,
}

impl TimeInvariant {
    pub fn new(a_bar: Tensor, b_bar: Tensor, c: Tensor) -> Result<Self> {
        if a_bar.rank() != 2 || b_bar.shape() != a_bar.shape() || c.shape() != a_bar.shape() {
            return Err(Error::ShapeMismatch {
                op: "time-invariant params",
                lhs: a_bar.shape().to_vec(),
                rhs: b_bar.shape().to_vec(),
            });
        }
        Ok(TimeInvariant { a_bar, b_bar, c })
    }

    /// Repeat over `len` timesteps as constants of `g`.
    pub fn repeat(&self, g: &Graph, len: usize) -> Result<DiscreteParams> {
        let (d, n) = (self.a_bar.shape()[0], self.a_bar.shape()[1]);
        let rep = |t: &Tensor| -> Result<Var> {
            let data = t.data().iter().cycle().take(len * d * n).cloned().collect();
            Ok(g.constant(Tensor::new(&[len, d, n], data)?))
        };
        Ok(DiscreteParams {
            a_bar: rep(&self.a_bar)?,
            b_bar: rep(&self.b_bar)?,
            c_bar: rep(&self.c)?,
        })
    }

    /// Convolution kernel `K[l, d] = Σ_n C Ā^l B̄` for `l < len`.
    pub fn kernel(&self, len: usize) -> Result<Tensor> {
        let (d, n) = (self.a_bar.shape()[0], self.a_bar.shape()[1]);
        let (a, b, c) = (self.a_bar.data(), self.b_bar.data(), self.c.data());
        let mut k = vec![0.0; len * d];
        for ch in 0..d {
            for s in 0..n {
                let i = ch * n + s;
                let mut power = 1.0;
                for l in 0..len {
                    k[l * d + ch] += c[i] * power * b[i];
                    power *= a[i];
                }
            }
        }
        Tensor::new(&[len, d], k)
    }
}

/// `Ā = exp(Δ ⊙ A)`, `B̄ = Δ ⊙ B` for equally shaped operands.
pub fn discretize(g: &Graph, a: &Var, b: &Var, delta: &Var) -> Result<(Var, Var)> {
    if let Some(&bad) = delta.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
        return Err(Error::NonPositiveStep(bad));
    }
    for other in [a, b] {
        if other.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "discretize",
                lhs: other.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
    }
    let da = g.mul(delta, a)?;
    let a_bar = g.exp(&da)?;
    let b_bar = g.mul(delta, b)?;
    Ok((a_bar, b_bar))
}

/// Step sizes `Δ_t = softplus(dt_bias + s_Δ(x_t))`, `[L, D]`.
pub fn step_sizes(g: &Graph, x: &Var, params: &SsmParams) -> Result<Var> {
    let (l, d) = seq_dims(x, params)?;
    let pre = g.matmul(x, &params.dt_proj)?;
    let bias = g.gather(&params.dt_bias, Arc::new((0..l * d).map(|i| i % d).collect()), &[l, d])?;
    let pre = g.add(&pre, &bias)?;
    g.softplus(&pre)
}

/// Input-dependent discretization of a `[L, D]` token sequence.
pub fn select_params(g: &Graph, x: &Var, params: &SsmParams) -> Result<DiscreteParams> {
    let (l, d) = seq_dims(x, params)?;
    let n = params.state_dim();
    let delta = step_sizes(g, x, params)?;
    let b_sel = g.matmul(x, &params.b_proj)?;
    let c_sel = g.matmul(x, &params.c_proj)?;
    let a = params.state_matrix(g)?;

    let shape = [l, d, n];
    let per = |f: &dyn Fn(usize, usize, usize) -> usize| -> Arc<Vec<usize>> {
        let mut idx = Vec::with_capacity(l * d * n);
        for t in 0..l {
            for ch in 0..d {
                for s in 0..n {
                    idx.push(f(t, ch, s));
                }
            }
        }
        Arc::new(idx)
    };
    let delta_e = g.gather(&delta, per(&|t, ch, _| t * d + ch), &shape)?;
    let a_e = g.gather(&a, per(&|_, ch, s| ch * n + s), &shape)?;
    let token_idx = per(&|t, _, s| t * n + s);
    let b_e = g.gather(&b_sel, token_idx.clone(), &shape)?;
    let c_bar = g.gather(&c_sel, token_idx, &shape)?;
    let (a_bar, b_bar) = discretize(g, &a_e, &b_e, &delta_e)?;
    Ok(DiscreteParams { a_bar, b_bar, c_bar })
}

fn seq_dims(x: &Var, params: &SsmParams) -> Result<(usize, usize)> {
    match x.shape() {
        [l, d] if *d == params.channels() => Ok((*l, *d)),
        other => Err(Error::ShapeMismatch {
            op: "select_params",
            lhs: other.to_vec(),
            rhs: params.dt_proj.shape().to_vec(),
        }),
    }
}

/// Sequential recurrence `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = Σ_n C̄_t h_t`.
///
/// Returns `[L, D]`; every call adds `L` to the graph's scan-step counter.
pub fn selective_scan(g: &Graph, x: &Var, dp: &DiscreteParams, h0: &Var) -> Result<Var> {
    let (l, d, n) = dp.dims()?;
    if x.shape() != [l, d] {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            lhs: x.shape().to_vec(),
            rhs: dp.a_bar.shape().to_vec(),
        });
    }
    if h0.shape() != [d, n] {
        return Err(Error::ShapeMismatch {
            op: "selective_scan initial state",
            lhs: h0.shape().to_vec(),
            rhs: vec![d, n],
        });
    }
    let xs = x.value().clone();
    let (a, b, c) = (dp.a_bar.value().clone(), dp.b_bar.value().clone(), dp.c_bar.value().clone());
    let h_init = h0.value().clone();
    let dn = d * n;

    let mut states = vec![0.0; l * dn];
    let mut y = vec![0.0; l * d];
    {
        let (xd, ad, bd, cd) = (xs.data(), a.data(), b.data(), c.data());
        for t in 0..l {
            let (done, rest) = states.split_at_mut(t * dn);
            let cur = &mut rest[..dn];
            let prev: &[f64] = if t == 0 { h_init.data() } else { &done[(t - 1) * dn..] };
            for ch in 0..d {
                let xv = xd[t * d + ch];
                let mut acc = 0.0;
                for s in 0..n {
                    let k = ch * n + s;
                    let i = t * dn + k;
                    let h = ad[i] * prev[k] + bd[i] * xv;
                    cur[k] = h;
                    acc += cd[i] * h;
                }
                y[t * d + ch] = acc;
            }
        }
    }
    g.count_scan_steps(l as u64);

    let inputs = [x, &dp.a_bar, &dp.b_bar, &dp.c_bar, h0];
    g.record("selective_scan", &[l, d], y, &inputs, move |gy, needs| {
        let (xd, ad, bd, cd, h0d) = (xs.data(), a.data(), b.data(), c.data(), h_init.data());
        let mut gx = vec![0.0; l * d];
        let mut ga = vec![0.0; l * dn];
        let mut gb = vec![0.0; l * dn];
        let mut gc = vec![0.0; l * dn];
        // running dL/dh_t
        let mut gh = vec![0.0; dn];
        for t in (0..l).rev() {
            let prev = if t > 0 { &states[(t - 1) * dn..t * dn] } else { h0d };
            let cur = &states[t * dn..(t + 1) * dn];
            for ch in 0..d {
                let gyv = gy[t * d + ch];
                let xv = xd[t * d + ch];
                let mut gxv = 0.0;
                for s in 0..n {
                    let k = ch * n + s;
                    let i = t * dn + k;
                    gh[k] += gyv * cd[i];
                    gc[i] = gyv * cur[k];
                    ga[i] = gh[k] * prev[k];
                    gb[i] = gh[k] * xv;
                    gxv += gh[k] * bd[i];
                    gh[k] *= ad[i];
                }
                gx[t * d + ch] = gxv;
            }
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(ga),
            needs[2].then_some(gb),
            needs[3].then_some(gc),
            needs[4].then_some(gh),
        ]
    })
}

/// Kernel of the equivalent global convolution, `[len, D]`.
///
/// Fails unless every timestep of `dp` carries identical parameters.
pub fn conv_kernel_form(dp: &DiscreteParams, len: usize) -> Result<Tensor> {
    let (l, d, n) = dp.dims()?;
    let first = |v: &Var| -> Result<Tensor> {
        let data = v.data();
        let dn = d * n;
        if (1..l).any(|t| data[t * dn..(t + 1) * dn] != data[..dn]) {
            return Err(Error::TimeVarying);
        }
        Tensor::new(&[d, n], data[..dn].to_vec())
    };
    TimeInvariant::new(first(&dp.a_bar)?, first(&dp.b_bar)?, first(&dp.c_bar)?)?.kernel(len)
}

/// Causal per-channel convolution `y[t] = Σ_{j≤t} K[j] x[t-j]` of `[L, D]` inputs.
pub fn causal_conv(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (l, d) = match x.shape() {
        [l, d] => (*l, *d),
        s => return Err(Error::invalid("causal_conv", format!("expected [L, D], got {s:?}"))),
    };
    if kernel.rank() != 2 || kernel.shape()[1] != d || kernel.shape()[0] < l {
        return Err(Error::ShapeMismatch {
            op: "causal_conv",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for j in 0..=t {
            for ch in 0..d {
                y[t * d + ch] += kd[j * d + ch] * xd[(t - j) * d + ch];
            }
        }
    }
    Tensor::new(&[l, d], y)
}

/// `x` such that `softplus(x) = y`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}
