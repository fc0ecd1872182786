//! Composite layers: squeeze-excitation gate, the EVSS dual-branch block,
//! the inverted residual block, the stem and stage downsamplers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conv::Conv2d;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{join, Binder, Init};
use crate::scan::{build_plan, es2d, ss2d, GroupScan, Merge};
use crate::ssm::SsmParams;

pub const NORM_EPS: f64 = 1e-5;
pub const MIN_SQUEEZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "EVSS")]
    Evss,
    #[serde(rename = "InRes")]
    InRes,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Evss => "EVSS",
            BlockKind::InRes => "InRes",
        })
    }
}

/// Assignment of block kinds to the four stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// EVSS in stages 1–2, inverted residual in 3–4.
    #[default]
    Inverted,
    /// Inverted residual in stages 1–2, EVSS in 3–4.
    Previous,
    AllEvss,
    AllInres,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Layout::Inverted, Layout::Previous, Layout::AllEvss, Layout::AllInres];
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverted" => Ok(Layout::Inverted),
            "previous" => Ok(Layout::Previous),
            "all-evss" => Ok(Layout::AllEvss),
            "all-inres" => Ok(Layout::AllInres),
            other => Err(Error::Spec(format!("unknown layout `{other}`"))),
        }
    }
}

/// Block kind for 1-based `stage` under `layout`.
pub fn stage_rule(stage: usize, layout: Layout) -> Result<BlockKind> {
    if !(1..=4).contains(&stage) {
        return Err(Error::invalid("stage_rule", format!("stage {stage} outside 1..=4")));
    }
    let early = stage <= 2;
    Ok(match layout {
        Layout::Inverted if early => BlockKind::Evss,
        Layout::Inverted => BlockKind::InRes,
        Layout::Previous if early => BlockKind::InRes,
        Layout::Previous => BlockKind::Evss,
        Layout::AllEvss => BlockKind::Evss,
        Layout::AllInres => BlockKind::InRes,
    })
}

/// Local branch of an EVSS block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalConv {
    #[default]
    Depthwise,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub channels_in: usize,
    pub channels_out: usize,
    pub stride: usize,
    pub skip_step: usize,
    pub se_reduction: usize,
    pub expansion: usize,
    pub state_dim: usize,
    /// Skip scan when true, full four-direction cross scan otherwise.
    pub es2d: bool,
    pub group_scan: GroupScan,
    pub merge: Merge,
    /// Convolutional branch of the EVSS block.
    pub fusion: bool,
    pub local_conv: LocalConv,
    pub outer_residual: bool,
}

impl BlockConfig {
    pub fn evss(channels: usize) -> Self {
        BlockConfig {
            kind: BlockKind::Evss,
            channels_in: channels,
            channels_out: channels,
            stride: 1,
            skip_step: 2,
            se_reduction: 4,
            expansion: 4,
            state_dim: 16,
            es2d: true,
            group_scan: GroupScan::Single,
            merge: Merge::Sum,
            fusion: true,
            local_conv: LocalConv::Depthwise,
            outer_residual: false,
        }
    }

    pub fn inres(channels_in: usize, channels_out: usize, stride: usize) -> Self {
        BlockConfig {
            kind: BlockKind::InRes,
            channels_in,
            channels_out,
            stride,
            ..BlockConfig::evss(channels_in)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Spec(reason));
        if self.channels_in == 0 || self.channels_out == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be positive".into());
        }
        match self.kind {
            BlockKind::Evss => {
                if self.channels_in != self.channels_out || self.stride != 1 {
                    return bad("EVSS blocks preserve channels and use stride 1".into());
                }
                if self.skip_step == 0 || self.state_dim == 0 {
                    return bad("skip_step and state_dim must be positive".into());
                }
            }
            BlockKind::InRes => {
                if !(1..=2).contains(&self.stride) {
                    return bad(format!("InRes stride must be 1 or 2, got {}", self.stride));
                }
                if self.expansion == 0 {
                    return bad("expansion must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Identity shortcut applies.
    pub fn has_shortcut(&self) -> bool {
        match self.kind {
            BlockKind::Evss => self.outer_residual,
            BlockKind::InRes => self.stride == 1 && self.channels_in == self.channels_out,
        }
    }

    pub fn local_groups(&self) -> usize {
        match self.local_conv {
            LocalConv::Depthwise => self.channels_in,
            LocalConv::Full => 1,
        }
    }
}

/// Bottleneck width of a squeeze-excitation gate.
pub fn squeezed_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(MIN_SQUEEZE)
}

// ---- squeeze-excitation ----------------------------------------------------

#[derive(Clone, Debug)]
pub struct SeWeights {
    /// `[S, C]`
    pub w1: Var,
    pub b1: Var,
    /// `[C, S]`
    pub w2: Var,
    pub b2: Var,
}

impl SeWeights {
    pub fn init(init: &mut Init<'_>, prefix: &str, channels: usize, squeezed: usize) -> Result<()> {
        init.fan_in(join(prefix, "w1"), &[squeezed, channels], channels)?;
        init.constant(join(prefix, "b1"), &[squeezed], 0.0)?;
        init.fan_in(join(prefix, "w2"), &[channels, squeezed], squeezed)?;
        init.constant(join(prefix, "b2"), &[channels], 0.0)?;
        Ok(())
    }

    pub fn bind(b: &Binder<'_>, prefix: &str) -> Result<Self> {
        Ok(SeWeights {
            w1: b.get(&join(prefix, "w1"))?,
            b1: b.get(&join(prefix, "b1"))?,
            w2: b.get(&join(prefix, "w2"))?,
            b2: b.get(&join(prefix, "b2"))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.w2.shape()[0]
    }
}

/// Per-channel gate `sigmoid(W₂ relu(W₁ gap(x) + b₁) + b₂)`, shape `[C]`.
pub fn se_gate_values(g: &Graph, x: &Var, w: &SeWeights) -> Result<Var> {
    let c = x.shape()[0];
    if w.channels() != c || w.w1.shape().get(1) != Some(&c) {
        return Err(Error::ShapeMismatch {
            op: "se_gate",
            lhs: x.shape().to_vec(),
            rhs: w.w1.shape().to_vec(),
        });
    }
    let pooled = g.global_avg_pool(x)?;
    let pooled = g.reshape(&pooled, &[c, 1])?;
    let s = g.matmul(&w.w1, &pooled)?;
    let s = g.reshape(&s, &[w.w1.shape()[0]])?;
    let s = g.add(&s, &w.b1)?;
    let s = g.relu(&s)?;
    let sq = s.numel();
    let s = g.reshape(&s, &[sq, 1])?;
    let e = g.matmul(&w.w2, &s)?;
    let e = g.reshape(&e, &[c])?;
    let e = g.add(&e, &w.b2)?;
    g.sigmoid(&e)
}

/// Squeeze-excitation: `x ⊙ gate`, the gate broadcast over H and W.
pub fn se_gate(g: &Graph, x: &Var, w: &SeWeights) -> Result<Var> {
    let gate = se_gate_values(g, x, w)?;
    let gate = g.broadcast_channels(&gate, x.shape())?;
    g.mul(x, &gate)
}

// ---- EVSS --------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvssWeights {
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub ssm: SsmParams,
    pub se_scan: SeWeights,
    /// Local branch, present when fusion is enabled.
    pub local: Option<LocalBranch>,
}

#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub weight: Var,
    pub bias: Var,
    pub se: SeWeights,
}

impl EvssWeights {
    pub fn init(init: &mut Init<'_>, prefix: &str, cfg: &BlockConfig) -> Result<()> {
        let c = cfg.channels_in;
        let sq = squeezed_width(c, cfg.se_reduction);
        init.constant(join(prefix, "norm.gamma"), &[c], 1.0)?;
        init.constant(join(prefix, "norm.beta"), &[c], 0.0)?;
        SsmParams::init(init, &join(prefix, "ssm"), c, cfg.state_dim)?;
        SeWeights::init(init, &join(prefix, "se_scan"), c, sq)?;
        if cfg.fusion {
            let cin_g = c / cfg.local_groups();
            init.fan_in(join(prefix, "local.weight"), &[c, cin_g, 3, 3], cin_g * 9)?;
            init.constant(join(prefix, "local.bias"), &[c], 0.0)?;
            SeWeights::init(init, &join(prefix, "se_local"), c, sq)?;
        }
        Ok(())
    }

    pub fn bind(b: &Binder<'_>, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        let local = if cfg.fusion {
            Some(LocalBranch {
                weight: b.get(&join(prefix, "local.weight"))?,
                bias: b.get(&join(prefix, "local.bias"))?,
                se: SeWeights::bind(b, &join(prefix, "se_local"))?,
            })
        } else {
            None
        };
        Ok(EvssWeights {
            norm_gamma: b.get(&join(prefix, "norm.gamma"))?,
            norm_beta: b.get(&join(prefix, "norm.beta"))?,
            ssm: SsmParams::bind(b, &join(prefix, "ssm"))?,
            se_scan: SeWeights::bind(b, &join(prefix, "se_scan"))?,
            local,
        })
    }
}

/// Channel normalization with a per-channel affine map.
pub fn norm_affine(g: &Graph, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
    let n = g.channel_norm(x, NORM_EPS)?;
    let gm = g.broadcast_channels(gamma, x.shape())?;
    let bt = g.broadcast_channels(beta, x.shape())?;
    let n = g.mul(&n, &gm)?;
    g.add(&n, &bt)
}

/// `SE(ES2D(norm x)) + SE(Conv3x3(norm x))`.
pub fn evss_block(g: &Graph, x: &Var, cfg: &BlockConfig, w: &EvssWeights) -> Result<Var> {
    if cfg.kind != BlockKind::Evss {
        return Err(Error::invalid("evss_block", format!("config is for a {} block", cfg.kind)));
    }
    cfg.validate()?;
    let [c, h, wd] = x.shape() else {
        return Err(Error::invalid("evss_block", format!("expected [C, H, W], got {:?}", x.shape())));
    };
    if *c != cfg.channels_in {
        return Err(Error::ShapeMismatch {
            op: "evss_block",
            lhs: x.shape().to_vec(),
            rhs: vec![cfg.channels_in],
        });
    }
    let xn = norm_affine(g, x, &w.norm_gamma, &w.norm_beta)?;

    let global = if cfg.es2d {
        let plan = build_plan(*h, *wd, cfg.skip_step.min(*h).min(*wd))?;
        es2d(g, &xn, &w.ssm, &plan, cfg.group_scan, cfg.merge)?
    } else {
        ss2d(g, &xn, &w.ssm, cfg.merge)?
    };
    let mut out = se_gate(g, &global, &w.se_scan)?;

    if cfg.fusion {
        let local = w
            .local
            .as_ref()
            .ok_or_else(|| Error::invalid("evss_block", "fusion enabled but local branch weights missing"))?;
        let y = g.conv2d(&xn, &local.weight, Some(&local.bias), Conv2d::same(3).groups(cfg.local_groups()))?;
        let y = se_gate(g, &y, &local.se)?;
        out = g.add(&out, &y)?;
    }
    if cfg.outer_residual {
        out = g.add(&out, x)?;
    }
    Ok(out)
}

// ---- inverted residual -------------------------------------------------------

#[derive(Clone, Debug)]
pub struct InResWeights {
    pub expand_w: Var,
    pub expand_b: Var,
    pub dw_w: Var,
    pub dw_b: Var,
    pub se: SeWeights,
    pub project_w: Var,
    pub project_b: Var,
}

impl InResWeights {
    pub fn init(init: &mut Init<'_>, prefix: &str, cfg: &BlockConfig) -> Result<()> {
        let (cin, cout) = (cfg.channels_in, cfg.channels_out);
        let hidden = cin * cfg.expansion;
        init.fan_in(join(prefix, "expand.weight"), &[hidden, cin, 1, 1], cin)?;
        init.constant(join(prefix, "expand.bias"), &[hidden], 0.0)?;
        init.fan_in(join(prefix, "dw.weight"), &[hidden, 1, 3, 3], 9)?;
        init.constant(join(prefix, "dw.bias"), &[hidden], 0.0)?;
        SeWeights::init(init, &join(prefix, "se"), hidden, squeezed_width(cin, cfg.se_reduction))?;
        init.fan_in(join(prefix, "project.weight"), &[cout, hidden, 1, 1], hidden)?;
        init.constant(join(prefix, "project.bias"), &[cout], 0.0)?;
        Ok(())
    }

    pub fn bind(b: &Binder<'_>, prefix: &str) -> Result<Self> {
        Ok(InResWeights {
            expand_w: b.get(&join(prefix, "expand.weight"))?,
            expand_b: b.get(&join(prefix, "expand.bias"))?,
            dw_w: b.get(&join(prefix, "dw.weight"))?,
            dw_b: b.get(&join(prefix, "dw.bias"))?,
            se: SeWeights::bind(b, &join(prefix, "se"))?,
            project_w: b.get(&join(prefix, "project.weight"))?,
            project_b: b.get(&join(prefix, "project.bias"))?,
        })
    }
}

/// Expand 1×1 → depthwise 3×3 → SE → project 1×1, plus identity shortcut
/// when stride is 1 and channels match.
pub fn inres_block(g: &Graph, x: &Var, cfg: &BlockConfig, w: &InResWeights) -> Result<Var> {
    if cfg.kind != BlockKind::InRes {
        return Err(Error::invalid("inres_block", format!("config is for a {} block", cfg.kind)));
    }
    cfg.validate()?;
    let hidden = w.expand_w.shape()[0];
    let pointwise = Conv2d {
        stride: 1,
        padding: 0,
        groups: 1,
    };
    let h = g.conv2d(x, &w.expand_w, Some(&w.expand_b), pointwise)?;
    let h = g.silu(&h)?;
    let h = g.conv2d(&h, &w.dw_w, Some(&w.dw_b), Conv2d::same(3).stride(cfg.stride).groups(hidden))?;
    let h = g.silu(&h)?;
    let h = se_gate(g, &h, &w.se)?;
    let h = g.conv2d(&h, &w.project_w, Some(&w.project_b), pointwise)?;
    if cfg.has_shortcut() {
        g.add(&h, x)
    } else {
        Ok(h)
    }
}

// ---- stem and downsampling ---------------------------------------------------

/// Width of the stem's intermediate convolution.
pub fn stem_hidden(width: usize) -> usize {
    (width / 2).max(1)
}

#[derive(Clone, Debug)]
pub struct StemWeights {
    pub conv1: Var,
    pub conv2: Var,
}

impl StemWeights {
    pub fn init(init: &mut Init<'_>, prefix: &str, in_channels: usize, width: usize) -> Result<()> {
        let mid = stem_hidden(width);
        init.fan_in(join(prefix, "conv1.weight"), &[mid, in_channels, 3, 3], in_channels * 9)?;
        init.fan_in(join(prefix, "conv2.weight"), &[width, mid, 3, 3], mid * 9)?;
        Ok(())
    }

    pub fn bind(b: &Binder<'_>, prefix: &str) -> Result<Self> {
        Ok(StemWeights {
            conv1: b.get(&join(prefix, "conv1.weight"))?,
            conv2: b.get(&join(prefix, "conv2.weight"))?,
        })
    }
}

/// Two bias-free 3×3 convolutions (stride 2, then 1) with SiLU: halves H and W.
pub fn stem(g: &Graph, x: &Var, w: &StemWeights) -> Result<Var> {
    let [_, h, wd] = x.shape() else {
        return Err(Error::invalid("stem", format!("expected [C, H, W], got {:?}", x.shape())));
    };
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::invalid("stem", format!("spatial extents must be even, got {h}x{wd}")));
    }
    let y = g.conv2d(x, &w.conv1, None, Conv2d::same(3).stride(2))?;
    let y = g.silu(&y)?;
    let y = g.conv2d(&y, &w.conv2, None, Conv2d::same(3))?;
    g.silu(&y)
}

#[derive(Clone, Debug)]
pub struct DownsampleWeights {
    pub weight: Var,
    pub bias: Var,
}

impl DownsampleWeights {
    pub fn init(init: &mut Init<'_>, prefix: &str, cin: usize, cout: usize) -> Result<()> {
        init.fan_in(join(prefix, "weight"), &[cout, cin, 3, 3], cin * 9)?;
        init.constant(join(prefix, "bias"), &[cout], 0.0)?;
        Ok(())
    }

    pub fn bind(b: &Binder<'_>, prefix: &str) -> Result<Self> {
        Ok(DownsampleWeights {
            weight: b.get(&join(prefix, "weight"))?,
            bias: b.get(&join(prefix, "bias"))?,
        })
    }
}

/// 3×3 stride-2 convolution.
pub fn downsample(g: &Graph, x: &Var, w: &DownsampleWeights) -> Result<Var> {
    g.conv2d(x, &w.weight, Some(&w.bias), Conv2d::same(3).stride(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{Precision, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(f: impl FnOnce(&mut Init<'_>)) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        f(&mut init);
        store
    }

    fn zeroed(store: &ParamStore, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, t) in store.iter() {
            let t = if keep(k) { t.clone() } else { Tensor::zeros(t.shape()).unwrap() };
            out.insert(k.clone(), t);
        }
        out
    }

    #[test]
    fn stage_rule_layouts() {
        assert_eq!(stage_rule(1, Layout::Inverted).unwrap(), BlockKind::Evss);
        assert_eq!(stage_rule(2, Layout::Inverted).unwrap(), BlockKind::Evss);
        assert_eq!(stage_rule(3, Layout::Inverted).unwrap(), BlockKind::InRes);
        assert_eq!(stage_rule(4, Layout::Inverted).unwrap(), BlockKind::InRes);
        assert_eq!(stage_rule(1, Layout::Previous).unwrap(), BlockKind::InRes);
        assert_eq!(stage_rule(3, Layout::Previous).unwrap(), BlockKind::Evss);
        assert_eq!(stage_rule(2, Layout::AllEvss).unwrap(), BlockKind::Evss);
        assert_eq!(stage_rule(4, Layout::AllInres).unwrap(), BlockKind::InRes);
        assert!(stage_rule(0, Layout::Inverted).is_err());
        assert!(stage_rule(5, Layout::Inverted).is_err());
    }

    #[test]
    fn se_zero_weights_halve_input() {
        let store = store_with(|i| SeWeights::init(i, "se", 6, 4).unwrap());
        let store = zeroed(&store, |_| false);
        let g = Graph::new(Precision::Double);
        let b = Binder::frozen(&g, &store);
        let w = SeWeights::bind(&b, "se").unwrap();
        let x = g.constant(Tensor::from_fn(&[6, 3, 3], |i| i as f64 - 20.0).unwrap());
        let y = se_gate(&g, &x, &w).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
        let zero = g.constant(Tensor::zeros(&[6, 3, 3]).unwrap());
        let store2 = store_with(|i| SeWeights::init(i, "se", 6, 4).unwrap());
        let b2 = Binder::frozen(&g, &store2);
        let w2 = SeWeights::bind(&b2, "se").unwrap();
        assert!(se_gate(&g, &zero, &w2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_channel_mismatch() {
        let store = store_with(|i| SeWeights::init(i, "se", 6, 4).unwrap());
        let g = Graph::new(Precision::Double);
        let b = Binder::frozen(&g, &store);
        let w = SeWeights::bind(&b, "se").unwrap();
        let x = g.constant(Tensor::zeros(&[5, 2, 2]).unwrap());
        assert!(se_gate(&g, &x, &w).is_err());
    }

    #[test]
    fn squeeze_floor() {
        assert_eq!(squeezed_width(8, 4), 4);
        assert_eq!(squeezed_width(12, 4), 4);
        assert_eq!(squeezed_width(96, 4), 24);
    }

    #[test]
    fn evss_zero_branches_give_zero() {
        let cfg = BlockConfig::evss(8);
        let store = store_with(|i| EvssWeights::init(i, "b", &cfg).unwrap());
        // zero drive (B projection) and zero local conv
        let store = zeroed(&store, |k| !(k.ends_with("ssm.b_proj") || k.starts_with("b.local")));
        let g = Graph::new(Precision::Double);
        let binder = Binder::frozen(&g, &store);
        let w = EvssWeights::bind(&binder, "b", &cfg).unwrap();
        let x = g.constant(Tensor::from_fn(&[8, 6, 6], |i| (i as f64 * 0.37).sin()).unwrap());
        let y = evss_block(&g, &x, &cfg, &w).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn evss_preserves_shape() {
        for (c, hw) in [(8, 8), (16, 14), (8, 14)] {
            let cfg = BlockConfig::evss(c);
            let store = store_with(|i| EvssWeights::init(i, "b", &cfg).unwrap());
            let g = Graph::inference(Precision::Double);
            let binder = Binder::frozen(&g, &store);
            let w = EvssWeights::bind(&binder, "b", &cfg).unwrap();
            let x = g.constant(Tensor::from_fn(&[c, hw, hw], |i| (i as f64 * 0.11).cos()).unwrap());
            let y = evss_block(&g, &x, &cfg, &w).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn inres_zero_residual_is_identity() {
        let cfg = BlockConfig::inres(8, 8, 1);
        let store = store_with(|i| InResWeights::init(i, "r", &cfg).unwrap());
        let store = zeroed(&store, |k| !k.starts_with("r.project"));
        let g = Graph::new(Precision::Double);
        let binder = Binder::frozen(&g, &store);
        let w = InResWeights::bind(&binder, "r").unwrap();
        let x = g.constant(Tensor::from_fn(&[8, 5, 5], |i| (i as f64).sqrt() - 3.0).unwrap());
        let y = inres_block(&g, &x, &cfg, &w).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn inres_stride_two_halves() {
        let cfg = BlockConfig::inres(4, 8, 2);
        assert!(!cfg.has_shortcut());
        let store = store_with(|i| InResWeights::init(i, "r", &cfg).unwrap());
        let g = Graph::inference(Precision::Double);
        let binder = Binder::frozen(&g, &store);
        let w = InResWeights::bind(&binder, "r").unwrap();
        let x = g.constant(Tensor::ones(&[4, 8, 8]).unwrap());
        assert_eq!(inres_block(&g, &x, &cfg, &w).unwrap().shape(), &[8, 4, 4]);
        let bad = BlockConfig::inres(4, 4, 3);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stem_shapes_and_null_input() {
        let store = store_with(|i| StemWeights::init(i, "stem", 3, 8).unwrap());
        let g = Graph::inference(Precision::Double);
        let binder = Binder::frozen(&g, &store);
        let w = StemWeights::bind(&binder, "stem").unwrap();
        let x = g.constant(Tensor::zeros(&[3, 32, 32]).unwrap());
        let y = stem(&g, &x, &w).unwrap();
        assert_eq!(y.shape(), &[8, 16, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let odd = g.constant(Tensor::zeros(&[3, 31, 32]).unwrap());
        assert!(stem(&g, &odd, &w).is_err());
    }

    #[test]
    fn block_kind_mismatch() {
        let cfg = BlockConfig::inres(8, 8, 1);
        let evss_cfg = BlockConfig::evss(8);
        let store = store_with(|i| EvssWeights::init(i, "b", &evss_cfg).unwrap());
        let g = Graph::inference(Precision::Double);
        let binder = Binder::frozen(&g, &store);
        let w = EvssWeights::bind(&binder, "b", &evss_cfg).unwrap();
        let x = g.constant(Tensor::zeros(&[8, 4, 4]).unwrap());
        assert!(evss_block(&g, &x, &cfg, &w).is_err());
    }
}
