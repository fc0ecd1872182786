//! Analytic parameter and multiply-accumulate counts.
//!
//! Only multiply-accumulates of convolutions, linear maps and scan
//! recurrences are counted; elementwise work, pooling and normalization
//! are free. FLOPs are reported as MACs.

use std::fmt;

use crate::blocks::{squeezed_width, stem_hidden, BlockConfig, BlockKind};
use crate::model::{names, ModelSpec, INPUT_CHANNELS};

/// Count of one module: parameters, MACs, and scan recurrence steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
    pub scan_steps: u64,
}

impl Cost {
    fn new(params: u64, macs: u64) -> Self {
        Cost {
            params,
            macs,
            scan_steps: 0,
        }
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
            scan_steps: self.scan_steps + o.scan_steps,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCost {
    pub name: String,
    /// Output `(C, H, W)`, absent for the head.
    pub output: Option<(usize, usize, usize)>,
    pub cost: Cost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub model: String,
    pub input: (usize, usize),
    pub modules: Vec<ModuleCost>,
}

impl ProfileReport {
    pub fn total(&self) -> Cost {
        self.modules.iter().map(|m| m.cost).sum()
    }

    pub fn params_millions(&self) -> f64 {
        self.total().params as f64 / 1e6
    }

    pub fn gmacs(&self) -> f64 {
        self.total().macs as f64 / 1e9
    }

    /// Reference budget for the named variant, if any.
    pub fn target(&self) -> Option<Target> {
        Target::for_variant(&self.model)
    }
}

/// Reference parameter (millions) and FLOP (billions) budget of a variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub params_m: f64,
    pub gflops: f64,
}

impl Target {
    pub fn for_variant(name: &str) -> Option<Target> {
        let (params_m, gflops) = match name {
            "T" => (6.0, 0.8),
            "S" => (11.0, 1.3),
            "B" => (33.0, 4.0),
            _ => return None,
        };
        Some(Target { params_m, gflops })
    }
}

/// Signed deviation of `actual` from `target` in percent.
pub fn deviation_pct(actual: f64, target: f64) -> f64 {
    (actual - target) / target * 100.0
}

/// Convolution with a `k×k` kernel producing an `ho×wo` map.
pub fn conv_cost(cin: usize, cout: usize, k: usize, groups: usize, bias: bool, ho: usize, wo: usize) -> Cost {
    let weights = (cout * (cin / groups) * k * k) as u64;
    let b = if bias { cout as u64 } else { 0 };
    Cost::new(weights + b, weights * (ho * wo) as u64)
}

/// Linear map with bias.
pub fn linear_cost(cin: usize, cout: usize) -> Cost {
    Cost::new((cin * cout + cout) as u64, (cin * cout) as u64)
}

pub fn se_cost(channels: usize, squeezed: usize) -> Cost {
    linear_cost(channels, squeezed) + linear_cost(squeezed, channels)
}

/// Selective scan over `tokens` positions of width `c` with `n` states.
///
/// Per token: `c²` for the step-size map, `c·n` each for the `B` and `C`
/// selections, and `3·c·n` for the state update and readout.
pub fn scan_cost(c: usize, n: usize, tokens: usize) -> Cost {
    let params = (3 * c * n + c * c + c) as u64;
    let per_token = (c * c + 5 * c * n) as u64;
    Cost {
        params,
        macs: per_token * tokens as u64,
        scan_steps: tokens as u64,
    }
}

/// Positions scanned by the global branch of an EVSS block on an `h×w` map.
pub fn scanned_tokens(cfg: &BlockConfig, h: usize, w: usize) -> usize {
    use crate::scan::GroupScan;
    match (cfg.es2d, cfg.group_scan) {
        (true, GroupScan::Single) => h * w,
        _ => 4 * h * w,
    }
}

/// Length of the longest sequence an `h×w` skip scan with step `p` feeds the recurrence.
pub fn skip_sequence_len(h: usize, w: usize, p: usize) -> usize {
    h.div_ceil(p) * w.div_ceil(p)
}

pub fn evss_cost(cfg: &BlockConfig, h: usize, w: usize) -> Cost {
    let c = cfg.channels_in;
    let sq = squeezed_width(c, cfg.se_reduction);
    let mut cost = Cost::new(2 * c as u64, 0)
        + scan_cost(c, cfg.state_dim, scanned_tokens(cfg, h, w))
        + se_cost(c, sq);
    if cfg.fusion {
        cost = cost + conv_cost(c, c, 3, cfg.local_groups(), true, h, w) + se_cost(c, sq);
    }
    cost
}

pub fn inres_cost(cfg: &BlockConfig, h: usize, w: usize) -> Cost {
    let (cin, cout) = (cfg.channels_in, cfg.channels_out);
    let hidden = cin * cfg.expansion;
    let (ho, wo) = (h.div_ceil(cfg.stride), w.div_ceil(cfg.stride));
    conv_cost(cin, hidden, 1, 1, true, h, w)
        + conv_cost(hidden, hidden, 3, hidden, true, ho, wo)
        + se_cost(hidden, squeezed_width(cin, cfg.se_reduction))
        + conv_cost(hidden, cout, 1, 1, true, ho, wo)
}

/// Per-module costs of `spec` on an `h×w` input.
pub fn profile(spec: &ModelSpec, h: usize, w: usize) -> ProfileReport {
    let mut modules = Vec::new();
    let d0 = spec.dims[0];
    let mid = stem_hidden(d0);
    let (mut ch, mut cw) = (h / 2, w / 2);
    modules.push(ModuleCost {
        name: names::STEM.to_string(),
        output: Some((d0, ch, cw)),
        cost: conv_cost(INPUT_CHANNELS, mid, 3, 1, false, ch, cw) + conv_cost(mid, d0, 3, 1, false, ch, cw),
    });
    let mut cin = d0;
    for stage in 1..=4 {
        let cout = spec.dims[stage - 1];
        (ch, cw) = (ch.div_ceil(2), cw.div_ceil(2));
        modules.push(ModuleCost {
            name: names::downsample(stage),
            output: Some((cout, ch, cw)),
            cost: conv_cost(cin, cout, 3, 1, true, ch, cw),
        });
        // stage indices are in range, so the config always exists
        let cfg = spec.block_config(stage).expect("stage in 1..=4");
        for j in 0..spec.depths[stage - 1] {
            let cost = match cfg.kind {
                BlockKind::Evss => evss_cost(&cfg, ch, cw),
                BlockKind::InRes => inres_cost(&cfg, ch, cw),
            };
            modules.push(ModuleCost {
                name: names::block(stage, j),
                output: Some((cout, ch, cw)),
                cost,
            });
        }
        cin = cout;
    }
    modules.push(ModuleCost {
        name: "head".to_string(),
        output: None,
        cost: linear_cost(cin, spec.num_classes),
    });
    ProfileReport {
        model: spec.name.clone(),
        input: (h, w),
        modules,
    }
}

impl fmt::Display for ProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "profile of {} at {}x{}", self.model, self.input.0, self.input.1)?;
        writeln!(f, "{:<12} {:>16} {:>12} {:>16} {:>10}", "module", "output", "params", "MACs", "steps")?;
        for m in &self.modules {
            let out = m
                .output
                .map(|(c, h, w)| format!("{c}x{h}x{w}"))
                .unwrap_or_else(|| "-".to_string());
            writeln!(
                f,
                "{:<12} {:>16} {:>12} {:>16} {:>10}",
                m.name, out, m.cost.params, m.cost.macs, m.cost.scan_steps
            )?;
        }
        let t = self.total();
        writeln!(f, "{:<12} {:>16} {:>12} {:>16} {:>10}", "total", "", t.params, t.macs, t.scan_steps)?;
        write!(f, "params {:.3} M, FLOPs {:.3} G (MACs)", self.params_millions(), self.gmacs())?;
        if let Some(target) = self.target() {
            write!(
                f,
                "\ntarget {} M / {} G: params {:+.1}%, FLOPs {:+.1}%",
                target.params_m,
                target.gflops,
                deviation_pct(self.params_millions(), target.params_m),
                deviation_pct(self.gmacs(), target.gflops)
            )?;
        }
        Ok(())
    }
}
