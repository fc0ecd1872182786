//! Oracles: central-difference gradient checks, recurrence against its
//! convolution form, partition round trips and scan-step audits.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::{evss_block, inres_block, se_gate, BlockConfig, EvssWeights, InResWeights, SeWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Init, ParamStore};
use crate::scan::{build_plan, es2d, gather, scatter, ss2d, GroupScan, Merge};
use crate::ssm::{causal_conv, conv_kernel_form, select_params, selective_scan, SsmParams, TimeInvariant};
use crate::tensor::{Precision, Tensor};

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_THRESHOLD: f64 = 1e-4;
pub const EQUIVALENCE_TOL: f64 = 1e-10;
/// Largest number of scalars a gradient check enumerates.
pub const MAX_CHECK_SCALARS: usize = 10_000;
const REL_EPS: f64 = 1e-12;

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub threshold: f64,
    /// Worst relative error per named input, in name order.
    pub worst: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.worst.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst.iter().all(|(_, e)| *e < self.threshold)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "pass" } else { "FAIL" };
        write!(
            f,
            "{verdict}: max rel. err {:.3e} (step {:e}, threshold {:e})",
            self.max_error(),
            self.step,
            self.threshold
        )?;
        for (name, e) in &self.worst {
            if *e >= self.threshold {
                write!(f, "\n  {name}: {e:.3e}")?;
            }
        }
        Ok(())
    }
}

fn scalar_loss(binder: &Binder<'_>, f: &(impl Fn(&Binder<'_>) -> Result<Var> + Sync)) -> Result<f64> {
    let loss = f(binder)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    Ok(loss.data()[0])
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences for every scalar of `inputs`, at 64-bit precision.
pub fn gradcheck<F>(inputs: &ParamStore, f: F, step: f64, threshold: f64) -> Result<GradCheckReport>
where
    F: Fn(&Binder<'_>) -> Result<Var> + Sync,
{
    let total = inputs.num_scalars() as usize;
    if total > MAX_CHECK_SCALARS {
        return Err(Error::invalid(
            "gradcheck",
            format!("{total} scalars exceeds the limit of {MAX_CHECK_SCALARS}"),
        ));
    }
    let g = Graph::new(Precision::Double);
    let binder = Binder::trainable(&g, inputs);
    let loss = f(&binder)?;
    let grads = g.backward(&loss)?;
    let analytic = binder.collect_gradients(&grads)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::inference(Precision::Double);
        let b = Binder::frozen(&g, store);
        scalar_loss(&b, &f)
    };

    let mut worst = Vec::new();
    for (name, t) in inputs.iter() {
        let a = &analytic[name];
        let errors = (0..t.numel())
            .into_par_iter()
            .map(|i| {
                let shifted = |delta: f64| {
                    let mut data = t.to_vec();
                    data[i] += delta;
                    let mut s = inputs.clone();
                    s.insert(name.clone(), Tensor::new(t.shape(), data)?);
                    eval(&s)
                };
                let numeric = (shifted(step)? - shifted(-step)?) / (2.0 * step);
                Ok(relative_error(a.data()[i], numeric))
            })
            .collect::<Result<Vec<f64>>>()?;
        worst.push((name.clone(), errors.into_iter().fold(0.0, f64::max)));
    }
    Ok(GradCheckReport {
        step,
        threshold,
        worst,
    })
}

/// `Σ y ⊙ R` with `R` drawn uniform in `[-1, 1]` from `seed`; the same
/// `seed` and shape always give the same weights.
pub fn probe_loss(g: &Graph, y: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..=1.0))?);
    let p = g.mul(y, &r)?;
    g.sum(&p)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..=hi))
}

/// Inputs of a check: the parameters initialized by `f` plus an input `x`.
fn check_inputs(seed: u64, x_shape: &[usize], f: impl FnOnce(&mut Init<'_>) -> Result<()>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    {
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        f(&mut init)?;
    }
    // perturb zero-initialized biases so no gradient sits at a special point
    let perturbed = store
        .iter()
        .map(|(k, t)| {
            let t = if t.data().iter().all(|&v| v == 0.0) {
                uniform(&mut rng, t.shape(), -0.1, 0.1)?
            } else {
                t.clone()
            };
            Ok((k.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = ParamStore::new();
    for (k, t) in perturbed {
        out.insert(k, t);
    }
    out.insert("x", uniform(&mut rng, x_shape, -1.0, 1.0)?);
    Ok(out)
}

/// Named gradient checks of the scan, SE gate, EVSS and InRes blocks and a
/// stacked EVSS + InRes pair, each on a tiny instance.
pub fn standard_gradchecks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let (step, thr) = (GRAD_STEP, GRAD_THRESHOLD);
    let mut out = Vec::new();

    let store = check_inputs(seed, &[6, 3], |i| SsmParams::init(i, "ssm", 3, 2))?;
    let h0 = uniform(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), &[3, 2], -0.5, 0.5)?;
    let mut store = store;
    store.insert("h0", h0);
    let report = gradcheck(
        &store,
        |b| {
            let g = b.graph();
            let ssm = SsmParams::bind(b, "ssm")?;
            let x = b.get("x")?;
            let dp = select_params(g, &x, &ssm)?;
            let y = selective_scan(g, &x, &dp, &b.get("h0")?)?;
            probe_loss(g, &y, seed)
        },
        step,
        thr,
    )?;
    out.push(("selective_scan".to_string(), report));

    let store = check_inputs(seed, &[6, 3, 3], |i| SeWeights::init(i, "se", 6, 4))?;
    let report = gradcheck(
        &store,
        |b| {
            let y = se_gate(b.graph(), &b.get("x")?, &SeWeights::bind(b, "se")?)?;
            probe_loss(b.graph(), &y, seed)
        },
        step,
        thr,
    )?;
    out.push(("se_gate".to_string(), report));

    let mut evss = BlockConfig::evss(4);
    evss.state_dim = 4;
    let store = check_inputs(seed, &[4, 8, 8], |i| EvssWeights::init(i, "evss", &evss))?;
    let report = gradcheck(
        &store,
        |b| {
            let y = evss_block(b.graph(), &b.get("x")?, &evss, &EvssWeights::bind(b, "evss", &evss)?)?;
            probe_loss(b.graph(), &y, seed)
        },
        step,
        thr,
    )?;
    out.push(("evss_block".to_string(), report));

    let inres = BlockConfig::inres(4, 4, 1);
    let store = check_inputs(seed, &[4, 8, 8], |i| InResWeights::init(i, "inres", &inres))?;
    let report = gradcheck(
        &store,
        |b| {
            let y = inres_block(b.graph(), &b.get("x")?, &inres, &InResWeights::bind(b, "inres")?)?;
            probe_loss(b.graph(), &y, seed)
        },
        step,
        thr,
    )?;
    out.push(("inres_block".to_string(), report));

    let store = check_inputs(seed, &[4, 4, 4], |i| {
        EvssWeights::init(i, "evss", &evss)?;
        InResWeights::init(i, "inres", &inres)
    })?;
    let report = gradcheck(
        &store,
        |b| {
            let g = b.graph();
            let y = evss_block(g, &b.get("x")?, &evss, &EvssWeights::bind(b, "evss", &evss)?)?;
            let y = inres_block(g, &y, &inres, &InResWeights::bind(b, "inres")?)?;
            probe_loss(g, &y, seed)
        },
        step,
        thr,
    )?;
    out.push(("evss+inres".to_string(), report));
    Ok(out)
}

// ---- equivalence suite -------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }

    /// Cases whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.cases.iter().filter(|c| c.name.starts_with(prefix)).count()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let failed = self.failures().count();
        write!(
            f,
            "seed {}: {} cases, {} passed, {} failed",
            self.seed,
            self.cases.len(),
            self.cases.len() - failed,
            failed
        )?;
        for c in self.failures() {
            write!(f, "\n  FAIL {}: {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

pub const EQUIVALENCE_CASES: usize = 100;
pub const ROUND_TRIP_CASES: usize = 100;
pub const AUDIT_CASES: usize = 20;

fn case_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scan with time-invariant parameters against the causal convolution
/// with kernel `K[l] = Σ C Ā^l B̄`.
pub fn equivalence_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=4);
    let l = rng.gen_range(1..=32);
    let a_bar = uniform(rng, &[d, n], 0.05, 0.99)?;
    let b_bar = uniform(rng, &[d, n], -1.0, 1.0)?;
    let c = uniform(rng, &[d, n], -1.0, 1.0)?;
    let x = uniform(rng, &[l, d], -1.0, 1.0)?;
    let ti = TimeInvariant::new(a_bar, b_bar, c)?;
    let g = Graph::inference(Precision::Double);
    let dp = ti.repeat(&g, l)?;
    let h0 = g.constant(Tensor::zeros(&[d, n])?);
    let y = selective_scan(&g, &g.constant(x.clone()), &dp, &h0)?;
    let y_conv = causal_conv(&x, &conv_kernel_form(&dp, l)?)?;
    y.value().max_abs_diff(&y_conv)
}

/// Scatter then gather of a random tensor; checks exact recovery and that
/// the groups partition the grid into residue classes.
pub fn round_trip_case(h: usize, w: usize, p: usize, rng: &mut ChaCha8Rng) -> Result<std::result::Result<(), String>> {
    let c = rng.gen_range(1..=3);
    let x = uniform(rng, &[c, h, w], -1e3, 1e3)?;
    let plan = build_plan(h, w, p)?;
    let back = gather(&scatter(&x, &plan)?, &plan)?;
    if back.data() != x.data() {
        return Ok(Err("gather(scatter(x)) differs from x".into()));
    }
    let mut all: Vec<usize> = plan.groups.iter().flat_map(|g| g.indices.iter().copied()).collect();
    all.sort_unstable();
    if all != (0..h * w).collect::<Vec<_>>() {
        return Ok(Err("group index sets do not partition the grid".into()));
    }
    for group in &plan.groups {
        if group.indices.iter().any(|&i| (i / w % p, i % w % p) != group.offset) {
            return Ok(Err(format!("group {:?} holds a pixel of another residue class", group.offset)));
        }
    }
    Ok(Ok(()))
}

/// Recurrence steps of one skip scan and one cross scan on a random map.
pub fn scan_steps(h: usize, w: usize, p: usize, rng: &mut ChaCha8Rng) -> Result<(u64, u64)> {
    let (c, n) = (2, 2);
    let g = Graph::inference(Precision::Double);
    let ssm = SsmParams::from_tensors(
        &g,
        uniform(rng, &[c, n], -1.0, 1.0)?,
        uniform(rng, &[c, n], -1.0, 1.0)?,
        uniform(rng, &[c, n], -1.0, 1.0)?,
        uniform(rng, &[c, c], -1.0, 1.0)?,
        uniform(rng, &[c], -1.0, 1.0)?,
    )?;
    let x = g.constant(uniform(rng, &[c, h, w], -1.0, 1.0)?);
    let plan = build_plan(h, w, p)?;
    let before = g.scan_steps();
    es2d(&g, &x, &ssm, &plan, GroupScan::Single, Merge::Sum)?;
    let skip = g.scan_steps() - before;
    ss2d(&g, &x, &ssm, Merge::Sum)?;
    Ok((skip, g.scan_steps() - before - skip))
}

/// Runs every randomized oracle under `seed`; cases are independent and
/// reported in index order.
pub fn equivalence_suite(seed: u64) -> SuiteReport {
    let equivalence = (0..EQUIVALENCE_CASES).into_par_iter().map(|i| {
        let mut rng = case_rng(seed, i as u64);
        let name = format!("recurrence-vs-convolution #{i}");
        match equivalence_case(&mut rng) {
            Ok(err) => CaseResult {
                name,
                passed: err <= EQUIVALENCE_TOL,
                detail: format!("max abs diff {err:.3e}"),
            },
            Err(e) => CaseResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        }
    });
    let round_trips = (0..ROUND_TRIP_CASES).into_par_iter().map(|i| {
        let mut rng = case_rng(seed, 1_000 + i as u64);
        let (h, w, p) = (rng.gen_range(3..=9), rng.gen_range(3..=9), rng.gen_range(1..=3));
        let name = format!("round-trip #{i} ({h}x{w}, p={p})");
        let (passed, detail) = match round_trip_case(h, w, p, &mut rng) {
            Ok(Ok(())) => (true, "exact".to_string()),
            Ok(Err(m)) => (false, m),
            Err(e) => (false, e.to_string()),
        };
        CaseResult { name, passed, detail }
    });
    let audits = (0..AUDIT_CASES).into_par_iter().map(|i| {
        let mut rng = case_rng(seed, 2_000 + i as u64);
        let (h, w, p) = (rng.gen_range(3..=12), rng.gen_range(3..=12), rng.gen_range(1..=3));
        let name = format!("step-audit #{i} ({h}x{w}, p={p})");
        let (passed, detail) = match scan_steps(h, w, p, &mut rng) {
            Ok((skip, cross)) => (
                skip == (h * w) as u64 && cross == (4 * h * w) as u64,
                format!("skip scan {skip} steps (want {}), cross scan {cross} (want {})", h * w, 4 * h * w),
            ),
            Err(e) => (false, e.to_string()),
        };
        CaseResult { name, passed, detail }
    });
    let mut cases: Vec<CaseResult> = equivalence.collect();
    cases.extend(round_trips.collect::<Vec<_>>());
    cases.extend(audits.collect::<Vec<_>>());
    SuiteReport { seed, cases }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        let mut s = ParamStore::new();
        // dyadic values and step keep every difference exact
        s.insert("x", Tensor::from_fn(&[3, 2], |i| i as f64 * 0.25 - 1.0).unwrap());
        let r = gradcheck(&s, |b| b.graph().sum(&b.get("x")?), 1.0 / 1024.0, 1e-12).unwrap();
        assert_eq!(r.max_error(), 0.0);
    }

    #[test]
    fn quadratic_within_1e8() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.insert("x", uniform(&mut rng, &[10], -1.0, 1.0).unwrap());
        let r = gradcheck(
            &s,
            |b| {
                let x = b.get("x")?;
                let sq = b.graph().mul(&x, &x)?;
                b.graph().sum(&sq)
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::ones(&[2]).unwrap());
        assert!(matches!(
            gradcheck(&s, |b| b.get("x"), 1e-5, 1e-4),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn suite_is_deterministic() {
        let a = equivalence_suite(3);
        let b = equivalence_suite(3);
        assert_eq!(a, b);
        assert!(a.passed(), "{a}");
        assert_eq!(a.count("recurrence"), EQUIVALENCE_CASES);
        assert_eq!(a.count("round-trip"), ROUND_TRIP_CASES);
    }
}
