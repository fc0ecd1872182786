//! 2-D scan planning: the full four-direction cross scan and the atrous
//! skip scan that splits a grid into `p²` interleaved offset groups.
//!
//! Group `(m, n)` of a plan with step `p` holds the pixels `[m::p, n::p]`.
//! Offsets are enumerated row-major over `{0..p-1}²` and group `i`
//! (zero-based) is traversed along direction `i mod 4`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ssm::{select_params, selective_scan, SsmParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowBackward,
        Direction::ColForward,
        Direction::ColBackward,
    ];

    pub fn cyclic(i: usize) -> Direction {
        Direction::ALL[i % 4]
    }

    pub fn reversed(self) -> Direction {
        match self {
            Direction::RowForward => Direction::RowBackward,
            Direction::RowBackward => Direction::RowForward,
            Direction::ColForward => Direction::ColBackward,
            Direction::ColBackward => Direction::ColForward,
        }
    }

    /// Order in which positions of a `rows × cols` grid are visited,
    /// as row-major local indices.
    pub fn order(self, rows: usize, cols: usize) -> Vec<usize> {
        let row_major = (0..rows * cols).collect::<Vec<_>>();
        let col_major = || {
            (0..cols)
                .flat_map(|c| (0..rows).map(move |r| r * cols + c))
                .collect::<Vec<_>>()
        };
        match self {
            Direction::RowForward => row_major,
            Direction::RowBackward => row_major.into_iter().rev().collect(),
            Direction::ColForward => col_major(),
            Direction::ColBackward => col_major().into_iter().rev().collect(),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::RowForward => "row-forward",
            Direction::RowBackward => "row-backward",
            Direction::ColForward => "col-forward",
            Direction::ColBackward => "col-backward",
        })
    }
}

/// One offset group of a [`ScanPlan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanGroup {
    pub offset: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Flat grid indices of the group in spatial (row-major) order.
    pub indices: Vec<usize>,
    pub direction: Direction,
}

impl ScanGroup {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Flat grid indices in the order `direction` visits them.
    pub fn traversal_along(&self, direction: Direction) -> Vec<usize> {
        direction
            .order(self.rows, self.cols)
            .into_iter()
            .map(|i| self.indices[i])
            .collect()
    }

    pub fn traversal(&self) -> Vec<usize> {
        self.traversal_along(self.direction)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPlan {
    pub height: usize,
    pub width: usize,
    pub step: usize,
    pub groups: Vec<ScanGroup>,
}

impl ScanPlan {
    pub fn total_tokens(&self) -> usize {
        self.groups.iter().map(ScanGroup::len).sum()
    }

    /// Group id (zero-based) of every grid position, row-major.
    pub fn group_map(&self) -> Vec<usize> {
        let mut map = vec![0; self.height * self.width];
        for (gid, group) in self.groups.iter().enumerate() {
            for &i in &group.indices {
                map[i] = gid;
            }
        }
        map
    }
}

/// Literal evaluation of the trigonometric offset formula for
/// `i ∈ 1..=4`: `(⌊½ + ½ sin(π/2 (i−2))⌋, ⌊½ + ½ cos(π/2 (i−2))⌋)`.
///
/// It yields `(0,0)` for both `i = 1` and `i = 4`, so it does not
/// partition the grid; [`build_plan`] does not use it.
pub fn offset_formula(i: usize) -> Result<(usize, usize)> {
    if !(1..=4).contains(&i) {
        return Err(Error::invalid("offset_formula", format!("group index {i} outside 1..=4")));
    }
    let angle = std::f64::consts::FRAC_PI_2 * (i as f64 - 2.0);
    let m = (0.5 + 0.5 * angle.sin()).floor();
    let n = (0.5 + 0.5 * angle.cos()).floor();
    Ok((m as usize, n as usize))
}

/// Partition an `height × width` grid into `step²` offset groups.
pub fn build_plan(height: usize, width: usize, step: usize) -> Result<ScanPlan> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("build_plan", "grid extents must be positive"));
    }
    if step == 0 || step > height.min(width) {
        return Err(Error::invalid(
            "build_plan",
            format!("skip step {step} outside 1..={}", height.min(width)),
        ));
    }
    let mut groups = Vec::with_capacity(step * step);
    for m in 0..step {
        for n in 0..step {
            let rows = (height - m).div_ceil(step);
            let cols = (width - n).div_ceil(step);
            let indices = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (m + r * step) * width + n + c * step))
                .collect();
            groups.push(ScanGroup {
                offset: (m, n),
                rows,
                cols,
                indices,
                direction: Direction::cyclic(groups.len()),
            });
        }
    }
    Ok(ScanPlan {
        height,
        width,
        step,
        groups,
    })
}

fn spatial_dims(shape: &[usize], plan: &ScanPlan) -> Result<(usize, usize)> {
    match shape {
        [c, h, w] if *h == plan.height && *w == plan.width => Ok((*c, h * w)),
        other => Err(Error::ShapeMismatch {
            op: "scan plan",
            lhs: other.to_vec(),
            rhs: vec![plan.height, plan.width],
        }),
    }
}

/// Split `[C, H, W]` into the plan's subsampled grids `[C, rows, cols]`.
pub fn scatter(x: &Tensor, plan: &ScanPlan) -> Result<Vec<Tensor>> {
    let (c, hw) = spatial_dims(x.shape(), plan)?;
    plan.groups
        .iter()
        .map(|group| {
            let mut data = Vec::with_capacity(c * group.len());
            for ch in 0..c {
                data.extend(group.indices.iter().map(|&i| x.data()[ch * hw + i]));
            }
            Tensor::new(&[c, group.rows, group.cols], data)
        })
        .collect()
}

/// Inverse of [`scatter`]: write each group back at its offsets.
pub fn gather(groups: &[Tensor], plan: &ScanPlan) -> Result<Tensor> {
    if groups.len() != plan.groups.len() {
        return Err(Error::invalid(
            "gather",
            format!("plan has {} groups, got {}", plan.groups.len(), groups.len()),
        ));
    }
    let c = groups[0].shape()[0];
    let hw = plan.height * plan.width;
    let mut out = vec![0.0; c * hw];
    for (t, group) in groups.iter().zip(&plan.groups) {
        if t.shape() != [c, group.rows, group.cols] {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![c, group.rows, group.cols],
            });
        }
        for ch in 0..c {
            let src = &t.data()[ch * group.len()..(ch + 1) * group.len()];
            for (&i, &v) in group.indices.iter().zip(src) {
                out[ch * hw + i] = v;
            }
        }
    }
    Tensor::new(&[c, plan.height, plan.width], out)
}

/// How a group (or the full grid) is traversed inside a skip scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupScan {
    /// One direction per group, assigned cyclically.
    #[default]
    Single,
    /// All four directions in every group, summed.
    AllDirections,
}

/// Combination rule for several directional scans of the same positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Merge {
    #[default]
    Sum,
    Mean,
}

/// Flatten `[C, H·W]` positions along `order` into a `[L, C]` sequence.
fn to_sequence(g: &Graph, x: &Var, order: &[usize], hw: usize) -> Result<Var> {
    let c = x.shape()[0];
    let idx = order
        .iter()
        .flat_map(|&pos| (0..c).map(move |ch| ch * hw + pos))
        .collect();
    g.gather(x, Arc::new(idx), &[order.len(), c])
}

fn scan_sequence(g: &Graph, seq: &Var, ssm: &SsmParams) -> Result<Var> {
    let dp = select_params(g, seq, ssm)?;
    let h0 = g.constant(Tensor::zeros(&[ssm.channels(), ssm.state_dim()])?);
    selective_scan(g, seq, &dp, &h0)
}

/// Scan each listed traversal and write outputs back to their positions.
///
/// Every grid position must be covered by exactly one traversal.
fn scan_partition(g: &Graph, x: &Var, ssm: &SsmParams, orders: &[Vec<usize>]) -> Result<Var> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut outputs = Vec::with_capacity(orders.len());
    for order in orders {
        let seq = to_sequence(g, x, order, hw)?;
        outputs.push(scan_sequence(g, &seq, ssm)?);
    }
    // position of every (channel, pixel) in the concatenated [L_i, C] outputs
    let mut inverse = vec![usize::MAX; c * hw];
    let mut base = 0;
    for order in orders {
        for (t, &pos) in order.iter().enumerate() {
            for ch in 0..c {
                inverse[ch * hw + pos] = base + t * c + ch;
            }
        }
        base += order.len() * c;
    }
    if inverse.contains(&usize::MAX) {
        return Err(Error::invalid("scan", "traversals do not cover the grid"));
    }
    let refs: Vec<&Var> = outputs.iter().collect();
    let flat = g.concat(&refs, &[base])?;
    g.gather(&flat, Arc::new(inverse), &[c, h, w])
}

fn check_channels(x: &Var, ssm: &SsmParams) -> Result<()> {
    match x.shape() {
        [c, _, _] if *c == ssm.channels() => Ok(()),
        other => Err(Error::ShapeMismatch {
            op: "2-D scan",
            lhs: other.to_vec(),
            rhs: vec![ssm.channels()],
        }),
    }
}

fn merge_all(g: &Graph, parts: Vec<Var>, merge: Merge) -> Result<Var> {
    let count = parts.len();
    let mut iter = parts.into_iter();
    let mut acc = iter.next().ok_or_else(|| Error::invalid("merge", "nothing to merge"))?;
    for p in iter {
        acc = g.add(&acc, &p)?;
    }
    match merge {
        Merge::Sum => Ok(acc),
        Merge::Mean => g.scale(&acc, 1.0 / count as f64),
    }
}

/// Atrous skip scan of `[C, H, W]`: scatter into offset groups, scan each
/// group along its direction(s), merge back.
pub fn es2d(g: &Graph, x: &Var, ssm: &SsmParams, plan: &ScanPlan, mode: GroupScan, merge: Merge) -> Result<Var> {
    check_channels(x, ssm)?;
    spatial_dims(x.shape(), plan)?;
    match mode {
        GroupScan::Single => {
            let orders: Vec<Vec<usize>> = plan.groups.iter().map(ScanGroup::traversal).collect();
            scan_partition(g, x, ssm, &orders)
        }
        GroupScan::AllDirections => {
            let parts = Direction::ALL
                .iter()
                .map(|&dir| {
                    let orders: Vec<Vec<usize>> = plan.groups.iter().map(|gr| gr.traversal_along(dir)).collect();
                    scan_partition(g, x, ssm, &orders)
                })
                .collect::<Result<Vec<_>>>()?;
            merge_all(g, parts, merge)
        }
    }
}

/// Full-grid cross scan: four directional scans over all `H·W` positions.
pub fn ss2d(g: &Graph, x: &Var, ssm: &SsmParams, merge: Merge) -> Result<Var> {
    check_channels(x, ssm)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let parts = Direction::ALL
        .iter()
        .map(|dir| scan_partition(g, x, ssm, &[dir.order(h, w)]))
        .collect::<Result<Vec<_>>>()?;
    merge_all(g, parts, merge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn offset_formula_literal_values() {
        let got: Vec<_> = (1..=4).map(|i| offset_formula(i).unwrap()).collect();
        assert_eq!(got, vec![(0, 0), (0, 1), (1, 0), (0, 0)]);
        assert!(offset_formula(0).is_err());
        assert!(offset_formula(5).is_err());
    }

    #[test]
    fn four_by_four_groups() {
        let plan = build_plan(4, 4, 2).unwrap();
        let offsets: Vec<_> = plan.groups.iter().map(|g| g.offset).collect();
        assert_eq!(offsets, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let idx: Vec<_> = plan.groups.iter().map(|g| g.indices.clone()).collect();
        assert_eq!(idx[0], vec![0, 2, 8, 10]);
        assert_eq!(idx[1], vec![1, 3, 9, 11]);
        assert_eq!(idx[2], vec![4, 6, 12, 14]);
        assert_eq!(idx[3], vec![5, 7, 13, 15]);

        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64).unwrap();
        let parts = scatter(&x, &plan).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(parts[3].shape(), &[1, 2, 2]);
        assert_eq!(parts[3].data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn unit_step_is_single_full_scan() {
        let plan = build_plan(3, 5, 1).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].traversal(), (0..15).collect::<Vec<_>>());
        let x = Tensor::from_fn(&[2, 3, 5], |i| i as f64).unwrap();
        let parts = scatter(&x, &plan).unwrap();
        assert_eq!(parts, vec![x]);
    }

    #[test]
    fn token_totals_at_56() {
        let plan = build_plan(56, 56, 2).unwrap();
        assert_eq!(plan.groups.len(), 4);
        assert!(plan.groups.iter().all(|g| g.len() == 784));
        assert_eq!(plan.total_tokens(), 3136);
    }

    #[test]
    fn constant_input_constant_groups() {
        let plan = build_plan(5, 7, 3).unwrap();
        let x = Tensor::full(&[2, 5, 7], 1.25).unwrap();
        for part in scatter(&x, &plan).unwrap() {
            assert!(part.data().iter().all(|&v| v == 1.25));
        }
    }

    #[test]
    fn step_out_of_range() {
        assert!(build_plan(4, 4, 0).is_err());
        assert!(build_plan(4, 3, 4).is_err());
    }

    #[test]
    fn gather_checks_groups() {
        let plan = build_plan(4, 4, 2).unwrap();
        let x = Tensor::zeros(&[1, 4, 4]).unwrap();
        let mut parts = scatter(&x, &plan).unwrap();
        assert!(gather(&parts, &plan).unwrap().data().iter().all(|&v| v == 0.0));
        parts.pop();
        assert!(gather(&parts, &plan).is_err());
        parts.push(Tensor::zeros(&[1, 3, 2]).unwrap());
        assert!(gather(&parts, &plan).is_err());
    }

    #[test]
    fn directions_reverse_each_other() {
        for dir in Direction::ALL {
            let mut fwd = dir.order(3, 4);
            fwd.reverse();
            assert_eq!(fwd, dir.reversed().order(3, 4));
        }
        assert_eq!(Direction::ColForward.order(2, 3), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn scan_shape_mismatch_is_reported() {
        let g = Graph::new(Precision::Double);
        let ssm = SsmParams::from_tensors(
            &g,
            Tensor::zeros(&[2, 2]).unwrap(),
            Tensor::zeros(&[2, 2]).unwrap(),
            Tensor::zeros(&[2, 2]).unwrap(),
            Tensor::zeros(&[2, 2]).unwrap(),
            Tensor::zeros(&[2]).unwrap(),
        )
        .unwrap();
        let x = g.constant(Tensor::zeros(&[3, 4, 4]).unwrap());
        let plan = build_plan(4, 4, 2).unwrap();
        assert!(es2d(&g, &x, &ssm, &plan, GroupScan::Single, Merge::Sum).is_err());
        let x = g.constant(Tensor::zeros(&[2, 4, 5]).unwrap());
        assert!(es2d(&g, &x, &ssm, &plan, GroupScan::Single, Merge::Sum).is_err());
    }
}
