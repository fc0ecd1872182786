//! Single-sample 2-D convolution on `[C, H, W]` tensors.

use crate::error::{Error, Result};
use crate::graph::{matmul_nt, matmul_raw, matmul_tn, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Stride 1 with padding that preserves resolution for kernel size `k`.
    pub fn same(k: usize) -> Self {
        Conv2d {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn output_extent(&self, input: usize, k: usize) -> Option<usize> {
        (input + 2 * self.padding).checked_sub(k).map(|v| v / self.stride + 1)
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], opts: Conv2d) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let (cin, h, wd) = (x[0], x[1], x[2]);
        let (cout, cin_g, k, k2) = (w[0], w[1], w[2], w[3]);
        if k != k2 || k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel must be square with odd size, got {k}x{k2}")));
        }
        if opts.stride == 0 || opts.groups == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        if cin % opts.groups != 0 || cout % opts.groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("groups {} must divide input channels {cin} and output channels {cout}", opts.groups),
            ));
        }
        if cin / opts.groups != cin_g {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let ho = opts.output_extent(h, k);
        let wo = opts.output_extent(wd, k);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::invalid("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        };
        Ok(Geometry {
            cin,
            h,
            w: wd,
            cout,
            k,
            ho,
            wo,
            cin_g,
            cout_g: cout / opts.groups,
            stride: opts.stride,
            pad: opts.padding,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0 && self.cin_g == self.cin
    }

    /// Output columns whose input column `ox*stride + kx - pad` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Visit every (output, input, weight) offset triple of the convolution.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (s, p) = (self.stride, self.pad);
        for co in 0..self.cout {
            let group = co / self.cout_g;
            for cl in 0..self.cin_g {
                let ci = group * self.cin_g + cl;
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wi = ((co * self.cin_g + cl) * self.k + ky) * self.k + kx;
                        let (lo, hi) = self.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..self.ho {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= self.h {
                                continue;
                            }
                            let out_row = (co * self.ho + oy) * self.wo;
                            let in_row = (ci * self.h + iy - p) * self.w;
                            // start column of the input for ox = lo
                            let ix0 = lo * s + kx - p;
                            f(wi, out_row + lo, in_row + ix0, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D convolution of `x: [C_in, H, W]` with `w: [C_out, C_in/groups, k, k]`.
    pub fn conv2d(&self, x: &Var, w: &Var, bias: Option<&Var>, opts: Conv2d) -> Result<Var> {
        let geo = Geometry::new(x.shape(), w.shape(), opts)?;
        if let Some(b) = bias {
            if b.shape() != [geo.cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![geo.cout],
                });
            }
        }
        let plane = geo.ho * geo.wo;
        let xt = x.value().clone();
        let wt = w.value().clone();
        let s = geo.stride;

        let mut out = if geo.is_pointwise() {
            matmul_raw(wt.data(), xt.data(), geo.cout, geo.cin, plane)
        } else {
            let mut out = vec![0.0; geo.cout * plane];
            let (xd, wd) = (xt.data(), wt.data());
            geo.for_each(|wi, o, i, n| {
                let wv = wd[wi];
                if wv == 0.0 {
                    return;
                }
                let dst = &mut out[o..o + n];
                if s == 1 {
                    for (d, xv) in dst.iter_mut().zip(&xd[i..i + n]) {
                        *d += wv * xv;
                    }
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += wv * xd[i + j * s];
                    }
                }
            });
            out
        };
        if let Some(b) = bias {
            for (co, bv) in b.data().iter().enumerate() {
                for v in &mut out[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }

        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let shape = [geo.cout, geo.ho, geo.wo];
        self.record("conv2d", &shape, out, &inputs, move |g, needs| {
            let (xd, wd) = (xt.data(), wt.data());
            let (gx, gw) = if geo.is_pointwise() {
                (
                    needs[0].then(|| matmul_tn(wd, g, geo.cin, geo.cout, plane)),
                    needs[1].then(|| matmul_nt(g, xd, geo.cout, plane, geo.cin)),
                )
            } else {
                let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
                let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
                geo.for_each(|wi, o, i, n| {
                    let gs = &g[o..o + n];
                    if let Some(gx) = gx.as_mut() {
                        let wv = wd[wi];
                        for (j, gv) in gs.iter().enumerate() {
                            gx[i + j * s] += wv * gv;
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let mut acc = 0.0;
                        for (j, gv) in gs.iter().enumerate() {
                            acc += gv * xd[i + j * s];
                        }
                        gw[wi] += acc;
                    }
                });
                (gx, gw)
            };
            let mut parts = vec![gx, gw];
            if needs.len() == 3 {
                parts.push(needs[2].then(|| g.chunks(plane).map(|c| c.iter().sum()).collect()));
            }
            parts
        })
    }
}
