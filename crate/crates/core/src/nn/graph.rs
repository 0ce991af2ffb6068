//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of every node that requires one.

use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3x3 { x: usize, w: usize, b: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Silu { x: usize },
    AvgPool2 { x: usize },
    Upsample2 { x: usize },
    Concat { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Add { a: usize, b: usize },
    /// `x * (1 + scale) + shift`, with `[scale | shift]` of shape `(B, 2C)`.
    Film { x: usize, ss: usize },
    ScaleSample { x: usize, s: Vec<T> },
    AddConst { x: usize },
    EmbedSum { table: usize, idx: Vec<usize>, per_row: usize },
    Mse { pred: usize, target: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NnError {
    NnError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Unfolds one `(C, H, W)` image into `(C*9, H*W)` patches with zero padding.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        -1 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        0 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        -1 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        0 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|i| self.nodes[*i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is produced for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// 3x3 convolution, stride 1, zero padding 1. `w` is `(Cout, Cin, 3, 3)`,
    /// `b` is `(Cout)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xb, xc, h, wd) = self.value(x).dims4();
        let ws = &self.value(w).shape;
        if ws.len() != 4 || ws[1] != xc || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("conv3x3", &self.value(x).shape, ws));
        }
        let cout = ws[0];
        if self.value(b).shape != [cout] {
            return Err(shape_err("conv3x3 bias", ws, &self.value(b).shape));
        }
        let hw = h * wd;
        let k = xc * 9;
        let mut out = Tensor::zeros(&[xb, cout, h, wd]);
        let mut col = vec![T::zero(); k * hw];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = &self.value(b).data;
            for bi in 0..xb {
                im2col(&xv[bi * xc * hw..(bi + 1) * xc * hw], xc, h, wd, &mut col);
                let o = &mut out.data[bi * cout * hw..(bi + 1) * cout * hw];
                for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
                    plane.fill(bv[co]);
                }
                T::gemm(cout, k, hw, T::one(), wv, k as isize, 1, &col, hw as isize, 1, T::one(), o, hw as isize, 1);
            }
        }
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(out, Op::Conv3x3 { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Group normalisation with per-channel affine `gamma`, `beta` of shape `(C)`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var, NnError> {
        let (b, c, h, w) = self.value(x).dims4();
        if groups == 0 || c % groups != 0 {
            return Err(NnError::Shape(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).shape != [c] || self.value(beta).shape != [c] {
            return Err(shape_err("group_norm affine", &[c], &self.value(gamma).shape));
        }
        let cg = c / groups;
        let n = cg * h * w;
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let eps = T::of(GN_EPS);
        for bi in 0..b {
            for g in 0..groups {
                let start = (bi * c + g * cg) * hw;
                let seg = &xv[start..start + n];
                let mean = seg.iter().copied().sum::<T>() / T::of(n as f64);
                let var = seg.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / T::of(n as f64);
                let rstd = T::one() / (var + eps).sqrt();
                means.push(mean);
                rstds.push(rstd);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (gv[ch] * rstd, bv[ch]);
                    let off = start + ci * hw;
                    for (o, v) in out.data[off..off + hw].iter_mut().zip(&xv[off..off + hw]) {
                        *o = (*v - mean) * ga + be;
                    }
                }
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| *v * sigmoid(*v)).collect(),
        };
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Silu { x: x.0 }, rg)
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var, NnError> {
        let (b, c, h, w) = self.value(x).dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Shape(format!("avgpool2: odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let xv = &self.value(x).data;
        let quarter = T::of(0.25);
        for p in 0..b * c {
            let src = &xv[p * h * w..];
            let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::AvgPool2 { x: x.0 }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let xv = &self.value(x).data;
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Upsample2 { x: x.0 }, rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ab, ac, ah, aw) = self.value(a).dims4();
        let (bb, bc, bh, bw) = self.value(b).dims4();
        if (ab, ah, aw) != (bb, bh, bw) {
            return Err(shape_err("concat", &self.value(a).shape, &self.value(b).shape));
        }
        let hw = ah * aw;
        let mut out = Tensor::zeros(&[ab, ac + bc, ah, aw]);
        {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            for i in 0..ab {
                let dst = &mut out.data[i * (ac + bc) * hw..(i + 1) * (ac + bc) * hw];
                dst[..ac * hw].copy_from_slice(&av[i * ac * hw..(i + 1) * ac * hw]);
                dst[ac * hw..].copy_from_slice(&bv[i * bc * hw..(i + 1) * bc * hw]);
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Concat { a: a.0, b: b.0 }, rg))
    }

    /// `x (B, in) -> x W^T + b`, `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.value(b).shape != [ws[0]] {
            return Err(shape_err("linear", xs, ws));
        }
        let (bn, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[bn, dout]);
        for r in 0..bn {
            out.data[r * dout..(r + 1) * dout].copy_from_slice(&self.value(b).data);
        }
        T::gemm(
            bn,
            din,
            dout,
            T::one(),
            &self.value(x).data,
            din as isize,
            1,
            &self.value(w).data,
            1,
            din as isize,
            T::one(),
            &mut out.data,
            dout as isize,
            1,
        );
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(shape_err("add", &self.value(a).shape, &self.value(b).shape));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(p, q)| *p + *q)
            .collect();
        let out = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Feature-wise modulation. `ss` is `(B, 2C)`: scales then shifts.
    pub fn film(&mut self, x: Var, ss: Var) -> Result<Var, NnError> {
        let (b, c, h, w) = self.value(x).dims4();
        if self.value(ss).shape != [b, 2 * c] {
            return Err(shape_err("film", &self.value(x).shape, &self.value(ss).shape));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        let (xv, sv) = (&self.value(x).data, &self.value(ss).data);
        for bi in 0..b {
            for ci in 0..c {
                let scale = T::one() + sv[bi * 2 * c + ci];
                let shift = sv[bi * 2 * c + c + ci];
                let off = (bi * c + ci) * hw;
                for (o, v) in out.data[off..off + hw].iter_mut().zip(&xv[off..off + hw]) {
                    *o = *v * scale + shift;
                }
            }
        }
        let rg = self.rg(&[x.0, ss.0]);
        Ok(self.push(out, Op::Film { x: x.0, ss: ss.0 }, rg))
    }

    /// Multiplies sample `i` of the batch by the constant `s[i]`.
    pub fn scale_sample(&mut self, x: Var, s: Vec<T>) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.shape.first() != Some(&s.len()) {
            return Err(shape_err("scale_sample", &xv.shape, &[s.len()]));
        }
        let per = xv.len() / s.len().max(1);
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| *v * s[i / per])
            .collect();
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::ScaleSample { x: x.0, s }, rg))
    }

    /// Adds a constant tensor.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, NnError> {
        if self.value(x).shape != c.shape {
            return Err(shape_err("add_const", &self.value(x).shape, &c.shape));
        }
        let data = self.value(x).data.iter().zip(&c.data).map(|(a, b)| *a + *b).collect();
        let out = Tensor {
            shape: c.shape.clone(),
            data,
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::AddConst { x: x.0 }, rg))
    }

    /// Row `r` of the output is the sum of `table[idx[r * per_row + j]]`.
    pub fn embed_sum(&mut self, table: Var, idx: Vec<usize>, per_row: usize) -> Result<Var, NnError> {
        let ts = &self.value(table).shape;
        if ts.len() != 2 || per_row == 0 || idx.len() % per_row != 0 || idx.iter().any(|i| *i >= ts[0]) {
            return Err(NnError::Shape(format!("embed_sum: bad indices for table {ts:?}")));
        }
        let e = ts[1];
        let rows = idx.len() / per_row;
        let mut out = Tensor::zeros(&[rows, e]);
        let tv = &self.value(table).data;
        for r in 0..rows {
            let dst = &mut out.data[r * e..(r + 1) * e];
            for &i in &idx[r * per_row..(r + 1) * per_row] {
                for (d, s) in dst.iter_mut().zip(&tv[i * e..(i + 1) * e]) {
                    *d += *s;
                }
            }
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(out, Op::EmbedSum { table: table.0, idx, per_row }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var, NnError> {
        if self.value(pred).shape != target.shape {
            return Err(shape_err("mse", &self.value(pred).shape, &target.shape));
        }
        let n = T::of(target.len() as f64);
        let loss = self
            .value(pred)
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (*p - *t) * (*p - *t))
            .sum::<T>()
            / n;
        let rg = self.rg(&[pred.0]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred: pred.0, target }, rg))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        grads[root.0] = Some(Tensor {
            shape: self.value(root).shape.clone(),
            data: vec![T::one()],
        });

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let need = |i: usize| self.nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::Conv3x3 { x, w, b } => {
                    let xt = &self.nodes[*x].value;
                    let wt = &self.nodes[*w].value;
                    let (bn, cin, h, wd) = xt.dims4();
                    let cout = wt.shape[0];
                    let hw = h * wd;
                    let k = cin * 9;
                    let mut gw = Tensor::zeros(&wt.shape);
                    let mut gb = Tensor::zeros(&[cout]);
                    let mut gx = need(*x).then(|| Tensor::zeros(&xt.shape));
                    let mut col = vec![T::zero(); k * hw];
                    let mut dcol = vec![T::zero(); k * hw];
                    for bi in 0..bn {
                        let gyb = &gy.data[bi * cout * hw..(bi + 1) * cout * hw];
                        for (co, plane) in gyb.chunks_exact(hw).enumerate() {
                            gb.data[co] += plane.iter().copied().sum::<T>();
                        }
                        if need(*w) {
                            im2col(&xt.data[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd, &mut col);
                            // gW += gY (Cout x HW) * col^T (HW x K)
                            T::gemm(cout, hw, k, T::one(), gyb, hw as isize, 1, &col, 1, hw as isize, T::one(), &mut gw.data, k as isize, 1);
                        }
                        if let Some(gx) = gx.as_mut() {
                            // dcol = W^T (K x Cout) * gY (Cout x HW)
                            T::gemm(k, cout, hw, T::one(), &wt.data, 1, k as isize, gyb, hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
                            col2im(&dcol, cin, h, wd, &mut gx.data[bi * cin * hw..(bi + 1) * cin * hw]);
                        }
                    }
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if need(*w) {
                        acc(&mut grads, *w, gw);
                    }
                    if need(*b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                    let xt = &self.nodes[*x].value;
                    let gv = &self.nodes[*gamma].value.data;
                    let (bn, c, h, w) = xt.dims4();
                    let hw = h * w;
                    let cg = c / groups;
                    let n = T::of((cg * hw) as f64);
                    let mut gx = Tensor::zeros(&xt.shape);
                    let mut ggam = Tensor::zeros(&[c]);
                    let mut gbet = Tensor::zeros(&[c]);
                    for bi in 0..bn {
                        for g in 0..*groups {
                            let (mu, rs) = (mean[bi * groups + g], rstd[bi * groups + g]);
                            let start = (bi * c + g * cg) * hw;
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for ci in 0..cg {
                                let ch = g * cg + ci;
                                let off = start + ci * hw;
                                let mut sg = T::zero();
                                let mut sb = T::zero();
                                for (dy, xv) in gy.data[off..off + hw].iter().zip(&xt.data[off..off + hw]) {
                                    let xh = (*xv - mu) * rs;
                                    sg += *dy * xh;
                                    sb += *dy;
                                }
                                ggam.data[ch] += sg;
                                gbet.data[ch] += sb;
                                sum_d += sb * gv[ch];
                                sum_dx += sg * gv[ch];
                            }
                            for ci in 0..cg {
                                let ch = g * cg + ci;
                                let off = start + ci * hw;
                                for i in off..off + hw {
                                    let xh = (xt.data[i] - mu) * rs;
                                    let dxh = gy.data[i] * gv[ch];
                                    gx.data[i] = rs / n * (n * dxh - sum_d - xh * sum_dx);
                                }
                            }
                        }
                    }
                    if need(*x) {
                        acc(&mut grads, *x, gx);
                    }
                    if need(*gamma) {
                        acc(&mut grads, *gamma, ggam);
                    }
                    if need(*beta) {
                        acc(&mut grads, *beta, gbet);
                    }
                }
                Op::Silu { x } => {
                    let xv = &self.nodes[*x].value;
                    let data = xv
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(v, g)| {
                            let s = sigmoid(*v);
                            *g * s * (T::one() + *v * (T::one() - s))
                        })
                        .collect();
                    acc(&mut grads, *x, Tensor { shape: xv.shape.clone(), data });
                }
                Op::AvgPool2 { x } => {
                    let xs = &self.nodes[*x].value.shape;
                    let (_, _, h, w) = self.nodes[*x].value.dims4();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = Tensor::zeros(xs);
                    let q = T::of(0.25);
                    for p in 0..gy.len() / (oh * ow) {
                        for y in 0..h {
                            for xx in 0..w {
                                gx.data[p * h * w + y * w + xx] = gy.data[p * oh * ow + (y / 2) * ow + xx / 2] * q;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Upsample2 { x } => {
                    let xs = self.nodes[*x].value.shape.clone();
                    let (_, _, h, w) = self.nodes[*x].value.dims4();
                    let (oh, ow) = (h * 2, w * 2);
                    let mut gx = Tensor::zeros(&xs);
                    for p in 0..gx.len() / (h * w) {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx.data[p * h * w + (y / 2) * w + xx / 2] += gy.data[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat { a, b } => {
                    let (bn, ac, h, w) = self.nodes[*a].value.dims4();
                    let bc = self.nodes[*b].value.shape[1];
                    let hw = h * w;
                    let mut ga = Tensor::zeros(&self.nodes[*a].value.shape);
                    let mut gb = Tensor::zeros(&self.nodes[*b].value.shape);
                    for i in 0..bn {
                        let src = &gy.data[i * (ac + bc) * hw..(i + 1) * (ac + bc) * hw];
                        ga.data[i * ac * hw..(i + 1) * ac * hw].copy_from_slice(&src[..ac * hw]);
                        gb.data[i * bc * hw..(i + 1) * bc * hw].copy_from_slice(&src[ac * hw..]);
                    }
                    if need(*a) {
                        acc(&mut grads, *a, ga);
                    }
                    if need(*b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xt = &self.nodes[*x].value;
                    let wt = &self.nodes[*w].value;
                    let (bn, din, dout) = (xt.shape[0], xt.shape[1], wt.shape[0]);
                    if need(*x) {
                        let mut gx = Tensor::zeros(&xt.shape);
                        T::gemm(bn, dout, din, T::one(), &gy.data, dout as isize, 1, &wt.data, din as isize, 1, T::zero(), &mut gx.data, din as isize, 1);
                        acc(&mut grads, *x, gx);
                    }
                    if need(*w) {
                        let mut gw = Tensor::zeros(&wt.shape);
                        T::gemm(dout, bn, din, T::one(), &gy.data, 1, dout as isize, &xt.data, din as isize, 1, T::zero(), &mut gw.data, din as isize, 1);
                        acc(&mut grads, *w, gw);
                    }
                    if need(*b) {
                        let mut gb = Tensor::zeros(&[dout]);
                        for r in 0..bn {
                            for j in 0..dout {
                                gb.data[j] += gy.data[r * dout + j];
                            }
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add { a, b } => {
                    if need(*a) {
                        acc(&mut grads, *a, gy.clone());
                    }
                    if need(*b) {
                        acc(&mut grads, *b, gy);
                    }
                }
                Op::Film { x, ss } => {
                    let xt = &self.nodes[*x].value;
                    let sv = &self.nodes[*ss].value.data;
                    let (bn, c, h, w) = xt.dims4();
                    let hw = h * w;
                    let mut gx = Tensor::zeros(&xt.shape);
                    let mut gss = Tensor::zeros(&[bn, 2 * c]);
                    for bi in 0..bn {
                        for ci in 0..c {
                            let scale = T::one() + sv[bi * 2 * c + ci];
                            let off = (bi * c + ci) * hw;
                            let mut s_dx = T::zero();
                            let mut s_d = T::zero();
                            for i in off..off + hw {
                                gx.data[i] = gy.data[i] * scale;
                                s_dx += gy.data[i] * xt.data[i];
                                s_d += gy.data[i];
                            }
                            gss.data[bi * 2 * c + ci] = s_dx;
                            gss.data[bi * 2 * c + c + ci] = s_d;
                        }
                    }
                    if need(*x) {
                        acc(&mut grads, *x, gx);
                    }
                    if need(*ss) {
                        acc(&mut grads, *ss, gss);
                    }
                }
                Op::ScaleSample { x, s } => {
                    let per = gy.len() / s.len();
                    let data = gy.data.iter().enumerate().map(|(i, g)| *g * s[i / per]).collect();
                    acc(&mut grads, *x, Tensor { shape: gy.shape.clone(), data });
                }
                Op::AddConst { x } => acc(&mut grads, *x, gy),
                Op::EmbedSum { table, idx, per_row } => {
                    let ts = self.nodes[*table].value.shape.clone();
                    let e = ts[1];
                    let mut gt = Tensor::zeros(&ts);
                    for (j, &i) in idx.iter().enumerate() {
                        let r = j / per_row;
                        for k in 0..e {
                            gt.data[i * e + k] += gy.data[r * e + k];
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Mse { pred, target } => {
                    let pv = &self.nodes[*pred].value;
                    let scale = gy.data[0] * T::of(2.0) / T::of(target.len() as f64);
                    let data = pv.data.iter().zip(&target.data).map(|(p, t)| (*p - *t) * scale).collect();
                    acc(&mut grads, *pred, Tensor { shape: pv.shape.clone(), data });
                }
            }
        }
        Grads { grads }
    }
}
