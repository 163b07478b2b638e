//! Reverse-mode automatic differentiation over a flat node list.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a
//! valid topological order for the backward sweep. Tensors are dense,
//! row-major, `NCHW` for images and `[B, N, D]` for token sequences.

use repap_core::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Input values and upstream gradient in, one gradient per input out.
/// An empty vector stands for a zero gradient.
pub type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    AddChannel(Var, Var),
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
    },
    GatedAdd {
        x: Var,
        r: Var,
        gate: Var,
    },
    AddBroadcast(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Bilinear(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    ToTokens(Var),
    FromTokens(Var),
    Patchify {
        x: Var,
        p: usize,
    },
    Unpatchify {
        x: Var,
        p: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, cols: &mut [T]) {
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, dx: &mut [T]) {
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Corner-aligned source coordinate and weights for one output index.
fn bilinear_tap(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_out == 1 || n_in == 1 {
        return (0, 0, 0.0);
    }
    let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let i0 = (pos.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, pos - i0 as f64)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn input(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "input shape {shape:?}");
        self.push(value, shape.to_vec(), Op::Leaf)
    }

    pub fn param(&mut self, id: usize, value: &[T], shape: &[usize]) -> Var {
        self.push(value.to_vec(), shape.to_vec(), Op::Param(id))
    }

    /// Copy of `x` with no gradient path back.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (v, s) = (n.value.clone(), n.shape.clone());
        self.push(v, s, Op::Leaf)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape, nb.shape, "elementwise shape mismatch");
        let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let s = na.shape.clone();
        self.push(v, s, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let n = &self.nodes[a.0];
        let v = n.value.iter().map(|&x| f(x)).collect();
        let s = n.shape.clone();
        self.push(v, s, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        self.unary(a, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()), Op::Gelu(a))
    }

    /// 2D convolution, square kernel, zero padding. `w: [Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv2d channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let hw = ho * wo;
        let ck = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); bn * ck * hw] };
        let mut out = vec![T::zero(); bn * co * hw];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for bi in 0..bn {
                let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let src: &[T] = if direct {
                    xb
                } else {
                    let c = &mut cols[bi * ck * hw..(bi + 1) * ck * hw];
                    im2col(xb, ci, h, wd, k, stride, pad, c);
                    c
                };
                T::gemm(co, ck, hw, T::one(), wv, false, src, false, T::zero(), &mut out[bi * co * hw..(bi + 1) * co * hw]);
            }
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value;
                for bi in 0..bn {
                    for c in 0..co {
                        let bias = bv[c];
                        out[(bi * co + c) * hw..(bi * co + c + 1) * hw].iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        self.push(
            out,
            vec![bn, co, ho, wo],
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols,
            },
        )
    }

    /// `y = x W^T + b` over the last axis. `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let din = *xs.last().unwrap();
        assert_eq!(ws[1], din, "linear input width");
        let dout = ws[0];
        let m = numel(&xs) / din;
        let mut out = vec![T::zero(); m * dout];
        T::gemm(m, din, dout, T::one(), &self.nodes[x.0].value, false, &self.nodes[w.0].value, true, T::zero(), &mut out);
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(out, shape, Op::Linear { x, w, b })
    }

    /// Group normalisation over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bn, c) = (xs[0], xs[1]);
        let s = numel(&xs[2..]);
        assert_eq!(c % groups, 0, "groups must divide channels");
        let gsz = c / groups * s;
        let eps = T::lit(1e-5);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); bn * groups];
        let mut out = vec![T::zero(); xv.len()];
        let nf = T::lit(gsz as f64);
        for bi in 0..bn {
            for g in 0..groups {
                let off = (bi * c) * s + g * gsz;
                let seg = &xv[off..off + gsz];
                let mean = seg.iter().copied().sum::<T>() / nf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[bi * groups + g] = r;
                for (k, &v) in seg.iter().enumerate() {
                    let xh = (v - mean) * r;
                    let ch = g * (c / groups) + k / s;
                    xhat[off + k] = xh;
                    out[off + k] = xh * gv[ch] + bv[ch];
                }
            }
        }
        self.push(
            out,
            xs,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        )
    }

    /// Normalise over the last axis, no affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let d = *xs.last().unwrap();
        let eps = T::lit(1e-6);
        let xv = &self.nodes[x.0].value;
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let nf = T::lit(d as f64);
        for r in 0..rows {
            let seg = &xv[r * d..(r + 1) * d];
            let mean = seg.iter().copied().sum::<T>() / nf;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                xhat[r * d + k] = (seg[k] - mean) * rs;
            }
        }
        let out = xhat.clone();
        self.push(out, xs, Op::LayerNorm { x, xhat, rstd })
    }

    /// `x[b, c, ...] + v[b, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bn, c) = (xs[0], xs[1]);
        assert_eq!(self.nodes[v.0].shape, vec![bn, c], "add_channel vector shape");
        let s = numel(&xs[2..]);
        let mut out = self.nodes[x.0].value.clone();
        let vv = &self.nodes[v.0].value;
        for bc in 0..bn * c {
            let a = vv[bc];
            out[bc * s..(bc + 1) * s].iter_mut().for_each(|o| *o += a);
        }
        self.push(out, xs, Op::AddChannel(x, v))
    }

    /// `x[b, n, d] * (1 + scale[b, d]) + shift[b, d]`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bn, nt, d) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x.0].value;
        let sh = &self.nodes[shift.0].value;
        let sc = &self.nodes[scale.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bn {
            for n in 0..nt {
                for k in 0..d {
                    let i = (b * nt + n) * d + k;
                    out[i] = xv[i] * (T::one() + sc[b * d + k]) + sh[b * d + k];
                }
            }
        }
        self.push(out, xs, Op::Modulate { x, shift, scale })
    }

    /// `x[b, n, d] + gate[b, d] * r[b, n, d]`.
    pub fn gated_add(&mut self, x: Var, r: Var, gate: Var) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bn, nt, d) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x.0].value;
        let rv = &self.nodes[r.0].value;
        let gv = &self.nodes[gate.0].value;
        let mut out = xv.clone();
        for b in 0..bn {
            for n in 0..nt {
                for k in 0..d {
                    let i = (b * nt + n) * d + k;
                    out[i] += gv[b * d + k] * rv[i];
                }
            }
        }
        self.push(out, xs, Op::GatedAdd { x, r, gate })
    }

    /// `x[b, ...] + v[...]`, broadcasting over the leading axis.
    pub fn add_broadcast(&mut self, x: Var, v: Var) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let inner = numel(&xs[1..]);
        assert_eq!(self.nodes[v.0].value.len(), inner, "broadcast operand size");
        let vv = &self.nodes[v.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(inner) {
            row.iter_mut().zip(vv).for_each(|(o, &a)| *o += a);
        }
        self.push(out, xs, Op::AddBroadcast(x, v))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].value;
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); bc * ho * wo];
        for p in 0..bc {
            for i in 0..ho {
                for j in 0..wo {
                    let s = xv[(p * h + 2 * i) * w + 2 * j]
                        + xv[(p * h + 2 * i) * w + 2 * j + 1]
                        + xv[(p * h + 2 * i + 1) * w + 2 * j]
                        + xv[(p * h + 2 * i + 1) * w + 2 * j + 1];
                    out[(p * ho + i) * wo + j] = q * s;
                }
            }
        }
        self.push(out, vec![xs[0], xs[1], ho, wo], Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); bc * 4 * h * w];
        for p in 0..bc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        self.push(out, vec![xs[0], xs[1], 2 * h, 2 * w], Op::Upsample2(x))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..], "concat spatial mismatch");
        let s = numel(&sa[2..]);
        let (ca, cb) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(sa[0] * (ca + cb) * s);
        for bi in 0..sa[0] {
            out.extend_from_slice(&self.nodes[a.0].value[bi * ca * s..(bi + 1) * ca * s]);
            out.extend_from_slice(&self.nodes[b.0].value[bi * cb * s..(bi + 1) * cb * s]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        self.push(out, shape, Op::Concat(a, b))
    }

    /// Corner-aligned bilinear resize of `[B, C, H, W]` to `(h_out, w_out)`.
    pub fn bilinear(&mut self, x: Var, h_out: usize, w_out: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); bc * h_out * w_out];
        let ty: Vec<_> = (0..h_out).map(|o| bilinear_tap(o, h, h_out)).collect();
        let tx: Vec<_> = (0..w_out).map(|o| bilinear_tap(o, w, w_out)).collect();
        for p in 0..bc {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out[(p * h_out + i) * w_out + j] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        self.push(out, vec![xs[0], xs[1], h_out, w_out], Op::Bilinear(x))
    }

    /// Multi-head softmax attention on packed `[B, N, 3D]` projections.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let s = self.nodes[qkv.0].shape.clone();
        let (bn, nt, d3) = (s[0], s[1], s[2]);
        let d = d3 / 3;
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let v = &self.nodes[qkv.0].value;
        let mut out = vec![T::zero(); bn * nt * d];
        let mut probs = vec![T::zero(); bn * heads * nt * nt];
        let mut q = vec![T::zero(); nt * dh];
        let mut k = vec![T::zero(); nt * dh];
        let mut vv = vec![T::zero(); nt * dh];
        let mut o = vec![T::zero(); nt * dh];
        for b in 0..bn {
            for hd in 0..heads {
                for n in 0..nt {
                    let row = (b * nt + n) * d3;
                    for e in 0..dh {
                        q[n * dh + e] = v[row + hd * dh + e];
                        k[n * dh + e] = v[row + d + hd * dh + e];
                        vv[n * dh + e] = v[row + 2 * d + hd * dh + e];
                    }
                }
                let p = &mut probs[(b * heads + hd) * nt * nt..(b * heads + hd + 1) * nt * nt];
                T::gemm(nt, dh, nt, scale, &q, false, &k, true, T::zero(), p);
                for row in p.chunks_mut(nt) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - m).exp();
                        z += *r;
                    }
                    row.iter_mut().for_each(|r| *r /= z);
                }
                T::gemm(nt, nt, dh, T::one(), p, false, &vv, false, T::zero(), &mut o);
                for n in 0..nt {
                    for e in 0..dh {
                        out[(b * nt + n) * d + hd * dh + e] = o[n * dh + e];
                    }
                }
            }
        }
        self.push(out, vec![bn, nt, d], Op::Attention { qkv, heads, probs })
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bn, c, s) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bn {
            for ch in 0..c {
                for p in 0..s {
                    out[(b * s + p) * c + ch] = xv[(b * c + ch) * s + p];
                }
            }
        }
        self.push(out, vec![bn, s, c], Op::ToTokens(x))
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bn, s, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(s, h * w, "token count does not match spatial size");
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bn {
            for p in 0..s {
                for ch in 0..c {
                    out[(b * c + ch) * s + p] = xv[(b * s + p) * c + ch];
                }
            }
        }
        self.push(out, vec![bn, c, h, w], Op::FromTokens(x))
    }

    /// `[B, C, H, W] -> [B, (H/p)(W/p), C p p]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (gh, gw) = (h / p, w / p);
        let f = c * p * p;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bn {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let tok = (y / p) * gw + xx / p;
                        let feat = (ch * p + y % p) * p + xx % p;
                        out[(b * gh * gw + tok) * f + feat] = xv[((b * c + ch) * h + y) * w + xx];
                    }
                }
            }
        }
        self.push(out, vec![bn, gh * gw, f], Op::Patchify { x, p })
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(&mut self, x: Var, p: usize, h: usize, w: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let (bn, f) = (xs[0], xs[2]);
        let c = f / (p * p);
        let gw = w / p;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bn {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let tok = (y / p) * gw + xx / p;
                        let feat = (ch * p + y % p) * p + xx % p;
                        out[((b * c + ch) * h + y) * w + xx] = xv[(b * xs[1] + tok) * f + feat];
                    }
                }
            }
        }
        self.push(out, vec![bn, c, h, w], Op::Unpatchify { x, p })
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let d = *xs.last().unwrap();
        assert!(start + len <= d);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(xv.len() / d * len);
        for row in xv.chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        self.push(out, shape, Op::SliceLast { x, start })
    }

    /// Node with a caller-supplied value and vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Vec<T>, shape: &[usize], backward: CustomBackward<T>) -> Var {
        self.push(
            value,
            shape.to_vec(),
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Sum of scalar nodes, each scaled by its weight.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s),
            });
        }
        acc.expect("weighted_sum of no terms")
    }

    /// Back-propagate from `root`, seeded with `seed` (ones if `None`).
    pub fn backward_with(&self, root: Var, seed: Option<Vec<T>>) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = seed.unwrap_or_else(|| vec![T::one(); self.nodes[root.0].value.len()]);
        assert_eq!(seed.len(), self.nodes[root.0].value.len());
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    pub fn backward(&self, root: Var) -> Gradients<T> {
        self.backward_with(root, None)
    }

    fn backprop_node(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, gy);
                accumulate(grads, *b, gy);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gy);
                let neg: Vec<T> = gy.iter().map(|&g| -g).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<T> = gy.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let gb: Vec<T> = gy.iter().zip(va).map(|(&g, &x)| g * x).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let g: Vec<T> = gy.iter().map(|&g| g * *c).collect();
                accumulate(grads, *a, &g);
            }
            Op::Silu(a) => {
                let g: Vec<T> = gy
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *a, &g);
            }
            Op::Relu(a) => {
                let g: Vec<T> = gy
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *a, &g);
            }
            Op::Tanh(a) => {
                let g: Vec<T> = gy.iter().zip(&node.value).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                accumulate(grads, *a, &g);
            }
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(0.044715);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let g: Vec<T> = gy
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| {
                        let u = c * (x + k * x * x * x);
                        let th = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        g * (half * (T::one() + th) + half * x * (T::one() - th * th) * du)
                    })
                    .collect();
                accumulate(grads, *a, &g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols,
            } => {
                let xs = &self.nodes[x.0].shape;
                let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ys = &node.shape;
                let (co, hw) = (ys[1], ys[2] * ys[3]);
                let ck = ci * k * k;
                let direct = cols.is_empty();
                let wv = val(*w);
                let xv = val(*x);
                let mut gw = vec![T::zero(); co * ck];
                let mut gx = vec![T::zero(); xv.len()];
                let mut dcols = vec![T::zero(); ck * hw];
                for bi in 0..bn {
                    let gyb = &gy[bi * co * hw..(bi + 1) * co * hw];
                    let src = if direct {
                        &xv[bi * ck * hw..(bi + 1) * ck * hw]
                    } else {
                        &cols[bi * ck * hw..(bi + 1) * ck * hw]
                    };
                    T::gemm(co, hw, ck, T::one(), gyb, false, src, true, T::one(), &mut gw);
                    if direct {
                        T::gemm(ck, co, hw, T::one(), wv, true, gyb, false, T::zero(), &mut gx[bi * ck * hw..(bi + 1) * ck * hw]);
                    } else {
                        T::gemm(ck, co, hw, T::one(), wv, true, gyb, false, T::zero(), &mut dcols);
                        col2im(&dcols, ci, h, wd, *k, *stride, *pad, &mut gx[bi * ci * h * wd..(bi + 1) * ci * h * wd]);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *w, &gw);
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); co];
                    for bi in 0..bn {
                        for c in 0..co {
                            gb[c] += gy[(bi * co + c) * hw..(bi * co + c + 1) * hw].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Linear { x, w, b } => {
                let din = *self.nodes[x.0].shape.last().unwrap();
                let dout = *node.shape.last().unwrap();
                let m = gy.len() / dout;
                let mut gx = vec![T::zero(); m * din];
                T::gemm(m, dout, din, T::one(), gy, false, val(*w), false, T::zero(), &mut gx);
                let mut gw = vec![T::zero(); dout * din];
                T::gemm(dout, m, din, T::one(), gy, true, val(*x), false, T::zero(), &mut gw);
                accumulate(grads, *x, &gx);
                accumulate(grads, *w, &gw);
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); dout];
                    for row in gy.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xs = &self.nodes[x.0].shape;
                let (bn, c) = (xs[0], xs[1]);
                let s = numel(&xs[2..]);
                let cg = c / groups;
                let gsz = cg * s;
                let gv = val(*gamma);
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                let mut gx = vec![T::zero(); xhat.len()];
                let nf = T::lit(gsz as f64);
                for bi in 0..bn {
                    for g in 0..*groups {
                        let off = bi * c * s + g * gsz;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for k in 0..gsz {
                            let ch = g * cg + k / s;
                            let d = gy[off + k] * gv[ch];
                            sum_d += d;
                            sum_dx += d * xhat[off + k];
                            gg[ch] += gy[off + k] * xhat[off + k];
                            gb[ch] += gy[off + k];
                        }
                        let r = rstd[bi * groups + g];
                        for k in 0..gsz {
                            let ch = g * cg + k / s;
                            let d = gy[off + k] * gv[ch];
                            gx[off + k] = r / nf * (nf * d - sum_d - xhat[off + k] * sum_dx);
                        }
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gamma, &gg);
                accumulate(grads, *beta, &gb);
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let nf = T::lit(d as f64);
                let mut gx = vec![T::zero(); gy.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let g = &gy[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let sd: T = g.iter().copied().sum();
                    let sdx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        gx[r * d + k] = rs / nf * (nf * g[k] - sd - xh[k] * sdx);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::AddChannel(x, v) => {
                accumulate(grads, *x, gy);
                let nv = self.nodes[v.0].value.len();
                let s = gy.len() / nv;
                let gv: Vec<T> = (0..nv).map(|i| gy[i * s..(i + 1) * s].iter().copied().sum()).collect();
                accumulate(grads, *v, &gv);
            }
            Op::Modulate { x, shift, scale } => {
                let s = &node.shape;
                let (bn, nt, d) = (s[0], s[1], s[2]);
                let xv = val(*x);
                let sc = val(*scale);
                let mut gx = vec![T::zero(); gy.len()];
                let mut gsh = vec![T::zero(); bn * d];
                let mut gsc = vec![T::zero(); bn * d];
                for b in 0..bn {
                    for n in 0..nt {
                        for k in 0..d {
                            let i = (b * nt + n) * d + k;
                            gx[i] = gy[i] * (T::one() + sc[b * d + k]);
                            gsh[b * d + k] += gy[i];
                            gsc[b * d + k] += gy[i] * xv[i];
                        }
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *shift, &gsh);
                accumulate(grads, *scale, &gsc);
            }
            Op::GatedAdd { x, r, gate } => {
                let s = &node.shape;
                let (bn, nt, d) = (s[0], s[1], s[2]);
                let rv = val(*r);
                let gv = val(*gate);
                let mut gr = vec![T::zero(); gy.len()];
                let mut gg = vec![T::zero(); bn * d];
                for b in 0..bn {
                    for n in 0..nt {
                        for k in 0..d {
                            let i = (b * nt + n) * d + k;
                            gr[i] = gy[i] * gv[b * d + k];
                            gg[b * d + k] += gy[i] * rv[i];
                        }
                    }
                }
                accumulate(grads, *x, gy);
                accumulate(grads, *r, &gr);
                accumulate(grads, *gate, &gg);
            }
            Op::AddBroadcast(x, v) => {
                accumulate(grads, *x, gy);
                let inner = self.nodes[v.0].value.len();
                let mut gv = vec![T::zero(); inner];
                for row in gy.chunks(inner) {
                    gv.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                }
                accumulate(grads, *v, &gv);
            }
            Op::AvgPool2(x) => {
                let xs = &self.nodes[x.0].shape;
                let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let q = T::lit(0.25);
                let mut gx = vec![T::zero(); bc * h * w];
                for p in 0..bc {
                    for i in 0..ho {
                        for j in 0..wo {
                            let g = q * gy[(p * ho + i) * wo + j];
                            gx[(p * h + 2 * i) * w + 2 * j] = g;
                            gx[(p * h + 2 * i) * w + 2 * j + 1] = g;
                            gx[(p * h + 2 * i + 1) * w + 2 * j] = g;
                            gx[(p * h + 2 * i + 1) * w + 2 * j + 1] = g;
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Upsample2(x) => {
                let xs = &self.nodes[x.0].shape;
                let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut gx = vec![T::zero(); bc * h * w];
                for p in 0..bc {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[(p * h + i / 2) * w + j / 2] += gy[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Concat(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let s = numel(&sa[2..]);
                let (ca, cb) = (sa[1], sb[1]);
                let mut ga = Vec::with_capacity(self.nodes[a.0].value.len());
                let mut gb = Vec::with_capacity(self.nodes[b.0].value.len());
                for bi in 0..sa[0] {
                    let off = bi * (ca + cb) * s;
                    ga.extend_from_slice(&gy[off..off + ca * s]);
                    gb.extend_from_slice(&gy[off + ca * s..off + (ca + cb) * s]);
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Bilinear(x) => {
                let xs = &self.nodes[x.0].shape;
                let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (h_out, w_out) = (node.shape[2], node.shape[3]);
                let ty: Vec<_> = (0..h_out).map(|o| bilinear_tap(o, h, h_out)).collect();
                let tx: Vec<_> = (0..w_out).map(|o| bilinear_tap(o, w, w_out)).collect();
                let mut gx = vec![T::zero(); bc * h * w];
                for p in 0..bc {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::lit(fy);
                        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::lit(fx);
                            let g = gy[(p * h_out + i) * w_out + j];
                            let gt = g * (T::one() - fy);
                            let gbm = g * fy;
                            dst[y0 * w + x0] += gt * (T::one() - fx);
                            dst[y0 * w + x1] += gt * fx;
                            dst[y1 * w + x0] += gbm * (T::one() - fx);
                            dst[y1 * w + x1] += gbm * fx;
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Attention { qkv, heads, probs } => {
                let s = &self.nodes[qkv.0].shape;
                let (bn, nt, d3) = (s[0], s[1], s[2]);
                let d = d3 / 3;
                let heads = *heads;
                let dh = d / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let v = val(*qkv);
                let mut g = vec![T::zero(); v.len()];
                let mut q = vec![T::zero(); nt * dh];
                let mut k = vec![T::zero(); nt * dh];
                let mut vv = vec![T::zero(); nt * dh];
                let mut go = vec![T::zero(); nt * dh];
                let mut dp = vec![T::zero(); nt * nt];
                let mut dq = vec![T::zero(); nt * dh];
                let mut dk = vec![T::zero(); nt * dh];
                let mut dv = vec![T::zero(); nt * dh];
                for b in 0..bn {
                    for hd in 0..heads {
                        for n in 0..nt {
                            let row = (b * nt + n) * d3;
                            for e in 0..dh {
                                q[n * dh + e] = v[row + hd * dh + e];
                                k[n * dh + e] = v[row + d + hd * dh + e];
                                vv[n * dh + e] = v[row + 2 * d + hd * dh + e];
                                go[n * dh + e] = gy[(b * nt + n) * d + hd * dh + e];
                            }
                        }
                        let p = &probs[(b * heads + hd) * nt * nt..(b * heads + hd + 1) * nt * nt];
                        T::gemm(nt, nt, dh, T::one(), p, true, &go, false, T::zero(), &mut dv);
                        T::gemm(nt, dh, nt, T::one(), &go, false, &vv, true, T::zero(), &mut dp);
                        for (prow, drow) in p.chunks(nt).zip(dp.chunks_mut(nt)) {
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dd, &pp) in drow.iter_mut().zip(prow) {
                                *dd = pp * (*dd - dot) * scale;
                            }
                        }
                        T::gemm(nt, nt, dh, T::one(), &dp, false, &k, false, T::zero(), &mut dq);
                        T::gemm(nt, nt, dh, T::one(), &dp, true, &q, false, T::zero(), &mut dk);
                        for n in 0..nt {
                            let row = (b * nt + n) * d3;
                            for e in 0..dh {
                                g[row + hd * dh + e] += dq[n * dh + e];
                                g[row + d + hd * dh + e] += dk[n * dh + e];
                                g[row + 2 * d + hd * dh + e] += dv[n * dh + e];
                            }
                        }
                    }
                }
                accumulate(grads, *qkv, &g);
            }
            Op::ToTokens(x) => {
                let xs = &self.nodes[x.0].shape;
                let (bn, c, s) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut gx = vec![T::zero(); gy.len()];
                for b in 0..bn {
                    for ch in 0..c {
                        for p in 0..s {
                            gx[(b * c + ch) * s + p] = gy[(b * s + p) * c + ch];
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::FromTokens(x) => {
                let xs = &self.nodes[x.0].shape;
                let (bn, s, c) = (xs[0], xs[1], xs[2]);
                let mut gx = vec![T::zero(); gy.len()];
                for b in 0..bn {
                    for p in 0..s {
                        for ch in 0..c {
                            gx[(b * s + p) * c + ch] = gy[(b * c + ch) * s + p];
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Patchify { x, p } => {
                let xs = &self.nodes[x.0].shape;
                let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let p = *p;
                let (gh, gw) = (h / p, w / p);
                let f = c * p * p;
                let mut gx = vec![T::zero(); gy.len()];
                for b in 0..bn {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let tok = (y / p) * gw + xx / p;
                                let feat = (ch * p + y % p) * p + xx % p;
                                gx[((b * c + ch) * h + y) * w + xx] = gy[(b * gh * gw + tok) * f + feat];
                            }
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Unpatchify { x, p } => {
                let xs = &self.nodes[x.0].shape;
                let (bn, nt, f) = (xs[0], xs[1], xs[2]);
                let p = *p;
                let (c, h, w) = (node.shape[1], node.shape[2], node.shape[3]);
                let gw = w / p;
                let mut gx = vec![T::zero(); gy.len()];
                for b in 0..bn {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let tok = (y / p) * gw + xx / p;
                                let feat = (ch * p + y % p) * p + xx % p;
                                gx[(b * nt + tok) * f + feat] = gy[((b * c + ch) * h + y) * w + xx];
                            }
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::SliceLast { x, start } => {
                let d = *self.nodes[x.0].shape.last().unwrap();
                let len = *node.shape.last().unwrap();
                let mut gx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (r, row) in gy.chunks(len).enumerate() {
                    gx[r * d + start..r * d + start + len].copy_from_slice(row);
                }
                accumulate(grads, *x, &gx);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&[T]> = inputs.iter().map(|v| val(*v)).collect();
                let gs = backward(&vals, gy);
                for (v, g) in inputs.iter().zip(gs) {
                    if !g.is_empty() {
                        accumulate(grads, *v, &g);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => {
            debug_assert_eq!(acc.len(), g.len());
            acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node; `None` when it does not reach the root.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(param id, gradient)` pairs, summed when a parameter appears twice.
    pub fn params(&self) -> Vec<(usize, Vec<T>)> {
        let mut out: Vec<(usize, Vec<T>)> = Vec::new();
        for &(id, node) in &self.params {
            let Some(g) = self.grads[node].as_ref() else { continue };
            match out.iter_mut().find(|(i, _)| *i == id) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `d <r, f(x)> / dx` for every input.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, shapes: &[Vec<usize>], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| rand_vec(&mut rng, numel(s))).collect();
        let eval = |vals: &[Vec<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().zip(shapes).map(|(v, s)| g.input(v.clone(), s)).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let r = rand_vec(&mut rng, g.value(out).len());
        let grads = g.backward_with(out, Some(r.clone()));
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let an = grads.wrt(*v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k][i] += h;
                let mut minus = inputs.clone();
                minus[k][i] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fp: f64 = gp.value(op).iter().zip(&r).map(|(a, b)| a * b).sum();
                let fm: f64 = gm.value(om).iter().zip(&r).map(|(a, b)| a * b).sum();
                let fd = (fp - fm) / (2.0 * h);
                let tol = 1e-6 * (1.0 + fd.abs());
                assert!((an[i] - fd).abs() < tol, "input {k} entry {i}: analytic {} vs fd {fd}", an[i]);
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        check(
            |g, v| {
                let a = g.mul(v[0], v[1]);
                let b = g.sub(a, v[1]);
                let c = g.silu(b);
                let d = g.tanh(c);
                let e = g.gelu(d);
                let f = g.add(e, v[0]);
                g.scale(f, 1.7)
            },
            &[vec![2, 3], vec![2, 3]],
            1,
        );
    }

    #[test]
    fn conv_strided_and_padded() {
        check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1), &[vec![2, 2, 5, 4], vec![3, 2, 3, 3], vec![3]], 2);
        check(|g, v| g.conv2d(v[0], v[1], None, 2, 1), &[vec![1, 2, 6, 6], vec![2, 2, 3, 3]], 3);
        check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0), &[vec![2, 3, 3, 3], vec![2, 3, 1, 1], vec![2]], 4);
    }

    #[test]
    fn linear_and_norms() {
        check(|g, v| g.linear(v[0], v[1], Some(v[2])), &[vec![2, 3, 4], vec![5, 4], vec![5]], 5);
        check(|g, v| g.group_norm(v[0], v[1], v[2], 2), &[vec![2, 4, 3, 2], vec![4], vec![4]], 6);
        check(|g, v| g.layer_norm(v[0]), &[vec![2, 3, 5]], 7);
    }

    #[test]
    fn broadcast_ops() {
        check(|g, v| g.add_channel(v[0], v[1]), &[vec![2, 3, 2, 2], vec![2, 3]], 8);
        check(|g, v| g.modulate(v[0], v[1], v[2]), &[vec![2, 3, 4], vec![2, 4], vec![2, 4]], 9);
        check(|g, v| g.gated_add(v[0], v[1], v[2]), &[vec![2, 3, 4], vec![2, 3, 4], vec![2, 4]], 10);
        check(|g, v| g.add_broadcast(v[0], v[1]), &[vec![3, 2, 4], vec![2, 4]], 11);
    }

    #[test]
    fn resampling_ops() {
        check(|g, v| g.avg_pool2(v[0]), &[vec![2, 2, 4, 6]], 12);
        check(|g, v| g.upsample2(v[0]), &[vec![1, 2, 3, 2]], 13);
        check(|g, v| g.bilinear(v[0], 7, 5), &[vec![1, 2, 4, 3]], 14);
        check(|g, v| g.concat(v[0], v[1]), &[vec![2, 2, 3, 3], vec![2, 1, 3, 3]], 15);
    }

    #[test]
    fn attention_and_layout_ops() {
        check(|g, v| g.attention(v[0], 2), &[vec![2, 5, 12]], 16);
        check(
            |g, v| {
                let t = g.to_tokens(v[0]);
                let s = g.slice_last(t, 1, 2);
                let u = g.scale(s, 2.0);
                g.from_tokens(u, 2, 3)
            },
            &[vec![2, 3, 2, 3]],
            17,
        );
        check(
            |g, v| {
                let p = g.patchify(v[0], 2);
                let r = g.relu(p);
                g.unpatchify(r, 2, 4, 6)
            },
            &[vec![2, 3, 4, 6]],
            18,
        );
    }

    #[test]
    fn patchify_round_trip_and_bilinear_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut g = Graph::<f64>::new();
        let x = g.input(rand_vec(&mut rng, 2 * 3 * 8 * 4), &[2, 3, 8, 4]);
        let p = g.patchify(x, 4);
        assert_eq!(g.shape(p), &[2, 2, 48]);
        let back = g.unpatchify(p, 4, 8, 4);
        assert_eq!(g.value(back), g.value(x));
        let same = g.bilinear(x, 8, 4);
        assert_eq!(g.value(same), g.value(x));
    }

    #[test]
    fn custom_node_and_param_grads() {
        let mut g = Graph::<f64>::new();
        let w = g.param(3, &[1.0, 2.0], &[2]);
        let w2 = g.param(3, &[1.0, 2.0], &[2]);
        let s = g.add(w, w2);
        let val = g.value(s).iter().map(|v| v * v).sum::<f64>();
        let loss = g.custom(
            &[s],
            vec![val],
            &[1],
            Box::new(|x, gy| vec![x[0].iter().map(|v| 2.0 * v * gy[0]).collect()]),
        );
        let grads = g.backward(loss);
        let p = grads.params();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].0, 3);
        assert_eq!(p[0].1, vec![8.0, 16.0]);
    }
}
