use super::conv::ConvGeometry;
use super::Real;
use crate::error::{Error, Result};

/// Sentinel in gather index maps: the output cell is zero.
pub const ZERO_FILL: usize = usize::MAX;

/// Handle to an array recorded on a [`Graph`]. The value, gradient and
/// shape live in the graph; the handle is the node identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiffArray(usize);

impl DiffArray {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Log,
    Square,
    Exp,
}

#[derive(Debug, Clone, Copy)]
struct DepthwiseGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    shared: bool,
}

#[derive(Debug, Clone, Copy)]
struct ReassembleGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    factor: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Depthwise {
        input: usize,
        kernel: usize,
        geom: DepthwiseGeometry,
    },
    Softmax {
        input: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Unary {
        input: usize,
        f: Unary,
    },
    Clamp {
        input: usize,
        lo: T,
        hi: T,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale {
        input: usize,
        factor: T,
    },
    Shift {
        input: usize,
    },
    Sum {
        input: usize,
    },
    SumChannels {
        input: usize,
        channels: usize,
    },
    Reshape {
        input: usize,
    },
    Gather {
        input: usize,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Reassemble {
        features: usize,
        weights: usize,
        geom: ReassembleGeometry,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// A recording of one forward computation. Ops append nodes; [`Graph::backward`]
/// walks them in reverse. Leaf gradients accumulate across backward calls,
/// intermediate gradients are recomputed each time.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> DiffArray {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        DiffArray(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<DiffArray> {
        if numel(shape) != values.len() {
            return Err(Error::Shape {
                op: "leaf",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<DiffArray> {
        self.leaf(shape, values, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, shape: &[usize], values: Vec<T>) -> Result<DiffArray> {
        self.leaf(shape, values, true)
    }

    pub fn scalar(&mut self, v: T) -> DiffArray {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn value(&self, x: DiffArray) -> &[T] {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: DiffArray) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn grad(&self, x: DiffArray) -> Option<&[T]> {
        self.nodes[x.0].grad.as_deref()
    }

    pub fn requires_grad(&self, x: DiffArray) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Value of a single-element array.
    pub fn item(&self, x: DiffArray) -> T {
        self.nodes[x.0].value[0]
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn dims3(&self, x: DiffArray, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![0, 0, 0],
            }),
        }
    }

    /// Dense 2-D convolution. `kernel` is `[c_out, c_in, k, k]`, `bias` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: DiffArray,
        kernel: DiffArray,
        bias: Option<DiffArray>,
        stride: usize,
        padding: usize,
    ) -> Result<DiffArray> {
        let (c_in, h, w) = self.dims3(input, "conv2d")?;
        let ks = self.shape(kernel).to_vec();
        let mismatch = || Error::Shape {
            op: "conv2d",
            left: vec![c_in, h, w],
            right: ks.clone(),
        };
        if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] || ks[2].is_multiple_of(2) {
            return Err(mismatch());
        }
        let (c_out, k) = (ks[0], ks[2]);
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    left: vec![c_out],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); c_out * oh * ow];
        geom.forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &mut out,
        );
        let mut ids = vec![input.0, kernel.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            vec![c_out, oh, ow],
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    /// Convolves each channel with its own `[c, k, k]` kernel, or with a
    /// single shared `[1, k, k]` / `[k, k]` kernel. Zero padding.
    pub fn depthwise_conv(
        &mut self,
        input: DiffArray,
        kernel: DiffArray,
        stride: usize,
        padding: usize,
    ) -> Result<DiffArray> {
        let (c, h, w) = self.dims3(input, "depthwise_conv")?;
        let ks = self.shape(kernel).to_vec();
        let (kc, k) = match *ks.as_slice() {
            [a, b] if a == b => (1, a),
            [kc, a, b] if a == b => (kc, a),
            _ => {
                return Err(Error::Shape {
                    op: "depthwise_conv",
                    left: vec![c, h, w],
                    right: ks,
                })
            }
        };
        if k % 2 == 0 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::invalid(format!(
                "depthwise_conv: kernel {k} stride {stride} padding {padding} on {h}x{w}"
            )));
        }
        let shared = kc == 1 && c != 1 || ks.len() == 2;
        if !shared && kc != c {
            return Err(Error::Shape {
                op: "depthwise_conv channels",
                left: vec![c, h, w],
                right: ks,
            });
        }
        let out_h = (h + 2 * padding - k) / stride + 1;
        let out_w = (w + 2 * padding - k) / stride + 1;
        let geom = DepthwiseGeometry {
            c,
            h,
            w,
            k,
            stride,
            padding,
            out_h,
            out_w,
            shared,
        };
        let x = self.value(input);
        let kv = self.value(kernel);
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let kern = if shared {
                &kv[..k * k]
            } else {
                &kv[ch * k * k..(ch + 1) * k * k]
            };
            let xc = &x[ch * h * w..(ch + 1) * h * w];
            let oc = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xc[iy as usize * w..];
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += kern[ky * k + kx] * row[ix as usize];
                            }
                        }
                    }
                    oc[oy * out_w + ox] = acc;
                }
            }
        }
        let rg = self.rg(&[input.0, kernel.0]);
        Ok(self.push(
            vec![c, out_h, out_w],
            out,
            Op::Depthwise {
                input: input.0,
                kernel: kernel.0,
                geom,
            },
            rg,
        ))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, input: DiffArray, axis: usize) -> Result<DiffArray> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(x[base + j * inner]);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= z;
                }
            }
        }
        let rg = self.rg(&[input.0]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                input: input.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn unary(&mut self, input: DiffArray, f: Unary) -> Result<DiffArray> {
        let x = self.value(input);
        let out: Vec<T> = match f {
            Unary::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Log => {
                if let Some((index, &v)) = x.iter().enumerate().find(|(_, &v)| !(v > T::zero())) {
                    return Err(Error::Domain {
                        op: "log",
                        index,
                        value: v.as_f64(),
                    });
                }
                x.iter().map(|&v| v.ln()).collect()
            }
            Unary::Square => x.iter().map(|&v| v * v).collect(),
            Unary::Exp => x.iter().map(|&v| v.exp()).collect(),
        };
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input.0]);
        Ok(self.push(shape, out, Op::Unary { input: input.0, f }, rg))
    }

    pub fn relu(&mut self, x: DiffArray) -> Result<DiffArray> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: DiffArray) -> Result<DiffArray> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn log(&mut self, x: DiffArray) -> Result<DiffArray> {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: DiffArray) -> Result<DiffArray> {
        self.unary(x, Unary::Square)
    }

    pub fn exp(&mut self, x: DiffArray) -> Result<DiffArray> {
        self.unary(x, Unary::Exp)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, input: DiffArray, lo: T, hi: T) -> DiffArray {
        let out = self.value(input).iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input.0]);
        self.push(shape, out, Op::Clamp { input: input.0, lo, hi }, rg)
    }

    fn binary(
        &mut self,
        a: DiffArray,
        b: DiffArray,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<DiffArray> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, input: DiffArray, factor: T) -> DiffArray {
        let out = self.value(input).iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input.0]);
        self.push(shape, out, Op::Scale { input: input.0, factor }, rg)
    }

    pub fn add_scalar(&mut self, input: DiffArray, offset: T) -> DiffArray {
        let out = self.value(input).iter().map(|&v| v + offset).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input.0]);
        self.push(shape, out, Op::Shift { input: input.0 }, rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: DiffArray) -> DiffArray {
        let s = self.value(input).iter().copied().sum();
        let rg = self.rg(&[input.0]);
        self.push(vec![1], vec![s], Op::Sum { input: input.0 }, rg)
    }

    pub fn mean(&mut self, input: DiffArray) -> DiffArray {
        let n = self.value(input).len().max(1);
        let s = self.sum(input);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums over the leading axis: `[c, rest..] -> [1, rest..]`.
    pub fn sum_channels(&mut self, input: DiffArray) -> Result<DiffArray> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("sum_channels on a rank-0 array"));
        }
        let channels = shape[0];
        let plane: usize = shape[1..].iter().product();
        let x = self.value(input);
        let mut out = vec![T::zero(); plane];
        for c in 0..channels {
            for (o, &v) in out.iter_mut().zip(&x[c * plane..(c + 1) * plane]) {
                *o += v;
            }
        }
        let mut oshape = shape;
        oshape[0] = 1;
        let rg = self.rg(&[input.0]);
        Ok(self.push(
            oshape,
            out,
            Op::SumChannels {
                input: input.0,
                channels,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: DiffArray, shape: &[usize]) -> Result<DiffArray> {
        if numel(shape) != self.value(input).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(input).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(input).to_vec();
        let rg = self.rg(&[input.0]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { input: input.0 }, rg))
    }

    /// `out[i] = input[index[i]]`, with [`ZERO_FILL`] producing zeros.
    /// Expresses flips, crops and padding.
    pub fn gather(&mut self, input: DiffArray, shape: &[usize], index: Vec<usize>) -> Result<DiffArray> {
        if numel(shape) != index.len() {
            return Err(Error::Shape {
                op: "gather",
                left: shape.to_vec(),
                right: vec![index.len()],
            });
        }
        let x = self.value(input);
        let n = x.len();
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            if i == ZERO_FILL {
                out.push(T::zero());
            } else if i < n {
                out.push(x[i]);
            } else {
                return Err(Error::invalid(format!("gather index {i} out of range {n}")));
            }
        }
        let rg = self.rg(&[input.0]);
        Ok(self.push(shape.to_vec(), out, Op::Gather { input: input.0, index }, rg))
    }

    /// Joins arrays of equal rank along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[DiffArray], axis: usize) -> Result<DiffArray> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat of zero arrays"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let s = self.shape(x);
            let agrees =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::Shape {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in inputs.iter().zip(&lens) {
                let block = len * inner;
                out.extend_from_slice(&self.value(x)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = inputs.iter().map(|x| x.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: ids,
                lens,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Content-aware reassembly. `features` is `[c, h, w]`; `weights` is
    /// `[factor² · k², h, w]`, already normalized over each group of `k²`.
    /// Output cell `(Y, X)` combines the `k × k` neighborhood centered at
    /// source cell `(Y / factor, X / factor)` with the weight group of
    /// sub-position `(Y % factor, X % factor)`. Neighbors outside the grid
    /// are clamped to the border.
    pub fn reassemble(
        &mut self,
        features: DiffArray,
        weights: DiffArray,
        k: usize,
        factor: usize,
    ) -> Result<DiffArray> {
        let (c, h, w) = self.dims3(features, "reassemble")?;
        let expect = [factor * factor * k * k, h, w];
        if self.shape(weights) != expect || k.is_multiple_of(2) || factor == 0 {
            return Err(Error::Shape {
                op: "reassemble",
                left: expect.to_vec(),
                right: self.shape(weights).to_vec(),
            });
        }
        let geom = ReassembleGeometry { c, h, w, k, factor };
        let x = self.value(features);
        let wv = self.value(weights);
        let (oh, ow) = (h * factor, w * factor);
        let plane = h * w;
        let oplane = oh * ow;
        let mut out = vec![T::zero(); c * oplane];
        let half = (k / 2) as isize;
        let mut nbr = vec![0usize; k * k];
        for y in 0..h {
            for xx in 0..w {
                for (j, slot) in nbr.iter_mut().enumerate() {
                    let ny = (y as isize + (j / k) as isize - half).clamp(0, h as isize - 1) as usize;
                    let nx = (xx as isize + (j % k) as isize - half).clamp(0, w as isize - 1) as usize;
                    *slot = ny * w + nx;
                }
                for sy in 0..factor {
                    for sx in 0..factor {
                        let group = (sy * factor + sx) * k * k;
                        let o = (y * factor + sy) * ow + xx * factor + sx;
                        for (j, &src) in nbr.iter().enumerate() {
                            let wt = wv[(group + j) * plane + y * w + xx];
                            for ch in 0..c {
                                out[ch * oplane + o] += wt * x[ch * plane + src];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[features.0, weights.0]);
        Ok(self.push(
            vec![c, oh, ow],
            out,
            Op::Reassemble {
                features: features.0,
                weights: weights.0,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel affine normalization of a `[c, h, w]` array.
    ///
    /// With `running = None` the batch mean and biased variance are used and
    /// returned so the caller can update its running estimates; otherwise the
    /// given statistics are treated as constants.
    pub fn batch_norm(
        &mut self,
        input: DiffArray,
        gamma: DiffArray,
        beta: DiffArray,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(DiffArray, Option<BatchStats<T>>)> {
        let (c, h, w) = self.dims3(input, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape {
                op: "batch_norm",
                left: vec![c],
                right: self.shape(gamma).to_vec(),
            });
        }
        let plane = h * w;
        let x = self.value(input);
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::Shape {
                        op: "batch_norm running stats",
                        left: vec![c],
                        right: vec![m.len(), v.len()],
                    });
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let n = T::of(plane as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let xc = &x[ch * plane..(ch + 1) * plane];
                    let m = xc.iter().copied().sum::<T>() / n;
                    let v = xc.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var, true)
            }
        };
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); c * plane];
        let mut out = vec![T::zero(); c * plane];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let is = T::one() / (var[ch] + eps).sqrt();
            inv_std[ch] = is;
            for i in ch * plane..(ch + 1) * plane {
                let xh = (x[i] - mean[ch]) * is;
                xhat[i] = xh;
                out[i] = g[ch] * xh + b[ch];
            }
        }
        let rg = self.rg(&[input.0, gamma.0, beta.0]);
        let node = self.push(
            vec![c, h, w],
            out,
            Op::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        let stats = batch_stats.then_some(BatchStats { mean, var });
        Ok((node, stats))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: DiffArray) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        // Fresh intermediate gradients; leaves keep what they accumulated.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = if matches!(self.nodes[loss.0].op, Op::Leaf) {
            let mut g = self.nodes[loss.0].grad.take().unwrap_or_else(|| vec![T::zero()]);
            g[0] += T::one();
            self.nodes[loss.0].grad = Some(g);
            return Ok(());
        } else {
            vec![T::one()]
        };
        self.nodes[loss.0].grad = Some(seed);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contribs = self.local_backward(id, &g);
            self.nodes[id].grad = Some(g);
            for (target, delta) in contribs {
                let t = &mut self.nodes[target];
                if !t.requires_grad {
                    continue;
                }
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    None => t.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Resets every gradient, leaves included.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn local_backward(&self, id: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.as_slice();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut dw = self.wants(*kernel).then(|| vec![T::zero(); val(*kernel).len()]);
                let mut dx = self.wants(*input).then(|| vec![T::zero(); val(*input).len()]);
                geom.backward(val(*input), val(*kernel), g, dw.as_deref_mut(), dx.as_deref_mut());
                if let Some(dw) = dw {
                    out.push((*kernel, dw));
                }
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let plane = geom.out_h() * geom.out_w();
                    let db = g.chunks_exact(plane).map(|p| p.iter().copied().sum()).collect();
                    out.push((b, db));
                }
            }
            Op::Depthwise { input, kernel, geom } => {
                let DepthwiseGeometry {
                    c,
                    h,
                    w,
                    k,
                    stride,
                    padding,
                    out_h,
                    out_w,
                    shared,
                } = *geom;
                let x = val(*input);
                let kv = val(*kernel);
                let mut dx = vec![T::zero(); x.len()];
                let mut dk = vec![T::zero(); kv.len()];
                for ch in 0..c {
                    let koff = if shared { 0 } else { ch * k * k };
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let go = g[(ch * out_h + oy) * out_w + ox];
                            if go == T::zero() {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = (ch * h + iy as usize) * w + ix as usize;
                                    dk[koff + ky * k + kx] += go * x[xi];
                                    dx[xi] += go * kv[koff + ky * k + kx];
                                }
                            }
                        }
                    }
                }
                out.push((*input, dx));
                out.push((*kernel, dk));
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..*len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..*len {
                            let at = base + j * inner;
                            dx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Unary { input, f } => {
                let x = val(*input);
                let y = &node.value;
                let dx = match f {
                    Unary::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                        .collect(),
                    Unary::Sigmoid => y.iter().zip(g).map(|(&s, &gi)| gi * s * (T::one() - s)).collect(),
                    Unary::Log => x.iter().zip(g).map(|(&v, &gi)| gi / v).collect(),
                    Unary::Square => x.iter().zip(g).map(|(&v, &gi)| gi * (v + v)).collect(),
                    Unary::Exp => y.iter().zip(g).map(|(&e, &gi)| gi * e).collect(),
                };
                out.push((*input, dx));
            }
            Op::Clamp { input, lo, hi } => {
                let dx = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v < *lo || v > *hi { T::zero() } else { gi })
                    .collect();
                out.push((*input, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &y)| gi / y).collect()));
                }
                if self.wants(*b) {
                    let db = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                        .collect();
                    out.push((*b, db));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|&v| v * *factor).collect()));
            }
            Op::Shift { input } | Op::Reshape { input } => {
                out.push((*input, g.to_vec()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; val(*input).len()]));
            }
            Op::SumChannels { input, channels } => {
                let mut dx = Vec::with_capacity(g.len() * channels);
                for _ in 0..*channels {
                    dx.extend_from_slice(g);
                }
                out.push((*input, dx));
            }
            Op::Gather { input, index } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&i, &gi) in index.iter().zip(g) {
                    if i != ZERO_FILL {
                        dx[i] += gi;
                    }
                }
                out.push((*input, dx));
            }
            Op::Concat {
                inputs,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut start = 0;
                for (&x, &len) in inputs.iter().zip(lens) {
                    let block = len * inner;
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(outer * block);
                        for o in 0..*outer {
                            let at = o * total * inner + start;
                            dx.extend_from_slice(&g[at..at + block]);
                        }
                        out.push((x, dx));
                    }
                    start += block;
                }
            }
            Op::Reassemble {
                features,
                weights,
                geom,
            } => {
                let ReassembleGeometry { c, h, w, k, factor } = *geom;
                let x = val(*features);
                let wv = val(*weights);
                let (oh, ow) = (h * factor, w * factor);
                let plane = h * w;
                let oplane = oh * ow;
                let half = (k / 2) as isize;
                let mut dx = vec![T::zero(); x.len()];
                let mut dw = vec![T::zero(); wv.len()];
                let mut nbr = vec![0usize; k * k];
                for y in 0..h {
                    for xx in 0..w {
                        for (j, slot) in nbr.iter_mut().enumerate() {
                            let ny = (y as isize + (j / k) as isize - half).clamp(0, h as isize - 1) as usize;
                            let nx = (xx as isize + (j % k) as isize - half).clamp(0, w as isize - 1) as usize;
                            *slot = ny * w + nx;
                        }
                        for sy in 0..factor {
                            for sx in 0..factor {
                                let group = (sy * factor + sx) * k * k;
                                let o = (y * factor + sy) * ow + xx * factor + sx;
                                for (j, &src) in nbr.iter().enumerate() {
                                    let wi = (group + j) * plane + y * w + xx;
                                    let wt = wv[wi];
                                    let mut acc = T::zero();
                                    for ch in 0..c {
                                        let go = g[ch * oplane + o];
                                        acc += go * x[ch * plane + src];
                                        dx[ch * plane + src] += go * wt;
                                    }
                                    dw[wi] += acc;
                                }
                            }
                        }
                    }
                }
                out.push((*features, dx));
                out.push((*weights, dw));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let plane = g.len() / c;
                let gv = val(*gamma);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let n = T::of(plane as f64);
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    let sg: T = g[r.clone()].iter().copied().sum();
                    let sgx: T = g[r.clone()].iter().zip(&xhat[r.clone()]).map(|(&a, &b)| a * b).sum();
                    dgamma[ch] = sgx;
                    dbeta[ch] = sg;
                    let scale = gv[ch] * inv_std[ch];
                    for i in r {
                        dx[i] = if *batch_stats {
                            scale * (g[i] - sg / n - xhat[i] * sgx / n)
                        } else {
                            scale * g[i]
                        };
                    }
                }
                out.push((*input, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
