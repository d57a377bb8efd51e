//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value,
//! its parents and a closure mapping the output gradient to parent gradients.
//! Node ids are issued in creation order, so a reverse sweep over ids is a
//! valid topological order for the backward pass.
//!
//! Shape errors inside graph operations are programming errors and panic,
//! the same way `ndarray` arithmetic does. Public model entry points validate
//! user-supplied shapes before building a graph.

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

/// Iteration cap for the SVD behind [`Graph::nuclear_norm`].
pub const SVD_MAX_ITER: usize = 10_000;

/// Dense f64 tensor with dynamic rank.
pub type Tensor = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires grad.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Convolution geometry for [`Graph::conv2d`], as (height, width) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: (1, 1), dilation: (1, 1), padding: (0, 0) }
    }
}

impl Conv2dSpec {
    /// Output extent along one axis: `floor((n + 2p - d(k-1) - 1)/s) + 1`.
    pub fn output_len(n: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        let padded = n + 2 * padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn output_shape(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        Some((
            Self::output_len(h, kh, self.stride.0, self.dilation.0, self.padding.0)?,
            Self::output_len(w, kw, self.stride.1, self.dilation.1, self.padding.1)?,
        ))
    }
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to_shape(mut g: Tensor, shape: &[usize]) -> Tensor {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn to_matrix(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap_or_else(|_| panic!("expected a 2-D tensor, got shape {:?}", t.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a 0-d (or single element) node.
    pub fn item(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "item() on a tensor of shape {:?}", v.shape());
        v.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// `backward(grad_out, parent_values, out_value)` returns one optional
    /// gradient per parent, each shaped like that parent.
    pub fn custom<F>(&mut self, parents: &[NodeId], value: Tensor, backward: F) -> NodeId
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a node's value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Gradient of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = bw(&g, &parent_vals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape(), "gradient shape mismatch");
                match grads[p.0].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p.0] = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ----- elementwise binary (numpy broadcasting) -----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.custom(&[a, b], v, |g, p, _| {
            vec![Some(reduce_to_shape(g.clone(), p[0].shape())), Some(reduce_to_shape(g.clone(), p[1].shape()))]
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.custom(&[a, b], v, |g, p, _| {
            vec![Some(reduce_to_shape(g.clone(), p[0].shape())), Some(reduce_to_shape(-g, p[1].shape()))]
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.custom(&[a, b], v, |g, p, _| {
            vec![
                Some(reduce_to_shape(g * p[1], p[0].shape())),
                Some(reduce_to_shape(g * p[0], p[1].shape())),
            ]
        })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) / self.value(b);
        self.custom(&[a, b], v, |g, p, out| {
            let ga = g / p[1];
            let gb = -(&ga * out);
            vec![Some(reduce_to_shape(ga, p[0].shape())), Some(reduce_to_shape(gb, p[1].shape()))]
        })
    }

    // ----- scalar affine -----

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        self.custom(&[x], v, move |g, _, _| vec![Some(g * c)])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) + c;
        self.custom(&[x], v, |g, _, _| vec![Some(g.clone())])
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    // ----- elementwise unary -----

    /// Applies `f` elementwise; `df(x, y)` is the local derivative.
    pub fn unary<F, D>(&mut self, x: NodeId, f: F, df: D) -> NodeId
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let v = self.value(x).mapv(f);
        self.custom(&[x], v, move |g, p, out| {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(p[0]).and(out).for_each(|gi, &xi, &yi| *gi *= df(xi, yi));
            vec![Some(gx)]
        })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(x, move |v| if v > 0.0 { v } else { slope * v }, move |v, _| if v > 0.0 { 1.0 } else { slope })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, |v, _| 1.0 / v)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, |v, _| 2.0 * v)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, |v, _| v.signum() * (v != 0.0) as u8 as f64)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sin, |v, _| v.cos())
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::cos, |v, _| -v.sin())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, move |v| v.clamp(lo, hi), move |v, _| if v >= lo && v <= hi { 1.0 } else { 0.0 })
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = scalar(self.value(x).sum());
        self.custom(&[x], v, |g, p, _| vec![Some(ArrayD::from_elem(p[0].raw_dim(), g.sum()))])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = self.value(x).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.custom(&[x], v, |g, p, _| {
            let b = g.broadcast(p[0].raw_dim()).expect("broadcast in sum_axis backward").to_owned();
            vec![Some(b)]
        })
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let n = self.shape(x)[axis].max(1) as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    // ----- shape manipulation -----

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(x), shape));
        self.custom(&[x], v, |g, p, _| {
            let gx = g.as_standard_layout().into_owned().into_shape_with_order(p[0].raw_dim()).expect("reshape backward");
            vec![Some(gx)]
        })
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self.value(x).clone().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.custom(&[x], v, move |g, _, _| {
            vec![Some(g.clone().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]
        })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis]).collect();
        self.custom(xs, v, move |g, _, _| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    let part = g.slice_axis(Axis(axis), Slice::from(start..start + n)).to_owned();
                    start += n;
                    Some(part)
                })
                .collect()
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        self.custom(&[x], v, move |g, p, _| {
            let mut gx = ArrayD::zeros(p[0].raw_dim());
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
            vec![Some(gx)]
        })
    }

    // ----- linear algebra -----

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = to_matrix(self.value(a)).dot(&to_matrix(self.value(b))).into_dyn();
        self.custom(&[a, b], v, |g, p, _| {
            let g2 = to_matrix(g);
            let ga = g2.dot(&to_matrix(p[1]).t()).into_dyn();
            let gb = to_matrix(p[0]).t().dot(&g2).into_dyn();
            vec![Some(ga), Some(gb)]
        })
    }

    /// Applies a dense layer to the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let shape = self.shape(x).to_vec();
        let inner = *shape.last().expect("linear on a 0-d tensor");
        let rows = shape.iter().product::<usize>() / inner.max(1);
        let flat = self.reshape(x, &[rows, inner]);
        let mut y = self.matmul(flat, w);
        if let Some(b) = b {
            y = self.add(y, b);
        }
        let out = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out;
        self.reshape(y, &out_shape)
    }

    /// Nuclear norm (sum of singular values) of a 2-D tensor.
    ///
    /// The gradient `U Vᵀ` is exact where the matrix has full rank and
    /// distinct singular values.
    pub fn nuclear_norm(&mut self, x: NodeId) -> NodeId {
        let m = to_matrix(self.value(x));
        let (r, c) = m.dim();
        let mat = nalgebra::DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
        // Non-finite or non-convergent input yields NaN so callers see a bad loss instead of a hang.
        let svd = m.iter().all(|v| v.is_finite()).then(|| mat.try_svd(true, true, f64::EPSILON, SVD_MAX_ITER)).flatten();
        let Some(svd) = svd else {
            return self.custom(&[x], scalar(f64::NAN), move |_, _, _| vec![None]);
        };
        let total: f64 = svd.singular_values.iter().sum();
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let uv = &u * &vt;
        let grad = ArrayD::from_shape_fn(IxDyn(&[r, c]), |ix| uv[(ix[0], ix[1])]);
        self.custom(&[x], scalar(total), move |g, _, _| vec![Some(&grad * g.sum())])
    }

    // ----- convolution -----

    /// 2-D cross-correlation of `x[B, Ci, H, W]` with `w[Co, Ci, KH, KW]`,
    /// zero padding, plus an optional bias `b[Co]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: Conv2dSpec) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, KH, KW], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        let geo = ConvGeometry::new(&xs, &ws, spec)
            .unwrap_or_else(|| panic!("conv2d input {xs:?} too small for kernel {ws:?} with {spec:?}"));
        let cols = geo.im2col(self.value(x));
        let wmat = self.value(w).view().into_shape_with_order((ws[0], geo.patch())).expect("weight layout").to_owned();
        let out2 = wmat.dot(&cols);
        let mut out = geo.cols_to_output(&out2);
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), &[ws[0]], "conv2d bias shape");
            for (co, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
                plane += bias[[co]];
            }
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.custom(&parents, out, move |g, p, _| {
            let g2 = geo.output_to_cols(g);
            let cols = geo.im2col(p[0]);
            let wmat = p[1].view().into_shape_with_order((geo.co, geo.patch())).expect("weight layout");
            let gw = g2.dot(&cols.t()).into_shape_with_order(p[1].raw_dim()).expect("gw layout");
            let gcols = wmat.t().dot(&g2);
            let gx = geo.col2im(&gcols);
            let mut res = vec![Some(gx), Some(gw.into_dyn())];
            if has_bias {
                res.push(Some(g2.sum_axis(Axis(1)).into_dyn()));
            }
            res
        })
    }

    // ----- framing -----

    /// Splits `x[B, L]` into overlapping frames `[B, n, size]` with the given hop.
    pub fn frame(&mut self, x: NodeId, size: usize, hop: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "frame() expects [B, L]");
        let len = shape[1];
        assert!(len >= size, "signal of {len} samples shorter than frame {size}");
        let n = (len - size) / hop + 1;
        let v = frame_values(self.value(x), size, hop, n);
        self.custom(&[x], v, move |g, _, _| vec![Some(overlap_add_values(g, hop, len))])
    }

    /// Overlap-adds frames `[B, n, size]` into `[B, len]`; adjoint of [`Graph::frame`].
    pub fn overlap_add(&mut self, x: NodeId, hop: usize, len: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "overlap_add() expects [B, n, size]");
        let (n, size) = (shape[1], shape[2]);
        assert!((n - 1) * hop + size <= len, "overlap_add output too short");
        let v = overlap_add_values(self.value(x), hop, len);
        self.custom(&[x], v, move |g, _, _| vec![Some(frame_values(g, size, hop, n))])
    }
}

fn frame_values(x: &Tensor, size: usize, hop: usize, n: usize) -> Tensor {
    let b = x.shape()[0];
    let mut out = ArrayD::zeros(IxDyn(&[b, n, size]));
    for bi in 0..b {
        for f in 0..n {
            for k in 0..size {
                out[[bi, f, k]] = x[[bi, f * hop + k]];
            }
        }
    }
    out
}

fn overlap_add_values(frames: &Tensor, hop: usize, len: usize) -> Tensor {
    let (b, n, size) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[b, len]));
    for bi in 0..b {
        for f in 0..n {
            for k in 0..size {
                out[[bi, f * hop + k]] += frames[[bi, f, k]];
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], spec: Conv2dSpec) -> Option<Self> {
        let (ho, wo) = spec.output_shape(xs[2], xs[3], ws[2], ws[3])?;
        Some(Self { b: xs[0], ci: xs[1], h: xs[2], w: xs[3], co: ws[0], kh: ws[2], kw: ws[3], ho, wo, spec })
    }

    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Input coordinate for output (oy, ox) and kernel tap (ky, kx), if inside the unpadded input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.spec.stride.0 + ky * self.spec.dilation.0) as isize - self.spec.padding.0 as isize;
        let ix = (ox * self.spec.stride.1 + kx * self.spec.dilation.1) as isize - self.spec.padding.1 as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }

    /// `[Ci*KH*KW, B*Ho*Wo]` patch matrix.
    fn im2col(&self, x: &Tensor) -> ndarray::Array2<f64> {
        let x = x.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| x.iter().copied().collect());
        let spatial = self.ho * self.wo;
        let mut cols = ndarray::Array2::zeros((self.patch(), self.b * spatial));
        let cols_s = cols.as_slice_mut().expect("contiguous");
        let ncols = self.b * spatial;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let row_s = &mut cols_s[row * ncols..(row + 1) * ncols];
                    for bi in 0..self.b {
                        let xoff = (bi * self.ci + c) * self.h * self.w;
                        for oy in 0..self.ho {
                            for ox in 0..self.wo {
                                if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                    row_s[bi * spatial + oy * self.wo + ox] = x[xoff + iy * self.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &ndarray::Array2<f64>) -> Tensor {
        let spatial = self.ho * self.wo;
        let mut gx = vec![0.0; self.b * self.ci * self.h * self.w];
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = cols.row((c * self.kh + ky) * self.kw + kx);
                    for bi in 0..self.b {
                        let xoff = (bi * self.ci + c) * self.h * self.w;
                        for oy in 0..self.ho {
                            for ox in 0..self.wo {
                                if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                    gx[xoff + iy * self.w + ix] += row[bi * spatial + oy * self.wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[self.b, self.ci, self.h, self.w]), gx).expect("col2im layout")
    }

    /// `[Co, B*Ho*Wo]` → `[B, Co, Ho, Wo]`.
    fn cols_to_output(&self, m: &ndarray::Array2<f64>) -> Tensor {
        m.view()
            .into_shape_with_order((self.co, self.b, self.ho, self.wo))
            .expect("conv output layout")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_dyn()
    }

    fn output_to_cols(&self, g: &Tensor) -> ndarray::Array2<f64> {
        g.view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv grad rank")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.co, self.b * self.ho * self.wo))
            .expect("conv grad layout")
    }
}
