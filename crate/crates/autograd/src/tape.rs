use crate::element::Element;
use crate::error::{shape_err, AutogradError, Result};
use crate::kernels::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use crate::kernels::elementwise::{log_sum_exp, relu, relu_grad, sigmoid, softmax_rows};
use crate::kernels::pool::{self, PoolGeometry, PoolSpec};
use crate::kernels::resample::Trilinear;
use crate::tensor::{dims2, dims5, Tensor};

/// Handle to a value recorded on a [`Tape`].
///
/// A handle is only valid for the tape generation it was created in; using
/// it after [`Tape::reset`] yields [`AutogradError::StaleVar`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub training: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            training: true,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    MaxPool {
        x: usize,
        geom: PoolGeometry,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        geom: PoolGeometry,
    },
    GlobalAvgPool {
        x: usize,
        plane: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        /// Contiguous block length each input contributes per outer index.
        blocks: Vec<usize>,
    },
    Upsample {
        x: usize,
        interp: Trilinear<T>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    /// `[N, 1, S...]` gate times `[N, C, S...]` features.
    GateChannels {
        gate: usize,
        x: usize,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        /// Row-scaled `softmax - onehot`, ready to multiply by the upstream gradient.
        dlogits: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Softmax(x) | Op::Sum(x) => vec![*x],
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::GlobalAvgPool { x, .. }
            | Op::Upsample { x, .. } => vec![*x],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::GateChannels { gate, x } => vec![*gate, *x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order and replays them backwards.
pub struct Tape<T> {
    generation: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            generation: 0,
            nodes: Vec::new(),
        }
    }

    /// Drops every recorded node and invalidates outstanding handles.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn id(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(AutogradError::StaleVar);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.id(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the value was reached.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor<T>>> {
        let node = &self.nodes[self.id(v)?];
        Ok(node
            .grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape")))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.id(x)?, self.id(w)?);
        let bi = b.map(|b| self.id(b)).transpose()?;
        let geom = ConvGeometry::new(self.nodes[xi].value.shape(), self.nodes[wi].value.shape(), stride, pad)?;
        if let Some(bi) = bi {
            if self.nodes[bi].value.len() != geom.out_channels {
                return Err(shape_err("conv3d", "bias length differs from output channels"));
            }
        }
        let bias: &[T] = bi.map(|bi| self.nodes[bi].value.data()).unwrap_or(&[]);
        let out = conv3d_forward(&geom, self.nodes[xi].value.data(), self.nodes[wi].value.data(), bias);
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(value, Op::Conv3d { x: xi, w: wi, b: bi, geom }))
    }

    /// Per-channel normalization over `(N, D, H, W)`.
    ///
    /// Training mode normalizes by the biased batch variance and folds the
    /// batch mean and unbiased variance into the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        const OP: &str = "batchnorm3d";
        let (xi, gi, bi) = (self.id(x)?, self.id(gamma)?, self.id(beta)?);
        let [n, c, d, h, w] = dims5(OP, self.nodes[xi].value.shape())?;
        for (name, len) in [
            ("gamma", self.nodes[gi].value.len()),
            ("beta", self.nodes[bi].value.len()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(shape_err(OP, format!("{name} has {len} entries for {c} channels")));
            }
        }
        let plane = d * h * w;
        let m = n * plane;
        if cfg.training && m < 2 {
            return Err(AutogradError::BatchTooSmall(m));
        }
        let xd = self.nodes[xi].value.data();
        let (gd, bd) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        let channel = |ci: usize| (0..n).flat_map(move |ni| (ni * c + ci) * plane..(ni * c + ci + 1) * plane);

        let mut inv_std = vec![0.0f64; c];
        let mut mean = vec![0.0f64; c];
        for ci in 0..c {
            if cfg.training {
                let mu = channel(ci).map(|i| xd[i].as_f64()).sum::<f64>() / m as f64;
                let var = channel(ci)
                    .map(|i| (xd[i].as_f64() - mu).powi(2))
                    .sum::<f64>()
                    / m as f64;
                mean[ci] = mu;
                inv_std[ci] = 1.0 / (var + cfg.eps).sqrt();
                let keep = 1.0 - cfg.momentum;
                let rm = running_mean.data()[ci].as_f64();
                let rv = running_var.data()[ci].as_f64();
                running_mean.data_mut()[ci] = T::from_f64_lossy(keep * rm + cfg.momentum * mu);
                running_var.data_mut()[ci] =
                    T::from_f64_lossy(keep * rv + cfg.momentum * var * m as f64 / (m - 1) as f64);
            } else {
                mean[ci] = running_mean.data()[ci].as_f64();
                inv_std[ci] = 1.0 / (running_var.data()[ci].as_f64() + cfg.eps).sqrt();
            }
        }

        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ci = (i / plane) % c;
            let x = (xd[i].as_f64() - mean[ci]) * inv_std[ci];
            *xh = T::from_f64_lossy(x);
            *o = T::from_f64_lossy(gd[ci].as_f64() * x + bd[ci].as_f64());
        }
        let value = Tensor::new([n, c, d, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                training: cfg.training,
            },
        ))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let xi = self.id(x)?;
        let src = &self.nodes[xi].value;
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(value, op(xi)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, relu, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, sigmoid, Op::Sigmoid)
    }

    /// Row-wise softmax of a `[N, K]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.id(x)?;
        let [n, k] = dims2("softmax", self.nodes[xi].value.shape())?;
        let value = Tensor::new([n, k], softmax_rows(self.nodes[xi].value.data(), k))?;
        Ok(self.push(value, Op::Softmax(xi)))
    }

    pub fn maxpool3d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let xi = self.id(x)?;
        let geom = PoolGeometry::new("maxpool3d", self.nodes[xi].value.shape(), spec)?;
        let (out, argmax) = pool::maxpool3d_forward(&geom, self.nodes[xi].value.data());
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(value, Op::MaxPool { x: xi, geom, argmax }))
    }

    pub fn avgpool3d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let xi = self.id(x)?;
        let geom = PoolGeometry::new("avgpool3d", self.nodes[xi].value.shape(), spec)?;
        let out = pool::avgpool3d_forward(&geom, self.nodes[xi].value.data());
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(value, Op::AvgPool { x: xi, geom }))
    }

    /// `[N, C, D, H, W] -> [N, C]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let xi = self.id(x)?;
        let [n, c, d, h, w] = dims5("global_avgpool", self.nodes[xi].value.shape())?;
        let plane = d * h * w;
        let out = pool::global_avgpool_forward(plane, self.nodes[xi].value.data());
        let value = Tensor::new([n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x: xi, plane }))
    }

    /// `x: [N, F]`, `w: [F, K]`, `b: [K]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "dense";
        let (xi, wi, bi) = (self.id(x)?, self.id(w)?, self.id(b)?);
        let [n, f] = dims2(OP, self.nodes[xi].value.shape())?;
        let [wf, k] = dims2(OP, self.nodes[wi].value.shape())?;
        if wf != f || self.nodes[bi].value.len() != k {
            return Err(shape_err(
                OP,
                format!(
                    "x [{n}, {f}], w [{wf}, {k}], b [{}]",
                    self.nodes[bi].value.len()
                ),
            ));
        }
        let bd = self.nodes[bi].value.data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bd.iter().copied()).collect();
        T::gemm(
            n,
            f,
            k,
            self.nodes[xi].value.data(),
            (f as isize, 1),
            self.nodes[wi].value.data(),
            (k as isize, 1),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([n, k], out)?;
        Ok(self.push(value, Op::Dense { x: xi, w: wi, b: bi }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let ids = xs.iter().map(|&v| self.id(v)).collect::<Result<Vec<_>>>()?;
        let first = ids
            .first()
            .map(|&i| self.nodes[i].value.shape().to_vec())
            .ok_or_else(|| shape_err(OP, "no inputs"))?;
        if axis >= first.len() {
            return Err(shape_err(OP, format!("axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let agrees = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !agrees {
                return Err(shape_err(OP, format!("{s:?} vs {first:?} off axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let blocks: Vec<usize> = ids
            .iter()
            .map(|&i| self.nodes[i].value.shape()[axis] * inner)
            .collect();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (&i, &blk) in ids.iter().zip(&blocks) {
                out.extend_from_slice(&self.nodes[i].value.data()[o * blk..(o + 1) * blk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: ids, outer, blocks }))
    }

    /// Align-corners trilinear resize of `[N, C, d, h, w]` to `[N, C, D, H, W]`, `D >= d` etc.
    pub fn trilinear_upsample(&mut self, x: Var, to: [usize; 3]) -> Result<Var> {
        const OP: &str = "trilinear_upsample";
        let xi = self.id(x)?;
        let [n, c, d, h, w] = dims5(OP, self.nodes[xi].value.shape())?;
        if to.iter().zip([d, h, w]).any(|(&t, s)| t < s) {
            return Err(shape_err(OP, format!("target {to:?} smaller than source {:?}", [d, h, w])));
        }
        let interp = Trilinear::new([d, h, w], to);
        let in_plane = d * h * w;
        let out_plane: usize = to.iter().product();
        let mut out = vec![T::zero(); n * c * out_plane];
        for (src, dst) in self.nodes[xi]
            .value
            .data()
            .chunks(in_plane)
            .zip(out.chunks_mut(out_plane))
        {
            interp.forward_plane(src, dst);
        }
        let value = Tensor::new([n, c, to[0], to[1], to[2]], out)?;
        Ok(self.push(value, Op::Upsample { x: xi, interp }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.id(a)?, self.id(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Add(ai, bi)))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.id(a)?, self.id(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Mul(ai, bi)))
    }

    /// Multiplies every channel of `x: [N, C, S...]` by `gate: [N, 1, S...]`.
    pub fn gate_channels(&mut self, gate: Var, x: Var) -> Result<Var> {
        const OP: &str = "gate_channels";
        let (gi, xi) = (self.id(gate)?, self.id(x)?);
        let gs = dims5(OP, self.nodes[gi].value.shape())?;
        let xs = dims5(OP, self.nodes[xi].value.shape())?;
        if gs[1] != 1 || gs[0] != xs[0] || gs[2..] != xs[2..] {
            return Err(shape_err(OP, format!("gate {gs:?} vs features {xs:?}")));
        }
        let plane: usize = xs[2..].iter().product();
        let (gd, xd) = (self.nodes[gi].value.data(), self.nodes[xi].value.data());
        let data = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let n = i / (xs[1] * plane);
                gd[n * plane + i % plane] * v
            })
            .collect();
        let value = Tensor::new(xs, data)?;
        Ok(self.push(value, Op::GateChannels { gate: gi, x: xi }))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.id(x)?;
        let s = self.nodes[xi].value.data().iter().fold(T::zero(), |a, &v| a + v);
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi)))
    }

    /// Weighted mean of `-log softmax(logits)[label]` over the batch.
    ///
    /// With class weights, row `i` is weighted by `weights[labels[i]]` and the
    /// total is divided by the sum of those weights.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: Option<&[T]>) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let li = self.id(logits)?;
        let [n, k] = dims2(OP, self.nodes[li].value.shape())?;
        if labels.len() != n {
            return Err(shape_err(OP, format!("{} labels for {n} rows", labels.len())));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(AutogradError::InvalidLabel { row, label });
        }
        if let Some(w) = class_weights {
            if w.len() != k || w.iter().any(|v| !(*v >= T::zero())) {
                return Err(AutogradError::InvalidArgument {
                    op: OP,
                    detail: format!("need {k} non-negative class weights"),
                });
            }
        }
        let weight = |l: usize| class_weights.map_or(T::one(), |w| w[l]);
        let total_w = labels.iter().fold(T::zero(), |a, &l| a + weight(l));
        if !(total_w > T::zero()) {
            return Err(AutogradError::InvalidArgument {
                op: OP,
                detail: "class weights sum to zero over the batch".into(),
            });
        }
        let data = self.nodes[li].value.data();
        let mut loss = T::zero();
        let mut dlogits = softmax_rows(data, k);
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * k..(r + 1) * k];
            let wr = weight(label) / total_w;
            loss = loss + wr * (log_sum_exp(row) - row[label]);
            let drow = &mut dlogits[r * k..(r + 1) * k];
            drow[label] = drow[label] - T::one();
            drow.iter_mut().for_each(|g| *g = *g * wr);
        }
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits: li, dlogits }))
    }

    /// Reverse pass from a scalar. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.id(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(AutogradError::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[li].grad = Some(vec![T::one()]);
        for id in (0..=li).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(id, &g);
            self.nodes[id].grad = Some(g);
            for (input, gi) in contributions {
                let node = &mut self.nodes[input];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn input_grads(&self, id: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, geom } => {
                let (dx, dw, db) = conv3d_backward(geom, val(*x), val(*w), g);
                let mut v = vec![(*x, dx), (*w, dw)];
                v.extend(b.map(|b| (b, db)));
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                // Reductions run in f64 so single precision keeps the
                // cancellations in the training-mode formula intact.
                let m = (n * plane) as f64;
                let gd: Vec<f64> = val(*gamma).iter().map(|v| v.as_f64()).collect();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut sum_dxhat = vec![0.0f64; c];
                let mut sum_dxhat_xhat = vec![0.0f64; c];
                for (i, &gi) in g.iter().enumerate() {
                    let ci = (i / plane) % c;
                    let (gi, xh) = (gi.as_f64(), xhat[i].as_f64());
                    dgamma[ci] += gi * xh;
                    dbeta[ci] += gi;
                    let dxh = gi * gd[ci];
                    sum_dxhat[ci] += dxh;
                    sum_dxhat_xhat[ci] += dxh * xh;
                }
                let lossy = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
                let mut out = vec![(*gamma, lossy(dgamma)), (*beta, lossy(dbeta))];
                if self.wants(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let ci = (i / plane) % c;
                            let dxh = gi.as_f64() * gd[ci];
                            let inv = inv_std[ci];
                            T::from_f64_lossy(if *training {
                                inv / m * (m * dxh - sum_dxhat[ci] - xhat[i].as_f64() * sum_dxhat_xhat[ci])
                            } else {
                                dxh * inv
                            })
                        })
                        .collect();
                    out.push((*x, dx));
                }
                out
            }
            Op::Relu(x) => vec![(
                *x,
                val(*x).iter().zip(g).map(|(&v, &gi)| relu_grad(v) * gi).collect(),
            )],
            Op::Sigmoid(x) => vec![(
                *x,
                node.value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gi)| s * (T::one() - s) * gi)
                    .collect(),
            )],
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for (p, gr) in node.value.data().chunks(k).zip(g.chunks(k)) {
                    let dot = p.iter().zip(gr).fold(T::zero(), |a, (&pi, &gi)| a + pi * gi);
                    dx.extend(p.iter().zip(gr).map(|(&pi, &gi)| pi * (gi - dot)));
                }
                vec![(*x, dx)]
            }
            Op::MaxPool { x, geom, argmax } => vec![(*x, pool::maxpool3d_backward(geom, argmax, g))],
            Op::AvgPool { x, geom } => vec![(*x, pool::avgpool3d_backward(geom, g))],
            Op::GlobalAvgPool { x, plane } => vec![(*x, pool::global_avgpool_backward(*plane, g))],
            Op::Dense { x, w, b } => {
                let [n, f] = [self.nodes[*x].value.shape()[0], self.nodes[*x].value.shape()[1]];
                let k = node.value.shape()[1];
                let mut out = Vec::with_capacity(3);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, k, f, g, (k as isize, 1), val(*w), (1, k as isize), T::zero(), &mut dx);
                    out.push((*x, dx));
                }
                let mut dw = vec![T::zero(); f * k];
                T::gemm(f, n, k, val(*x), (1, f as isize), g, (k as isize, 1), T::zero(), &mut dw);
                out.push((*w, dw));
                let mut db = vec![T::zero(); k];
                for row in g.chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                out.push((*b, db));
                out
            }
            Op::Concat { inputs, outer, blocks } => {
                let total: usize = blocks.iter().sum();
                inputs
                    .iter()
                    .enumerate()
                    .map(|(j, &input)| {
                        let offset: usize = blocks[..j].iter().sum();
                        let blk = blocks[j];
                        let gi = (0..*outer)
                            .flat_map(|o| g[o * total + offset..o * total + offset + blk].iter().copied())
                            .collect();
                        (input, gi)
                    })
                    .collect()
            }
            Op::Upsample { x, interp } => {
                let in_plane: usize = interp.input.iter().product();
                let out_plane: usize = interp.output.iter().product();
                let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                for (dst, src) in dx.chunks_mut(in_plane).zip(g.chunks(out_plane)) {
                    interp.backward_plane(src, dst);
                }
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bd).map(|(&gi, &v)| gi * v).collect()),
                    (*b, g.iter().zip(ad).map(|(&gi, &v)| gi * v).collect()),
                ]
            }
            Op::GateChannels { gate, x } => {
                let xs = self.nodes[*x].value.shape();
                let (c, plane) = (xs[1], xs[2..].iter().product::<usize>());
                let (gd, xd) = (val(*gate), val(*x));
                let mut dgate = vec![T::zero(); gd.len()];
                let mut dx = vec![T::zero(); xd.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let gidx = (i / (c * plane)) * plane + i % plane;
                    dx[i] = gd[gidx] * gi;
                    dgate[gidx] = dgate[gidx] + xd[i] * gi;
                }
                vec![(*gate, dgate), (*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[*x].value.len()])],
            Op::CrossEntropy { logits, dlogits } => {
                vec![(*logits, dlogits.iter().map(|&d| d * g[0]).collect())]
            }
        }
    }
}
