use super::{ParamGrads, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send>;

enum Op {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv3x3 {
        x: NodeId,
        k: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GatherCells {
        x: NodeId,
        cells: Vec<usize>,
    },
    BlendRows {
        rows: NodeId,
        scene: NodeId,
        lambda: f64,
    },
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    Custom {
        inputs: Vec<NodeId>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Copy, Debug)]
struct Binding {
    store_id: u64,
    generation: u64,
}

/// Running batch-norm statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    /// Folds one training-mode batch into the running averages.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * batch.mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * batch.var_unbiased[c];
        }
        self.initialized = true;
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the node does not influence the output.
    pub fn get(&self, id: NodeId) -> Tensor {
        let shape = &self.shapes[id.0];
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Single-owner record of a forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    binding: Option<Binding>,
    params: Vec<(String, NodeId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            binding: None,
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(TensorError::BadNode(id.0))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Records a trainable parameter. Repeated lookups of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        match self.binding {
            None => {
                self.binding = Some(Binding {
                    store_id: store.id(),
                    generation: store.generation(),
                })
            }
            Some(b) if b.store_id != store.id() => return Err(TensorError::ForeignStore),
            Some(b) if b.generation != store.generation() => {
                return Err(TensorError::StaleTape {
                    recorded: b.generation,
                    current: store.generation(),
                })
            }
            Some(_) => {}
        }
        if let Some((_, id)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// `x W + b` for `x: N×I`, `W: I×O`, `b: O`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (
            &self.node(x)?.value,
            &self.node(w)?.value,
            &self.node(b)?.value,
        );
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(TensorError::Shape {
                op: "affine",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (n, i_dim, o_dim) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
        if bv.shape() != [o_dim] {
            return Err(TensorError::Shape {
                op: "affine bias",
                lhs: wv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = Vec::with_capacity(n * o_dim);
        for r in 0..n {
            out.extend_from_slice(bd);
            let row = &mut out[r * o_dim..(r + 1) * o_dim];
            for i in 0..i_dim {
                let xi = xd[r * i_dim + i];
                if xi == 0.0 {
                    continue;
                }
                for (y, wv) in row.iter_mut().zip(&wd[i * o_dim..(i + 1) * o_dim]) {
                    *y += xi * wv;
                }
            }
        }
        let needs = self.needs(&[x, w, b]);
        let value = Tensor::new(vec![n, o_dim], out)?;
        Ok(self.push(value, Op::Affine { x, w, b }, needs))
    }

    /// Stride-1 3x3 cross-correlation with one cell of zero padding.
    pub fn conv3x3_same(&mut self, x: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, kv, bv) = (
            &self.node(x)?.value,
            &self.node(kernels)?.value,
            &self.node(bias)?.value,
        );
        if xv.rank() != 3
            || kv.rank() != 4
            || kv.shape()[1] != xv.shape()[0]
            || kv.shape()[2] != 3
            || kv.shape()[3] != 3
            || bv.shape() != [kv.shape()[0]]
        {
            return Err(TensorError::Shape {
                op: "conv3x3_same",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let cout = kv.shape()[0];
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let plane = h * w;
        let mut out = vec![0.0; cout * plane];
        for o in 0..cout {
            let y = &mut out[o * plane..(o + 1) * plane];
            y.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..cin {
                let src = &xd[c * plane..(c + 1) * plane];
                for a in 0..3 {
                    for b in 0..3 {
                        let wgt = kd[((o * cin + c) * 3 + a) * 3 + b];
                        if wgt == 0.0 {
                            continue;
                        }
                        shifted_axpy(y, src, wgt, h, w, a, b);
                    }
                }
            }
        }
        let needs = self.needs(&[x, kernels, bias]);
        let value = Tensor::new(vec![cout, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv3x3 {
                x,
                k: kernels,
                b: bias,
            },
            needs,
        ))
    }

    /// Per-channel normalization over the spatial plane of a `C×H×W` map.
    ///
    /// Train mode normalizes with the statistics of `x` and returns them so the
    /// caller can fold them into `stats`; eval mode uses `stats`.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &RunningStats,
        mode: BatchNormMode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let (xv, gv, bv) = (
            &self.node(x)?.value,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
        );
        if xv.rank() != 3 {
            return Err(TensorError::Shape {
                op: "batchnorm2d",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let c_dim = xv.shape()[0];
        let plane = xv.shape()[1] * xv.shape()[2];
        if gv.shape() != [c_dim] || bv.shape() != [c_dim] || stats.mean.len() != c_dim {
            return Err(TensorError::Shape {
                op: "batchnorm2d",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        if mode == BatchNormMode::Eval && !stats.initialized {
            return Err(TensorError::UninitializedStats);
        }
        let xd = xv.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c_dim];
        let mut batch = BatchStats {
            mean: vec![0.0; c_dim],
            var_unbiased: vec![0.0; c_dim],
        };
        for c in 0..c_dim {
            let src = &xd[c * plane..(c + 1) * plane];
            let (mean, var) = match mode {
                BatchNormMode::Train => {
                    let mean = src.iter().sum::<f64>() / plane as f64;
                    let ss: f64 = src.iter().map(|v| (v - mean) * (v - mean)).sum();
                    batch.mean[c] = mean;
                    batch.var_unbiased[c] = if plane > 1 {
                        ss / (plane - 1) as f64
                    } else {
                        ss
                    };
                    (mean, ss / plane as f64)
                }
                BatchNormMode::Eval => (stats.mean[c], stats.var[c]),
            };
            let is = 1.0 / (var + stats.eps).sqrt();
            inv_std[c] = is;
            let (g, b) = (gv.data()[c], bv.data()[c]);
            for p in 0..plane {
                let xh = (src[p] - mean) * is;
                xhat[c * plane + p] = xh;
                out[c * plane + p] = g * xh + b;
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BatchNormMode::Train,
            },
            needs,
        );
        Ok((id, (mode == BatchNormMode::Train).then_some(batch)))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Relu(x), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same("mul", a, b, |p, q| p * q)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(TensorError::Shape {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.node(x)?.value.data().iter().sum();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), needs))
    }

    /// Per-channel maximum over the whole `H×W` plane. Ties go to the first
    /// cell in row-major order.
    pub fn adaptive_max_pool_global(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.rank() != 3 {
            return Err(TensorError::Shape {
                op: "adaptive_max_pool_global",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let c_dim = xv.shape()[0];
        let plane = xv.shape()[1] * xv.shape()[2];
        let mut out = Vec::with_capacity(c_dim);
        let mut argmax = Vec::with_capacity(c_dim);
        for c in 0..c_dim {
            let src = &xv.data()[c * plane..(c + 1) * plane];
            let mut best = 0;
            for (p, &v) in src.iter().enumerate().skip(1) {
                if v > src[best] {
                    best = p;
                }
            }
            out.push(src[best]);
            argmax.push(c * plane + best);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![c_dim], out)?,
            Op::GlobalMaxPool { x, argmax },
            needs,
        ))
    }

    /// Reads the channel vector at each `(row, col)` cell of a `C×H×W` map,
    /// producing an `N×C` matrix.
    pub fn gather_cells(&mut self, x: NodeId, cells: &[(usize, usize)]) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.rank() != 3 || cells.is_empty() {
            return Err(TensorError::Shape {
                op: "gather_cells",
                lhs: xv.shape().to_vec(),
                rhs: vec![cells.len()],
            });
        }
        let (c_dim, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut flat = Vec::with_capacity(cells.len());
        let mut out = Vec::with_capacity(cells.len() * c_dim);
        for &(r, col) in cells {
            if r >= h || col >= w {
                return Err(TensorError::Invalid(format!(
                    "cell ({r}, {col}) outside {h}x{w} map"
                )));
            }
            let cell = r * w + col;
            flat.push(cell);
            out.extend((0..c_dim).map(|c| xv.data()[c * h * w + cell]));
        }
        let needs = self.needs(&[x]);
        let value = Tensor::new(vec![cells.len(), c_dim], out)?;
        Ok(self.push(value, Op::GatherCells { x, cells: flat }, needs))
    }

    /// `(1 - lambda) * rows[n] + lambda * scene` for each row of an `N×C` matrix.
    pub fn blend_rows(&mut self, rows: NodeId, scene: NodeId, lambda: f64) -> Result<NodeId> {
        let (rv, sv) = (&self.node(rows)?.value, &self.node(scene)?.value);
        if rv.rank() != 2 || sv.shape() != [rv.shape()[1]] {
            return Err(TensorError::Shape {
                op: "blend_rows",
                lhs: rv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let c_dim = rv.shape()[1];
        let data = rv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (1.0 - lambda) * v + lambda * sv.data()[i % c_dim])
            .collect();
        let value = Tensor::new(rv.shape().to_vec(), data)?;
        let needs = self.needs(&[rows, scene]);
        Ok(self.push(
            value,
            Op::BlendRows {
                rows,
                scene,
                lambda,
            },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (n, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![n, ca + cb], out)?,
            Op::ConcatCols(a, b),
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let cols = self
            .node(*first)?
            .value
            .shape()
            .get(1)
            .copied()
            .unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = &self.node(p)?.value;
            if v.rank() != 2 || v.shape()[1] != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Records an operation computed outside the tape. `backward` maps the
    /// output gradient to one gradient per input, shaped like that input.
    pub fn custom<F>(&mut self, inputs: &[NodeId], value: Tensor, backward: F) -> Result<NodeId>
    where
        F: Fn(&Tensor) -> Vec<Tensor> + Send + 'static,
    {
        for &i in inputs {
            self.node(i)?;
        }
        let needs = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            needs,
        ))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(TensorError::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Backward pass returning gradients keyed by parameter name. Fails if
    /// `store` was mutated after this tape read from it.
    pub fn backward_params(&self, output: NodeId, store: &ParamStore) -> Result<ParamGrads> {
        let generation = match self.binding {
            Some(b) if b.store_id != store.id() => return Err(TensorError::ForeignStore),
            Some(b) if b.generation != store.generation() => {
                return Err(TensorError::StaleTape {
                    recorded: b.generation,
                    current: store.generation(),
                })
            }
            _ => store.generation(),
        };
        let grads = self.backward(output)?;
        let by_name = store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .params
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, id)| grads.get(*id))
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_string(), g)
            })
            .collect();
        Ok(ParamGrads {
            store_id: store.id(),
            generation,
            grads: by_name,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let shape = |id: NodeId| self.nodes[id.0].value.shape();
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, i_dim) = (shape(*x)[0], shape(*x)[1]);
                let o_dim = shape(*w)[1];
                let (xd, wd) = (val(*x), val(*w));
                if wants(*x) {
                    let mut dx = vec![0.0; n * i_dim];
                    for r in 0..n {
                        let gr = &g[r * o_dim..(r + 1) * o_dim];
                        for i in 0..i_dim {
                            dx[r * i_dim + i] = super::dot(gr, &wd[i * o_dim..(i + 1) * o_dim]);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; i_dim * o_dim];
                    for r in 0..n {
                        let gr = &g[r * o_dim..(r + 1) * o_dim];
                        for i in 0..i_dim {
                            let xi = xd[r * i_dim + i];
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, gv) in dw[i * o_dim..(i + 1) * o_dim].iter_mut().zip(gr) {
                                *d += xi * gv;
                            }
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if wants(*b) {
                    let mut db = vec![0.0; o_dim];
                    for r in 0..n {
                        for (d, gv) in db.iter_mut().zip(&g[r * o_dim..(r + 1) * o_dim]) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv3x3 { x, k, b } => {
                let (cin, h, w) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let cout = shape(*k)[0];
                let plane = h * w;
                let (xd, kd) = (val(*x), val(*k));
                if wants(*x) {
                    let mut dx = vec![0.0; cin * plane];
                    for o in 0..cout {
                        let gy = &g[o * plane..(o + 1) * plane];
                        for c in 0..cin {
                            let dst = &mut dx[c * plane..(c + 1) * plane];
                            for a in 0..3 {
                                for bb in 0..3 {
                                    let wgt = kd[((o * cin + c) * 3 + a) * 3 + bb];
                                    if wgt == 0.0 {
                                        continue;
                                    }
                                    shifted_axpy_transposed(dst, gy, wgt, h, w, a, bb);
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*k) {
                    let mut dk = vec![0.0; cout * cin * 9];
                    for o in 0..cout {
                        let gy = &g[o * plane..(o + 1) * plane];
                        for c in 0..cin {
                            let src = &xd[c * plane..(c + 1) * plane];
                            for a in 0..3 {
                                for bb in 0..3 {
                                    dk[((o * cin + c) * 3 + a) * 3 + bb] =
                                        shifted_dot(gy, src, h, w, a, bb);
                                }
                            }
                        }
                    }
                    accumulate(grads, *k, dk);
                }
                if wants(*b) {
                    let db = (0..cout)
                        .map(|o| g[o * plane..(o + 1) * plane].iter().sum())
                        .collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c_dim = shape(*x)[0];
                let plane = shape(*x)[1] * shape(*x)[2];
                let gd = val(*gamma);
                if wants(*x) {
                    let mut dx = vec![0.0; c_dim * plane];
                    for c in 0..c_dim {
                        let gy = &g[c * plane..(c + 1) * plane];
                        let xh = &xhat[c * plane..(c + 1) * plane];
                        let scale = gd[c] * inv_std[c];
                        if *batch_stats {
                            let n = plane as f64;
                            let sum_g: f64 = gy.iter().sum();
                            let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                            for p in 0..plane {
                                dx[c * plane + p] =
                                    scale / n * (n * gy[p] - sum_g - xh[p] * sum_gx);
                            }
                        } else {
                            for p in 0..plane {
                                dx[c * plane + p] = scale * gy[p];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gamma) {
                    let dg = (0..c_dim)
                        .map(|c| {
                            let r = c * plane..(c + 1) * plane;
                            super::dot(&g[r.clone()], &xhat[r])
                        })
                        .collect();
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let db = (0..c_dim)
                        .map(|c| g[c * plane..(c + 1) * plane].iter().sum())
                        .collect();
                    accumulate(grads, *beta, db);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let dx = val(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(val(*b)).map(|(p, q)| p * q).collect();
                    accumulate(grads, *a, d);
                }
                if wants(*b) {
                    let d = g.iter().zip(val(*a)).map(|(p, q)| p * q).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(grads, *x, vec![g[0]; val(*x).len()]);
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                if wants(*x) {
                    let mut dx = vec![0.0; val(*x).len()];
                    for (c, &cell) in argmax.iter().enumerate() {
                        dx[cell] += g[c];
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GatherCells { x, cells } => {
                if wants(*x) {
                    let c_dim = shape(*x)[0];
                    let plane = shape(*x)[1] * shape(*x)[2];
                    let mut dx = vec![0.0; c_dim * plane];
                    for (r, &cell) in cells.iter().enumerate() {
                        for c in 0..c_dim {
                            dx[c * plane + cell] += g[r * c_dim + c];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::BlendRows {
                rows,
                scene,
                lambda,
            } => {
                if wants(*rows) {
                    accumulate(grads, *rows, g.iter().map(|v| (1.0 - lambda) * v).collect());
                }
                if wants(*scene) {
                    let c_dim = shape(*scene)[0];
                    let mut ds = vec![0.0; c_dim];
                    for (i, v) in g.iter().enumerate() {
                        ds[i % c_dim] += lambda * v;
                    }
                    accumulate(grads, *scene, ds);
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, ca, cb) = (shape(*a)[0], shape(*a)[1], shape(*b)[1]);
                let width = ca + cb;
                if wants(*a) {
                    let d = (0..n)
                        .flat_map(|r| g[r * width..r * width + ca].iter().copied())
                        .collect();
                    accumulate(grads, *a, d);
                }
                if wants(*b) {
                    let d = (0..n)
                        .flat_map(|r| g[r * width + ca..(r + 1) * width].iter().copied())
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Custom { inputs, backward } => {
                let out = Tensor::new(self.nodes[idx].value.shape().to_vec(), g.to_vec())
                    .expect("custom op output shape");
                let input_grads = backward(&out);
                debug_assert_eq!(input_grads.len(), inputs.len());
                for (&i, gi) in inputs.iter().zip(input_grads) {
                    if wants(i) {
                        debug_assert_eq!(gi.shape(), shape(i));
                        accumulate(grads, i, gi.into_data());
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Row/column range of output cells whose tap `(a, b)` lands inside the map.
fn tap_ranges(
    h: usize,
    w: usize,
    a: usize,
    b: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let rows = usize::from(a == 0)..(h + 1).saturating_sub(a).min(h);
    let cols = usize::from(b == 0)..(w + 1).saturating_sub(b).min(w);
    (rows, cols)
}

/// `y[i, j] += wgt * x[i + a - 1, j + b - 1]` over valid cells.
fn shifted_axpy(y: &mut [f64], x: &[f64], wgt: f64, h: usize, w: usize, a: usize, b: usize) {
    let (rows, cols) = tap_ranges(h, w, a, b);
    if cols.is_empty() {
        return;
    }
    for i in rows {
        let si = i + a - 1;
        let dst = &mut y[i * w + cols.start..i * w + cols.end];
        let src = &x[si * w + cols.start + b - 1..si * w + cols.end + b - 1];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += wgt * s;
        }
    }
}

/// Adjoint of [`shifted_axpy`]: `dx[i + a - 1, j + b - 1] += wgt * gy[i, j]`.
fn shifted_axpy_transposed(
    dx: &mut [f64],
    gy: &[f64],
    wgt: f64,
    h: usize,
    w: usize,
    a: usize,
    b: usize,
) {
    let (rows, cols) = tap_ranges(h, w, a, b);
    if cols.is_empty() {
        return;
    }
    for i in rows {
        let si = i + a - 1;
        let src = &gy[i * w + cols.start..i * w + cols.end];
        let dst = &mut dx[si * w + cols.start + b - 1..si * w + cols.end + b - 1];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += wgt * s;
        }
    }
}

/// `sum_{i,j} gy[i, j] * x[i + a - 1, j + b - 1]` over valid cells.
fn shifted_dot(gy: &[f64], x: &[f64], h: usize, w: usize, a: usize, b: usize) -> f64 {
    let (rows, cols) = tap_ranges(h, w, a, b);
    if cols.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in rows {
        let si = i + a - 1;
        let g = &gy[i * w + cols.start..i * w + cols.end];
        let s = &x[si * w + cols.start + b - 1..si * w + cols.end + b - 1];
        acc += super::dot(g, s);
    }
    acc
}
