//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every forward pass builds a fresh [`Tape`]; nodes are appended in
//! topological order, so the backward sweep is a single reverse walk.
//! All values are two-dimensional: row vectors are `[1, d]`, column
//! vectors `[n, 1]`, scalars `[1, 1]`.

use ndarray::{Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Batch-norm execution mode.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize with batch statistics (training and gradient checks).
    Train,
    /// Normalize with frozen running statistics, one entry per group.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[n, d] + [1, d]`, the row vector broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// `[n, d] * [n, 1]`, the column vector broadcast over columns.
    MulColVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `a @ b^T` without materializing the transpose.
    MatMulTransB(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddConst(NodeId),
    MulConst(NodeId, Array2<f64>),
    GatherRows(NodeId, Vec<usize>),
    ScatterAddRows {
        src: NodeId,
        index: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
    ConcatCols(Vec<NodeId>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// Leaky unit with a per-element negative slope (sampled or fixed).
    Rrelu(NodeId, Array2<f64>),
    SoftmaxRows(NodeId),
    /// Softmax over rows sharing a segment id; `scores` is `[n, 1]`.
    SegmentSoftmax { scores: NodeId, segments: Vec<usize> },
    /// 1-D convolution along the feature axis over stacked input rows.
    /// `rows` are R matrices `[n, d]`, `kernel` is `[C, R*w]`, output `[n, C*d]`.
    Conv1dRows {
        rows: Vec<NodeId>,
        kernel: NodeId,
        width: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        group_width: usize,
        eps: f64,
        mode: BnMode,
    },
    /// Pick scalar entries `x[coords]` into `[m, 1]`.
    GatherScalars(NodeId, Vec<(usize, usize)>),
    /// `ln(max(x, eps))`; gradient is zero where the clamp binds.
    LogClamped(NodeId, f64),
    SumAll(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed like the tape.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the swept scalar w.r.t. node `id`, if it was reached.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

/// A forward computation recorded for one backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// `(store index, node)` pairs for bound parameters.
    param_nodes: Vec<(usize, NodeId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    /// Bound parameter nodes, in binding order.
    pub fn param_nodes(&self) -> &[(usize, NodeId)] {
        &self.param_nodes
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf bound to slot `store_index` of a parameter store.
    pub fn param(&mut self, store_index: usize, value: Array2<f64>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.param_nodes.push((store_index, id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn add_row_vec(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        let g = self.any_grad(&[a, row]);
        self.push(v, Op::AddRowVec(a, row), g)
    }

    pub fn mul_col_vec(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) * self.value(col);
        let g = self.any_grad(&[a, col]);
        self.push(v, Op::MulColVec(a, col), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMulTransB(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        let g = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) + k;
        let g = self.any_grad(&[a]);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn add_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.value(a) + &c;
        let g = self.any_grad(&[a]);
        self.push(v, Op::AddConst(a), g)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.value(a) * &c;
        let g = self.any_grad(&[a]);
        self.push(v, Op::MulConst(a, c), g)
    }

    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        let src = self.value(a);
        let mut v = Array2::zeros((index.len(), src.ncols()));
        for (out, &i) in index.iter().enumerate() {
            v.row_mut(out).assign(&src.row(i));
        }
        let g = self.any_grad(&[a]);
        self.push(v, Op::GatherRows(a, index), g)
    }

    /// Sums `src` rows into `num_rows` output rows, optionally scaling each
    /// source row by `weights[i]` first.
    pub fn scatter_add_rows(
        &mut self,
        src: NodeId,
        index: Vec<usize>,
        num_rows: usize,
        weights: Option<Vec<f64>>,
    ) -> NodeId {
        let s = self.value(src);
        let mut v = Array2::zeros((num_rows, s.ncols()));
        for (i, &dst) in index.iter().enumerate() {
            let w = weights.as_ref().map_or(1.0, |ws| ws[i]);
            let mut row = v.row_mut(dst);
            row += &(&s.row(i) * w);
        }
        let g = self.any_grad(&[src]);
        self.push(
            v,
            Op::ScatterAddRows {
                src,
                index,
                weights,
            },
            g,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut at = 0;
        for p in parts {
            let part = self.value(*p);
            v.slice_mut(ndarray::s![.., at..at + part.ncols()])
                .assign(part);
            at += part.ncols();
        }
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sin);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Sin(a), g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        let g = self.any_grad(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    /// Randomized leaky unit; `slopes` holds the negative-side slope per
    /// element (all equal to the mean slope in eval mode).
    pub fn rrelu(&mut self, a: NodeId, slopes: Array2<f64>) -> NodeId {
        let x = self.value(a);
        debug_assert_eq!(x.dim(), slopes.dim());
        let mut v = x.clone();
        v.zip_mut_with(&slopes, |e, &s| {
            if *e < 0.0 {
                *e *= s;
            }
        });
        let g = self.any_grad(&[a]);
        self.push(v, Op::Rrelu(a, slopes), g)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let g = self.any_grad(&[a]);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    /// Softmax of a `[n, 1]` score column within groups of equal segment id.
    pub fn segment_softmax(&mut self, scores: NodeId, segments: Vec<usize>) -> NodeId {
        let s = self.value(scores);
        debug_assert_eq!(s.ncols(), 1);
        debug_assert_eq!(s.nrows(), segments.len());
        let v = segment_softmax_values(s, &segments);
        let g = self.any_grad(&[scores]);
        self.push(v, Op::SegmentSoftmax { scores, segments }, g)
    }

    /// Same-padded 1-D convolution along the feature axis; the R `rows`
    /// matrices are treated as input channels of a `[R, d]` signal per
    /// sample. Output is the flattened `[n, C*d]` feature map.
    pub fn conv1d_rows(&mut self, rows: &[NodeId], kernel: NodeId, width: usize) -> NodeId {
        assert!(width % 2 == 1, "conv width must be odd for same padding");
        let r = rows.len();
        let (n, d) = self.value(rows[0]).dim();
        let k = self.value(kernel);
        let channels = k.nrows();
        assert_eq!(k.ncols(), r * width);

        let z = conv_build_z(self, rows, width);
        let out_flat = k.dot(&z); // [C, n*d]
        let mut v = Array2::zeros((n, channels * d));
        for c in 0..channels {
            for i in 0..n {
                for j in 0..d {
                    v[[i, c * d + j]] = out_flat[[c, i * d + j]];
                }
            }
        }
        let g = self.any_grad(rows) || self.any_grad(&[kernel]);
        self.push(
            v,
            Op::Conv1dRows {
                rows: rows.to_vec(),
                kernel,
                width,
            },
            g,
        )
    }

    /// Grouped batch normalization: columns are split into contiguous groups
    /// of `group_width`; each group is normalized over all its batch entries.
    /// `gamma`/`beta` are `[1, groups]`. Returns the normalized output; batch
    /// statistics per group can be recovered with [`Tape::bn_batch_stats`].
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        group_width: usize,
        eps: f64,
        mode: BnMode,
    ) -> NodeId {
        let xv = self.value(x);
        let (_, cols) = xv.dim();
        assert_eq!(cols % group_width, 0);
        let groups = cols / group_width;
        assert_eq!(self.value(gamma).ncols(), groups);

        let (mean, var) = match &mode {
            BnMode::Train => bn_group_stats(xv, group_width),
            BnMode::Eval { mean, var } => (mean.clone(), var.clone()),
        };
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut v = xv.clone();
        for j in 0..groups {
            let inv = 1.0 / (var[j] + eps).sqrt();
            let (g, b) = (gv[[0, j]], bv[[0, j]]);
            let mut slab = v.slice_mut(ndarray::s![.., j * group_width..(j + 1) * group_width]);
            slab.mapv_inplace(|e| (e - mean[j]) * inv * g + b);
        }
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_width,
                eps,
                mode,
            },
            g,
        )
    }

    /// Batch statistics of a batch-norm node's input, per group (used to
    /// refresh running statistics after a training forward).
    pub fn bn_batch_stats(&self, bn_node: NodeId) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes[bn_node.0].op {
            Op::BatchNorm { x, group_width, .. } => {
                Some(bn_group_stats(self.value(*x), *group_width))
            }
            _ => None,
        }
    }

    pub fn gather_scalars(&mut self, a: NodeId, coords: Vec<(usize, usize)>) -> NodeId {
        let x = self.value(a);
        let mut v = Array2::zeros((coords.len(), 1));
        for (i, &(r, c)) in coords.iter().enumerate() {
            v[[i, 0]] = x[[r, c]];
        }
        let g = self.any_grad(&[a]);
        self.push(v, Op::GatherScalars(a, coords), g)
    }

    pub fn log_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(eps).ln());
        let g = self.any_grad(&[a]);
        self.push(v, Op::LogClamped(a, eps), g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(v, Op::SumAll(a), g)
    }

    /// Element-wise mean of several same-shaped nodes.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = self.add(acc, *p);
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Reverse sweep from a scalar `root`; returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.nodes[root.0].value.dim(), (1, 1));
        grads[root.0] = Some(Array2::ones((1, 1)));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |grads: &mut [Option<Array2<f64>>], target: NodeId, delta: Array2<f64>| {
            if !self.nodes[target.0].needs_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * self.value(*b));
                add_to(grads, *b, g * self.value(*a));
            }
            Op::AddRowVec(a, row) => {
                add_to(grads, *a, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, summed);
            }
            Op::MulColVec(a, col) => {
                add_to(grads, *a, g * self.value(*col));
                let per_row = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                add_to(grads, *col, per_row);
            }
            Op::MatMul(a, b) => {
                add_to(grads, *a, g.dot(&self.value(*b).t()));
                add_to(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulTransB(a, b) => {
                add_to(grads, *a, g.dot(self.value(*b)));
                add_to(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Scale(a, k) => add_to(grads, *a, g * *k),
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::AddConst(a) => add_to(grads, *a, g.clone()),
            Op::MulConst(a, c) => add_to(grads, *a, g * c),
            Op::GatherRows(a, index) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                for (out, &i) in index.iter().enumerate() {
                    let mut row = da.row_mut(i);
                    row += &g.row(out);
                }
                add_to(grads, *a, da);
            }
            Op::ScatterAddRows {
                src,
                index,
                weights,
            } => {
                let mut ds = Array2::zeros(self.value(*src).dim());
                for (i, &dst) in index.iter().enumerate() {
                    let w = weights.as_ref().map_or(1.0, |ws| ws[i]);
                    let mut row = ds.row_mut(i);
                    row += &(&g.row(dst) * w);
                }
                add_to(grads, *src, ds);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    let slice = g.slice(ndarray::s![.., at..at + w]).to_owned();
                    add_to(grads, *p, slice);
                    at += w;
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, *a, g * &(y * &(1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, *a, g * &(1.0 - y * y));
            }
            Op::Sin(a) => {
                add_to(grads, *a, g * &self.value(*a).mapv(f64::cos));
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                add_to(grads, *a, g * &mask);
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self
                    .value(*a)
                    .mapv(|x| if x >= 0.0 { 1.0 } else { *slope });
                add_to(grads, *a, g * &mask);
            }
            Op::Rrelu(a, slopes) => {
                let x = self.value(*a);
                let mut mask = slopes.clone();
                mask.zip_mut_with(x, |s, &e| {
                    if e >= 0.0 {
                        *s = 1.0;
                    }
                });
                add_to(grads, *a, g * &mask);
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[id].value;
                let gp = g * p;
                let dot = gp.sum_axis(Axis(1)).insert_axis(Axis(1));
                add_to(grads, *a, &gp - &(p * &dot));
            }
            Op::SegmentSoftmax { scores, segments } => {
                let alpha = &self.nodes[id].value;
                let mut seg_dot: std::collections::HashMap<usize, f64> =
                    std::collections::HashMap::new();
                for (i, &s) in segments.iter().enumerate() {
                    *seg_dot.entry(s).or_insert(0.0) += g[[i, 0]] * alpha[[i, 0]];
                }
                let mut dx = Array2::zeros(alpha.dim());
                for (i, &s) in segments.iter().enumerate() {
                    dx[[i, 0]] = alpha[[i, 0]] * (g[[i, 0]] - seg_dot[&s]);
                }
                add_to(grads, *scores, dx);
            }
            Op::Conv1dRows {
                rows,
                kernel,
                width,
            } => {
                let (n, d) = self.value(rows[0]).dim();
                let channels = self.value(*kernel).nrows();
                let pad = (width - 1) / 2;

                // g [n, C*d] -> g_flat [C, n*d]
                let mut g_flat = Array2::zeros((channels, n * d));
                for c in 0..channels {
                    for i in 0..n {
                        for j in 0..d {
                            g_flat[[c, i * d + j]] = g[[i, c * d + j]];
                        }
                    }
                }
                let z = conv_build_z(self, rows, *width);
                add_to(grads, *kernel, g_flat.dot(&z.t()));

                if self.any_grad(rows) {
                    let dz = self.value(*kernel).t().dot(&g_flat); // [R*w, n*d]
                    for (rho, row_node) in rows.iter().enumerate() {
                        let mut dx = Array2::zeros((n, d));
                        for dx_off in 0..*width {
                            let zr = rho * width + dx_off;
                            for i in 0..n {
                                for j in 0..d {
                                    // z[zr, i*d + jj] = x[i, jj + dx_off - pad]
                                    let jj = j as isize - dx_off as isize + pad as isize;
                                    if jj >= 0 && (jj as usize) < d {
                                        dx[[i, j]] += dz[[zr, i * d + jj as usize]];
                                    }
                                }
                            }
                        }
                        add_to(grads, *row_node, dx);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_width,
                eps,
                mode,
            } => {
                let xv = self.value(*x);
                let (n, cols) = xv.dim();
                let groups = cols / group_width;
                let (mean, var) = match mode {
                    BnMode::Train => bn_group_stats(xv, *group_width),
                    BnMode::Eval { mean, var } => (mean.clone(), var.clone()),
                };
                let gv = self.value(*gamma);
                let mut dgamma = Array2::zeros((1, groups));
                let mut dbeta = Array2::zeros((1, groups));
                let mut dx = Array2::zeros((n, cols));
                for j in 0..groups {
                    let inv = 1.0 / (var[j] + eps).sqrt();
                    let cnt = (n * group_width) as f64;
                    let cols_j = j * group_width..(j + 1) * group_width;
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for i in 0..n {
                        for c in cols_j.clone() {
                            let xhat = (xv[[i, c]] - mean[j]) * inv;
                            sum_dy += g[[i, c]];
                            sum_dy_xhat += g[[i, c]] * xhat;
                        }
                    }
                    dbeta[[0, j]] = sum_dy;
                    dgamma[[0, j]] = sum_dy_xhat;
                    let gam = gv[[0, j]];
                    for i in 0..n {
                        for c in cols_j.clone() {
                            let xhat = (xv[[i, c]] - mean[j]) * inv;
                            dx[[i, c]] = match mode {
                                BnMode::Train => {
                                    gam * inv / cnt
                                        * (cnt * g[[i, c]] - sum_dy - xhat * sum_dy_xhat)
                                }
                                BnMode::Eval { .. } => gam * inv * g[[i, c]],
                            };
                        }
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gamma, dgamma);
                add_to(grads, *beta, dbeta);
            }
            Op::GatherScalars(a, coords) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                for (i, &(r, c)) in coords.iter().enumerate() {
                    da[[r, c]] += g[[i, 0]];
                }
                add_to(grads, *a, da);
            }
            Op::LogClamped(a, eps) => {
                let x = self.value(*a);
                let dx = x.mapv(|e| if e > *eps { 1.0 / e } else { 0.0 });
                add_to(grads, *a, g * &dx);
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                add_to(grads, *a, da);
            }
        }
    }
}

fn segment_softmax_values(scores: &Array2<f64>, segments: &[usize]) -> Array2<f64> {
    use std::collections::HashMap;
    let mut max: HashMap<usize, f64> = HashMap::new();
    for (i, &s) in segments.iter().enumerate() {
        let e = max.entry(s).or_insert(f64::NEG_INFINITY);
        *e = e.max(scores[[i, 0]]);
    }
    let mut sum: HashMap<usize, f64> = HashMap::new();
    let mut v = Array2::zeros((segments.len(), 1));
    for (i, &s) in segments.iter().enumerate() {
        let e = (scores[[i, 0]] - max[&s]).exp();
        v[[i, 0]] = e;
        *sum.entry(s).or_insert(0.0) += e;
    }
    for (i, &s) in segments.iter().enumerate() {
        v[[i, 0]] /= sum[&s];
    }
    v
}

fn bn_group_stats(x: &Array2<f64>, group_width: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, cols) = x.dim();
    let groups = cols / group_width;
    let cnt = (n * group_width) as f64;
    let mut mean = vec![0.0; groups];
    let mut var = vec![0.0; groups];
    for j in 0..groups {
        let slab = x.slice(ndarray::s![.., j * group_width..(j + 1) * group_width]);
        let m = slab.sum() / cnt;
        mean[j] = m;
        var[j] = slab.mapv(|e| (e - m) * (e - m)).sum() / cnt;
    }
    (mean, var)
}

/// Stacks shifted copies of the input rows into the `[R*w, n*d]` matrix used
/// by the matmul-backed convolution.
fn conv_build_z(tape: &Tape, rows: &[NodeId], width: usize) -> Array2<f64> {
    let r = rows.len();
    let (n, d) = tape.value(rows[0]).dim();
    let pad = (width - 1) / 2;
    let mut z = Array2::zeros((r * width, n * d));
    for (rho, row_node) in rows.iter().enumerate() {
        let x = tape.value(*row_node);
        for dx in 0..width {
            let zr = rho * width + dx;
            for i in 0..n {
                for j in 0..d {
                    let src = j as isize + dx as isize - pad as isize;
                    if src >= 0 && (src as usize) < d {
                        z[[zr, i * d + j]] = x[[i, src as usize]];
                    }
                }
            }
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar-valued tape builder w.r.t. a
    /// set of leaf inputs, compared against the analytic sweep.
    fn check_op<F>(inputs: &[Array2<f64>], build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let bind = |tape: &mut Tape, vals: &[Array2<f64>]| -> Vec<NodeId> {
            vals.iter()
                .enumerate()
                .map(|(i, v)| tape.param(i, v.clone()))
                .collect()
        };

        let mut tape = Tape::new();
        let ids = bind(&mut tape, inputs);
        let loss = build(&mut tape, &ids);
        assert_eq!(tape.value(loss).dim(), (1, 1));
        let grads = tape.backward(loss);

        let h = 1e-6;
        for (pi, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[pi])
                .unwrap_or_else(|| panic!("no grad for input {pi}"));
            for r in 0..input.nrows() {
                for c in 0..input.ncols() {
                    let eval = |delta: f64| {
                        let mut vals = inputs.to_vec();
                        vals[pi][[r, c]] += delta;
                        let mut t = Tape::new();
                        let ids = bind(&mut t, &vals);
                        let l = build(&mut t, &ids);
                        t.scalar(l)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let denom = (fd.abs() + a.abs()).max(1e-6);
                    assert!(
                        (fd - a).abs() / denom < 1e-5,
                        "input {pi} entry ({r},{c}): fd={fd:.10e} analytic={a:.10e}"
                    );
                }
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 2);
        check_op(&[a.clone(), b.clone(), w.clone()], |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let m = t.mul(s, ids[1]);
            let d = t.sub(m, ids[0]);
            let p = t.matmul(d, ids[2]);
            let q = t.matmul_trans_b(p, ids[2]); // back to [3,4]
            let sc = t.scale(q, 0.7);
            t.sum_all(sc)
        });
    }

    #[test]
    fn broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        let col = rand_mat(&mut rng, 4, 1);
        check_op(&[a, row, col], |t, ids| {
            let x = t.add_row_vec(ids[0], ids[1]);
            let y = t.mul_col_vec(x, ids[2]);
            t.sum_all(y)
        });
    }

    #[test]
    fn activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Keep entries away from the kinks of the piecewise-linear units.
        let mut a = rand_mat(&mut rng, 5, 4);
        a.mapv_inplace(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
        let weights = rand_mat(&mut rng, 5, 4);
        let slopes = Array2::from_shape_fn((5, 4), |_| rng.gen_range(0.125..0.3333));
        check_op(&[a, weights.clone()], move |t, ids| {
            let s1 = t.sigmoid(ids[0]);
            let s2 = t.tanh(s1);
            let s3 = t.sin(s2);
            let s4 = t.leaky_relu(ids[0], 0.2);
            let s5 = t.relu(ids[0]);
            let s6 = t.rrelu(ids[0], slopes.clone());
            let mut acc = t.mul(s3, ids[1]);
            for s in [s4, s5, s6] {
                let m = t.mul(s, ids[1]);
                acc = t.add(acc, m);
            }
            t.sum_all(acc)
        });
    }

    #[test]
    fn gather_scatter_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_mat(&mut rng, 5, 3);
        let b = rand_mat(&mut rng, 4, 2);
        let weights = vec![0.5, 1.0, 0.25, 2.0];
        check_op(&[a, b], move |t, ids| {
            let g = t.gather_rows(ids[0], vec![0, 2, 2, 4]);
            let s = t.scatter_add_rows(g, vec![1, 0, 1, 2], 4, Some(weights.clone()));
            let c = t.concat_cols(&[s, ids[1]]);
            let sq = t.mul(c, c);
            t.sum_all(sq)
        });
    }

    #[test]
    fn softmax_rows_grad_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_mat(&mut rng, 4, 6);
        let pick = rand_mat(&mut rng, 4, 6);
        check_op(&[a.clone(), pick], |t, ids| {
            let p = t.softmax_rows(ids[0]);
            let m = t.mul(p, ids[1]);
            t.sum_all(m)
        });

        let mut t = Tape::new();
        let x = t.constant(a);
        let p = t.softmax_rows(x);
        for row in t.value(p).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_softmax_matches_per_group_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scores = rand_mat(&mut rng, 7, 1);
        let segments = vec![0, 1, 0, 2, 1, 0, 2];
        let pick = rand_mat(&mut rng, 7, 1);

        // Oracle: naive exp/normalize per group.
        let mut t = Tape::new();
        let s = t.constant(scores.clone());
        let alpha = t.segment_softmax(s, segments.clone());
        let av = t.value(alpha);
        for group in 0..3 {
            let idx: Vec<usize> = (0..7).filter(|i| segments[*i] == group).collect();
            let denom: f64 = idx.iter().map(|&i| scores[[i, 0]].exp()).sum();
            for &i in &idx {
                let expect = scores[[i, 0]].exp() / denom;
                assert!((av[[i, 0]] - expect).abs() < 1e-12);
            }
        }

        let segs = segments.clone();
        check_op(&[scores, pick], move |t, ids| {
            let a = t.segment_softmax(ids[0], segs.clone());
            let m = t.mul(a, ids[1]);
            t.sum_all(m)
        });
    }

    #[test]
    fn conv1d_rows_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 3;
        let d = 5;
        let (channels, width, r) = (4, 3, 2);
        let x0 = rand_mat(&mut rng, n, d);
        let x1 = rand_mat(&mut rng, n, d);
        let kernel = rand_mat(&mut rng, channels, r * width);

        let mut t = Tape::new();
        let a = t.constant(x0.clone());
        let b = t.constant(x1.clone());
        let k = t.constant(kernel.clone());
        let out = t.conv1d_rows(&[a, b], k, width);
        let ov = t.value(out);

        // Direct convolution oracle.
        let pad = (width as isize - 1) / 2;
        for i in 0..n {
            for c in 0..channels {
                for j in 0..d {
                    let mut acc = 0.0;
                    for (rho, x) in [&x0, &x1].iter().enumerate() {
                        for dx in 0..width {
                            let src = j as isize + dx as isize - pad;
                            if src >= 0 && (src as usize) < d {
                                acc += kernel[[c, rho * width + dx]] * x[[i, src as usize]];
                            }
                        }
                    }
                    assert!(
                        (ov[[i, c * d + j]] - acc).abs() < 1e-12,
                        "mismatch at ({i},{c},{j})"
                    );
                }
            }
        }

        let pick = rand_mat(&mut rng, n, channels * d);
        check_op(&[x0, x1, kernel], move |t, ids| {
            let out = t.conv1d_rows(&[ids[0], ids[1]], ids[2], width);
            let m = t.mul_const(out, pick.clone());
            t.sum_all(m)
        });
    }

    #[test]
    fn batch_norm_train_and_eval_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_mat(&mut rng, 4, 6); // 3 groups of width 2
        let gamma = rand_mat(&mut rng, 1, 3);
        let beta = rand_mat(&mut rng, 1, 3);
        let pick = rand_mat(&mut rng, 4, 6);

        let p = pick.clone();
        check_op(&[x.clone(), gamma.clone(), beta.clone()], move |t, ids| {
            let y = t.batch_norm(ids[0], ids[1], ids[2], 2, 1e-5, BnMode::Train);
            let m = t.mul_const(y, p.clone());
            t.sum_all(m)
        });

        let mode = BnMode::Eval {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![1.5, 0.7, 1.0],
        };
        check_op(&[x, gamma, beta], move |t, ids| {
            let y = t.batch_norm(ids[0], ids[1], ids[2], 2, 1e-5, mode.clone());
            let m = t.mul_const(y, pick.clone());
            t.sum_all(m)
        });
    }

    #[test]
    fn batch_norm_train_normalizes_groups() {
        let x = array![[1.0, 2.0, 10.0, 20.0], [3.0, 4.0, 30.0, 40.0]];
        let mut t = Tape::new();
        let xn = t.constant(x);
        let gamma = t.constant(Array2::ones((1, 2)));
        let beta = t.constant(Array2::zeros((1, 2)));
        let y = t.batch_norm(xn, gamma, beta, 2, 1e-12, BnMode::Train);
        let yv = t.value(y);
        for j in 0..2 {
            let slab = yv.slice(ndarray::s![.., j * 2..(j + 1) * 2]);
            assert!(slab.sum().abs() < 1e-9);
            let var = slab.mapv(|e| e * e).sum() / 4.0;
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn log_and_gather_scalars_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = rand_mat(&mut rng, 3, 4).mapv(|x| x.abs() + 0.1);
        check_op(&[a], |t, ids| {
            let picked = t.gather_scalars(ids[0], vec![(0, 1), (2, 3), (1, 0)]);
            let l = t.log_clamped(picked, 1e-12);
            t.sum_all(l)
        });
    }

    #[test]
    fn grad_accumulates_over_reused_nodes() {
        let a = array![[2.0]];
        let mut t = Tape::new();
        let x = t.param(0, a);
        let y = t.mul(x, x); // x^2
        let z = t.add(y, x); // x^2 + x
        let l = t.sum_all(z);
        let g = t.backward(l);
        // d/dx (x^2 + x) = 2x + 1 = 5
        assert!((g.get(x).unwrap()[[0, 0]] - 5.0).abs() < 1e-12);
    }
}
