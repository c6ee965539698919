//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every kernel call appends its output to the tape together with the rule
//! needed to push gradients back to its inputs. `backward` walks the recorded
//! operations in exact reverse order. A tensor that does not require grad
//! never receives a gradient, so freezing a parameter is just binding it as a
//! leaf with `requires_grad = false`.

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-9;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Transpose {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Sigmoid {
        a: Var,
    },
    LogSigmoid {
        a: Var,
    },
    Log {
        a: Var,
    },
}

/// The recorded computation: tensors plus the operations that produced them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    /// `(output, op)` in recording order.
    ops: Vec<(Var, Op)>,
}

/// Outer/axis/inner decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    /// Records an input tensor; it keeps its own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(tensor);
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Number of recorded operations.
    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad());
        let out = self.leaf(Tensor::from_parts(shape, data).with_requires_grad(requires_grad));
        self.ops.push((out, op));
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.tensor(a).dims2("matmul")?;
        let (k2, n) = self.tensor(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (ad, bd) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
            }
        }
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], Op::Sub { a, b }))
    }

    /// Adds a vector along the trailing axis (the only broadcast the kernel supports).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.tensor(x).last_dim();
        if self.tensor(bias).numel() != n {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bd = self.value(bias);
        let data = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(v, b)| v + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), data, &[x, bias], Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Scale { a, factor })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        Ok(self.push(
            out_shape,
            data,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, data, &[a], Op::Slice { a, axis, start }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.tensor(a).dims2("transpose")?;
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], data, &[a], Op::Transpose { a }))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![m], &[a], Op::Mean { a })
    }

    /// Mean along `axis`, keeping that axis with size 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..size {
                let base = (o * size + s) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= size as f64);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push(out_shape, data, &[a], Op::MeanAxis { a, axis }))
    }

    /// Softmax over the trailing axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.tensor(a).last_dim();
        check_finite("softmax", self.value(a))?;
        let mut data = Vec::with_capacity(self.tensor(a).numel());
        for row in self.value(a).chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|v| (v - max).exp()));
            let sum: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(self.shape(a).to_vec(), data, &[a], Op::Softmax { a }))
    }

    /// Normalises the trailing axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.tensor(x).last_dim();
        for p in [gain, bias] {
            if self.tensor(p).numel() != n {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(self.tensor(x).numel());
        let mut inv_std = Vec::new();
        let mut data = Vec::with_capacity(xhat.capacity());
        for row in self.value(x).chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            data,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Gelu { a })
    }

    /// Gathers rows of `table` ([vocab × d]) for each index.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.tensor(table).dims2("embedding")?;
        if indices.is_empty() {
            return Err(TensorError::Contract("embedding lookup with no indices".into()));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: i,
                    bound: v,
                });
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![indices.len(), d],
            data,
            &[table],
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.tensor(logits).dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![rows, classes],
                rhs: vec![targets.len()],
            });
        }
        check_finite("cross_entropy", self.value(logits))?;
        let mut probs = Vec::with_capacity(rows * classes);
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).chunks(classes).zip(targets) {
            if t >= classes {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: classes,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = loss / rows as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let d = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / self.tensor(a).numel() as f64;
        Ok(self.push(vec![1], vec![d], &[a, b], Op::L1 { a, b }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Sigmoid { a })
    }

    /// `log(sigmoid(x))` without underflow for very negative `x`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .iter()
            .map(|&v| v.min(0.0) - (-v.abs()).exp().ln_1p())
            .collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::LogSigmoid { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|v| v.ln()).collect();
        check_finite("log", &data)?;
        Ok(self.push(self.shape(a).to_vec(), data, &[a], Op::Log { a }))
    }

    /// Sum of several same-shaped tensors.
    pub fn sum_of(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| TensorError::Contract("sum of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Propagates d`loss`/d· to every tensor that requires grad, adding into existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: self.shape(loss).to_vec(),
                reason: "loss must have exactly one element".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.tensor(loss).requires_grad() {
            grads[loss.0] = Some(vec![1.0]);
        }
        for (out, op) in self.ops.iter().rev() {
            let Some(g) = grads[out.0].clone() else {
                continue;
            };
            self.backward_op(op, *out, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad()
    }

    fn backward_op(&self, op: &Op, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, gv)| *d += aip * gv);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(*a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    acc(*a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    acc(*x, g.to_vec());
                }
                if self.needs(*bias) {
                    let n = self.tensor(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*bias, db);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    acc(*a, g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect());
                }
                if self.needs(*b) {
                    acc(*b, g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale { a, factor } => {
                if self.needs(*a) {
                    acc(*a, g.iter().map(|v| v * factor).collect());
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.shape(out);
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let size = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * size * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + size * inner]);
                        }
                        acc(v, dv);
                    }
                    offset += size;
                }
            }
            Op::Slice { a, axis, start } => {
                if self.needs(*a) {
                    let (outer, size, inner) = split_axis(self.shape(*a), *axis);
                    let len = self.shape(out)[*axis];
                    let mut da = vec![0.0; outer * size * inner];
                    for o in 0..outer {
                        let dst = o * size * inner + start * inner;
                        let src = o * len * inner;
                        da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(*a, da);
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    acc(*a, da);
                }
            }
            Op::Mean { a } => {
                if self.needs(*a) {
                    let n = self.tensor(*a).numel();
                    acc(*a, vec![g[0] / n as f64; n]);
                }
            }
            Op::MeanAxis { a, axis } => {
                if self.needs(*a) {
                    let (outer, size, inner) = split_axis(self.shape(*a), *axis);
                    let mut da = vec![0.0; outer * size * inner];
                    for o in 0..outer {
                        for s in 0..size {
                            for i in 0..inner {
                                da[(o * size + s) * inner + i] = g[o * inner + i] / size as f64;
                            }
                        }
                    }
                    acc(*a, da);
                }
            }
            Op::Softmax { a } => {
                if self.needs(*a) {
                    let n = self.tensor(*a).last_dim();
                    let y = self.value(out);
                    let mut da = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        da.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    acc(*a, da);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.tensor(*x).last_dim();
                let gd = self.value(*gain);
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for ((hr, gr), is) in xhat.chunks(n).zip(g.chunks(n)).zip(inv_std) {
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| is / n as f64 * (n as f64 * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    acc(*x, dx);
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(*gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    acc(*bias, db);
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    acc(
                        *a,
                        self.value(*a).iter().zip(g).map(|(&x, gv)| gelu_grad(x) * gv).collect(),
                    );
                }
            }
            Op::Embedding { table, indices } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![0.0; self.tensor(*table).numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(t, v)| *t += v);
                    }
                    acc(*table, dt);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.needs(*logits) {
                    let classes = self.shape(*logits)[1];
                    let scale = g[0] / targets.len() as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * classes + t] -= scale;
                    }
                    acc(*logits, dl);
                }
            }
            Op::L1 { a, b } => {
                let n = self.tensor(*a).numel() as f64;
                let signs: Vec<f64> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            g[0] / n
                        } else if d < 0.0 {
                            -g[0] / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.needs(*b) {
                    acc(*b, signs.iter().map(|s| -s).collect());
                }
                if self.needs(*a) {
                    acc(*a, signs);
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let y = self.value(out);
                    acc(*a, y.iter().zip(g).map(|(s, gv)| s * (1.0 - s) * gv).collect());
                }
            }
            Op::LogSigmoid { a } => {
                if self.needs(*a) {
                    acc(
                        *a,
                        self.value(*a).iter().zip(g).map(|(&x, gv)| sigmoid(-x) * gv).collect(),
                    );
                }
            }
            Op::Log { a } => {
                if self.needs(*a) {
                    acc(*a, self.value(*a).iter().zip(g).map(|(x, gv)| gv / x).collect());
                }
            }
        }
    }
}
