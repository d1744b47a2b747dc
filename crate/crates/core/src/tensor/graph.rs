//! The define-by-run tape: ops record their backward closures as they run.

use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice, Zip};

use super::{ParamId, ParamStore, Real, Result, TensorError};

/// Handle to a node on one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &ArrayD<T>, &[&ArrayD<T>]) -> Vec<ArrayD<T>>>;

struct Node<T: Real> {
    op: &'static str,
    value: ArrayD<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    grad: Option<ArrayD<T>>,
}

/// Reverse-mode tape. Rebuilt for every training step; confined to one
/// worker at a time.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<(ParamId, Var)>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_of<T>(a: &ArrayD<T>) -> Vec<usize> {
    a.shape().to_vec()
}

fn mismatch<T>(op: &'static str, details: String) -> Result<T> {
    Err(TensorError::ShapeMismatch { op, details })
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            check_finite: true,
        }
    }

    /// Disable the per-op finiteness scan (used by hot loops once a
    /// configuration is trusted; tests always leave it on).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    fn push(
        &mut self,
        op: &'static str,
        value: ArrayD<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Result<Var> {
        if self.check_finite && !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            parents,
            backward,
            grad: None,
        });
        Ok(Var(id))
    }

    /// Leaf node holding an input tensor. Gradients accumulate here too,
    /// which the finite-difference checks rely on.
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        self.push("input", value, vec![], None)
            .expect("input values are caller-checked")
    }

    /// Leaf bound to a stored parameter; the binding is recorded so
    /// [`Graph::accumulate_param_grads`] can route gradients back.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let var = self.input(store.get(id).value.clone());
        self.param_vars.push((id, var));
        var
    }

    pub fn value(&self, var: Var) -> &ArrayD<T> {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&ArrayD<T>> {
        self.nodes[var.0].grad.as_ref()
    }

    pub fn scalar(&self, var: Var) -> T {
        *self.nodes[var.0]
            .value
            .iter()
            .next()
            .expect("scalar node is non-empty")
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        shape_of(&self.nodes[var.0].value)
    }

    /// Reverse pass from a scalar loss; accumulates gradients into every
    /// node on the path.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        {
            let node = &mut self.nodes[loss.0];
            if node.value.len() != 1 {
                return Err(TensorError::NotScalar(shape_of(&node.value)));
            }
            node.grad = Some(ArrayD::from_elem(node.value.raw_dim(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || self.nodes[i].backward.is_none() {
                continue;
            }
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &right[0];
            let grad = node.grad.as_ref().expect("checked above");
            let back = node.backward.as_ref().expect("checked above");
            let parent_values: Vec<&ArrayD<T>> =
                node.parents.iter().map(|&p| &left[p].value).collect();
            let parent_grads = back(grad, &node.value, &parent_values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            let op = node.op;
            let parents = node.parents.clone();
            for (&p, g) in parents.iter().zip(parent_grads.into_iter()) {
                if self.check_finite && !g.iter().all(|v| v.is_finite()) {
                    return Err(TensorError::NonFinite { op });
                }
                match &mut left[p].grad {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Route accumulated gradients of bound parameters into a buffer
    /// aligned with the parameter store.
    pub fn accumulate_param_grads(&self, buf: &mut super::GradBuffer<T>) {
        for &(id, var) in &self.param_vars {
            if let Some(g) = self.grad(var) {
                buf.accumulate(id, g);
            }
        }
    }

    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.param_vars
    }

    // ---- elementwise ----

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return mismatch(op, format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let value = f(va, vb);
        self.push(op, value, vec![a.0, b.0], Some(backward))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "add",
            a,
            b,
            |x, y| x + y,
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "sub",
            a,
            b,
            |x, y| x - y,
            Box::new(|g, _, _| vec![g.clone(), g.mapv(|v| -v)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "mul",
            a,
            b,
            |x, y| x * y,
            Box::new(|g, _, p| vec![g * p[1], g * p[0]]),
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = &self.nodes[a.0].value * c;
        self.push("scale", value, vec![a.0], Some(Box::new(move |g, _, _| vec![g * c])))
    }

    /// Add a compile-time constant.
    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.nodes[a.0].value.mapv(|v| v + c);
        self.push("add_scalar", value, vec![a.0], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    /// Multiply a tensor by a scalar-valued node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.nodes[s.0].value.clone();
        if sv.len() != 1 {
            return mismatch("mul_scalar_var", format!("scalar arg has shape {:?}", sv.shape()));
        }
        let c = *sv.iter().next().expect("non-empty");
        let value = &self.nodes[a.0].value * c;
        self.push(
            "mul_scalar_var",
            value,
            vec![a.0, s.0],
            Some(Box::new(move |g, _, p| {
                let da = g * c;
                let ds = (g * p[0]).sum();
                vec![da, ArrayD::from_elem(p[1].raw_dim(), ds)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.mapv(|v| T::one() / (T::one() + (-v).exp()));
        self.push(
            "sigmoid",
            value,
            vec![a.0],
            Some(Box::new(|g, y, _| vec![g * &y.mapv(|v| v * (T::one() - v))])),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.mapv(|v| v.tanh());
        self.push(
            "tanh",
            value,
            vec![a.0],
            Some(Box::new(|g, y, _| vec![g * &y.mapv(|v| T::one() - v * v)])),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let value = self.nodes[a.0].value.mapv(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (T::one() + u.tanh())
        });
        self.push(
            "gelu",
            value,
            vec![a.0],
            Some(Box::new(move |g, _, p| {
                let dx = p[0].mapv(|x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
                    half * (T::one() + t) + half * x * (T::one() - t * t) * du
                });
                vec![g * &dx]
            })),
        )
    }

    /// Elementwise x^c for nonnegative inputs.
    pub fn powf(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.nodes[a.0].value.mapv(|v| v.powf(c));
        self.push(
            "powf",
            value,
            vec![a.0],
            Some(Box::new(move |g, _, p| {
                vec![g * &p[0].mapv(|v| c * v.powf(c - T::one()))]
            })),
        )
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.mapv(|v| v.ln());
        self.push(
            "log",
            value,
            vec![a.0],
            Some(Box::new(|g, _, p| vec![g / p[0]])),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (a2, b2) = match (
            va.view().into_dimensionality::<Ix2>(),
            vb.view().into_dimensionality::<Ix2>(),
        ) {
            (Ok(x), Ok(y)) if x.ncols() == y.nrows() => (x, y),
            _ => return mismatch("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())),
        };
        let value = a2.dot(&b2).into_dyn();
        self.push(
            "matmul",
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, p| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matmul grad is 2-d");
                let a2 = p[0].view().into_dimensionality::<Ix2>().expect("checked");
                let b2 = p[1].view().into_dimensionality::<Ix2>().expect("checked");
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Matrix [r, c] times vector [c] -> [r].
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let vm = &self.nodes[m.0].value;
        let vv = &self.nodes[v.0].value;
        let (m2, v1) = match (
            vm.view().into_dimensionality::<Ix2>(),
            vv.view().into_dimensionality::<Ix1>(),
        ) {
            (Ok(x), Ok(y)) if x.ncols() == y.len() => (x, y),
            _ => return mismatch("matvec", format!("{:?} x {:?}", vm.shape(), vv.shape())),
        };
        let value = m2.dot(&v1).into_dyn();
        self.push(
            "matvec",
            value,
            vec![m.0, v.0],
            Some(Box::new(|g, _, p| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("matvec grad is 1-d");
                let m2 = p[0].view().into_dimensionality::<Ix2>().expect("checked");
                let v1 = p[1].view().into_dimensionality::<Ix1>().expect("checked");
                let mut dm = ndarray::Array2::<T>::zeros((m2.nrows(), m2.ncols()));
                for i in 0..m2.nrows() {
                    for j in 0..m2.ncols() {
                        dm[(i, j)] = g1[i] * v1[j];
                    }
                }
                vec![dm.into_dyn(), m2.t().dot(&g1).into_dyn()]
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let a2 = match va.view().into_dimensionality::<Ix2>() {
            Ok(x) => x,
            Err(_) => return mismatch("transpose", format!("{:?} is not 2-d", va.shape())),
        };
        let value = a2.t().to_owned().into_dyn();
        self.push(
            "transpose",
            value,
            vec![a.0],
            Some(Box::new(|g, _, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                vec![g2.t().to_owned().into_dyn()]
            })),
        )
    }

    /// Strided valid 1-d convolution: x [in_ch, t], w [out_ch, in_ch, k].
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let (x2, w3) = match (
            vx.view().into_dimensionality::<Ix2>(),
            vw.view().into_dimensionality::<Ix3>(),
        ) {
            (Ok(a), Ok(b)) if a.nrows() == b.shape()[1] => (a, b),
            _ => return mismatch("conv1d", format!("x {:?}, w {:?}", vx.shape(), vw.shape())),
        };
        let (in_ch, t) = (x2.nrows(), x2.ncols());
        let (out_ch, k) = (w3.shape()[0], w3.shape()[2]);
        if stride == 0 || t < k {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: format!("input length {t} shorter than kernel {k} (stride {stride})"),
            });
        }
        let t_out = (t - k) / stride + 1;
        let mut out = ndarray::Array2::<T>::zeros((out_ch, t_out));
        for o in 0..out_ch {
            for to in 0..t_out {
                let mut acc = T::zero();
                let base = to * stride;
                for ci in 0..in_ch {
                    for j in 0..k {
                        acc += x2[(ci, base + j)] * w3[(o, ci, j)];
                    }
                }
                out[(o, to)] = acc;
            }
        }
        self.push(
            "conv1d",
            out.into_dyn(),
            vec![x.0, w.0],
            Some(Box::new(move |g, _, p| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let x2 = p[0].view().into_dimensionality::<Ix2>().expect("checked");
                let w3 = p[1].view().into_dimensionality::<Ix3>().expect("checked");
                let (in_ch, t) = (x2.nrows(), x2.ncols());
                let (out_ch, k) = (w3.shape()[0], w3.shape()[2]);
                let t_out = g2.ncols();
                let mut dx = ndarray::Array2::<T>::zeros((in_ch, t));
                let mut dw = ndarray::Array3::<T>::zeros((out_ch, in_ch, k));
                for o in 0..out_ch {
                    for to in 0..t_out {
                        let go = g2[(o, to)];
                        let base = to * stride;
                        for ci in 0..in_ch {
                            for j in 0..k {
                                dx[(ci, base + j)] += go * w3[(o, ci, j)];
                                dw[(o, ci, j)] += go * x2[(ci, base + j)];
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dw.into_dyn()]
            })),
        )
    }

    /// Add v[j] to every row: x [r, c] + v [c].
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        let (x2, v1) = match (
            vx.view().into_dimensionality::<Ix2>(),
            vv.view().into_dimensionality::<Ix1>(),
        ) {
            (Ok(a), Ok(b)) if a.ncols() == b.len() => (a, b),
            _ => return mismatch("add_row_vec", format!("{:?} + {:?}", vx.shape(), vv.shape())),
        };
        let value = (&x2 + &v1).into_dyn();
        self.push(
            "add_row_vec",
            value,
            vec![x.0, v.0],
            Some(Box::new(|g, _, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Add v[i] to every column: x [r, c] + v [r].
    pub fn add_col_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        let (x2, v1) = match (
            vx.view().into_dimensionality::<Ix2>(),
            vv.view().into_dimensionality::<Ix1>(),
        ) {
            (Ok(a), Ok(b)) if a.nrows() == b.len() => (a, b),
            _ => return mismatch("add_col_vec", format!("{:?} + {:?}", vx.shape(), vv.shape())),
        };
        let mut value = x2.to_owned();
        for (mut row, &b) in value.rows_mut().into_iter().zip(v1.iter()) {
            row.mapv_inplace(|a| a + b);
        }
        self.push(
            "add_col_vec",
            value.into_dyn(),
            vec![x.0, v.0],
            Some(Box::new(|g, _, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                vec![g.clone(), g2.sum_axis(Axis(1)).into_dyn()]
            })),
        )
    }

    /// Multiply row i by v[i]: x [r, c], v [r].
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        let (x2, v1) = match (
            vx.view().into_dimensionality::<Ix2>(),
            vv.view().into_dimensionality::<Ix1>(),
        ) {
            (Ok(a), Ok(b)) if a.nrows() == b.len() => (a, b),
            _ => return mismatch("scale_rows", format!("{:?} * {:?}", vx.shape(), vv.shape())),
        };
        let mut value = x2.to_owned();
        for (mut row, &s) in value.rows_mut().into_iter().zip(v1.iter()) {
            row.mapv_inplace(|a| a * s);
        }
        self.push(
            "scale_rows",
            value.into_dyn(),
            vec![x.0, v.0],
            Some(Box::new(|g, _, p| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let x2 = p[0].view().into_dimensionality::<Ix2>().expect("checked");
                let v1 = p[1].view().into_dimensionality::<Ix1>().expect("checked");
                let mut dx = g2.to_owned();
                for (mut row, &s) in dx.rows_mut().into_iter().zip(v1.iter()) {
                    row.mapv_inplace(|a| a * s);
                }
                let mut dv = ndarray::Array1::<T>::zeros(v1.len());
                for i in 0..v1.len() {
                    let mut acc = T::zero();
                    for j in 0..g2.ncols() {
                        acc += g2[(i, j)] * x2[(i, j)];
                    }
                    dv[i] = acc;
                }
                vec![dx.into_dyn(), dv.into_dyn()]
            })),
        )
    }

    // ---- shape ops ----

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.ndim() != vb.ndim() || axis >= va.ndim() {
            return mismatch("concat", format!("{:?} ++ {:?} on axis {axis}", va.shape(), vb.shape()));
        }
        let value = match concatenate(Axis(axis), &[va.view(), vb.view()]) {
            Ok(v) => v,
            Err(e) => return mismatch("concat", e.to_string()),
        };
        let split = va.shape()[axis];
        self.push(
            "concat",
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, _, p| {
                let total = g.shape()[axis];
                let ga = g
                    .slice_axis(Axis(axis), Slice::from(0..split))
                    .to_owned();
                let gb = g
                    .slice_axis(Axis(axis), Slice::from(split..total))
                    .to_owned();
                debug_assert_eq!(ga.shape(), p[0].shape());
                debug_assert_eq!(gb.shape(), p[1].shape());
                vec![ga, gb]
            })),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if axis >= va.ndim() || end > va.shape()[axis] || start >= end {
            return mismatch(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", va.shape()),
            );
        }
        let value = va.slice_axis(Axis(axis), Slice::from(start..end)).to_owned();
        self.push(
            "slice",
            value,
            vec![a.0],
            Some(Box::new(move |g, _, p| {
                let mut dx = ArrayD::<T>::zeros(p[0].raw_dim());
                dx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                vec![dx]
            })),
        )
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.len() {
            return mismatch("reshape", format!("{:?} -> {:?}", va.shape(), shape));
        }
        let value = va
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("length checked");
        self.push(
            "reshape",
            value,
            vec![a.0],
            Some(Box::new(|g, _, p| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(p[0].raw_dim())
                    .expect("same length")]
            })),
        )
    }

    /// Reverse row order of a 2-d tensor.
    pub fn reverse_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.ndim() != 2 {
            return mismatch("reverse_rows", format!("{:?} is not 2-d", va.shape()));
        }
        let value = va.slice_axis(Axis(0), Slice::new(0, None, -1)).to_owned();
        self.push(
            "reverse_rows",
            value,
            vec![a.0],
            Some(Box::new(|g, _, _| {
                vec![g.slice_axis(Axis(0), Slice::new(0, None, -1)).to_owned()]
            })),
        )
    }

    /// Stack k vectors of length c into a [k, c] matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "stack_rows",
                msg: "no rows".into(),
            });
        }
        let c = self.nodes[rows[0].0].value.len();
        let mut value = ndarray::Array2::<T>::zeros((rows.len(), c));
        for (i, &r) in rows.iter().enumerate() {
            let v = &self.nodes[r.0].value;
            let v1 = match v.view().into_dimensionality::<Ix1>() {
                Ok(x) if x.len() == c => x,
                _ => return mismatch("stack_rows", format!("row {i} has shape {:?}", v.shape())),
            };
            value.row_mut(i).assign(&v1);
        }
        self.push(
            "stack_rows",
            value.into_dyn(),
            rows.iter().map(|v| v.0).collect(),
            Some(Box::new(|g, _, p| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                (0..p.len())
                    .map(|i| g2.row(i).to_owned().into_dyn())
                    .collect()
            })),
        )
    }

    // ---- gather / scatter ----

    /// Select rows of x by index; duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let x2 = match vx.view().into_dimensionality::<Ix2>() {
            Ok(a) => a,
            Err(_) => return mismatch("gather_rows", format!("{:?} is not 2-d", vx.shape())),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= x2.nrows()) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {} rows", x2.nrows()),
            });
        }
        let mut value = ndarray::Array2::<T>::zeros((indices.len(), x2.ncols()));
        for (i, &src) in indices.iter().enumerate() {
            value.row_mut(i).assign(&x2.row(src));
        }
        let idx = indices.to_vec();
        self.push(
            "gather_rows",
            value.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g, _, p| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let shape = p[0].shape();
                let mut dx = ndarray::Array2::<T>::zeros((shape[0], shape[1]));
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(src);
                    row += &g2.row(i);
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Pick one entry per (row, col) pair from a matrix into a vector.
    pub fn gather_entries(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let x2 = match vx.view().into_dimensionality::<Ix2>() {
            Ok(a) => a,
            Err(_) => return mismatch("gather_entries", format!("{:?} is not 2-d", vx.shape())),
        };
        for &(r, c) in coords {
            if r >= x2.nrows() || c >= x2.ncols() {
                return Err(TensorError::Invalid {
                    op: "gather_entries",
                    msg: format!("({r},{c}) out of range for {:?}", vx.shape()),
                });
            }
        }
        let value =
            ndarray::Array1::from_iter(coords.iter().map(|&(r, c)| x2[(r, c)])).into_dyn();
        let coords = coords.to_vec();
        self.push(
            "gather_entries",
            value,
            vec![x.0],
            Some(Box::new(move |g, _, p| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("1-d");
                let shape = p[0].shape();
                let mut dx = ndarray::Array2::<T>::zeros((shape[0], shape[1]));
                for (i, &(r, c)) in coords.iter().enumerate() {
                    dx[(r, c)] += g1[i];
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Table lookup of whole rows: table [n, d], ids -> [len(ids), d].
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Scalar-table gather: values [n] 1-d, idx matrix -> matrix of the
    /// same shape as idx.
    pub fn gather(&mut self, values: Var, idx: &ndarray::Array2<usize>) -> Result<Var> {
        let vv = &self.nodes[values.0].value;
        let v1 = match vv.view().into_dimensionality::<Ix1>() {
            Ok(a) => a,
            Err(_) => return mismatch("gather", format!("{:?} is not 1-d", vv.shape())),
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= v1.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {} values", v1.len()),
            });
        }
        let value = idx.mapv(|i| v1[i]).into_dyn();
        let idx = idx.clone();
        self.push(
            "gather",
            value,
            vec![values.0],
            Some(Box::new(move |g, _, p| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let mut dv = ndarray::Array1::<T>::zeros(p[0].len());
                for (gi, &i) in g2.iter().zip(idx.iter()) {
                    dv[i] += *gi;
                }
                vec![dv.into_dyn()]
            })),
        )
    }

    /// Replace the listed rows of x with the embedding vector; all other
    /// rows pass through bit-identically.
    pub fn mask_rows(&mut self, x: Var, emb: Var, indices: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let ve = &self.nodes[emb.0].value;
        let (x2, e1) = match (
            vx.view().into_dimensionality::<Ix2>(),
            ve.view().into_dimensionality::<Ix1>(),
        ) {
            (Ok(a), Ok(b)) if a.ncols() == b.len() => (a, b),
            _ => return mismatch("mask_rows", format!("x {:?}, emb {:?}", vx.shape(), ve.shape())),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= x2.nrows()) {
            return Err(TensorError::Invalid {
                op: "mask_rows",
                msg: format!("mask index {bad} out of range for {} frames", x2.nrows()),
            });
        }
        let mut value = x2.to_owned();
        for &i in indices {
            value.row_mut(i).assign(&e1);
        }
        let idx = indices.to_vec();
        self.push(
            "mask_rows",
            value.into_dyn(),
            vec![x.0, emb.0],
            Some(Box::new(move |g, _, p| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let mut dx = g2.to_owned();
                let mut de = ndarray::Array1::<T>::zeros(p[1].len());
                for &i in &idx {
                    de += &g2.row(i);
                    dx.row_mut(i).fill(T::zero());
                }
                vec![dx.into_dyn(), de.into_dyn()]
            })),
        )
    }

    // ---- lane-wise ops ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if axis >= va.ndim() {
            return mismatch("softmax", format!("axis {axis} of {:?}", va.shape()));
        }
        let mut value = va.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        self.push(
            "softmax",
            value,
            vec![a.0],
            Some(Box::new(move |g, y, _| {
                let mut dx = g.clone();
                Zip::from(dx.lanes_mut(Axis(axis)))
                    .and(y.lanes(Axis(axis)))
                    .for_each(|mut glane, ylane| {
                        let dot: T = glane
                            .iter()
                            .zip(ylane.iter())
                            .map(|(&gi, &yi)| gi * yi)
                            .sum();
                        for (gi, &yi) in glane.iter_mut().zip(ylane.iter()) {
                            *gi = yi * (*gi - dot);
                        }
                    });
                vec![dx]
            })),
        )
    }

    /// Normalize each lane along `axis` to (x - mean) / sqrt(var + eps),
    /// then apply elementwise gain and bias of the lane length.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let eps = T::from_f64(1e-5);
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gain.0].value;
        let vb = &self.nodes[bias.0].value;
        if axis >= vx.ndim() {
            return mismatch("layernorm", format!("axis {axis} of {:?}", vx.shape()));
        }
        let lane_len = vx.shape()[axis];
        if vg.len() != lane_len || vb.len() != lane_len {
            return mismatch(
                "layernorm",
                format!(
                    "gain {:?} / bias {:?} vs lane length {lane_len}",
                    vg.shape(),
                    vb.shape()
                ),
            );
        }
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("1-d gain");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("1-d bias");
        let n = T::from_f64(lane_len as f64);
        let mut value = vx.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let mean = lane.sum() / n;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g1[i] + b1[i];
            }
        }
        self.push(
            "layernorm",
            value,
            vec![x.0, gain.0, bias.0],
            Some(Box::new(move |g, _, p| {
                let xv = p[0];
                let gainv = p[1].view().into_dimensionality::<Ix1>().expect("1-d");
                let lane_len = xv.shape()[axis];
                let n = T::from_f64(lane_len as f64);
                let mut dx = ArrayD::<T>::zeros(xv.raw_dim());
                let mut dgain = ndarray::Array1::<T>::zeros(lane_len);
                let mut dbias = ndarray::Array1::<T>::zeros(lane_len);
                Zip::from(dx.lanes_mut(Axis(axis)))
                    .and(xv.lanes(Axis(axis)))
                    .and(g.lanes(Axis(axis)))
                    .for_each(|mut dlane, xlane, glane| {
                        let mean = xlane.sum() / n;
                        let var =
                            xlane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                        let inv = (var + eps).sqrt().recip();
                        let xhat: Vec<T> =
                            xlane.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<T> = glane
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| gi * gainv[i])
                            .collect();
                        let mean_dxhat = dxhat.iter().cloned().sum::<T>() / n;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<T>()
                            / n;
                        for i in 0..lane_len {
                            dlane[i] =
                                inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                            dgain[i] += glane[i] * xhat[i];
                            dbias[i] += glane[i];
                        }
                    });
                vec![dx, dgain.into_dyn(), dbias.into_dyn()]
            })),
        )
    }

    /// Divide each lane along `axis` by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if axis >= va.ndim() {
            return mismatch("l2_normalize", format!("axis {axis} of {:?}", va.shape()));
        }
        let mut value = va.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let norm = lane.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(TensorError::Invalid {
                    op: "l2_normalize",
                    msg: "zero-norm lane".into(),
                });
            }
            lane.mapv_inplace(|v| v / norm);
        }
        self.push(
            "l2_normalize",
            value,
            vec![a.0],
            Some(Box::new(move |g, y, p| {
                let mut dx = ArrayD::<T>::zeros(p[0].raw_dim());
                Zip::from(dx.lanes_mut(Axis(axis)))
                    .and(p[0].lanes(Axis(axis)))
                    .and(y.lanes(Axis(axis)))
                    .and(g.lanes(Axis(axis)))
                    .for_each(|mut dlane, xlane, ylane, glane| {
                        let norm = xlane.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let dot: T = glane
                            .iter()
                            .zip(ylane.iter())
                            .map(|(&gi, &yi)| gi * yi)
                            .sum();
                        for i in 0..dlane.len() {
                            dlane[i] = (glane[i] - ylane[i] * dot) / norm;
                        }
                    });
                vec![dx]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(
            "sum_all",
            value,
            vec![a.0],
            Some(Box::new(|g, _, p| {
                let gv = *g.iter().next().expect("scalar");
                vec![ArrayD::from_elem(p[0].raw_dim(), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean_all",
                msg: "empty tensor".into(),
            });
        }
        let inv = T::from_f64(1.0 / n as f64);
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum() * inv);
        self.push(
            "mean_all",
            value,
            vec![a.0],
            Some(Box::new(move |g, _, p| {
                let gv = *g.iter().next().expect("scalar");
                vec![ArrayD::from_elem(p[0].raw_dim(), gv * inv)]
            })),
        )
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if axis >= va.ndim() {
            return mismatch("sum_axis", format!("axis {axis} of {:?}", va.shape()));
        }
        let value = va.sum_axis(Axis(axis));
        self.push(
            "sum_axis",
            value,
            vec![a.0],
            Some(Box::new(move |g, _, p| {
                let gexp = g.clone().insert_axis(Axis(axis));
                let dx = gexp
                    .broadcast(p[0].raw_dim())
                    .expect("broadcastable")
                    .to_owned();
                vec![dx]
            })),
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.nodes[a.0].value.shape().get(axis).copied().unwrap_or(0);
        if n == 0 {
            return mismatch("mean_axis", format!("axis {axis} of {:?}", self.shape(a)));
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Cosine similarity of two 1-d vectors; differentiable through both.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (a1, b1) = match (
            va.view().into_dimensionality::<Ix1>(),
            vb.view().into_dimensionality::<Ix1>(),
        ) {
            (Ok(x), Ok(y)) if x.len() == y.len() => (x, y),
            _ => {
                return mismatch(
                    "cosine_similarity",
                    format!("{:?} vs {:?}", va.shape(), vb.shape()),
                )
            }
        };
        let ra = a1.iter().map(|&v| v * v).sum::<T>().sqrt();
        let rb = b1.iter().map(|&v| v * v).sum::<T>().sqrt();
        if ra == T::zero() || rb == T::zero() {
            return Err(TensorError::ZeroNorm);
        }
        let y = a1.dot(&b1) / (ra * rb);
        let value = ArrayD::from_elem(IxDyn(&[]), y);
        self.push(
            "cosine_similarity",
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, yv, p| {
                let gv = *g.iter().next().expect("scalar");
                let y = *yv.iter().next().expect("scalar");
                let a1 = p[0].view().into_dimensionality::<Ix1>().expect("1-d");
                let b1 = p[1].view().into_dimensionality::<Ix1>().expect("1-d");
                let ra = a1.iter().map(|&v| v * v).sum::<T>().sqrt();
                let rb = b1.iter().map(|&v| v * v).sum::<T>().sqrt();
                let da = ndarray::Array1::from_iter(
                    a1.iter()
                        .zip(b1.iter())
                        .map(|(&ai, &bi)| gv * (bi / (ra * rb) - y * ai / (ra * ra))),
                );
                let db = ndarray::Array1::from_iter(
                    a1.iter()
                        .zip(b1.iter())
                        .map(|(&ai, &bi)| gv * (ai / (ra * rb) - y * bi / (rb * rb))),
                );
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn dyn1(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(dyn1(&[3.0, 3.0, 3.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_of_sum_of_squares_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.input(dyn1(&[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad.as_slice().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn forward_is_pure_across_repeated_runs() {
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.input(arr2(&[[0.3, -1.2], [0.7, 2.0]]).into_dyn());
            let w = g.input(arr2(&[[0.5, 0.1], [-0.4, 0.9]]).into_dyn());
            let h = g.matmul(x, w).unwrap();
            let a = g.gelu(h).unwrap();
            let s = g.softmax(a, 1).unwrap();
            let l = g.mean_all(s).unwrap();
            g.scalar(l)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn off_path_nodes_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(dyn1(&[1.0, 2.0]));
        let unused = g.input(dyn1(&[5.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.input(dyn1(&[1.0, 2.0]));
        let b = g.input(dyn1(&[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.input(dyn1(&[-1.0]));
        let err = g.log(a).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "log" }), "{err}");
    }

    #[test]
    fn cosine_similarity_matches_hand_values() {
        let mut g = Graph::<f64>::new();
        let a = g.input(dyn1(&[0.6, 0.8]));
        let same = g.cosine_similarity(a, a).unwrap();
        assert!((g.scalar(same) - 1.0).abs() < 1e-12);

        let e1 = g.input(dyn1(&[1.0, 0.0]));
        let e2 = g.input(dyn1(&[0.0, 1.0]));
        let orth = g.cosine_similarity(e1, e2).unwrap();
        assert!(g.scalar(orth).abs() < 1e-15);

        let z = g.input(dyn1(&[0.0, 0.0]));
        assert!(matches!(
            g.cosine_similarity(e1, z),
            Err(TensorError::ZeroNorm)
        ));
    }

    #[test]
    fn mask_rows_touches_exactly_the_masked_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.input(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn());
        let emb = g.input(dyn1(&[9.0, 9.5]));
        let y = g.mask_rows(x, emb, &[1]).unwrap();
        let out = g.value(y);
        assert_eq!(out[[0, 0]].to_bits(), 1.0f64.to_bits());
        assert_eq!(out[[1, 0]], 9.0);
        assert_eq!(out[[2, 1]].to_bits(), 6.0f64.to_bits());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(dyn1(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }
}
