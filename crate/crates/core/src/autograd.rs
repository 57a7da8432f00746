//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Every tensor is a 2-D matrix; scalars are `1×1`.
//!
//! The loss operations (`focal_loss`, `masked_mse`, `grouped_bce`) are fused:
//! they compute their local gradient during the forward pass and cache it, so
//! the backward pass is a single scaled copy.

use ndarray::{s, Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array2<f64>),
    AddConst(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Unfold3(Var),
    MaxPool2(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    MeanSquare(Var),
    Reverse(Var, f64),
    Combine(Vec<(Var, f64)>),
    Cached(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// Binary cross entropy of a logit against a 0/1 label.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    // -[y log σ(x) + (1-y) log(1-σ(x))] = softplus(x) - y x
    softplus(logit) - label * logit
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite value in {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let v = self.value(x) + r;
        self.push(v, Op::AddRow(x, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise product with a constant; the constant may be a column
    /// (`n×1`) that broadcasts across columns, which is how row masks apply.
    pub fn mul_const(&mut self, x: Var, c: Array2<f64>) -> Var {
        let v = self.value(x) * &c;
        self.push(v, Op::MulConst(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        let v = self.value(x) + c;
        self.push(v, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) * k;
        self.push(v, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(softplus);
        self.push(v, Op::Softplus(x))
    }

    /// `T×F` to `T×3F`: row t holds `[x[t-1] | x[t] | x[t+1]]` with zeros past
    /// either end. Multiplying by a `3F×G` weight gives a kernel-3 convolution.
    pub fn unfold3(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (t, f) = xv.dim();
        let mut out = Array2::zeros((t, 3 * f));
        if t > 1 {
            out.slice_mut(s![1.., 0..f]).assign(&xv.slice(s![..t - 1, ..]));
            out.slice_mut(s![..t - 1, 2 * f..]).assign(&xv.slice(s![1.., ..]));
        }
        out.slice_mut(s![.., f..2 * f]).assign(xv);
        self.push(out, Op::Unfold3(x))
    }

    /// Stride-2 max pooling along rows (window 2). Requires an even row count.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (t, f) = xv.dim();
        assert!(t % 2 == 0, "max_pool2 needs an even length, got {t}");
        let mut out = Array2::zeros((t / 2, f));
        let mut arg = Vec::with_capacity(t / 2 * f);
        for i in 0..t / 2 {
            for j in 0..f {
                let a = xv[[2 * i, j]];
                let b = xv[[2 * i + 1, j]];
                if b > a {
                    out[[i, j]] = b;
                    arg.push(2 * i + 1);
                } else {
                    out[[i, j]] = a;
                    arg.push(2 * i);
                }
            }
        }
        self.push(out, Op::MaxPool2(x, arg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows by index; indices may repeat (the backward pass sums).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let v = self.value(x).select(Axis(0), &idx);
        self.push(v, Op::GatherRows(x, idx))
    }

    /// Column means, `n×f` to `1×f`. Requires at least one row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    /// Mean of squared entries, to a scalar.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len().max(1) as f64;
        let v = xv.iter().map(|a| a * a).sum::<f64>() / n;
        self.push(Array2::from_elem((1, 1), v), Op::MeanSquare(x))
    }

    /// Gradient reversal: identity forward, `-lambda * grad` backward.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Reverse(x, lambda))
    }

    /// Weighted sum of equally shaped nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut v = self.value(terms[0].0) * terms[0].1;
        for (t, w) in &terms[1..] {
            v.scaled_add(*w, self.value(*t));
        }
        self.push(v, Op::Combine(terms.to_vec()))
    }

    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        if terms.is_empty() {
            return self.constant_scalar(0.0);
        }
        let w: Vec<_> = terms.iter().map(|t| (*t, 1.0)).collect();
        self.combine(&w)
    }

    /// Sigmoid focal loss averaged over the valid anchor-class entries.
    ///
    /// `targets[t]` is 0 for background (all-zero row) or `c` in `1..=C` for a
    /// one-hot row at column `c-1`. Rows with `valid[t] == false` are ignored.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &[usize],
        valid: &[bool],
        alpha: f64,
        gamma: f64,
    ) -> Var {
        let x = self.value(logits);
        let (t, c) = x.dim();
        assert_eq!(targets.len(), t);
        assert_eq!(valid.len(), t);
        let n_valid = valid.iter().filter(|v| **v).count();
        let mut grad = Array2::zeros((t, c));
        if n_valid == 0 {
            return self.push(Array2::zeros((1, 1)), Op::Cached(logits, grad));
        }
        let denom = (n_valid * c) as f64;
        let mut total = 0.0;
        for r in 0..t {
            if !valid[r] {
                continue;
            }
            for k in 0..c {
                let y = if targets[r] == k + 1 { 1.0 } else { 0.0 };
                let (l, d) = focal_entry(x[[r, k]], y, alpha, gamma);
                total += l;
                grad[[r, k]] = d / denom;
            }
        }
        self.push(Array2::from_elem((1, 1), total / denom), Op::Cached(logits, grad))
    }

    /// Mean squared error over the entries of the rows flagged in `rows`;
    /// zero when no row is flagged.
    pub fn masked_mse(&mut self, pred: Var, target: &Array2<f64>, rows: &[bool]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        assert_eq!(rows.len(), p.nrows());
        let n_rows = rows.iter().filter(|r| **r).count();
        let mut grad = Array2::zeros(p.dim());
        if n_rows == 0 {
            return self.push(Array2::zeros((1, 1)), Op::Cached(pred, grad));
        }
        let denom = (n_rows * p.ncols()) as f64;
        let mut total = 0.0;
        for (r, keep) in rows.iter().enumerate() {
            if !keep {
                continue;
            }
            for k in 0..p.ncols() {
                let d = p[[r, k]] - target[[r, k]];
                total += d * d;
                grad[[r, k]] = 2.0 * d / denom;
            }
        }
        self.push(Array2::from_elem((1, 1), total / denom), Op::Cached(pred, grad))
    }

    /// Sum over groups of the mean binary cross entropy within each group.
    ///
    /// `logits` is `n×1`; `groups[r]` names the group of row `r` (or `None`
    /// to skip it); every row is scored against the same `label`. Empty
    /// groups contribute 0.
    pub fn grouped_bce(
        &mut self,
        logits: Var,
        groups: &[Option<usize>],
        n_groups: usize,
        label: f64,
    ) -> Var {
        let x = self.value(logits);
        assert_eq!(x.ncols(), 1);
        assert_eq!(groups.len(), x.nrows());
        let mut counts = vec![0usize; n_groups];
        for g in groups.iter().flatten() {
            counts[*g] += 1;
        }
        let mut grad = Array2::zeros(x.dim());
        let mut total = 0.0;
        for (r, g) in groups.iter().enumerate() {
            if let Some(g) = g {
                let n = counts[*g] as f64;
                let z = x[[r, 0]];
                total += bce_with_logit(z, label) / n;
                grad[[r, 0]] = (sigmoid(z) - label) / n;
            }
        }
        self.push(Array2::from_elem((1, 1), total), Op::Cached(logits, grad))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(x, c) => accumulate(&mut grads, *x, g * c),
                Op::AddConst(x) => accumulate(&mut grads, *x, g),
                Op::Scale(x, k) => accumulate(&mut grads, *x, g * *k),
                Op::Relu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |d, v| {
                        if *v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(&node.value, |d, y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |d, v| *d *= sigmoid(*v));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Unfold3(x) => {
                    let (t, f3) = g.dim();
                    let f = f3 / 3;
                    let mut gx = g.slice(s![.., f..2 * f]).to_owned();
                    if t > 1 {
                        {
                            let mut head = gx.slice_mut(s![..t - 1, ..]);
                            head += &g.slice(s![1.., 0..f]);
                        }
                        let mut tail = gx.slice_mut(s![1.., ..]);
                        tail += &g.slice(s![..t - 1, 2 * f..]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxPool2(x, arg) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    let f = g.ncols();
                    for ((i, j), d) in g.indexed_iter() {
                        gx[[arg[i * f + j], j]] += *d;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let fa = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..fa]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., fa..]).to_owned());
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (r, src) in idx.iter().enumerate() {
                        let mut row = gx.row_mut(*src);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let n = self.value(*x).nrows();
                    let row = g.row(0).to_owned() / n as f64;
                    let gx = row.broadcast((n, row.len())).expect("broadcast").to_owned();
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanSquare(x) => {
                    let xv = self.value(*x);
                    let k = 2.0 * g[[0, 0]] / xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, xv * k);
                }
                Op::Reverse(x, lambda) => accumulate(&mut grads, *x, g * -*lambda),
                Op::Combine(terms) => {
                    for (t, w) in terms {
                        accumulate(&mut grads, *t, &g * *w);
                    }
                }
                Op::Cached(x, local) => accumulate(&mut grads, *x, local * g[[0, 0]]),
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sigmoid focal loss and its derivative with respect to the logit for a
/// single entry with binary target `y`.
pub fn focal_entry(x: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let (pt, at, dpt_dx) = if y > 0.5 {
        (p, alpha, p * (1.0 - p))
    } else {
        (1.0 - p, 1.0 - alpha, -p * (1.0 - p))
    };
    // -log(pt) computed from the logit for stability.
    let nll = if y > 0.5 { softplus(-x) } else { softplus(x) };
    let one_m = 1.0 - pt;
    let mod_ = one_m.powf(gamma);
    let loss = at * mod_ * nll;
    // d/dx [ (1-pt)^g * nll ] = -g (1-pt)^(g-1) dpt nll + (1-pt)^g * dnll
    let dnll = if y > 0.5 { p - 1.0 } else { p };
    let dmod = if one_m > 0.0 {
        -gamma * one_m.powf(gamma - 1.0) * dpt_dx
    } else {
        0.0
    };
    (loss, at * (dmod * nll + mod_ * dnll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Array2<f64>) {
        let f = |xv: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.leaf(xv.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let numeric = numeric_grad(f, &x);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let err = (a - n).abs() / (a.abs().max(n.abs()).max(1e-6));
            assert!(err < 1e-4 || (a - n).abs() < 1e-8, "analytic {a} numeric {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5], [-0.8, 0.9, 0.2], [0.05, -0.3, 1.4]]
    }

    #[test]
    fn unfold_then_matmul_matches_fd() {
        let w = Array2::from_shape_fn((9, 2), |(i, j)| ((i * 2 + j) as f64 * 0.37).sin());
        check(
            move |g, x| {
                let u = g.unfold3(x);
                let wv = g.leaf(w.clone());
                let y = g.matmul(u, wv);
                let y = g.softplus(y);
                g.mean_square(y)
            },
            sample(),
        );
    }

    #[test]
    fn pool_gather_concat_fd() {
        check(
            |g, x| {
                let p = g.max_pool2(x);
                let r = g.gather_rows(x, vec![3, 0, 0]);
                let c = g.concat_rows(&[p, r]);
                let s = g.sigmoid(c);
                let m = g.mean_rows(s);
                let cc = g.concat_cols(m, m);
                g.mean_square(cc)
            },
            sample(),
        );
    }

    #[test]
    fn focal_and_bce_fd() {
        check(|g, x| g.focal_loss(x, &[0, 2, 1, 3], &[true, true, false, true], 0.25, 2.0), sample());
        check(
            |g, x| {
                let col = g.gather_rows(x, vec![0, 1, 2, 3]);
                let w = g.leaf(array![[1.0], [-0.5], [0.25]]);
                let z = g.matmul(col, w);
                g.grouped_bce(z, &[Some(0), None, Some(1), Some(1)], 3, 1.0)
            },
            sample(),
        );
    }

    #[test]
    fn reversal_negates() {
        let x = sample();
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let r = g.grad_reverse(v, 0.5);
        let out = g.mean_square(r);
        let grads = g.backward(out);
        let expected = &x * (-0.5 * 2.0 / x.len() as f64);
        for (a, b) in grads.get(v).unwrap().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_entry_reference_value() {
        let (l, _) = focal_entry(0.0, 1.0, 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }
}
