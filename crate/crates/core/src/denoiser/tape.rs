//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Rows are batch items (or tokens), columns are channels. Every op records
//! its inputs; [`Tape::backward`] walks the nodes in reverse creation order.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position of the node on its tape; indexes the vector returned by
    /// [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a broadcast `1×m` row.
    AddRow(Var, Var),
    OnePlus(Var),
    /// Every row repeated `n` times in place: row `b` becomes rows `b*n..(b+1)*n`.
    RepeatRows(Var, usize),
    /// The whole matrix stacked `n` times.
    TileRows(Var, usize),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// Scaled dot-product attention applied independently to consecutive
    /// blocks of `block` rows. Softmax probabilities are kept for backward.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        probs: Vec<DMatrix<f64>>,
    },
    /// `scale · Σ (pred − target)²` as a `1×1` matrix.
    SquaredError {
        pred: Var,
        target: DMatrix<f64>,
        scale: f64,
    },
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
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
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1×m row");
        let mut v = self.value(a).clone();
        for mut line in v.row_iter_mut() {
            line += r;
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn one_plus(&mut self, a: Var) -> Var {
        let v = self.value(a).add_scalar(1.0);
        self.push(v, Op::OnePlus(a))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        let v = DMatrix::from_fn(src.nrows() * n, src.ncols(), |i, j| src[(i / n, j)]);
        self.push(v, Op::RepeatRows(a, n))
    }

    pub fn tile_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        let r = src.nrows();
        let v = DMatrix::from_fn(r * n, src.ncols(), |i, j| src[(i % r, j)]);
        self.push(v, Op::TileRows(a, n))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, block: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let rows = qm.nrows();
        assert!(block > 0 && rows % block == 0, "attention rows must split into blocks");
        let inv = 1.0 / (qm.ncols() as f64).sqrt();
        let mut out = DMatrix::zeros(rows, vm.ncols());
        let mut probs = Vec::with_capacity(rows / block);
        for b in 0..rows / block {
            let r0 = b * block;
            let qb = qm.rows(r0, block);
            let kb = km.rows(r0, block);
            let vb = vm.rows(r0, block);
            let mut p = qb * kb.transpose() * inv;
            for mut line in p.row_iter_mut() {
                let m = line.max();
                line.apply(|x| *x = (*x - m).exp());
                let s = line.sum();
                line /= s;
            }
            out.rows_mut(r0, block).copy_from(&(&p * vb));
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, block, probs })
    }

    pub fn squared_error(&mut self, pred: Var, target: DMatrix<f64>, scale: f64) -> Var {
        let diff = self.value(pred) - &target;
        let v = DMatrix::from_element(1, 1, scale * diff.norm_squared());
        self.push(v, Op::SquaredError { pred, target, scale })
    }

    /// Gradients of the scalar `root` with respect to every node; `None`
    /// where the node does not influence the root.
    pub fn backward(&self, root: Var) -> Vec<Option<DMatrix<f64>>> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b).transpose());
                    acc(&mut grads, *b, self.value(*a).transpose() * &g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.component_mul(self.value(*b)));
                    acc(&mut grads, *b, g.component_mul(self.value(*a)));
                }
                Op::AddRow(a, row) => {
                    let s = g.row_sum();
                    acc(&mut grads, *row, DMatrix::from_iterator(1, s.len(), s.iter().copied()));
                    acc(&mut grads, *a, g.clone());
                }
                Op::OnePlus(a) => acc(&mut grads, *a, g.clone()),
                Op::RepeatRows(a, n) => {
                    let src = self.value(*a);
                    let mut ga = DMatrix::zeros(src.nrows(), src.ncols());
                    for i in 0..g.nrows() {
                        let mut line = ga.row_mut(i / n);
                        line += g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::TileRows(a, n) => {
                    let src = self.value(*a);
                    let r = src.nrows();
                    debug_assert_eq!(g.nrows(), r * n);
                    let mut ga = DMatrix::zeros(r, src.ncols());
                    for i in 0..g.nrows() {
                        let mut line = ga.row_mut(i % r);
                        line += g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let d = x.map(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, g.component_mul(&d));
                }
                Op::Sigmoid(a) => {
                    let d = node.value.map(|s| s * (1.0 - s));
                    acc(&mut grads, *a, g.component_mul(&d));
                }
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g.component_mul(&d));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::SquaredError { pred, target, scale } => {
                    let diff = self.value(*pred) - target;
                    acc(&mut grads, *pred, diff * (2.0 * scale * g[(0, 0)]));
                }
                Op::Attention { q, k, v, block, probs } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let inv = 1.0 / (qm.ncols() as f64).sqrt();
                    let mut gq = DMatrix::zeros(qm.nrows(), qm.ncols());
                    let mut gk = DMatrix::zeros(km.nrows(), km.ncols());
                    let mut gv = DMatrix::zeros(vm.nrows(), vm.ncols());
                    for (b, p) in probs.iter().enumerate() {
                        let r0 = b * block;
                        let go = g.rows(r0, *block);
                        gv.rows_mut(r0, *block).copy_from(&(p.transpose() * go));
                        let gp = go * vm.rows(r0, *block).transpose();
                        // softmax backward, row by row
                        let mut gs = p.component_mul(&gp);
                        for (i, mut line) in gs.row_iter_mut().enumerate() {
                            let dot = p.row(i).dot(&gp.row(i));
                            for (j, x) in line.iter_mut().enumerate() {
                                *x -= p[(i, j)] * dot;
                            }
                        }
                        gs *= inv;
                        gq.rows_mut(r0, *block).copy_from(&(&gs * km.rows(r0, *block)));
                        gk.rows_mut(r0, *block).copy_from(&(gs.transpose() * qm.rows(r0, *block)));
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
            }
            grads[idx] = Some(g);
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_mat(r: usize, c: usize, g: &mut rng::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng::normal(g))
    }

    /// Checks d(root)/d(leaf) against central differences for one leaf.
    fn check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: Vec<DMatrix<f64>>) {
        let run = |vals: &[DMatrix<f64>]| {
            let mut t = Tape::new();
            let leaves: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let root = build(&mut t, &leaves);
            (t, leaves, root)
        };
        let (tape, leaves, root) = run(&inputs);
        let grads = tape.backward(root);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[leaf.0].clone().unwrap_or_else(|| DMatrix::zeros(inputs[li].nrows(), inputs[li].ncols()));
            for i in 0..inputs[li].len() {
                let mut plus = inputs.clone();
                plus[li][i] += h;
                let mut minus = inputs.clone();
                minus[li][i] -= h;
                let (tp, _, rp) = run(&plus);
                let (tm, _, rm) = run(&minus);
                let fd = (tp.value(rp)[(0, 0)] - tm.value(rm)[(0, 0)]) / (2.0 * h);
                let a = analytic[i];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(err < 1e-5, "leaf {li} entry {i}: fd {fd} vs analytic {a}");
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut g = rng::seeded(1);
        let target = rand_mat(3, 4, &mut g);
        check(
            move |t, l| {
                let a = t.silu(l[0]);
                let b = t.sigmoid(l[1]);
                let c = t.tanh(l[2]);
                let ab = t.mul(a, b);
                let abc = t.sub(ab, c);
                let d = t.one_plus(abc);
                let e = t.scale(d, 0.7);
                let f = t.add(e, l[0]);
                t.squared_error(f, target.clone(), 0.5)
            },
            vec![rand_mat(3, 4, &mut g), rand_mat(3, 4, &mut g), rand_mat(3, 4, &mut g)],
        );
    }

    #[test]
    fn broadcast_ops() {
        let mut g = rng::seeded(2);
        let target = rand_mat(6, 3, &mut g);
        check(
            move |t, l| {
                let x = t.matmul(l[0], l[1]);
                let x = t.add_row(x, l[2]);
                let r = t.repeat_rows(l[3], 3);
                let p = t.tile_rows(l[4], 2);
                let x = t.mul(x, r);
                let x = t.add(x, p);
                t.squared_error(x, target.clone(), 1.0)
            },
            vec![
                rand_mat(6, 4, &mut g),
                rand_mat(4, 3, &mut g),
                rand_mat(1, 3, &mut g),
                rand_mat(2, 3, &mut g),
                rand_mat(3, 3, &mut g),
            ],
        );
    }

    #[test]
    fn blocked_attention() {
        let mut g = rng::seeded(3);
        let target = rand_mat(6, 2, &mut g);
        check(
            move |t, l| {
                let a = t.attention(l[0], l[1], l[2], 3);
                t.squared_error(a, target.clone(), 1.0)
            },
            vec![rand_mat(6, 4, &mut g), rand_mat(6, 4, &mut g), rand_mat(6, 2, &mut g)],
        );
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut g = rng::seeded(4);
        let mut t = Tape::new();
        let q = t.leaf(rand_mat(4, 3, &mut g));
        let k = t.leaf(rand_mat(4, 3, &mut g));
        let v = t.leaf(DMatrix::from_element(4, 2, 5.0));
        let a = t.attention(q, k, v, 2);
        assert!(t.value(a).iter().all(|x| (x - 5.0).abs() < 1e-12));
    }
}
