//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] owns every intermediate value created while it is alive.
//! [`Var`] is a copyable handle into it. Values are computed eagerly and the
//! same kernels run whether or not gradients are being recorded, so a
//! no-grad evaluation reproduces a recorded one bit for bit.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, AaptError, Result};
use crate::tensor::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate counter for the matmul, attention and conv kernels
/// executed on this thread.
pub mod counters {
    use super::MACS;

    pub fn reset() {
        MACS.with(|c| c.set(0));
    }

    pub fn macs() -> u64 {
        MACS.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        MACS.with(|c| c.set(c.get() + n));
    }
}

type Id = usize;

enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    AddRow(Id, Id),
    MulRow(Id, Id),
    Scale(Id, f32),
    AddScalar(Id),
    MatMul { a: Id, b: Id, m: usize, k: usize, n: usize },
    Silu(Id),
    Exp(Id),
    Softplus(Id),
    Tanh(Id),
    LayerNorm { a: Id, cols: usize, rstd: Vec<f32> },
    Attention { q: Id, k: Id, v: Id, mask: Arc<Vec<bool>>, heads: usize, probs: Vec<f32> },
    Rope { a: Id, cos: Arc<Vec<f32>>, sin: Arc<Vec<f32>> },
    Gather { a: Id, idx: Arc<Vec<u32>> },
    ConcatRows(Vec<Id>),
    ConcatCols { parts: Vec<Id>, widths: Vec<usize>, rows: usize },
    SliceCols { a: Id, start: usize, width: usize, cols: usize },
    SliceFlat { a: Id, start: usize },
    Reshape(Id),
    Sum(Id),
    Mean(Id),
    GroupMeanRows { a: Id, group: usize, cols: usize },
    Conv2d { x: Id, w: Id, b: Option<Id>, geom: ConvGeom },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
}

struct Node {
    value: Arc<Vec<f32>>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A graph that evaluates values only.
    pub fn no_grad() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f32>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), shape, op, needs_grad, None)
    }

    fn push_arc(&self, value: Arc<Vec<f32>>, shape: Vec<usize>, op: Op, needs_grad: bool, param: Option<usize>) -> Var<'_> {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad || matches!(op, Op::Leaf) { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, shape, op, needs_grad, param });
        Var { g: self, id: nodes.len() - 1 }
    }

    /// A value that never receives gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_arc(t.arc().clone(), t.shape().to_vec(), Op::Leaf, false, None)
    }

    /// A leaf whose gradient is reported by [`Grads::of`].
    pub fn input(&self, t: &Tensor) -> Var<'_> {
        self.push_arc(t.arc().clone(), t.shape().to_vec(), Op::Leaf, true, None)
    }

    /// A trainable parameter identified by `pid`; gradients of all leaves
    /// sharing a `pid` are summed.
    pub fn param(&self, t: &Tensor, pid: usize) -> Var<'_> {
        self.push_arc(t.arc().clone(), t.shape().to_vec(), Op::Leaf, true, Some(pid))
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn val(&self, id: Id) -> Arc<Vec<f32>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: Id) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(AaptError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Grads::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            if let Op::Leaf = node.op {
                match node.param {
                    Some(pid) => match out.params.get_mut(&pid) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            out.params.insert(pid, g.clone());
                        }
                    },
                    None => {}
                }
                out.leaves.insert(id, g);
            }
        }
        Ok(out)
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Default, Debug)]
pub struct Grads {
    params: HashMap<usize, Vec<f32>>,
    leaves: HashMap<usize, Vec<f32>>,
}

impl Grads {
    /// Gradient of a leaf created by `input` or `param`. Leaves that the loss
    /// does not reach yield `None`.
    pub fn of(&self, v: Var<'_>) -> Option<&[f32]> {
        self.leaves.get(&v.id).map(|g| g.as_slice())
    }

    /// Gradient of `v` or zeros of length `n` when unreachable.
    pub fn of_or_zero(&self, v: Var<'_>) -> Vec<f32> {
        self.of(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.numel()])
    }

    pub fn param(&self, pid: usize) -> Option<&[f32]> {
        self.params.get(&pid).map(|g| g.as_slice())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }

    /// Adds another sweep's parameter gradients into this one.
    pub fn accumulate(&mut self, other: Grads) {
        for (pid, g) in other.params {
            match self.params.get_mut(&pid) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(pid, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.params.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], nodes: &[Node], id: Id, f: impl FnOnce(&mut [f32])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id].value.len()]);
    }
    f(slot.as_mut().unwrap());
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |ga| axpy(ga, 1.0, g));
            acc(grads, nodes, *b, |gb| axpy(gb, 1.0, g));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |ga| axpy(ga, 1.0, g));
            acc(grads, nodes, *b, |gb| axpy(gb, -1.0, g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).zip(bv.iter()).for_each(|((o, &gi), &bi)| *o += gi * bi));
            acc(grads, nodes, *b, |gb| gb.iter_mut().zip(g).zip(av.iter()).for_each(|((o, &gi), &ai)| *o += gi * ai));
        }
        Op::AddRow(a, b) => {
            let cols = nodes[*b].value.len();
            acc(grads, nodes, *a, |ga| axpy(ga, 1.0, g));
            acc(grads, nodes, *b, |gb| {
                for row in g.chunks(cols) {
                    axpy(gb, 1.0, row);
                }
            });
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let cols = bv.len();
            acc(grads, nodes, *a, |ga| {
                for (go, gi) in ga.chunks_mut(cols).zip(g.chunks(cols)) {
                    for j in 0..cols {
                        go[j] += gi[j] * bv[j];
                    }
                }
            });
            acc(grads, nodes, *b, |gb| {
                for (ar, gi) in av.chunks(cols).zip(g.chunks(cols)) {
                    for j in 0..cols {
                        gb[j] += gi[j] * ar[j];
                    }
                }
            });
        }
        Op::Scale(a, s) => acc(grads, nodes, *a, |ga| axpy(ga, *s, g)),
        Op::AddScalar(a) | Op::Reshape(a) => acc(grads, nodes, *a, |ga| axpy(ga, 1.0, g)),
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            acc(grads, nodes, *a, |ga| matmul_nt_acc(ga, g, bv, *m, *k, *n));
            acc(grads, nodes, *b, |gb| matmul_tn_acc(gb, av, g, *m, *k, *n));
        }
        Op::Silu(a) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |ga| {
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                    let s = sigmoid(x);
                    *o += gi * s * (1.0 + x * (1.0 - s));
                }
            });
        }
        Op::Exp(a) => {
            let y = &node.value;
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).zip(y.iter()).for_each(|((o, &gi), &yi)| *o += gi * yi));
        }
        Op::Softplus(a) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).zip(av.iter()).for_each(|((o, &gi), &x)| *o += gi * sigmoid(x)));
        }
        Op::Tanh(a) => {
            let y = &node.value;
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).zip(y.iter()).for_each(|((o, &gi), &yi)| *o += gi * (1.0 - yi * yi)));
        }
        Op::LayerNorm { a, cols, rstd } => {
            let y = &node.value;
            let cols = *cols;
            acc(grads, nodes, *a, |ga| {
                for (r, (go, (gr, yr))) in ga.chunks_mut(cols).zip(g.chunks(cols).zip(y.chunks(cols))).enumerate() {
                    let mg = gr.iter().sum::<f32>() / cols as f32;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                    for j in 0..cols {
                        go[j] += rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            });
        }
        Op::Attention { q, k, v, mask, heads, probs } => {
            attention_backward(nodes, grads, g, *q, *k, *v, mask, *heads, probs);
        }
        Op::Rope { a, cos, sin } => {
            acc(grads, nodes, *a, |ga| {
                for p in 0..cos.len() {
                    let (c, s) = (cos[p], sin[p]);
                    let (g0, g1) = (g[2 * p], g[2 * p + 1]);
                    ga[2 * p] += g0 * c + g1 * s;
                    ga[2 * p + 1] += -g0 * s + g1 * c;
                }
            });
        }
        Op::Gather { a, idx } => {
            acc(grads, nodes, *a, |ga| {
                for (i, &src) in idx.iter().enumerate() {
                    ga[src as usize] += g[i];
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                acc(grads, nodes, p, |gp| axpy(gp, 1.0, &g[off..off + n]));
                off += n;
            }
        }
        Op::ConcatCols { parts, widths, rows } => {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                acc(grads, nodes, p, |gp| {
                    for r in 0..*rows {
                        axpy(&mut gp[r * w..(r + 1) * w], 1.0, &g[r * total + off..r * total + off + w]);
                    }
                });
                off += w;
            }
        }
        Op::SliceCols { a, start, width, cols } => {
            acc(grads, nodes, *a, |ga| {
                for (r, gr) in g.chunks(*width).enumerate() {
                    axpy(&mut ga[r * cols + start..r * cols + start + width], 1.0, gr);
                }
            });
        }
        Op::SliceFlat { a, start } => {
            acc(grads, nodes, *a, |ga| axpy(&mut ga[*start..*start + g.len()], 1.0, g));
        }
        Op::Sum(a) => acc(grads, nodes, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0])),
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f32;
            acc(grads, nodes, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
        }
        Op::GroupMeanRows { a, group, cols } => {
            let inv = 1.0 / *group as f32;
            acc(grads, nodes, *a, |ga| {
                for (r, go) in ga.chunks_mut(*cols).enumerate() {
                    axpy(go, inv, &g[(r / group) * cols..(r / group + 1) * cols]);
                }
            });
        }
        Op::Conv2d { x, w, b, geom } => conv2d_backward(nodes, grads, g, *x, *w, *b, *geom),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f32>>],
    g: &[f32],
    q: Id,
    k: Id,
    v: Id,
    mask: &[bool],
    heads: usize,
    probs: &[f32],
) {
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let d = *nodes[q].shape.last().unwrap();
    let tq = qv.len() / d;
    let tk = kv.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut dp = vec![0.0; tk];
    for h in 0..heads {
        let hs = h * dh;
        for i in 0..tq {
            let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let go = &g[i * d + hs..i * d + hs + dh];
            let mut sum = 0.0;
            for j in 0..tk {
                if !mask[i * tk + j] {
                    dp[j] = 0.0;
                    continue;
                }
                dp[j] = dot(go, &vv[j * d + hs..j * d + hs + dh]);
                sum += dp[j] * p[j];
                axpy(&mut dv[j * d + hs..j * d + hs + dh], p[j], go);
            }
            for j in 0..tk {
                if !mask[i * tk + j] {
                    continue;
                }
                let ds = p[j] * (dp[j] - sum) * scale;
                axpy(&mut dq[i * d + hs..i * d + hs + dh], ds, &kv[j * d + hs..j * d + hs + dh]);
                axpy(&mut dk[j * d + hs..j * d + hs + dh], ds, &qv[i * d + hs..i * d + hs + dh]);
            }
        }
    }
    acc(grads, nodes, q, |o| axpy(o, 1.0, &dq));
    acc(grads, nodes, k, |o| axpy(o, 1.0, &dk));
    acc(grads, nodes, v, |o| axpy(o, 1.0, &dv));
}

fn im2col(x: &[f32], cin: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[c * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(dst: &mut [f32], cols: &[f32], cin: usize, h: usize, w: usize, k: usize) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[c * hw + sy as usize * w + sx as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

fn conv2d_backward(nodes: &[Node], grads: &mut [Option<Vec<f32>>], g: &[f32], x: Id, w: Id, b: Option<Id>, geom: ConvGeom) {
    let ConvGeom { n, cin, h, w: wd, cout, k } = geom;
    let hw = h * wd;
    let ckk = cin * k * k;
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    if let Some(b) = b {
        acc(grads, nodes, b, |gb| {
            for s in 0..n {
                for o in 0..cout {
                    gb[o] += g[(s * cout + o) * hw..(s * cout + o + 1) * hw].iter().sum::<f32>();
                }
            }
        });
    }
    let need_w = nodes[w].needs_grad;
    let need_x = nodes[x].needs_grad;
    let mut gw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
    let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
    for s in 0..n {
        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
        if need_w {
            let cols = im2col(&xv[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, k);
            // gw[cout, ckk] += gs[cout, hw] * cols[ckk, hw]^T
            matmul_nt_acc(&mut gw, gs, &cols, cout, ckk, hw);
        }
        if need_x {
            let mut dcols = vec![0.0; ckk * hw];
            matmul_tn_acc(&mut dcols, wv, gs, cout, ckk, hw);
            col2im_acc(&mut gx[s * cin * hw..(s + 1) * cin * hw], &dcols, cin, h, wd, k);
        }
    }
    if need_w {
        acc(grads, nodes, w, |o| axpy(o, 1.0, &gw));
    }
    if need_x {
        acc(grads, nodes, x, |o| axpy(o, 1.0, &gx));
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / cols.max(1), cols)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.g.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.needs(self.id)
    }

    pub fn value(&self) -> Tensor {
        let n = self.g.nodes.borrow();
        Tensor::from_arc(n[self.id].shape.clone(), n[self.id].value.clone())
    }

    pub fn item(&self) -> f32 {
        self.g.nodes.borrow()[self.id].value[0]
    }

    fn data(&self) -> Arc<Vec<f32>> {
        self.g.val(self.id)
    }

    fn needs(&self) -> bool {
        self.g.needs(self.id)
    }

    fn same_shape(&self, o: &Var<'g>, what: &str) -> Vec<usize> {
        let (a, b) = (self.shape(), o.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
        a
    }

    /// Same value, cut from the graph: nothing upstream receives gradient
    /// through the result.
    pub fn detach(self) -> Var<'g> {
        let shape = self.shape();
        self.g.push_arc(self.data(), shape, Op::Leaf, false, None)
    }

    pub fn add(self, o: Var<'g>) -> Var<'g> {
        let shape = self.same_shape(&o, "add");
        let (a, b) = (self.data(), o.data());
        let v = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        self.g.push(v, shape, Op::Add(self.id, o.id), self.needs() || o.needs())
    }

    pub fn sub(self, o: Var<'g>) -> Var<'g> {
        let shape = self.same_shape(&o, "sub");
        let (a, b) = (self.data(), o.data());
        let v = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        self.g.push(v, shape, Op::Sub(self.id, o.id), self.needs() || o.needs())
    }

    pub fn mul(self, o: Var<'g>) -> Var<'g> {
        let shape = self.same_shape(&o, "mul");
        let (a, b) = (self.data(), o.data());
        let v = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        self.g.push(v, shape, Op::Mul(self.id, o.id), self.needs() || o.needs())
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(self, b: Var<'g>) -> Var<'g> {
        let shape = self.shape();
        let (_, cols) = rows_cols(&shape);
        assert_eq!(b.numel(), cols, "add_row width");
        let (a, bv) = (self.data(), b.data());
        let mut v = a.as_ref().clone();
        for row in v.chunks_mut(cols) {
            axpy(row, 1.0, &bv);
        }
        self.g.push(v, shape, Op::AddRow(self.id, b.id), self.needs() || b.needs())
    }

    /// Multiplies every row elementwise by a `[cols]` vector.
    pub fn mul_row(self, b: Var<'g>) -> Var<'g> {
        let shape = self.shape();
        let (_, cols) = rows_cols(&shape);
        assert_eq!(b.numel(), cols, "mul_row width");
        let (a, bv) = (self.data(), b.data());
        let mut v = a.as_ref().clone();
        for row in v.chunks_mut(cols) {
            row.iter_mut().zip(bv.iter()).for_each(|(x, y)| *x *= y);
        }
        self.g.push(v, shape, Op::MulRow(self.id, b.id), self.needs() || b.needs())
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        let v = self.data().iter().map(|x| x * s).collect();
        self.g.push(v, self.shape(), Op::Scale(self.id, s), self.needs())
    }

    pub fn add_scalar(self, s: f32) -> Var<'g> {
        let v = self.data().iter().map(|x| x + s).collect();
        self.g.push(v, self.shape(), Op::AddScalar(self.id), self.needs())
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self)
    }

    /// `[m,k] x [k,n] -> [m,n]`; leading dims of `self` are flattened into `m`.
    pub fn matmul(self, b: Var<'g>) -> Var<'g> {
        let sa = self.shape();
        let sb = b.shape();
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D, got {sb:?}");
        let (m, k) = rows_cols(&sa);
        assert_eq!(k, sb[0], "matmul inner dims {sa:?} x {sb:?}");
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, &self.data(), &b.data(), m, k, n);
        counters::add((m * k * n) as u64);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        self.g.push(out, shape, Op::MatMul { a: self.id, b: b.id, m, k, n }, self.needs() || b.needs())
    }

    /// `self @ w + bias`.
    pub fn linear(self, w: Var<'g>, bias: Var<'g>) -> Var<'g> {
        self.matmul(w).add_row(bias)
    }

    pub fn silu(self) -> Var<'g> {
        let v = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        self.g.push(v, self.shape(), Op::Silu(self.id), self.needs())
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.data().iter().map(|x| x.exp()).collect();
        self.g.push(v, self.shape(), Op::Exp(self.id), self.needs())
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.data().iter().map(|x| x.tanh()).collect();
        self.g.push(v, self.shape(), Op::Tanh(self.id), self.needs())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g> {
        let v = self.data().iter().map(|&x| softplus(x)).collect();
        self.g.push(v, self.shape(), Op::Softplus(self.id), self.needs())
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f32) -> Var<'g> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        let a = self.data();
        let mut v = vec![0.0; a.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = &a[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f32>() / cols as f32;
            let var = x.iter().map(|&t| (t - mean) * (t - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                v[r * cols + j] = (x[j] - mean) * rs;
            }
        }
        self.g.push(v, shape, Op::LayerNorm { a: self.id, cols, rstd }, self.needs())
    }

    /// Multi-head scaled dot-product attention. `mask[i * tk + j]` allows
    /// query row `i` to read key row `j`; each query row needs at least one
    /// allowed key.
    pub fn attention(self, k: Var<'g>, v: Var<'g>, mask: Arc<Vec<bool>>, heads: usize) -> Var<'g> {
        let sq = self.shape();
        let d = *sq.last().unwrap();
        let (qv, kv, vv) = (self.data(), k.data(), v.data());
        let tq = qv.len() / d;
        let tk = kv.len() / d;
        assert_eq!(vv.len(), tk * d, "attention value rows");
        assert_eq!(mask.len(), tq * tk, "attention mask size");
        assert_eq!(d % heads, 0, "model dim not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0; tq * d];
        let mut probs = vec![0.0; heads * tq * tk];
        let mut allowed = 0u64;
        for h in 0..heads {
            let hs = h * dh;
            for i in 0..tq {
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let qi = &qv[i * d + hs..i * d + hs + dh];
                let mut mx = f32::NEG_INFINITY;
                for j in 0..tk {
                    if mask[i * tk + j] {
                        let s = dot(qi, &kv[j * d + hs..j * d + hs + dh]) * scale;
                        p[j] = s;
                        mx = mx.max(s);
                    }
                }
                let mut z = 0.0;
                for j in 0..tk {
                    if mask[i * tk + j] {
                        p[j] = (p[j] - mx).exp();
                        z += p[j];
                        allowed += 1;
                    }
                }
                let inv = 1.0 / z;
                let o = &mut out[i * d + hs..i * d + hs + dh];
                for j in 0..tk {
                    if mask[i * tk + j] {
                        p[j] *= inv;
                        axpy(o, p[j], &vv[j * d + hs..j * d + hs + dh]);
                    }
                }
            }
        }
        counters::add(allowed * 2 * dh as u64);
        let needs = self.needs() || k.needs() || v.needs();
        let probs = if needs && self.g.grad_enabled { probs } else { Vec::new() };
        self.g.push(out, sq, Op::Attention { q: self.id, k: k.id, v: v.id, mask, heads, probs }, needs)
    }

    /// Rotates consecutive pairs `(2p, 2p+1)` by the angle whose cosine and
    /// sine are `cos[p]`, `sin[p]`. Tables cover the whole tensor.
    pub fn rope(self, cos: Arc<Vec<f32>>, sin: Arc<Vec<f32>>) -> Var<'g> {
        let a = self.data();
        assert_eq!(cos.len() * 2, a.len(), "rope table size");
        let mut v = vec![0.0; a.len()];
        for p in 0..cos.len() {
            let (c, s) = (cos[p], sin[p]);
            let (x0, x1) = (a[2 * p], a[2 * p + 1]);
            v[2 * p] = x0 * c - x1 * s;
            v[2 * p + 1] = x0 * s + x1 * c;
        }
        self.g.push(v, self.shape(), Op::Rope { a: self.id, cos, sin }, self.needs())
    }

    /// `out[i] = self.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(self, idx: Arc<Vec<u32>>, shape: Vec<usize>) -> Var<'g> {
        assert_eq!(idx.len(), shape.iter().product::<usize>(), "gather output shape");
        let a = self.data();
        let v = idx.iter().map(|&i| a[i as usize]).collect();
        self.g.push(v, shape, Op::Gather { a: self.id, idx }, self.needs())
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        assert_eq!(shape.iter().product::<usize>(), self.numel(), "reshape size");
        let needs = self.needs();
        self.g.push_arc(self.data(), shape.to_vec(), Op::Reshape(self.id), needs, None)
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        let g = parts[0].g;
        let tail: Vec<usize> = parts[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut v = Vec::new();
        let mut needs = false;
        for p in parts {
            let s = p.shape();
            assert_eq!(&s[1..], &tail[..], "concat_rows trailing dims");
            lead += s[0];
            v.extend_from_slice(&p.data());
            needs |= p.needs();
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        g.push(v, shape, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), needs)
    }

    /// Concatenates 2-D (or row-flattened) tensors along the last axis.
    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        let g = parts[0].g;
        let (rows, _) = rows_cols(&parts[0].shape());
        let widths: Vec<usize> = parts.iter().map(|p| rows_cols(&p.shape()).1).collect();
        let total: usize = widths.iter().sum();
        let mut v = vec![0.0; rows * total];
        let mut off = 0;
        let mut needs = false;
        for (p, &w) in parts.iter().zip(&widths) {
            assert_eq!(rows_cols(&p.shape()).0, rows, "concat_cols row count");
            let d = p.data();
            for r in 0..rows {
                v[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
            needs |= p.needs();
        }
        let mut shape = parts[0].shape();
        *shape.last_mut().unwrap() = total;
        g.push(v, shape, Op::ConcatCols { parts: parts.iter().map(|p| p.id).collect(), widths, rows }, needs)
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Var<'g> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        assert!(start + width <= cols, "slice_cols out of range");
        let a = self.data();
        let mut v = Vec::with_capacity(rows * width);
        for r in 0..rows {
            v.extend_from_slice(&a[r * cols + start..r * cols + start + width]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = width;
        self.g.push(v, out_shape, Op::SliceCols { a: self.id, start, width, cols }, self.needs())
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g> {
        let shape = self.shape();
        let inner: usize = shape[1..].iter().product();
        assert!(start <= end && end <= shape[0], "slice_rows out of range");
        let v = self.data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        self.g.push(v, out_shape, Op::SliceFlat { a: self.id, start: start * inner }, self.needs())
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.data().iter().map(|&x| x as f64).sum::<f64>() as f32;
        self.g.push(vec![s], vec![], Op::Sum(self.id), self.needs())
    }

    pub fn mean(self) -> Var<'g> {
        let d = self.data();
        let s = (d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64) as f32;
        self.g.push(vec![s], vec![], Op::Mean(self.id), self.needs())
    }

    /// Mean squared difference as a scalar.
    pub fn mse(self, o: Var<'g>) -> Var<'g> {
        self.sub(o).square().mean()
    }

    /// Averages each consecutive group of `group` rows: `[r, c] -> [r/group, c]`.
    pub fn group_mean_rows(self, group: usize) -> Var<'g> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        assert_eq!(rows % group, 0, "group_mean_rows divisibility");
        let a = self.data();
        let mut v = vec![0.0; rows / group * cols];
        for r in 0..rows {
            axpy(&mut v[(r / group) * cols..(r / group + 1) * cols], 1.0, &a[r * cols..(r + 1) * cols]);
        }
        let inv = 1.0 / group as f32;
        v.iter_mut().for_each(|x| *x *= inv);
        self.g.push(v, vec![rows / group, cols], Op::GroupMeanRows { a: self.id, group, cols }, self.needs())
    }

    /// Stride-1 "same" convolution: `[n, cin, h, w] * [cout, cin, k, k] -> [n, cout, h, w]`.
    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let xs = self.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be [n,c,h,w], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [o,c,k,k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let geom = ConvGeom { n: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k: ws[2] };
        let hw = geom.h * geom.w;
        let ckk = geom.cin * geom.k * geom.k;
        let (xv, wv) = (self.data(), w.data());
        let bv = b.map(|b| b.data());
        let mut out = vec![0.0; geom.n * geom.cout * hw];
        for s in 0..geom.n {
            let cols = im2col(&xv[s * geom.cin * hw..(s + 1) * geom.cin * hw], geom.cin, geom.h, geom.w, geom.k);
            let os = &mut out[s * geom.cout * hw..(s + 1) * geom.cout * hw];
            if let Some(bv) = &bv {
                for o in 0..geom.cout {
                    os[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv[o]);
                }
            }
            matmul_acc(os, &wv, &cols, geom.cout, ckk, hw);
        }
        counters::add((geom.n * geom.cout * ckk * hw) as u64);
        let needs = self.needs() || w.needs() || b.is_some_and(|b| b.needs());
        self.g.push(out, vec![geom.n, geom.cout, geom.h, geom.w], Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, needs)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Checks whether `a` and `b` share a shape; used by callers that want an
/// error instead of a panic.
pub fn check_same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err!("shape mismatch {:?} vs {:?}", a, b));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let g = Graph::new();
        let x = g.input(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = x.mul(x).sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.input(&Tensor::from_fn(&[3, 2], |i| i as f32 * 0.3 - 1.0));
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.of(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let y = g.input(&Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let w = g.input(&Tensor::new(vec![2], vec![0.5, 2.0]).unwrap());
        let loss = y.detach().mul(w).sum();
        let grads = g.backward(loss).unwrap();
        assert!(grads.of(y).is_none());
        assert_eq!(grads.of(w).unwrap(), &[3.0, -1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.input(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(AaptError::Contract(_))));
    }

    #[test]
    fn no_grad_graph_matches_values() {
        let t = Tensor::from_fn(&[3, 4], |i| (i as f32).sin());
        let w = Tensor::from_fn(&[4, 2], |i| (i as f32 * 0.7).cos());
        let a = {
            let g = Graph::new();
            g.input(&t).matmul(g.param(&w, 0)).silu().value()
        };
        let b = {
            let g = Graph::no_grad();
            g.constant(&t).matmul(g.constant(&w)).silu().value()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn shared_param_gradients_sum() {
        let g = Graph::new();
        let w = Tensor::new(vec![1], vec![2.0]).unwrap();
        let a = g.param(&w, 7);
        let b = g.param(&w, 7);
        let grads = g.backward(a.mul(b).sum()).unwrap();
        assert_eq!(grads.param(7).unwrap(), &[4.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(100.0) - 100.0).abs() < 1e-5);
        assert!(softplus(-100.0) >= 0.0);
        assert!((softplus(0.0) - std::f32::consts::LN_2).abs() < 1e-7);
    }
}
