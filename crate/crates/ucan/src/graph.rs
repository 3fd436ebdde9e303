//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] owns the values and gradients of every node created during one
//! forward episode. Construction order is topological by design, so backward
//! is a single reverse sweep over the tape. Graphs are confined to one thread
//! per episode; distinct episodes may run concurrently on distinct graphs.

use crate::error::{Result, UcanError};
use crate::tensor::{Tensor, EPS_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    /// Dense layer: out[i] = sum_j w[i,j] x[j] + b[i].
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId, c_in: usize, c_out: usize, h: usize, wd: usize },
    Conv1x1 { x: NodeId, w: NodeId, b: NodeId, c_in: usize, c_out: usize, h: usize, wd: usize },
    AvgPool2 { x: NodeId, c: usize, h: usize, wd: usize },
    GlobalAvgPool { x: NodeId, c: usize, h: usize, wd: usize },
    L2Normalize { x: NodeId, norm: f64 },
    SoftmaxXent { logits: NodeId, probs: Vec<f64>, y: usize },
    /// ArcFace margin/scale on a cosine vector: the true-class entry becomes
    /// s*cos(arccos(c)+m), every other entry s*c. When the true-class angle
    /// already exceeds pi-m (`guarded`), the entry falls back to the standard
    /// linear surrogate s*(c - m*sin m), which keeps the logit monotone in
    /// the angle and blocks the anti-aligned collapse of the raw formula.
    ArcFaceLogits { cs: NodeId, y: usize, scale: f64, margin: f64, clamped: f64, guarded: bool },
    /// Row-normalized cosine scores: cs[j] = <w_j/||w_j||, p>.
    CosineScores { w: NodeId, p: NodeId, row_norms: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    SumScalars { xs: Vec<NodeId> },
    /// Squared Euclidean distance to a constant vector.
    SqDistToConst { x: NodeId, target: Vec<f64> },
    /// C&W hinge: max(z_y - max_{j!=y} z_j, -kappa).
    CwMargin { logits: NodeId, y: usize, j_max: usize, kappa: f64 },
    /// Same data, new shape; gradient passes through unchanged.
    Reshape { x: NodeId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { shape, data, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Copies a node's value out as a plain tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(UcanError::Dimension(format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    fn dims3(&self, id: NodeId) -> Result<(usize, usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(UcanError::Dimension(format!("expected rank-3 tensor, got {s:?}"))),
        }
    }

    fn dims1(&self, id: NodeId) -> Result<usize> {
        match self.nodes[id.0].shape.as_slice() {
            [n] => Ok(*n),
            s => Err(UcanError::Dimension(format!("expected rank-1 tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(UcanError::Dimension(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    for j in 0..n {
                        out[i * n + j] += av * bd[p * n + j];
                    }
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n_in = self.dims1(x)?;
        let (n_out, n_in2) = self.dims2(w)?;
        let nb = self.dims1(b)?;
        if n_in != n_in2 || nb != n_out {
            return Err(UcanError::Dimension(format!(
                "affine: x[{n_in}], w[{n_out}x{n_in2}], b[{nb}]"
            )));
        }
        let mut out = vec![0.0; n_out];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..n_out {
                let mut acc = bd[i];
                for j in 0..n_in {
                    acc += wd[i * n_in + j] * xd[j];
                }
                out[i] = acc;
            }
        }
        Ok(self.push(vec![n_out], out, Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Relu { x })
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c_in, h, wd) = self.dims3(x)?;
        let wsh = self.nodes[w.0].shape.clone();
        let (c_out, cw_in) = match wsh.as_slice() {
            [f, c, 3, 3] => (*f, *c),
            s => return Err(UcanError::Dimension(format!("conv3x3 weight shape {s:?}"))),
        };
        if cw_in != c_in || self.dims1(b)? != c_out {
            return Err(UcanError::Dimension("conv3x3 channel mismatch".into()));
        }
        let mut out = vec![0.0; c_out * h * wd];
        {
            let xd = &self.nodes[x.0].data;
            let wdta = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for f in 0..c_out {
                for oy in 0..h {
                    for ox in 0..wd {
                        let mut acc = bd[f];
                        for c in 0..c_in {
                            for ky in 0..3usize {
                                let iy = oy as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let ix = ox as isize + kx as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += wdta[((f * c_in + c) * 3 + ky) * 3 + kx]
                                        * xd[(c * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[(f * h + oy) * wd + ox] = acc;
                    }
                }
            }
        }
        Ok(self.push(vec![c_out, h, wd], out, Op::Conv3x3 { x, w, b, c_in, c_out, h, wd }))
    }

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c_in, h, wd) = self.dims3(x)?;
        let (c_out, cw_in) = self.dims2(w)?;
        if cw_in != c_in || self.dims1(b)? != c_out {
            return Err(UcanError::Dimension("conv1x1 channel mismatch".into()));
        }
        let mut out = vec![0.0; c_out * h * wd];
        {
            let xd = &self.nodes[x.0].data;
            let wdta = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for d in 0..c_out {
                for p in 0..h * wd {
                    let mut acc = bd[d];
                    for c in 0..c_in {
                        acc += wdta[d * c_in + c] * xd[c * h * wd + p];
                    }
                    out[d * h * wd + p] = acc;
                }
            }
        }
        Ok(self.push(vec![c_out, h, wd], out, Op::Conv1x1 { x, w, b, c_in, c_out, h, wd }))
    }

    /// 2x2 average downsampling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.dims3(x)?;
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(UcanError::Dimension(format!("avg_pool2 needs even dims, got {h}x{wd}")));
        }
        let (oh, ow) = (h / 2, wd / 2);
        let mut out = vec![0.0; c * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += xd[(ch * h + 2 * oy + dy) * wd + 2 * ox + dx];
                            }
                        }
                        out[(ch * oh + oy) * ow + ox] = acc / 4.0;
                    }
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::AvgPool2 { x, c, h, wd }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.dims3(x)?;
        if h == 0 || wd == 0 {
            return Err(UcanError::Dimension("global_avg_pool on empty map".into()));
        }
        let area = (h * wd) as f64;
        let mut out = vec![0.0; c];
        {
            let xd = &self.nodes[x.0].data;
            for ch in 0..c {
                out[ch] = xd[ch * h * wd..(ch + 1) * h * wd].iter().sum::<f64>() / area;
            }
        }
        Ok(self.push(vec![c], out, Op::GlobalAvgPool { x, c, h, wd }))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.dims1(x)?;
        let norm = self.nodes[x.0].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < EPS_NORM {
            return Err(UcanError::DegenerateVector { norm, min: EPS_NORM });
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v / norm).collect();
        Ok(self.push(vec![n], data, Op::L2Normalize { x, norm }))
    }

    pub fn softmax_xent(&mut self, logits: NodeId, y: usize) -> Result<NodeId> {
        let n = self.dims1(logits)?;
        if y >= n {
            return Err(UcanError::Index(format!("class {y} out of range for {n} logits")));
        }
        let ld = &self.nodes[logits.0].data;
        let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + ld.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = ld.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - ld[y];
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxXent { logits, probs, y }))
    }

    /// Clamp delta applied to the true-class cosine before arccos.
    pub const ARCCOS_CLAMP: f64 = 1e-7;

    pub fn arcface_logits(&mut self, cs: NodeId, y: usize, scale: f64, margin: f64) -> Result<NodeId> {
        let n = self.dims1(cs)?;
        if y >= n {
            return Err(UcanError::Index(format!("class {y} out of range for {n} scores")));
        }
        let lim = 1.0 - Self::ARCCOS_CLAMP;
        let c = self.nodes[cs.0].data[y].clamp(-lim, lim);
        let guarded = c <= (std::f64::consts::PI - margin).cos();
        let mut out: Vec<f64> = self.nodes[cs.0].data.iter().map(|v| scale * v).collect();
        out[y] = if guarded {
            scale * (c - margin * margin.sin())
        } else {
            scale * (c.acos() + margin).cos()
        };
        Ok(self.push(vec![n], out, Op::ArcFaceLogits { cs, y, scale, margin, clamped: c, guarded }))
    }

    pub fn cosine_scores(&mut self, w: NodeId, p: NodeId) -> Result<NodeId> {
        let (rows, d) = self.dims2(w)?;
        if self.dims1(p)? != d {
            return Err(UcanError::Dimension("cosine_scores dim mismatch".into()));
        }
        let mut row_norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows];
        {
            let wd = &self.nodes[w.0].data;
            let pd = &self.nodes[p.0].data;
            for j in 0..rows {
                let row = &wd[j * d..(j + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < EPS_NORM {
                    return Err(UcanError::DegenerateVector { norm, min: EPS_NORM });
                }
                out[j] = row.iter().zip(pd).map(|(a, b)| a * b).sum::<f64>() / norm;
                row_norms.push(norm);
            }
        }
        Ok(self.push(vec![rows], out, Op::CosineScores { w, p, row_norms }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(UcanError::Dimension("elementwise add shape mismatch".into()));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(UcanError::Dimension("elementwise mul shape mismatch".into()));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Scale { x, c })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Clamp { x, lo, hi })
    }

    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(UcanError::Contract("sum_scalars on empty list".into()));
        }
        let mut acc = 0.0;
        for id in xs {
            if self.nodes[id.0].data.len() != 1 {
                return Err(UcanError::Contract("sum_scalars on non-scalar node".into()));
            }
            acc += self.nodes[id.0].data[0];
        }
        Ok(self.push(vec![1], vec![acc], Op::SumScalars { xs: xs.to_vec() }))
    }

    pub fn sq_dist_to_const(&mut self, x: NodeId, target: &[f64]) -> Result<NodeId> {
        if self.nodes[x.0].data.len() != target.len() {
            return Err(UcanError::Dimension("sq_dist_to_const length mismatch".into()));
        }
        let d: f64 = self.nodes[x.0]
            .data
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(vec![1], vec![d], Op::SqDistToConst { x, target: target.to_vec() }))
    }

    pub fn cw_margin(&mut self, logits: NodeId, y: usize, kappa: f64) -> Result<NodeId> {
        let n = self.dims1(logits)?;
        if y >= n || n < 2 {
            return Err(UcanError::Index(format!("class {y} out of range for {n} logits")));
        }
        let ld = &self.nodes[logits.0].data;
        let mut j_max = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (j, &v) in ld.iter().enumerate() {
            if j != y && v > best {
                best = v;
                j_max = j;
            }
        }
        let v = (ld[y] - best).max(-kappa);
        Ok(self.push(vec![1], vec![v], Op::CwMargin { logits, y, j_max, kappa }))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(UcanError::Dimension(format!(
                "reshape to {:?} from {} elements",
                new_shape,
                self.nodes[x.0].data.len()
            )));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(new_shape, data, Op::Reshape { x }))
    }

    /// Reverse sweep from a scalar root. Gradients are zeroed first, so the
    /// sweep is repeatable; leaves unreachable from the root keep grad 0.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(UcanError::Contract("backward root must be scalar".into()));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad[0] = 1.0;

        for i in (0..=root.0).rev() {
            let op = self.nodes[i].op.clone();
            let g = std::mem::take(&mut self.nodes[i].grad);
            match &op {
                Op::Leaf { .. } => {}
                Op::MatMul { a, b, m, k, n } => {
                    let ad = self.nodes[a.0].data.clone();
                    let bd = self.nodes[b.0].data.clone();
                    for r in 0..*m {
                        for p in 0..*k {
                            let mut acc = 0.0;
                            for c in 0..*n {
                                acc += g[r * n + c] * bd[p * n + c];
                            }
                            self.nodes[a.0].grad[r * k + p] += acc;
                        }
                    }
                    for p in 0..*k {
                        for c in 0..*n {
                            let mut acc = 0.0;
                            for r in 0..*m {
                                acc += ad[r * k + p] * g[r * n + c];
                            }
                            self.nodes[b.0].grad[p * n + c] += acc;
                        }
                    }
                }
                Op::Affine { x, w, b } => {
                    let xd = self.nodes[x.0].data.clone();
                    let wd = self.nodes[w.0].data.clone();
                    let n_in = xd.len();
                    for (i_out, &gi) in g.iter().enumerate() {
                        self.nodes[b.0].grad[i_out] += gi;
                        for j in 0..n_in {
                            self.nodes[w.0].grad[i_out * n_in + j] += gi * xd[j];
                            self.nodes[x.0].grad[j] += gi * wd[i_out * n_in + j];
                        }
                    }
                }
                Op::Relu { x } => {
                    for (j, &gi) in g.iter().enumerate() {
                        if self.nodes[x.0].data[j] > 0.0 {
                            self.nodes[x.0].grad[j] += gi;
                        }
                    }
                }
                Op::Conv3x3 { x, w, b, c_in, c_out, h, wd } => {
                    let xd = self.nodes[x.0].data.clone();
                    let wdta = self.nodes[w.0].data.clone();
                    for f in 0..*c_out {
                        for oy in 0..*h {
                            for ox in 0..*wd {
                                let gi = g[(f * h + oy) * wd + ox];
                                if gi == 0.0 {
                                    continue;
                                }
                                self.nodes[b.0].grad[f] += gi;
                                for c in 0..*c_in {
                                    for ky in 0..3usize {
                                        let iy = oy as isize + ky as isize - 1;
                                        if iy < 0 || iy >= *h as isize {
                                            continue;
                                        }
                                        for kx in 0..3usize {
                                            let ix = ox as isize + kx as isize - 1;
                                            if ix < 0 || ix >= *wd as isize {
                                                continue;
                                            }
                                            let xi = (c * h + iy as usize) * wd + ix as usize;
                                            let wi = ((f * c_in + c) * 3 + ky) * 3 + kx;
                                            self.nodes[w.0].grad[wi] += gi * xd[xi];
                                            self.nodes[x.0].grad[xi] += gi * wdta[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Conv1x1 { x, w, b, c_in, c_out, h, wd } => {
                    let xd = self.nodes[x.0].data.clone();
                    let wdta = self.nodes[w.0].data.clone();
                    let area = h * wd;
                    for d in 0..*c_out {
                        for p in 0..area {
                            let gi = g[d * area + p];
                            if gi == 0.0 {
                                continue;
                            }
                            self.nodes[b.0].grad[d] += gi;
                            for c in 0..*c_in {
                                self.nodes[w.0].grad[d * c_in + c] += gi * xd[c * area + p];
                                self.nodes[x.0].grad[c * area + p] += gi * wdta[d * c_in + c];
                            }
                        }
                    }
                }
                Op::AvgPool2 { x, c, h, wd } => {
                    let (oh, ow) = (h / 2, wd / 2);
                    for ch in 0..*c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gi = g[(ch * oh + oy) * ow + ox] / 4.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        self.nodes[x.0].grad
                                            [(ch * h + 2 * oy + dy) * wd + 2 * ox + dx] += gi;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { x, c, h, wd } => {
                    let area = (h * wd) as f64;
                    for ch in 0..*c {
                        let gi = g[ch] / area;
                        for p in 0..h * wd {
                            self.nodes[x.0].grad[ch * h * wd + p] += gi;
                        }
                    }
                }
                Op::L2Normalize { x, norm } => {
                    let y: Vec<f64> =
                        self.nodes[x.0].data.iter().map(|v| v / norm).collect();
                    let dot: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
                    for j in 0..y.len() {
                        self.nodes[x.0].grad[j] += (g[j] - dot * y[j]) / norm;
                    }
                }
                Op::SoftmaxXent { logits, probs, y } => {
                    let gs = g[0];
                    for (j, &p) in probs.iter().enumerate() {
                        let indicator = if j == *y { 1.0 } else { 0.0 };
                        self.nodes[logits.0].grad[j] += gs * (p - indicator);
                    }
                }
                Op::ArcFaceLogits { cs, y, scale, margin, clamped, guarded } => {
                    for (j, &gi) in g.iter().enumerate() {
                        if j == *y {
                            // Derivative capped at c = 1 - 1e-4: the exact
                            // factor diverges as the angle reaches zero and
                            // would drown every other gradient in the batch.
                            let c = clamped.min(1.0 - 1e-4);
                            let d = if *guarded {
                                1.0
                            } else {
                                margin.cos() + margin.sin() * c / (1.0 - c * c).sqrt()
                            };
                            self.nodes[cs.0].grad[j] += gi * scale * d;
                        } else {
                            self.nodes[cs.0].grad[j] += gi * scale;
                        }
                    }
                }
                Op::CosineScores { w, p, row_norms } => {
                    let d = self.nodes[p.0].data.len();
                    let wd = self.nodes[w.0].data.clone();
                    let pd = self.nodes[p.0].data.clone();
                    for (j, &gi) in g.iter().enumerate() {
                        if gi == 0.0 {
                            continue;
                        }
                        let norm = row_norms[j];
                        let row = &wd[j * d..(j + 1) * d];
                        let cs_j: f64 =
                            row.iter().zip(&pd).map(|(a, b)| a * b).sum::<f64>() / norm;
                        for t in 0..d {
                            let w_hat = row[t] / norm;
                            self.nodes[p.0].grad[t] += gi * w_hat;
                            self.nodes[w.0].grad[j * d + t] +=
                                gi * (pd[t] - cs_j * w_hat) / norm;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (j, &gi) in g.iter().enumerate() {
                        self.nodes[a.0].grad[j] += gi;
                        self.nodes[b.0].grad[j] += gi;
                    }
                }
                Op::Mul { a, b } => {
                    let ad = self.nodes[a.0].data.clone();
                    let bd = self.nodes[b.0].data.clone();
                    for (j, &gi) in g.iter().enumerate() {
                        self.nodes[a.0].grad[j] += gi * bd[j];
                        self.nodes[b.0].grad[j] += gi * ad[j];
                    }
                }
                Op::Scale { x, c } => {
                    for (j, &gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[j] += gi * c;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for (j, &gi) in g.iter().enumerate() {
                        let v = self.nodes[x.0].data[j];
                        if v > *lo && v < *hi {
                            self.nodes[x.0].grad[j] += gi;
                        }
                    }
                }
                Op::SumScalars { xs } => {
                    for id in xs {
                        self.nodes[id.0].grad[0] += g[0];
                    }
                }
                Op::SqDistToConst { x, target } => {
                    let gs = g[0];
                    for (j, t) in target.iter().enumerate() {
                        self.nodes[x.0].grad[j] += gs * 2.0 * (self.nodes[x.0].data[j] - t);
                    }
                }
                Op::CwMargin { logits, y, j_max, kappa } => {
                    if self.nodes[i].data[0] > -kappa && *j_max != usize::MAX {
                        self.nodes[logits.0].grad[*y] += g[0];
                        self.nodes[logits.0].grad[*j_max] -= g[0];
                    }
                }
                Op::Reshape { x } => {
                    for (j, &gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[j] += gi;
                    }
                }
            }
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    /// Adds the graph gradient of `id` into the tensor's own grad slot.
    pub fn accumulate_into(&self, id: NodeId, param: &mut Tensor) -> Result<()> {
        param.accumulate_grad(&self.nodes[id.0].grad)
    }
}
