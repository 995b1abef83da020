//! Reverse-mode automatic differentiation over vector values.
//!
//! A [`Tape`] in recording mode stores one node per produced value and can
//! backpropagate an exact gradient of any scalar value with respect to every
//! parameter tensor. In inference mode the same operations run identically
//! (the arithmetic is shared, so recorded and unrecorded forwards agree
//! bit-for-bit) but no nodes are kept and backward is refused.

use crate::error::ShopError;
use crate::nn::params::{GradStore, ParamId, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

/// Parameter ids for one GRU cell: packed input weights (3d x d), packed
/// recurrent weights for the z/r gates (2d x d), candidate recurrent weights
/// (d x d), and the packed bias (3d).
#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
}

enum Node<S: Scalar> {
    Leaf,
    Embed { table: ParamId, token: usize },
    /// y = W x (+ b)
    Affine { w: ParamId, b: Option<ParamId>, x: Val },
    Gru { ids: GruIds, x: Val, h: Val, r: Box<[S]>, z: Box<[S]>, hh: Box<[S]> },
    Tanh { x: Val },
    LogSoftmax { x: Val },
    Pick { x: Val, idx: usize },
    Stack { xs: Vec<Val> },
    Mean { x: Val },
    /// Shannon entropy of exp(logp).
    Entropy { logp: Val },
    Concat2 { a: Val, b: Val },
    Add { a: Val, b: Val },
    Sub { a: Val, b: Val },
    Mul { a: Val, b: Val },
    Scale { x: Val, c: S },
    AddConst { x: Val },
    Exp { x: Val },
    Clamp { x: Val, lo: S, hi: S },
    Min2 { a: Val, b: Val },
    Square { x: Val },
}

pub struct Tape<S: Scalar> {
    recording: bool,
    nodes: Vec<Node<S>>,
    values: Vec<Box<[S]>>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// out[i] = sum_j w[i*cols + j] * x[j]
fn matvec<S: Scalar>(w: &[S], rows: usize, cols: usize, x: &[S], out: &mut [S]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = S::zero();
        for (wv, xv) in row.iter().zip(x.iter()) {
            acc = acc + *wv * *xv;
        }
        out[i] = acc;
    }
}

/// dx[j] += sum_i w[i*cols + j] * dy[i]
fn matvec_t_add<S: Scalar>(w: &[S], rows: usize, cols: usize, dy: &[S], dx: &mut [S]) {
    for i in 0..rows {
        let g = dy[i];
        if g == S::zero() {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (dxj, wv) in dx.iter_mut().zip(row.iter()) {
            *dxj = *dxj + *wv * g;
        }
    }
}

/// dw[i*cols + j] += dy[i] * x[j]
fn outer_add<S: Scalar>(dw: &mut [S], cols: usize, dy: &[S], x: &[S]) {
    for (i, g) in dy.iter().enumerate() {
        if *g == S::zero() {
            continue;
        }
        let row = &mut dw[i * cols..(i + 1) * cols];
        for (dwj, xv) in row.iter_mut().zip(x.iter()) {
            *dwj = *dwj + *g * *xv;
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn recording() -> Self {
        Tape { recording: true, nodes: Vec::new(), values: Vec::new() }
    }

    pub fn inference() -> Self {
        Tape { recording: false, nodes: Vec::new(), values: Vec::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, node: Node<S>, value: Box<[S]>) -> Val {
        if self.recording {
            self.nodes.push(node);
        }
        self.values.push(value);
        Val(self.values.len() - 1)
    }

    pub fn value(&self, v: Val) -> &[S] {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Val) -> S {
        debug_assert_eq!(self.values[v.0].len(), 1);
        self.values[v.0][0]
    }

    pub fn constant(&mut self, data: &[S]) -> Val {
        self.push(Node::Leaf, data.into())
    }

    pub fn scalar(&mut self, v: S) -> Val {
        self.push(Node::Leaf, Box::new([v]))
    }

    pub fn embed(&mut self, params: &ParamSet<S>, table: ParamId, token: usize) -> Val {
        let spec = params.spec(table);
        debug_assert!(token < spec.rows, "token id out of range");
        let row = &params.tensor(table)[token * spec.cols..(token + 1) * spec.cols];
        self.push(Node::Embed { table, token }, row.into())
    }

    pub fn affine(&mut self, params: &ParamSet<S>, w: ParamId, b: Option<ParamId>, x: Val) -> Val {
        let spec = params.spec(w);
        let mut out = vec![S::zero(); spec.rows].into_boxed_slice();
        matvec(params.tensor(w), spec.rows, spec.cols, &self.values[x.0], &mut out);
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(params.tensor(b).iter()) {
                *o = *o + *bv;
            }
        }
        self.push(Node::Affine { w, b, x }, out)
    }

    pub fn gru_cell(&mut self, params: &ParamSet<S>, ids: GruIds, x: Val, h: Val) -> Val {
        let d = params.spec(ids.u_h).rows;
        let xv = &self.values[x.0];
        let hv = &self.values[h.0];

        let mut a = vec![S::zero(); 3 * d];
        matvec(params.tensor(ids.w_x), 3 * d, params.spec(ids.w_x).cols, xv, &mut a);
        for (av, bv) in a.iter_mut().zip(params.tensor(ids.b).iter()) {
            *av = *av + *bv;
        }
        let mut u = vec![S::zero(); 2 * d];
        matvec(params.tensor(ids.u_zr), 2 * d, d, hv, &mut u);

        let mut z = vec![S::zero(); d].into_boxed_slice();
        let mut r = vec![S::zero(); d].into_boxed_slice();
        for i in 0..d {
            z[i] = sigmoid(a[i] + u[i]);
            r[i] = sigmoid(a[d + i] + u[d + i]);
        }
        let rh: Vec<S> = (0..d).map(|i| r[i] * hv[i]).collect();
        let mut uh = vec![S::zero(); d];
        matvec(params.tensor(ids.u_h), d, d, &rh, &mut uh);
        let mut hh = vec![S::zero(); d].into_boxed_slice();
        let mut out = vec![S::zero(); d].into_boxed_slice();
        for i in 0..d {
            hh[i] = (a[2 * d + i] + uh[i]).tanh();
            out[i] = (S::one() - z[i]) * hv[i] + z[i] * hh[i];
        }
        self.push(Node::Gru { ids, x, h, r, z, hh }, out)
    }

    pub fn tanh(&mut self, x: Val) -> Val {
        let out: Box<[S]> = self.values[x.0].iter().map(|v| v.tanh()).collect();
        self.push(Node::Tanh { x }, out)
    }

    pub fn log_softmax(&mut self, x: Val) -> Val {
        let xs = &self.values[x.0];
        let max = xs.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in xs.iter() {
            sum = sum + (*v - max).exp();
        }
        let log_z = max + sum.ln();
        let out: Box<[S]> = xs.iter().map(|v| *v - log_z).collect();
        self.push(Node::LogSoftmax { x }, out)
    }

    pub fn pick(&mut self, x: Val, idx: usize) -> Val {
        let v = self.values[x.0][idx];
        self.push(Node::Pick { x, idx }, Box::new([v]))
    }

    pub fn stack(&mut self, xs: &[Val]) -> Val {
        let out: Box<[S]> = xs
            .iter()
            .map(|v| {
                debug_assert_eq!(self.values[v.0].len(), 1);
                self.values[v.0][0]
            })
            .collect();
        self.push(Node::Stack { xs: xs.to_vec() }, out)
    }

    pub fn mean(&mut self, x: Val) -> Val {
        let xs = &self.values[x.0];
        let n = S::from_f64_c(xs.len() as f64);
        let m = xs.iter().cloned().sum::<S>() / n;
        self.push(Node::Mean { x }, Box::new([m]))
    }

    /// Shannon entropy of the distribution exp(logp): -sum p_i logp_i.
    pub fn entropy(&mut self, logp: Val) -> Val {
        let ls = &self.values[logp.0];
        let mut h = S::zero();
        for l in ls.iter() {
            h = h - l.exp() * *l;
        }
        self.push(Node::Entropy { logp }, Box::new([h]))
    }

    pub fn concat2(&mut self, a: Val, b: Val) -> Val {
        let mut out = Vec::with_capacity(self.values[a.0].len() + self.values[b.0].len());
        out.extend_from_slice(&self.values[a.0]);
        out.extend_from_slice(&self.values[b.0]);
        self.push(Node::Concat2 { a, b }, out.into_boxed_slice())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        let out: Box<[S]> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| *x + *y)
            .collect();
        self.push(Node::Add { a, b }, out)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        let out: Box<[S]> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| *x - *y)
            .collect();
        self.push(Node::Sub { a, b }, out)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        let out: Box<[S]> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| *x * *y)
            .collect();
        self.push(Node::Mul { a, b }, out)
    }

    pub fn scale(&mut self, x: Val, c: S) -> Val {
        let out: Box<[S]> = self.values[x.0].iter().map(|v| *v * c).collect();
        self.push(Node::Scale { x, c }, out)
    }

    pub fn add_const(&mut self, x: Val, c: S) -> Val {
        let out: Box<[S]> = self.values[x.0].iter().map(|v| *v + c).collect();
        self.push(Node::AddConst { x }, out)
    }

    pub fn exp(&mut self, x: Val) -> Val {
        let out: Box<[S]> = self.values[x.0].iter().map(|v| v.exp()).collect();
        self.push(Node::Exp { x }, out)
    }

    pub fn clamp(&mut self, x: Val, lo: S, hi: S) -> Val {
        let out: Box<[S]> = self.values[x.0]
            .iter()
            .map(|v| if *v < lo { lo } else if *v > hi { hi } else { *v })
            .collect();
        self.push(Node::Clamp { x, lo, hi }, out)
    }

    /// Elementwise minimum; ties propagate to the first argument.
    pub fn min2(&mut self, a: Val, b: Val) -> Val {
        let out: Box<[S]> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| if *x <= *y { *x } else { *y })
            .collect();
        self.push(Node::Min2 { a, b }, out)
    }

    pub fn square(&mut self, x: Val) -> Val {
        let out: Box<[S]> = self.values[x.0].iter().map(|v| *v * *v).collect();
        self.push(Node::Square { x }, out)
    }

    pub fn neg(&mut self, x: Val) -> Val {
        self.scale(x, -S::one())
    }

    /// Exact gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Val, params: &ParamSet<S>) -> Result<GradStore<S>, ShopError> {
        if !self.recording {
            return Err(ShopError::Contract(
                "backward on an inference tape: the loss was never recorded".into(),
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(ShopError::Contract("loss must be a scalar value".into()));
        }

        let mut grads = GradStore::zeros_like(params);
        let mut adj: Vec<Option<Box<[S]>>> = vec![None; self.values.len()];
        adj[loss.0] = Some(Box::new([S::one()]));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i] {
                Node::Leaf => {}
                Node::Embed { table, token } => {
                    let cols = params.spec(*table).cols;
                    let row = &mut grads.tensor_mut(*table)[token * cols..(token + 1) * cols];
                    for (r, gv) in row.iter_mut().zip(g.iter()) {
                        *r = *r + *gv;
                    }
                }
                Node::Affine { w, b, x } => {
                    let spec = params.spec(*w);
                    outer_add(grads.tensor_mut(*w), spec.cols, &g, &self.values[x.0]);
                    if let Some(b) = b {
                        let db = grads.tensor_mut(*b);
                        for (dbv, gv) in db.iter_mut().zip(g.iter()) {
                            *dbv = *dbv + *gv;
                        }
                    }
                    let dx = Self::adj_slot(&mut adj, *x, spec.cols);
                    matvec_t_add(params.tensor(*w), spec.rows, spec.cols, &g, dx);
                }
                Node::Gru { ids, x, h, r, z, hh } => {
                    self.backward_gru(params, &mut grads, &mut adj, *ids, *x, *h, r, z, hh, &g);
                }
                Node::Tanh { x } => {
                    let out = &self.values[i];
                    let dx = Self::adj_slot(&mut adj, *x, out.len());
                    for j in 0..out.len() {
                        dx[j] = dx[j] + g[j] * (S::one() - out[j] * out[j]);
                    }
                }
                Node::LogSoftmax { x } => {
                    let out = &self.values[i];
                    let gsum: S = g.iter().cloned().sum();
                    let dx = Self::adj_slot(&mut adj, *x, out.len());
                    for j in 0..out.len() {
                        dx[j] = dx[j] + g[j] - out[j].exp() * gsum;
                    }
                }
                Node::Pick { x, idx } => {
                    let n = self.values[x.0].len();
                    let dx = Self::adj_slot(&mut adj, *x, n);
                    dx[*idx] = dx[*idx] + g[0];
                }
                Node::Stack { xs } => {
                    for (j, xv) in xs.iter().enumerate() {
                        let dx = Self::adj_slot(&mut adj, *xv, 1);
                        dx[0] = dx[0] + g[j];
                    }
                }
                Node::Mean { x } => {
                    let n = self.values[x.0].len();
                    let c = g[0] / S::from_f64_c(n as f64);
                    let dx = Self::adj_slot(&mut adj, *x, n);
                    for v in dx.iter_mut() {
                        *v = *v + c;
                    }
                }
                Node::Entropy { logp } => {
                    let ls = &self.values[logp.0];
                    let dx = Self::adj_slot(&mut adj, *logp, ls.len());
                    for j in 0..ls.len() {
                        dx[j] = dx[j] - g[0] * ls[j].exp() * (ls[j] + S::one());
                    }
                }
                Node::Concat2 { a, b } => {
                    let na = self.values[a.0].len();
                    let nb = self.values[b.0].len();
                    let da = Self::adj_slot(&mut adj, *a, na);
                    for j in 0..na {
                        da[j] = da[j] + g[j];
                    }
                    let db = Self::adj_slot(&mut adj, *b, nb);
                    for j in 0..nb {
                        db[j] = db[j] + g[na + j];
                    }
                }
                Node::Add { a, b } => {
                    let n = g.len();
                    let da = Self::adj_slot(&mut adj, *a, n);
                    for j in 0..n {
                        da[j] = da[j] + g[j];
                    }
                    let db = Self::adj_slot(&mut adj, *b, n);
                    for j in 0..n {
                        db[j] = db[j] + g[j];
                    }
                }
                Node::Sub { a, b } => {
                    let n = g.len();
                    let da = Self::adj_slot(&mut adj, *a, n);
                    for j in 0..n {
                        da[j] = da[j] + g[j];
                    }
                    let db = Self::adj_slot(&mut adj, *b, n);
                    for j in 0..n {
                        db[j] = db[j] - g[j];
                    }
                }
                Node::Mul { a, b } => {
                    let n = g.len();
                    let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                    let da_vals: Vec<S> = (0..n).map(|j| g[j] * bv[j]).collect();
                    let db_vals: Vec<S> = (0..n).map(|j| g[j] * av[j]).collect();
                    let da = Self::adj_slot(&mut adj, *a, n);
                    for j in 0..n {
                        da[j] = da[j] + da_vals[j];
                    }
                    let db = Self::adj_slot(&mut adj, *b, n);
                    for j in 0..n {
                        db[j] = db[j] + db_vals[j];
                    }
                }
                Node::Scale { x, c } => {
                    let n = g.len();
                    let dx = Self::adj_slot(&mut adj, *x, n);
                    for j in 0..n {
                        dx[j] = dx[j] + g[j] * *c;
                    }
                }
                Node::AddConst { x } => {
                    let n = g.len();
                    let dx = Self::adj_slot(&mut adj, *x, n);
                    for j in 0..n {
                        dx[j] = dx[j] + g[j];
                    }
                }
                Node::Exp { x } => {
                    let out = &self.values[i];
                    let dx = Self::adj_slot(&mut adj, *x, out.len());
                    for j in 0..out.len() {
                        dx[j] = dx[j] + g[j] * out[j];
                    }
                }
                Node::Clamp { x, lo, hi } => {
                    let xv = &self.values[x.0];
                    let dx = Self::adj_slot(&mut adj, *x, xv.len());
                    for j in 0..xv.len() {
                        if xv[j] > *lo && xv[j] < *hi {
                            dx[j] = dx[j] + g[j];
                        }
                    }
                }
                Node::Min2 { a, b } => {
                    let n = g.len();
                    let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                    let takes_a: Vec<bool> = (0..n).map(|j| av[j] <= bv[j]).collect();
                    let da = Self::adj_slot(&mut adj, *a, n);
                    for j in 0..n {
                        if takes_a[j] {
                            da[j] = da[j] + g[j];
                        }
                    }
                    let db = Self::adj_slot(&mut adj, *b, n);
                    for j in 0..n {
                        if !takes_a[j] {
                            db[j] = db[j] + g[j];
                        }
                    }
                }
                Node::Square { x } => {
                    let xv = &self.values[x.0];
                    let dx = Self::adj_slot(&mut adj, *x, xv.len());
                    for j in 0..xv.len() {
                        dx[j] = dx[j] + g[j] * (xv[j] + xv[j]);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn adj_slot<'a>(adj: &'a mut [Option<Box<[S]>>], v: Val, len: usize) -> &'a mut [S] {
        adj[v.0].get_or_insert_with(|| vec![S::zero(); len].into_boxed_slice())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_gru(
        &self,
        params: &ParamSet<S>,
        grads: &mut GradStore<S>,
        adj: &mut [Option<Box<[S]>>],
        ids: GruIds,
        x: Val,
        h: Val,
        r: &[S],
        z: &[S],
        hh: &[S],
        g: &[S],
    ) {
        let d = r.len();
        let hv = &self.values[h.0];
        let xv = &self.values[x.0];

        // h' = (1 - z) * h + z * hh
        let mut dhh = vec![S::zero(); d];
        let mut dz = vec![S::zero(); d];
        let mut dh = vec![S::zero(); d];
        for i in 0..d {
            dhh[i] = g[i] * z[i];
            dz[i] = g[i] * (hh[i] - hv[i]);
            dh[i] = g[i] * (S::one() - z[i]);
        }

        // Candidate: hh = tanh(a_h + U_h (r*h))
        let dah: Vec<S> = (0..d).map(|i| dhh[i] * (S::one() - hh[i] * hh[i])).collect();
        let mut drh = vec![S::zero(); d];
        matvec_t_add(params.tensor(ids.u_h), d, d, &dah, &mut drh);
        let mut dr = vec![S::zero(); d];
        for i in 0..d {
            dr[i] = drh[i] * hv[i];
            dh[i] = dh[i] + drh[i] * r[i];
        }

        // Gates: z = sigma(a_z + U_z h), r = sigma(a_r + U_r h)
        let daz: Vec<S> = (0..d).map(|i| dz[i] * z[i] * (S::one() - z[i])).collect();
        let dar: Vec<S> = (0..d).map(|i| dr[i] * r[i] * (S::one() - r[i])).collect();

        // Packed pre-activation gradient in w_x/b layout: [daz; dar; dah]
        let mut da = Vec::with_capacity(3 * d);
        da.extend_from_slice(&daz);
        da.extend_from_slice(&dar);
        da.extend_from_slice(&dah);

        // Parameter gradients.
        let cols = params.spec(ids.w_x).cols;
        outer_add(grads.tensor_mut(ids.w_x), cols, &da, xv);
        {
            let db = grads.tensor_mut(ids.b);
            for (dbv, gv) in db.iter_mut().zip(da.iter()) {
                *dbv = *dbv + *gv;
            }
        }
        outer_add(grads.tensor_mut(ids.u_zr), d, &da[..2 * d], hv);
        let rh: Vec<S> = (0..d).map(|i| r[i] * hv[i]).collect();
        outer_add(grads.tensor_mut(ids.u_h), d, &dah, &rh);

        // Input gradients.
        let dx = Self::adj_slot(adj, x, cols);
        matvec_t_add(params.tensor(ids.w_x), 3 * d, cols, &da, dx);
        matvec_t_add(params.tensor(ids.u_zr), 2 * d, d, &da[..2 * d], &mut dh);
        let dhs = Self::adj_slot(adj, h, d);
        for i in 0..d {
            dhs[i] = dhs[i] + dh[i];
        }
    }
}
