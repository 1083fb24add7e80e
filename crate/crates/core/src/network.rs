//! Permutation-invariant scalar network over node and pair features.
//!
//! Each layer updates node features from themselves, the mean of their
//! incident pair features and a global feature; pair features from themselves,
//! the mean of their two endpoint features and the global feature; and the
//! global feature from itself and the node and pair means. All three updates
//! are residual `tanh` maps and every layer is permutation-equivariant. The
//! readout pools node features over nodes and pair features over `i < j`,
//! concatenates the global feature and applies a two-layer map to a scalar.
//!
//! The initial global feature holds `ln(1 + n)`, the mean node one-hot, the
//! per-node edge-class counts, and optionally a time input. Nothing depends on
//! the padded capacity, so a graph evaluates identically in any container size.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{GemError, Result};
use crate::graph::{pair_count, pairs, Embedding, GraphSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub l_node: usize,
    pub l_edge: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Adds a scalar time input to the initial global feature.
    pub time_input: bool,
}

impl NetShape {
    fn global_in(&self) -> usize {
        1 + self.l_node + self.l_edge + usize::from(self.time_input)
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let h = self.hidden;
        let mut out = vec![
            ("node_in.w".to_string(), (self.l_node, h)),
            ("node_in.b".to_string(), (1, h)),
            ("pair_in.w".to_string(), (self.l_edge, h)),
            ("pair_in.b".to_string(), (1, h)),
            ("global_in.w".to_string(), (self.global_in(), h)),
            ("global_in.b".to_string(), (1, h)),
        ];
        for l in 0..self.layers {
            for part in ["node", "pair", "global"] {
                for w in ["self", "a", "b"] {
                    out.push((format!("layer{l}.{part}.{w}"), (h, h)));
                }
                out.push((format!("layer{l}.{part}.bias"), (1, h)));
            }
        }
        out.push(("readout.w1".to_string(), (3 * h, h)));
        out.push(("readout.b1".to_string(), (1, h)));
        out.push(("readout.w2".to_string(), (h, 1)));
        out.push(("readout.b2".to_string(), (1, 1)));
        out
    }

    /// `(l_node + 1)h + (l_edge + 1)h + (g + 1)h + L(9h² + 3h) + 3h² + 2h + 1`
    /// with `g = 1 + l_node + l_edge (+1 with a time input)`.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let g = self.global_in();
        (self.l_node + 1) * h
            + (self.l_edge + 1) * h
            + (g + 1) * h
            + self.layers * (9 * h * h + 3 * h)
            + 3 * h * h
            + 2 * h
            + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantNet {
    shape: NetShape,
    params: Vec<Mat>,
}

/// Active-region node and pair blocks as dense matrices.
pub struct ActiveBlocks {
    pub n: usize,
    pub nodes: Mat,
    pub pairs: Mat,
}

impl ActiveBlocks {
    pub fn from_embedding(e: &Embedding, spec: &GraphSpec, n: usize) -> Result<Self> {
        if e.len() != spec.embedding_dim() {
            return Err(GemError::SizeMismatch(format!(
                "embedding has length {} but spec needs {}",
                e.len(),
                spec.embedding_dim()
            )));
        }
        if n == 0 || n > spec.n_max {
            return Err(GemError::MalformedGraph(format!(
                "active node count {n} outside 1..={}",
                spec.n_max
            )));
        }
        let nodes = Array2::from_shape_fn((n, spec.l_node), |(i, c)| e.0[spec.node_offset(i) + c]);
        let mut pairs_mat = Array2::zeros((pair_count(n), spec.l_edge));
        for (p, (i, j)) in pairs(n).enumerate() {
            let o = spec.pair_offset(i, j);
            for c in 0..spec.l_edge {
                pairs_mat[[p, c]] = e.0[o + c];
            }
        }
        Ok(ActiveBlocks { n, nodes, pairs: pairs_mat })
    }

    /// Scatters active-region matrices back into the flat layout; padded
    /// blocks are zero.
    pub fn scatter(nodes: &Mat, pair_rows: &Mat, spec: &GraphSpec, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; spec.embedding_dim()];
        for i in 0..n {
            let o = spec.node_offset(i);
            for c in 0..spec.l_node {
                out[o + c] = nodes[[i, c]];
            }
        }
        for (p, (i, j)) in pairs(n).enumerate() {
            let o = spec.pair_offset(i, j);
            for c in 0..spec.l_edge {
                out[o + c] = pair_rows[[p, c]];
            }
        }
        out
    }
}

/// Leaves bound for one forward pass.
pub struct Bound {
    pub params: Vec<Var>,
    pub nodes: Var,
    pub pairs: Var,
    pub time: Option<Var>,
}

impl InvariantNet {
    /// Uniform fan-in scaled initialization; biases start at zero.
    pub fn init(shape: NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shape
            .layout()
            .into_iter()
            .map(|(name, (r, c))| {
                if name.ends_with(".b") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                    Array2::zeros((r, c))
                } else {
                    let gain = if name.starts_with("layer") { 0.5 } else { 1.0 };
                    let bound = gain * (3.0 / r as f64).sqrt();
                    Array2::from_shape_fn((r, c), |_| rng.gen_range(-bound..bound))
                }
            })
            .collect();
        InvariantNet { shape, params }
    }

    pub fn from_params(shape: NetShape, params: Vec<Mat>) -> Result<Self> {
        let layout = shape.layout();
        if layout.len() != params.len() {
            return Err(GemError::SizeMismatch(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, dim), p) in layout.iter().zip(&params) {
            if p.dim() != *dim {
                return Err(GemError::SizeMismatch(format!("{name}: expected {dim:?}, got {:?}", p.dim())));
            }
        }
        Ok(InvariantNet { shape, params })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Puts parameters and inputs on the tape. Parameters are tracked only
    /// when `train` is set.
    pub fn bind<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        blocks: &ActiveBlocks,
        time: Option<f64>,
        train: bool,
        track_inputs: bool,
    ) -> Bound {
        let params = self
            .params
            .iter()
            .map(|p| if train { tape.var_ref(p) } else { tape.constant_ref(p) })
            .collect();
        let leaf = |tape: &mut Tape<'a>, m: Mat| if track_inputs { tape.var(m) } else { tape.constant(m) };
        let nodes = leaf(tape, blocks.nodes.clone());
        let pairs = leaf(tape, blocks.pairs.clone());
        let time = if self.shape.time_input {
            Some(leaf(tape, Array2::from_elem((1, 1), time.unwrap_or(1.0))))
        } else {
            None
        };
        Bound { params, nodes, pairs, time }
    }

    /// Records the forward pass and returns the `1×1` output node.
    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bound, n: usize) -> Result<Var> {
        let m = pair_count(n);
        let p = &b.params;
        let inv_n = 1.0 / n as f64;
        let inv_m = 1.0 / m.max(1) as f64;
        let inv_deg = 1.0 / n.saturating_sub(1).max(1) as f64;

        let x = tape.matmul(b.nodes, p[0]);
        let x = tape.add_row(x, p[1]);
        let mut hv = tape.tanh(x);
        let e = tape.matmul(b.pairs, p[2]);
        let e = tape.add_row(e, p[3]);
        let mut he = tape.tanh(e);

        let size = tape.constant(Array2::from_elem((1, 1), (1.0 + n as f64).ln()));
        let node_hist = tape.sum_rows(b.nodes);
        let node_hist = tape.scale(node_hist, inv_n);
        let deg_hist = tape.sum_rows(b.pairs);
        let deg_hist = tape.scale(deg_hist, 2.0 * inv_n);
        let mut parts = vec![size, node_hist, deg_hist];
        if let Some(t) = b.time {
            parts.push(t);
        }
        let g0 = tape.concat_cols(&parts);
        let g = tape.matmul(g0, p[4]);
        let g = tape.add_row(g, p[5]);
        let mut f = tape.tanh(g);
        check(tape, &[hv, he, f], 0)?;

        for l in 0..self.shape.layers {
            let w = &p[6 + 12 * l..6 + 12 * (l + 1)];

            let incident = tape.nodes_from_pairs(he, n);
            let incident = tape.scale(incident, inv_deg);
            let ends = tape.pairs_from_nodes(hv);
            let ends = tape.scale(ends, 0.5);
            let node_mean = tape.sum_rows(hv);
            let node_mean = tape.scale(node_mean, inv_n);
            let pair_mean = tape.sum_rows(he);
            let pair_mean = tape.scale(pair_mean, inv_m);

            let hv_next = residual(tape, hv, incident, f, &w[0..4], true);
            let he_next = residual(tape, he, ends, f, &w[4..8], true);

            let a = tape.matmul(f, w[8]);
            let bn = tape.matmul(node_mean, w[9]);
            let bp = tape.matmul(pair_mean, w[10]);
            let s = tape.add(a, bn);
            let s = tape.add(s, bp);
            let s = tape.add(s, w[11]);
            let s = tape.tanh(s);
            f = tape.add(f, s);

            hv = hv_next;
            he = he_next;
            check(tape, &[hv, he, f], l + 1)?;
        }

        let k = p.len() - 4;
        let xbar = tape.sum_rows(hv);
        let ebar = tape.sum_rows(he);
        let z = tape.concat_cols(&[xbar, ebar, f]);
        let r = tape.matmul(z, p[k]);
        let r = tape.add(r, p[k + 1]);
        let r = tape.tanh(r);
        let out = tape.matmul(r, p[k + 2]);
        let out = tape.add(out, p[k + 3]);
        if !tape.scalar(out).is_finite() {
            return Err(GemError::Numeric { stage: "readout", layer: self.shape.layers + 1 });
        }
        Ok(out)
    }

    /// Scalar output only.
    pub fn eval(&self, blocks: &ActiveBlocks, time: Option<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, blocks, time, false, false);
        let out = self.forward(&mut tape, &b, blocks.n)?;
        Ok(tape.scalar(out))
    }

    /// Output plus its gradient with respect to the node block matrix, the
    /// pair block matrix and the time input.
    pub fn eval_input_grad(&self, blocks: &ActiveBlocks, time: Option<f64>) -> Result<InputGrad> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, blocks, time, false, true);
        let out = self.forward(&mut tape, &b, blocks.n)?;
        let mut wrt = vec![b.nodes, b.pairs];
        wrt.extend(b.time);
        let mut g = tape.grad(out, &wrt);
        let time_grad = (g.len() == 3).then(|| g[2][[0, 0]]);
        g.truncate(2);
        let pairs = g.pop().unwrap();
        let nodes = g.pop().unwrap();
        Ok(InputGrad { value: tape.scalar(out), nodes, pairs, time: time_grad })
    }

    /// Output plus its gradient with respect to every parameter.
    pub fn eval_param_grad(&self, blocks: &ActiveBlocks, time: Option<f64>) -> Result<(f64, Vec<Mat>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, blocks, time, true, false);
        let out = self.forward(&mut tape, &b, blocks.n)?;
        let g = tape.grad(out, &b.params);
        Ok((tape.scalar(out), g))
    }

    /// `‖∇_input f + v‖²` over the active blocks and its parameter gradient,
    /// obtained by differentiating through the recorded input gradient.
    pub fn flow_loss(&self, blocks: &ActiveBlocks, v_nodes: &Mat, v_pairs: &Mat) -> Result<(f64, Vec<Mat>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, blocks, None, true, true);
        let out = self.forward(&mut tape, &b, blocks.n)?;
        let g = tape.grad_graph(out, &[b.nodes, b.pairs]);
        let vn = tape.constant(v_nodes.clone());
        let vp = tape.constant(v_pairs.clone());
        let rn = tape.add(g[0], vn);
        let rp = tape.add(g[1], vp);
        let ln = tape.sum_squares(rn);
        let lp = tape.sum_squares(rp);
        let loss = tape.add(ln, lp);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(GemError::Numeric { stage: "flow loss", layer: self.shape.layers + 1 });
        }
        let grads = tape.grad(loss, &b.params);
        Ok((value, grads))
    }
}

pub struct InputGrad {
    pub value: f64,
    pub nodes: Mat,
    pub pairs: Mat,
    pub time: Option<f64>,
}

fn residual(tape: &mut Tape<'_>, h: Var, msg: Var, f: Var, w: &[Var], add_skip: bool) -> Var {
    let a = tape.matmul(h, w[0]);
    let m = tape.matmul(msg, w[1]);
    let s = tape.add(a, m);
    let gf = tape.matmul(f, w[2]);
    let gf = tape.add(gf, w[3]);
    let s = tape.add_row(s, gf);
    let s = tape.tanh(s);
    if add_skip {
        tape.add(h, s)
    } else {
        s
    }
}

fn check(tape: &Tape<'_>, vars: &[Var], layer: usize) -> Result<()> {
    for &v in vars {
        if !tape.value(v).iter().all(|x| x.is_finite()) {
            return Err(GemError::Numeric { stage: "message passing", layer });
        }
    }
    Ok(())
}
