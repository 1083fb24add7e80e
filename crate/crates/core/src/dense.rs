//! Hand-written forward and reverse passes of [`InvariantNet`] on flat
//! row-major buffers.
//!
//! Sampling only needs first-order quantities (value, input gradient,
//! parameter gradient), and at these sizes the tape's per-op allocations
//! dominate its cost. The tape remains the reference implementation and is
//! used wherever second-order terms are needed.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::autodiff::Mat;
use crate::error::{GemError, Result};
use crate::network::{ActiveBlocks, InvariantNet};

/// `out[r×c] (+)= a[r×k] · b[k×c]`.
fn mm(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize, accumulate: bool) {
    let a = ArrayView2::from_shape((r, k), &a[..r * k]).expect("shape");
    let b = ArrayView2::from_shape((k, c), &b[..k * c]).expect("shape");
    let mut o = ArrayViewMut2::from_shape((r, c), &mut out[..r * c]).expect("shape");
    general_mat_mul(1.0, &a, &b, if accumulate { 1.0 } else { 0.0 }, &mut o);
}

/// `out[r×k] += d[r×c] · b[k×c]ᵀ`.
fn mm_bt(d: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    let d = ArrayView2::from_shape((r, c), &d[..r * c]).expect("shape");
    let b = ArrayView2::from_shape((k, c), &b[..k * c]).expect("shape");
    let mut o = ArrayViewMut2::from_shape((r, k), &mut out[..r * k]).expect("shape");
    general_mat_mul(1.0, &d, &b.t(), 1.0, &mut o);
}

/// `out[k×c] += a[r×k]ᵀ · d[r×c]`.
fn mm_at(a: &[f64], d: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    let a = ArrayView2::from_shape((r, k), &a[..r * k]).expect("shape");
    let d = ArrayView2::from_shape((r, c), &d[..r * c]).expect("shape");
    let mut o = ArrayViewMut2::from_shape((k, c), &mut out[..k * c]).expect("shape");
    general_mat_mul(1.0, &a.t(), &d, 1.0, &mut o);
}

fn col_sum(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for i in 0..r {
        for (o, &v) in s.iter_mut().zip(&a[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    s
}

fn add_row(a: &mut [f64], row: &[f64]) {
    for chunk in a.chunks_mut(row.len()) {
        for (x, &r) in chunk.iter_mut().zip(row) {
            *x += r;
        }
    }
}

fn tanh_in_place(a: &mut [f64]) {
    a.iter_mut().for_each(|x| *x = x.tanh());
}

/// `dz = d ⊙ (1 − y²)`.
fn tanh_back(d: &[f64], y: &[f64]) -> Vec<f64> {
    d.iter().zip(y).map(|(&g, &t)| g * (1.0 - t * t)).collect()
}

/// Pair rows summed into both endpoint rows.
fn nodes_from_pairs(p: &[f64], n: usize, c: usize, out: &mut [f64], scale: f64) {
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let row = &p[k * c..(k + 1) * c];
            for (t, &v) in row.iter().enumerate() {
                out[i * c + t] += scale * v;
                out[j * c + t] += scale * v;
            }
            k += 1;
        }
    }
}

/// Each pair row is the sum of its endpoint rows.
fn pairs_from_nodes(x: &[f64], n: usize, c: usize, out: &mut [f64], scale: f64) {
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            for t in 0..c {
                out[k * c + t] += scale * (x[i * c + t] + x[j * c + t]);
            }
            k += 1;
        }
    }
}

fn slice(m: &Mat) -> &[f64] {
    m.as_slice().expect("parameters are contiguous")
}

struct LayerCache {
    hv: Vec<f64>,
    he: Vec<f64>,
    f: Vec<f64>,
    inc: Vec<f64>,
    ends: Vec<f64>,
    node_mean: Vec<f64>,
    pair_mean: Vec<f64>,
    sv: Vec<f64>,
    se: Vec<f64>,
    sf: Vec<f64>,
}

struct Forward {
    n: usize,
    m: usize,
    g0: Vec<f64>,
    hv0: Vec<f64>,
    he0: Vec<f64>,
    f0: Vec<f64>,
    layers: Vec<LayerCache>,
    z: Vec<f64>,
    r: Vec<f64>,
    out: f64,
}

fn check(v: &[f64], stage: &'static str, layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GemError::Numeric { stage, layer })
    }
}

/// Output of [`InvariantNet::dense_grad`].
pub struct DenseGrad {
    pub value: f64,
    pub nodes: Option<Mat>,
    pub pairs: Option<Mat>,
    pub time: Option<f64>,
    pub params: Option<Vec<Mat>>,
}

impl InvariantNet {
    fn dense_forward(&self, blocks: &ActiveBlocks, time: Option<f64>) -> Result<Forward> {
        let s = *self.shape();
        let (h, ln, le) = (s.hidden, s.l_node, s.l_edge);
        let n = blocks.n;
        let m = blocks.pairs.nrows();
        let p = self.params();
        let x = blocks.nodes.as_slice().expect("contiguous");
        let e = blocks.pairs.as_slice().expect("contiguous");

        let mut hv = vec![0.0; n * h];
        mm(x, slice(&p[0]), &mut hv, n, ln, h, false);
        add_row(&mut hv, slice(&p[1]));
        tanh_in_place(&mut hv);
        let mut he = vec![0.0; m * h];
        mm(e, slice(&p[2]), &mut he, m, le, h, false);
        add_row(&mut he, slice(&p[3]));
        tanh_in_place(&mut he);

        let mut g0 = Vec::with_capacity(1 + ln + le + 1);
        g0.push((1.0 + n as f64).ln());
        g0.extend(col_sum(x, n, ln).into_iter().map(|v| v / n as f64));
        g0.extend(col_sum(e, m, le).into_iter().map(|v| 2.0 * v / n as f64));
        if s.time_input {
            g0.push(time.unwrap_or(1.0));
        }
        let mut f = slice(&p[5]).to_vec();
        mm(&g0, slice(&p[4]), &mut f, 1, g0.len(), h, true);
        tanh_in_place(&mut f);
        check(&hv, "message passing", 0)?;
        check(&he, "message passing", 0)?;
        check(&f, "message passing", 0)?;
        let (hv0, he0, f0) = (hv.clone(), he.clone(), f.clone());

        let inv_deg = 1.0 / n.saturating_sub(1).max(1) as f64;
        let mut layers = Vec::with_capacity(s.layers);
        for l in 0..s.layers {
            let w = &p[6 + 12 * l..6 + 12 * (l + 1)];
            let mut inc = vec![0.0; n * h];
            nodes_from_pairs(&he, n, h, &mut inc, inv_deg);
            let mut ends = vec![0.0; m * h];
            pairs_from_nodes(&hv, n, h, &mut ends, 0.5);
            let node_mean: Vec<f64> = col_sum(&hv, n, h).into_iter().map(|v| v / n as f64).collect();
            let pair_mean: Vec<f64> = col_sum(&he, m, h).into_iter().map(|v| v / m.max(1) as f64).collect();

            let mut gv = slice(&w[3]).to_vec();
            mm(&f, slice(&w[2]), &mut gv, 1, h, h, true);
            let mut sv = vec![0.0; n * h];
            mm(&hv, slice(&w[0]), &mut sv, n, h, h, false);
            mm(&inc, slice(&w[1]), &mut sv, n, h, h, true);
            add_row(&mut sv, &gv);
            tanh_in_place(&mut sv);

            let mut ge = slice(&w[7]).to_vec();
            mm(&f, slice(&w[6]), &mut ge, 1, h, h, true);
            let mut se = vec![0.0; m * h];
            mm(&he, slice(&w[4]), &mut se, m, h, h, false);
            mm(&ends, slice(&w[5]), &mut se, m, h, h, true);
            add_row(&mut se, &ge);
            tanh_in_place(&mut se);

            let mut sf = slice(&w[11]).to_vec();
            mm(&f, slice(&w[8]), &mut sf, 1, h, h, true);
            mm(&node_mean, slice(&w[9]), &mut sf, 1, h, h, true);
            mm(&pair_mean, slice(&w[10]), &mut sf, 1, h, h, true);
            tanh_in_place(&mut sf);

            let hv_next: Vec<f64> = hv.iter().zip(&sv).map(|(a, b)| a + b).collect();
            let he_next: Vec<f64> = he.iter().zip(&se).map(|(a, b)| a + b).collect();
            let f_next: Vec<f64> = f.iter().zip(&sf).map(|(a, b)| a + b).collect();
            check(&hv_next, "message passing", l + 1)?;
            check(&he_next, "message passing", l + 1)?;
            check(&f_next, "message passing", l + 1)?;
            layers.push(LayerCache { hv, he, f, inc, ends, node_mean, pair_mean, sv, se, sf });
            hv = hv_next;
            he = he_next;
            f = f_next;
        }

        let k = p.len() - 4;
        let mut z = col_sum(&hv, n, h);
        z.extend(col_sum(&he, m, h));
        z.extend_from_slice(&f);
        let mut r = slice(&p[k + 1]).to_vec();
        mm(&z, slice(&p[k]), &mut r, 1, 3 * h, h, true);
        tanh_in_place(&mut r);
        let w2 = slice(&p[k + 2]);
        let out = r.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() + p[k + 3][[0, 0]];
        if !out.is_finite() {
            return Err(GemError::Numeric { stage: "readout", layer: s.layers + 1 });
        }
        Ok(Forward { n, m, g0, hv0, he0, f0, layers, z, r, out })
    }

    /// Output only, without building a tape.
    pub fn dense_eval(&self, blocks: &ActiveBlocks, time: Option<f64>) -> Result<f64> {
        Ok(self.dense_forward(blocks, time)?.out)
    }

    /// Output and first-order gradients with respect to the inputs and/or
    /// the parameters.
    pub fn dense_grad(&self, blocks: &ActiveBlocks, time: Option<f64>, inputs: bool, params: bool) -> Result<DenseGrad> {
        let fw = self.dense_forward(blocks, time)?;
        let s = *self.shape();
        let (h, ln, le) = (s.hidden, s.l_node, s.l_edge);
        let (n, m) = (fw.n, fw.m);
        let p = self.params();
        let x = blocks.nodes.as_slice().expect("contiguous");
        let e = blocks.pairs.as_slice().expect("contiguous");
        let mut gp: Vec<Vec<f64>> = if params { p.iter().map(|t| vec![0.0; t.len()]).collect() } else { Vec::new() };

        // readout
        let k = p.len() - 4;
        let w2 = slice(&p[k + 2]);
        let dr: Vec<f64> = w2.iter().zip(&fw.r).map(|(&w, &r)| w * (1.0 - r * r)).collect();
        if params {
            gp[k + 3][0] = 1.0;
            gp[k + 2].copy_from_slice(&fw.r);
            gp[k + 1].copy_from_slice(&dr);
            mm_at(&fw.z, &dr, &mut gp[k], 1, 3 * h, h);
        }
        let mut dz = vec![0.0; 3 * h];
        mm_bt(&dr, slice(&p[k]), &mut dz, 1, 3 * h, h);
        let mut dhv = vec![0.0; n * h];
        add_row(&mut dhv, &dz[..h]);
        let mut dhe = vec![0.0; m * h];
        add_row(&mut dhe, &dz[h..2 * h]);
        let mut df = dz[2 * h..].to_vec();

        let inv_deg = 1.0 / n.saturating_sub(1).max(1) as f64;
        for l in (0..s.layers).rev() {
            let c = &fw.layers[l];
            let w = &p[6 + 12 * l..6 + 12 * (l + 1)];
            let base = 6 + 12 * l;

            let dzv = tanh_back(&dhv, &c.sv);
            let dze = tanh_back(&dhe, &c.se);
            let dzf = tanh_back(&df, &c.sf);
            let dgv = col_sum(&dzv, n, h);
            let dge = col_sum(&dze, m, h);

            if params {
                mm_at(&c.hv, &dzv, &mut gp[base], n, h, h);
                mm_at(&c.inc, &dzv, &mut gp[base + 1], n, h, h);
                mm_at(&c.f, &dgv, &mut gp[base + 2], 1, h, h);
                gp[base + 3].iter_mut().zip(&dgv).for_each(|(a, b)| *a += b);
                mm_at(&c.he, &dze, &mut gp[base + 4], m, h, h);
                mm_at(&c.ends, &dze, &mut gp[base + 5], m, h, h);
                mm_at(&c.f, &dge, &mut gp[base + 6], 1, h, h);
                gp[base + 7].iter_mut().zip(&dge).for_each(|(a, b)| *a += b);
                mm_at(&c.f, &dzf, &mut gp[base + 8], 1, h, h);
                mm_at(&c.node_mean, &dzf, &mut gp[base + 9], 1, h, h);
                mm_at(&c.pair_mean, &dzf, &mut gp[base + 10], 1, h, h);
                gp[base + 11].iter_mut().zip(&dzf).for_each(|(a, b)| *a += b);
            }

            // residual paths keep dhv, dhe, df; add the branch contributions
            mm_bt(&dzv, slice(&w[0]), &mut dhv, n, h, h);
            let mut dinc = vec![0.0; n * h];
            mm_bt(&dzv, slice(&w[1]), &mut dinc, n, h, h);
            mm_bt(&dze, slice(&w[4]), &mut dhe, m, h, h);
            let mut dends = vec![0.0; m * h];
            mm_bt(&dze, slice(&w[5]), &mut dends, m, h, h);
            let mut dnm = vec![0.0; h];
            mm_bt(&dzf, slice(&w[9]), &mut dnm, 1, h, h);
            let mut dpm = vec![0.0; h];
            mm_bt(&dzf, slice(&w[10]), &mut dpm, 1, h, h);
            mm_bt(&dgv, slice(&w[2]), &mut df, 1, h, h);
            mm_bt(&dge, slice(&w[6]), &mut df, 1, h, h);
            mm_bt(&dzf, slice(&w[8]), &mut df, 1, h, h);

            pairs_from_nodes(&dinc, n, h, &mut dhe, inv_deg);
            nodes_from_pairs(&dends, n, h, &mut dhv, 0.5);
            let nm: Vec<f64> = dnm.iter().map(|v| v / n as f64).collect();
            add_row(&mut dhv, &nm);
            if m > 0 {
                let pm: Vec<f64> = dpm.iter().map(|v| v / m as f64).collect();
                add_row(&mut dhe, &pm);
            }
        }

        let dzv0 = tanh_back(&dhv, &fw.hv0);
        let dze0 = tanh_back(&dhe, &fw.he0);
        let dzg = tanh_back(&df, &fw.f0);
        let g_in = fw.g0.len();
        if params {
            mm_at(x, &dzv0, &mut gp[0], n, ln, h);
            gp[1].iter_mut().zip(col_sum(&dzv0, n, h)).for_each(|(a, b)| *a += b);
            mm_at(e, &dze0, &mut gp[2], m, le, h);
            gp[3].iter_mut().zip(col_sum(&dze0, m, h)).for_each(|(a, b)| *a += b);
            mm_at(&fw.g0, &dzg, &mut gp[4], 1, g_in, h);
            gp[5].iter_mut().zip(&dzg).for_each(|(a, b)| *a += b);
        }

        let (mut nodes, mut pairs, mut time_grad) = (None, None, None);
        if inputs {
            let mut dx = vec![0.0; n * ln];
            mm_bt(&dzv0, slice(&p[0]), &mut dx, n, ln, h);
            let mut de = vec![0.0; m * le];
            mm_bt(&dze0, slice(&p[2]), &mut de, m, le, h);
            let mut dg0 = vec![0.0; g_in];
            mm_bt(&dzg, slice(&p[4]), &mut dg0, 1, g_in, h);
            let xs: Vec<f64> = dg0[1..1 + ln].iter().map(|v| v / n as f64).collect();
            add_row(&mut dx, &xs);
            if m > 0 {
                let es: Vec<f64> = dg0[1 + ln..1 + ln + le].iter().map(|v| 2.0 * v / n as f64).collect();
                add_row(&mut de, &es);
            }
            if s.time_input {
                time_grad = Some(dg0[g_in - 1]);
            }
            nodes = Some(Mat::from_shape_vec((n, ln), dx).expect("shape"));
            pairs = Some(Mat::from_shape_vec((m, le), de).expect("shape"));
        }
        let params_out = params.then(|| {
            gp.into_iter()
                .zip(p)
                .map(|(g, t)| Mat::from_shape_vec(t.raw_dim(), g).expect("shape"))
                .collect()
        });
        Ok(DenseGrad { value: fw.out, nodes, pairs, time: time_grad, params: params_out })
    }
}
