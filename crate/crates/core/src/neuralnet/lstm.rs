use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use ndarray::linalg::general_mat_mul;

use super::sigmoid;

pub(super) struct LstmParams<'a> {
    pub units: usize,
    pub input: usize,
    pub w: ArrayView2<'a, f64>,
    pub r: ArrayView2<'a, f64>,
    pub b: &'a [f64],
}

#[derive(Debug)]
pub(super) struct LstmCache {
    /// Inputs after dropout, one `[batch, in]` per step.
    inputs: Vec<Array2<f64>>,
    input_mask: Option<Array2<f64>>,
    /// `h_{t-1}` after the recurrent mask.
    h_prev: Vec<Array2<f64>>,
    /// Activated gates `[i | f | g | o]`.
    gates: Vec<Array2<f64>>,
    c_prev: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
    rec_mask: Option<Array2<f64>>,
}

pub(super) enum HiddenGrad {
    /// Only the final hidden state was consumed downstream.
    Last(Array2<f64>),
    Sequence(Vec<Array2<f64>>),
}

pub(super) fn forward(
    p: &LstmParams,
    mut inputs: Vec<Array2<f64>>,
    input_mask: Option<Array2<f64>>,
    rec_mask: Option<Array2<f64>>,
    keep_cache: bool,
) -> (Vec<Array2<f64>>, Option<LstmCache>) {
    let h = p.units;
    let batch = inputs.first().map_or(0, |x| x.nrows());
    if let Some(m) = &input_mask {
        for x in &mut inputs {
            *x *= m;
        }
    }
    let steps = inputs.len();
    let mut hs = Vec::with_capacity(steps);
    let mut cache = keep_cache.then(|| LstmCache {
        inputs: Vec::new(),
        input_mask: None,
        h_prev: Vec::with_capacity(steps),
        gates: Vec::with_capacity(steps),
        c_prev: Vec::with_capacity(steps),
        tanh_c: Vec::with_capacity(steps),
        rec_mask: None,
    });
    let mut h_t = Array2::<f64>::zeros((batch, h));
    let mut c_t = Array2::<f64>::zeros((batch, h));
    for x in &inputs {
        let mut hm = h_t;
        if let Some(m) = &rec_mask {
            hm *= m;
        }
        let mut z = Array2::<f64>::zeros((batch, 4 * h));
        general_mat_mul(1.0, x, &p.w.t(), 0.0, &mut z);
        general_mat_mul(1.0, &hm, &p.r.t(), 1.0, &mut z);
        let mut c_new = Array2::<f64>::zeros((batch, h));
        let mut tc = Array2::<f64>::zeros((batch, h));
        let mut h_new = Array2::<f64>::zeros((batch, h));
        for row in 0..batch {
            let zr = z.row_mut(row).into_slice().expect("contiguous");
            for (zj, bj) in zr.iter_mut().zip(p.b) {
                *zj += bj;
            }
            for j in 0..h {
                zr[j] = sigmoid(zr[j]);
                zr[h + j] = sigmoid(zr[h + j]);
                zr[2 * h + j] = zr[2 * h + j].tanh();
                zr[3 * h + j] = sigmoid(zr[3 * h + j]);
                let c = zr[h + j] * c_t[[row, j]] + zr[j] * zr[2 * h + j];
                let t = c.tanh();
                c_new[[row, j]] = c;
                tc[[row, j]] = t;
                h_new[[row, j]] = zr[3 * h + j] * t;
            }
        }
        if let Some(cache) = cache.as_mut() {
            cache.h_prev.push(hm);
            cache.gates.push(z);
            cache.c_prev.push(c_t);
            cache.tanh_c.push(tc);
        }
        hs.push(h_new.clone());
        h_t = h_new;
        c_t = c_new;
    }
    if let Some(cache) = cache.as_mut() {
        cache.inputs = inputs;
        cache.input_mask = input_mask;
        cache.rec_mask = rec_mask;
    }
    (hs, cache)
}

/// Backpropagation through time. `grads` is this layer's slice of the flat
/// gradient (`W`, then `R`, then `b`). Returns input gradients when asked.
pub(super) fn backward(
    p: &LstmParams,
    cache: &LstmCache,
    dh: HiddenGrad,
    grads: &mut [f64],
    want_dx: bool,
) -> Option<Vec<Array2<f64>>> {
    let h = p.units;
    let steps = cache.gates.len();
    let batch = cache.gates.first().map_or(0, |g| g.nrows());
    let (gw, rest) = grads.split_at_mut(4 * h * p.input);
    let (gr, gb) = rest.split_at_mut(4 * h * h);
    let mut gw = ArrayViewMut2::from_shape((4 * h, p.input), gw).expect("layout");
    let mut gr = ArrayViewMut2::from_shape((4 * h, h), gr).expect("layout");

    let (mut per_step, last) = match dh {
        HiddenGrad::Last(a) => (None, Some(a)),
        HiddenGrad::Sequence(s) => (Some(s), None),
    };
    let mut dh_next = Array2::<f64>::zeros((batch, h));
    let mut dc_next = Array2::<f64>::zeros((batch, h));
    let mut dxs = want_dx.then(|| vec![Array2::<f64>::zeros((0, 0)); steps]);
    let mut dz = Array2::<f64>::zeros((batch, 4 * h));

    for t in (0..steps).rev() {
        let mut dh_t = dh_next;
        match (&mut per_step, &last) {
            (Some(s), _) => dh_t += &s[t],
            (None, Some(a)) if t + 1 == steps => dh_t += a,
            _ => {}
        }
        let gates = &cache.gates[t];
        let tc = &cache.tanh_c[t];
        let c_prev = &cache.c_prev[t];
        let mut dc_carry = Array2::<f64>::zeros((batch, h));
        for row in 0..batch {
            let g = gates.row(row);
            let dzr = dz.row_mut(row).into_slice().expect("contiguous");
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tcj = tc[[row, j]];
                let dhj = dh_t[[row, j]];
                let dc = dhj * o * (1.0 - tcj * tcj) + dc_next[[row, j]];
                dzr[j] = dc * gg * i * (1.0 - i);
                dzr[h + j] = dc * c_prev[[row, j]] * f * (1.0 - f);
                dzr[2 * h + j] = dc * i * (1.0 - gg * gg);
                dzr[3 * h + j] = dhj * tcj * o * (1.0 - o);
                dc_carry[[row, j]] = dc * f;
            }
        }
        general_mat_mul(1.0, &dz.t(), &cache.inputs[t], 1.0, &mut gw);
        general_mat_mul(1.0, &dz.t(), &cache.h_prev[t], 1.0, &mut gr);
        for (gbj, s) in gb.iter_mut().zip(dz.sum_axis(Axis(0))) {
            *gbj += s;
        }
        if let Some(dxs) = dxs.as_mut() {
            let mut dx = dz.dot(&p.w);
            if let Some(m) = &cache.input_mask {
                dx *= m;
            }
            dxs[t] = dx;
        }
        let mut dhp = dz.dot(&p.r);
        if let Some(m) = &cache.rec_mask {
            dhp *= m;
        }
        dh_next = dhp;
        dc_next = dc_carry;
    }
    dxs
}
