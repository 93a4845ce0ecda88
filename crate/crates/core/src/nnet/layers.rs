//! Per-kind forward and backward passes on frames x dims matrices.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_index(t: usize, off: i32, frames: usize) -> usize {
    (t as i64 + off as i64).clamp(0, frames as i64 - 1) as usize
}

/// Rows of `x` at each offset, concatenated per frame, with indices clamped to the edges.
pub(crate) fn splice(x: ArrayView2<'_, f64>, offsets: &[i32]) -> Array2<f64> {
    let (frames, d) = x.dim();
    let mut out = Array2::zeros((frames, d * offsets.len()));
    for t in 0..frames {
        for (j, &off) in offsets.iter().enumerate() {
            let src = clamp_index(t, off, frames);
            out.slice_mut(s![t, j * d..(j + 1) * d]).assign(&x.row(src));
        }
    }
    out
}

fn unsplice(ds: &Array2<f64>, offsets: &[i32], d: usize) -> Array2<f64> {
    let frames = ds.nrows();
    let mut dx = Array2::zeros((frames, d));
    for t in 0..frames {
        for (j, &off) in offsets.iter().enumerate() {
            let dst = clamp_index(t, off, frames);
            let mut row = dx.row_mut(dst);
            row += &ds.slice(s![t, j * d..(j + 1) * d]);
        }
    }
    dx
}

fn affine(x: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    z += b;
    z
}

pub(crate) struct TdnnCache {
    pub spliced: Array2<f64>,
    pub z: Array2<f64>,
}

pub(crate) fn tdnn_forward(
    x: ArrayView2<'_, f64>,
    offsets: &[i32],
    w: &Array2<f64>,
    b: &Array2<f64>,
) -> (Array2<f64>, TdnnCache) {
    let spliced = splice(x, offsets);
    let z = affine(spliced.view(), w, b);
    let y = z.mapv(|v| v.max(0.0));
    (y, TdnnCache { spliced, z })
}

/// Accumulates dW, db into `grads` and returns dX when `need_input`.
pub(crate) fn tdnn_backward(
    cache: &TdnnCache,
    dy: &Array2<f64>,
    offsets: &[i32],
    w: &Array2<f64>,
    grads: &mut [Array2<f64>],
    need_input: bool,
) -> Option<Array2<f64>> {
    let mut dz = dy.clone();
    Zip::from(&mut dz).and(&cache.z).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    grads[0] += &dz.t().dot(&cache.spliced);
    grads[1] += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
    need_input.then(|| unsplice(&dz.dot(w), offsets, w.ncols() / offsets.len()))
}

pub(crate) struct LstmCache {
    pub x: Array2<f64>,
    /// Activated gates per frame: input, forget, output, candidate blocks of `cell`.
    pub gates: Array2<f64>,
    pub c: Array2<f64>,
    pub tanh_c: Array2<f64>,
    pub h: Array2<f64>,
    pub r: Array2<f64>,
}

/// Projected LSTM without peepholes. Params: Wx (4C x in), Wr (4C x P), b (1 x 4C), Wp (P x C).
pub(crate) fn lstm_forward(
    x: ArrayView2<'_, f64>,
    params: &[Array2<f64>],
) -> (Array2<f64>, LstmCache) {
    let (wx, wr, b, wp) = (&params[0], &params[1], &params[2], &params[3]);
    let frames = x.nrows();
    let cell = wp.ncols();
    let proj = wp.nrows();
    let ax = affine(x, wx, b);
    let mut gates = Array2::zeros((frames, 4 * cell));
    let mut c = Array2::zeros((frames, cell));
    let mut tanh_c = Array2::zeros((frames, cell));
    let mut h = Array2::zeros((frames, cell));
    let mut r = Array2::zeros((frames, proj));
    let mut r_prev = Array1::<f64>::zeros(proj);
    let mut c_prev = Array1::<f64>::zeros(cell);
    for t in 0..frames {
        let a = &ax.row(t) + &wr.dot(&r_prev);
        for j in 0..cell {
            let i = sigmoid(a[j]);
            let f = sigmoid(a[cell + j]);
            let o = sigmoid(a[2 * cell + j]);
            let g = a[3 * cell + j].tanh();
            let cv = f * c_prev[j] + i * g;
            let tc = cv.tanh();
            gates[[t, j]] = i;
            gates[[t, cell + j]] = f;
            gates[[t, 2 * cell + j]] = o;
            gates[[t, 3 * cell + j]] = g;
            c[[t, j]] = cv;
            tanh_c[[t, j]] = tc;
            h[[t, j]] = o * tc;
        }
        r_prev = wp.dot(&h.row(t));
        r.row_mut(t).assign(&r_prev);
        c_prev.assign(&c.row(t));
    }
    let cache = LstmCache {
        x: x.to_owned(),
        gates,
        c,
        tanh_c,
        h,
        r: r.clone(),
    };
    (r, cache)
}

pub(crate) fn lstm_backward(
    cache: &LstmCache,
    dy: &Array2<f64>,
    params: &[Array2<f64>],
    grads: &mut [Array2<f64>],
    need_input: bool,
) -> Option<Array2<f64>> {
    let (wx, wr, wp) = (&params[0], &params[1], &params[3]);
    let frames = dy.nrows();
    let cell = wp.ncols();
    let proj = wp.nrows();
    let mut da = Array2::<f64>::zeros((frames, 4 * cell));
    let mut dr_all = Array2::<f64>::zeros((frames, proj));
    let mut dr_next = Array1::<f64>::zeros(proj);
    let mut dc_next = Array1::<f64>::zeros(cell);
    for t in (0..frames).rev() {
        let dr = &dy.row(t) + &dr_next;
        dr_all.row_mut(t).assign(&dr);
        let dh = wp.t().dot(&dr);
        for j in 0..cell {
            let i = cache.gates[[t, j]];
            let f = cache.gates[[t, cell + j]];
            let o = cache.gates[[t, 2 * cell + j]];
            let g = cache.gates[[t, 3 * cell + j]];
            let tc = cache.tanh_c[[t, j]];
            let c_prev = if t > 0 { cache.c[[t - 1, j]] } else { 0.0 };
            let d_o = dh[j] * tc;
            let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
            da[[t, j]] = dc * g * i * (1.0 - i);
            da[[t, cell + j]] = dc * c_prev * f * (1.0 - f);
            da[[t, 2 * cell + j]] = d_o * o * (1.0 - o);
            da[[t, 3 * cell + j]] = dc * i * (1.0 - g * g);
            dc_next[j] = dc * f;
        }
        dr_next = wr.t().dot(&da.row(t));
    }
    grads[0] += &da.t().dot(&cache.x);
    if frames > 1 {
        grads[1] += &da
            .slice(s![1.., ..])
            .t()
            .dot(&cache.r.slice(s![..frames - 1, ..]));
    }
    grads[2] += &da.sum_axis(Axis(0)).insert_axis(Axis(0));
    grads[3] += &dr_all.t().dot(&cache.h);
    need_input.then(|| da.dot(wx))
}

/// Log-softmax of `x W^T + b`, row-wise.
pub(crate) fn output_forward(
    x: ArrayView2<'_, f64>,
    w: &Array2<f64>,
    b: &Array2<f64>,
) -> Array2<f64> {
    let mut z = affine(x, w, b);
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    z
}

pub(crate) fn output_backward(
    x: &Array2<f64>,
    dz: &Array2<f64>,
    w: &Array2<f64>,
    grads: &mut [Array2<f64>],
    need_input: bool,
) -> Option<Array2<f64>> {
    grads[0] += &dz.t().dot(x);
    grads[1] += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
    need_input.then(|| dz.dot(w))
}
