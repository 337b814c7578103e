//! Minimal neural-net plumbing shared by the three models: a flat parameter
//! store with named slots, dense/LSTM kernels with hand-written backward
//! passes, Adam, checkpoint framing, and a central-difference gradient check.
//!
//! Everything is f64 and single-threaded. The models are small enough that
//! clarity beats cleverness; correctness is pinned by finite differences.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("vocabulary hash mismatch: checkpoint {expected}, provided {found}")]
    VocabMismatch { expected: String, found: String },
}

// ============================================================================
// Flat parameter store
// ============================================================================

/// A named view into the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Allocates slots sequentially; the final `len` is the parameter count.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    len: usize,
}

impl LayoutBuilder {
    pub fn slot(&mut self, len: usize) -> Slot {
        let s = Slot { offset: self.len, len };
        self.len += len;
        s
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Slot {
        self.slot(rows * cols)
    }

    pub fn total(&self) -> usize {
        self.len
    }
}

pub fn view<'a>(data: &'a [f64], s: Slot) -> &'a [f64] {
    &data[s.range()]
}

pub fn view_mut<'a>(data: &'a mut [f64], s: Slot) -> &'a mut [f64] {
    &mut data[s.range()]
}

/// Xavier-uniform init over a slot interpreted as a rows x cols matrix.
pub fn init_xavier(rng: &mut impl Rng, data: &mut [f64], s: Slot, rows: usize, cols: usize) {
    let scale = (6.0 / (rows + cols) as f64).sqrt();
    for v in view_mut(data, s) {
        *v = rng.gen_range(-scale..scale);
    }
}

pub fn init_uniform(rng: &mut impl Rng, data: &mut [f64], s: Slot, scale: f64) {
    for v in view_mut(data, s) {
        *v = rng.gen_range(-scale..scale);
    }
}

// ============================================================================
// Kernels
// ============================================================================

/// y = W x, W row-major rows x cols.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *yr = dot(row, x);
    }
}

/// dx += W^T dy.
pub fn matvec_t_add(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(dy.len(), rows);
    for (r, &dyr) in dy.iter().enumerate() {
        if dyr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (c, &wv) in row.iter().enumerate() {
            dx[c] += wv * dyr;
        }
    }
}

/// dW += dy ⊗ x.
pub fn outer_add(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), rows * cols);
    for (r, &dyr) in dy.iter().enumerate() {
        if dyr == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (c, &xc) in x.iter().enumerate() {
            row[c] += dyr * xc;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
}

pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// Backward through softmax: given y = softmax(x) and dL/dy, returns dL/dx.
pub fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let s = dot(y, dy);
    for i in 0..y.len() {
        dx[i] += y[i] * (dy[i] - s);
    }
}

/// Rescale gradients so the global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) {
    let norm = dot(grads, grads).sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
}

// ============================================================================
// Dense layer helpers (forward + backward over flat slots)
// ============================================================================

/// y = W x + b.
pub fn dense_forward(
    data: &[f64],
    w: Slot,
    b: Slot,
    rows: usize,
    cols: usize,
    x: &[f64],
    y: &mut [f64],
) {
    matvec(view(data, w), rows, cols, x, y);
    add_assign(y, view(data, b));
}

/// Backward of `dense_forward`: accumulates dW, db and dx.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    data: &[f64],
    grad: &mut [f64],
    w: Slot,
    b: Slot,
    rows: usize,
    cols: usize,
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
) {
    outer_add(view_mut(grad, w), rows, cols, dy, x);
    add_assign(view_mut(grad, b), dy);
    matvec_t_add(view(data, w), rows, cols, dy, dx);
}

// ============================================================================
// LSTM cell
// ============================================================================

/// Weight shape for one cell: W is (4H) x (input + hidden), gate order
/// [input, forget, cell, output]; b is 4H.
#[derive(Debug, Clone, Copy)]
pub struct LstmDims {
    pub input: usize,
    pub hidden: usize,
}

impl LstmDims {
    pub fn weight_rows(&self) -> usize {
        4 * self.hidden
    }

    pub fn weight_cols(&self) -> usize {
        self.input + self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.weight_rows() * (self.weight_cols() + 1)
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct LstmStep {
    pub xh: Vec<f64>,     // [x; h_prev]
    pub gates: Vec<f64>,  // activated [i, f, g, o]
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn lstm_forward(
    data: &[f64],
    w: Slot,
    b: Slot,
    dims: LstmDims,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> LstmStep {
    let hn = dims.hidden;
    let mut xh = Vec::with_capacity(dims.weight_cols());
    xh.extend_from_slice(x);
    xh.extend_from_slice(h_prev);

    let mut z = vec![0.0; 4 * hn];
    dense_forward(data, w, b, dims.weight_rows(), dims.weight_cols(), &xh, &mut z);

    let mut gates = z;
    for v in &mut gates[..2 * hn] {
        *v = sigmoid(*v);
    }
    for v in &mut gates[2 * hn..3 * hn] {
        *v = v.tanh();
    }
    for v in &mut gates[3 * hn..] {
        *v = sigmoid(*v);
    }

    let mut c = vec![0.0; hn];
    for k in 0..hn {
        c[k] = gates[hn + k] * c_prev[k] + gates[k] * gates[2 * hn + k];
    }
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hn).map(|k| gates[3 * hn + k] * tanh_c[k]).collect();

    LstmStep { xh, gates, c_prev: c_prev.to_vec(), c, tanh_c, h }
}

/// Backward through one cell step. `dh` and `dc` are gradients flowing into
/// this step's outputs; gradients w.r.t. the inputs are accumulated into
/// `dx`, `dh_prev`, `dc_prev`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward(
    data: &[f64],
    grad: &mut [f64],
    w: Slot,
    b: Slot,
    dims: LstmDims,
    step: &LstmStep,
    dh: &[f64],
    dc: &[f64],
    dx: &mut [f64],
    dh_prev: &mut [f64],
    dc_prev: &mut [f64],
) {
    let hn = dims.hidden;
    let (gi, gf, gg, go) = (
        &step.gates[..hn],
        &step.gates[hn..2 * hn],
        &step.gates[2 * hn..3 * hn],
        &step.gates[3 * hn..],
    );

    let mut dz = vec![0.0; 4 * hn];
    for k in 0..hn {
        let do_ = dh[k] * step.tanh_c[k];
        let dc_total = dc[k] + dh[k] * go[k] * (1.0 - step.tanh_c[k] * step.tanh_c[k]);
        let di = dc_total * gg[k];
        let df = dc_total * step.c_prev[k];
        let dg = dc_total * gi[k];
        dc_prev[k] += dc_total * gf[k];

        dz[k] = di * gi[k] * (1.0 - gi[k]);
        dz[hn + k] = df * gf[k] * (1.0 - gf[k]);
        dz[2 * hn + k] = dg * (1.0 - gg[k] * gg[k]);
        dz[3 * hn + k] = do_ * go[k] * (1.0 - go[k]);
    }

    let mut dxh = vec![0.0; dims.weight_cols()];
    dense_backward(
        data,
        grad,
        w,
        b,
        dims.weight_rows(),
        dims.weight_cols(),
        &step.xh,
        &dz,
        &mut dxh,
    );
    add_assign(dx, &dxh[..dims.input]);
    add_assign(dh_prev, &dxh[dims.input..]);
}

/// Forget-gate biases start positive so early training does not wipe state.
pub fn init_lstm_forget_bias(data: &mut [f64], b: Slot, hidden: usize) {
    let bias = view_mut(data, b);
    for v in &mut bias[hidden..2 * hidden] {
        *v = 1.0;
    }
}

// ============================================================================
// Adam
// ============================================================================

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ============================================================================
// Checkpoint framing
// ============================================================================

/// First line: JSON header. Remainder: `param_count` little-endian f32s.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub param_count: usize,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &[f64]) -> io::Result<()> {
    debug_assert_eq!(header.param_count, params.len());
    let mut f = std::fs::File::create(path)?;
    let mut line = serde_json::to_string(header).expect("header serializes");
    line.push('\n');
    f.write_all(line.as_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 4);
    for &p in params {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    f.write_all(&buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Malformed("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| CheckpointError::Malformed(format!("bad header: {e}")))?;
    let block = &bytes[nl + 1..];
    if block.len() != header.param_count * 4 {
        return Err(CheckpointError::Malformed(format!(
            "parameter block holds {} bytes, header says {} params",
            block.len(),
            header.param_count
        )));
    }
    let params = block
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, params))
}

// ============================================================================
// Finite differences
// ============================================================================

/// Largest relative error between analytic and central-difference gradients,
/// with an absolute floor so near-zero pairs compare cleanly:
/// `|a - n| / max(|a| + |n|, floor)`.
pub fn gradient_check(
    params: &mut [f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    h: f64,
    floor: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matvec_and_transpose_agree_with_manual() {
        // W = [[1,2],[3,4],[5,6]], x = [1,-1]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [1.0, -1.0];
        let mut y = [0.0; 3];
        matvec(&w, 3, 2, &x, &mut y);
        assert_eq!(y, [-1.0, -1.0, -1.0]);

        let dy = [1.0, 0.0, 2.0];
        let mut dx = [0.0; 2];
        matvec_t_add(&w, 3, 2, &dy, &mut dx);
        assert_eq!(dx, [11.0, 14.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut a = vec![1.0, 2.0, 3.0];
        let mut b = vec![101.0, 102.0, 103.0];
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let dims = LstmDims { input: 3, hidden: 4 };
        let mut lb = LayoutBuilder::default();
        let w = lb.matrix(dims.weight_rows(), dims.weight_cols());
        let b = lb.slot(dims.weight_rows());
        let mut data = vec![0.0; lb.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_xavier(&mut rng, &mut data, w, dims.weight_rows(), dims.weight_cols());
        init_uniform(&mut rng, &mut data, b, 0.1);

        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h0 = vec![0.1, -0.2, 0.3, 0.05];
        let c0 = vec![0.2, 0.1, -0.1, 0.0];

        // Loss: sum of h components squared after one step.
        let loss = |p: &[f64]| {
            let step = lstm_forward(p, w, b, dims, &x, &h0, &c0);
            step.h.iter().map(|v| v * v).sum::<f64>()
        };

        let step = lstm_forward(&data, w, b, dims, &x, &h0, &c0);
        let dh: Vec<f64> = step.h.iter().map(|v| 2.0 * v).collect();
        let dc = vec![0.0; 4];
        let mut grad = vec![0.0; data.len()];
        let mut dx = vec![0.0; 3];
        let mut dh0 = vec![0.0; 4];
        let mut dc0 = vec![0.0; 4];
        lstm_backward(&data, &mut grad, w, b, dims, &step, &dh, &dc, &mut dx, &mut dh0, &mut dc0);

        let worst = gradient_check(&mut data, &grad, loss, 1e-5, 1e-7);
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut p = vec![5.0, -3.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..200 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let header = CheckpointHeader {
            kind: "test".into(),
            config: serde_json::json!({"dim": 4}),
            vocab_hash: "abc".into(),
            param_count: 3,
        };
        let params = vec![1.5, -2.25, 0.5];
        save_checkpoint(&path, &header, &params).unwrap();
        let (h2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(h2.kind, "test");
        assert_eq!(p2, params); // exactly representable in f32
    }

    #[test]
    fn checkpoint_rejects_truncated_block() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let header = CheckpointHeader {
            kind: "test".into(),
            config: serde_json::json!({}),
            vocab_hash: "x".into(),
            param_count: 10,
        };
        save_checkpoint(&path, &header, &vec![0.0; 10]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Malformed(_))));
    }
}
