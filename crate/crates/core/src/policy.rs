//! Two-branch policy network with a shared value head.
//!
//! Architecture: a small stack of stride-2 3x3 convolutions (ReLU) flattens
//! into two fully-connected branches (two hidden layers each) for rotation
//! and translationpolicies; each branch ends in a head layer producing 13
//! logits (discrete mode) or a Gaussian mean (continuous mode: 4 quaternion
//! components / 3 translation components). The branch features are
//! concatenated and fed through two more fully-connected layers to produce
//! the scalar value, so the value function shares every trunk and branch
//! parameter with the actions.
//!
//! All parameters live in one flat `f64` buffer described by a layer table;
//! gradients use the same layout. Forward and backward passes are written
//! by hand (exact reverse-mode), which keeps the optimizer free of any
//! autodiff dependency and makes finite-difference verification direct.
//!
//! Continuous-mode sampling draws from `N(mean, sigma^2)` per dimension and
//! snaps the raw draw to the nearest catalog op (nearest quaternion by
//! absolute dot, nearest translation delta by Euclidean distance), so both
//! head modes drive the identical environment. Log-probabilities come from
//! the Gaussian density of the raw draw; the sigmas are fixed
//! hyperparameters, not learned.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::pose::{ActionCatalog, ACTION_COUNT, IDENTITY_ACTION};
use crate::Result;

/// Discrete 13-way heads or continuous Gaussian heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    Discrete13,
    Continuous,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub obs_channels: usize,
    pub obs_res: usize,
    /// Output channels of each stride-2 conv layer.
    pub conv_channels: Vec<usize>,
    /// Hidden width of the two fully-connected layers in each branch.
    pub fc_units: usize,
    /// Hidden width of the value head.
    pub value_units: usize,
    pub head_mode: HeadMode,
    /// Fixed std dev per rotation-head dimension (continuous mode).
    pub sigma_r: f64,
    /// Fixed std dev per translation-head dimension (continuous mode).
    pub sigma_t: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            obs_channels: 4,
            obs_res: 64,
            conv_channels: vec![8, 16, 32],
            fc_units: 256,
            value_units: 256,
            head_mode: HeadMode::Discrete13,
            sigma_r: 0.1,
            sigma_t: 0.1,
        }
    }
}

/// Spatial size after one stride-2, pad-1, 3x3 conv.
fn conv_out_size(s: usize) -> usize {
    (s - 1) / 2 + 1
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.obs_channels == 0 || self.obs_res < 2 {
            problems.push("policy: observation shape degenerate".to_string());
        }
        if self.conv_channels.is_empty() {
            problems.push("policy.conv_channels must be non-empty".to_string());
        }
        let mut s = self.obs_res;
        for _ in &self.conv_channels {
            s = conv_out_size(s);
        }
        if s == 0 {
            problems.push("policy: too many conv layers for the observation size".to_string());
        }
        if self.fc_units == 0 || self.value_units == 0 {
            problems.push("policy: fc widths must be positive".to_string());
        }
        if !(self.sigma_r > 0.0 && self.sigma_t > 0.0) {
            problems.push("policy: sigmas must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Output dimensions of the rotation / translation heads.
    pub fn head_dims(&self) -> (usize, usize) {
        match self.head_mode {
            HeadMode::Discrete13 => (ACTION_COUNT, ACTION_COUNT),
            HeadMode::Continuous => (4, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 stride-2 pad-1 convolution; `cols = in_channels * 9`.
    Conv,
    /// Fully connected; `cols = in_features`.
    Linear,
}

/// One entry of the parameter layout: a weight block of `rows x cols`
/// followed by a bias of `rows`, at fixed offsets in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kind: LayerKind,
    pub rows: usize,
    pub cols: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

fn build_layout(cfg: &PolicyConfig) -> (Vec<LayerSpec>, usize) {
    let mut specs = Vec::new();
    let mut off = 0usize;
    let mut push = |name: &'static str, kind: LayerKind, rows: usize, cols: usize, off: &mut usize| {
        let spec = LayerSpec {
            name,
            kind,
            rows,
            cols,
            w_off: *off,
            b_off: *off + rows * cols,
        };
        *off += spec.param_count();
        specs.push(spec);
    };

    const CONV_NAMES: [&str; 8] = [
        "conv0", "conv1", "conv2", "conv3", "conv4", "conv5", "conv6", "conv7",
    ];
    assert!(
        cfg.conv_channels.len() <= CONV_NAMES.len(),
        "at most {} conv layers supported",
        CONV_NAMES.len()
    );
    let mut in_c = cfg.obs_channels;
    for (i, &out_c) in cfg.conv_channels.iter().enumerate() {
        push(CONV_NAMES[i], LayerKind::Conv, out_c, in_c * 9, &mut off);
        in_c = out_c;
    }
    let mut s = cfg.obs_res;
    for _ in &cfg.conv_channels {
        s = conv_out_size(s);
    }
    let flat = in_c * s * s;
    let (rot_dim, trans_dim) = cfg.head_dims();

    push("rot_fc1", LayerKind::Linear, cfg.fc_units, flat, &mut off);
    push("rot_fc2", LayerKind::Linear, cfg.fc_units, cfg.fc_units, &mut off);
    push("rot_head", LayerKind::Linear, rot_dim, cfg.fc_units, &mut off);
    push("trans_fc1", LayerKind::Linear, cfg.fc_units, flat, &mut off);
    push("trans_fc2", LayerKind::Linear, cfg.fc_units, cfg.fc_units, &mut off);
    push("trans_head", LayerKind::Linear, trans_dim, cfg.fc_units, &mut off);
    push(
        "value_fc1",
        LayerKind::Linear,
        cfg.value_units,
        2 * cfg.fc_units,
        &mut off,
    );
    push("value_fc2", LayerKind::Linear, 1, cfg.value_units, &mut off);

    (specs, off)
}

/// The full parameter set of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    cfg: PolicyConfig,
    layout: Vec<LayerSpec>,
    data: Vec<f64>,
}

/// Raw outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// 13 logits (discrete) or 4 Gaussian means (continuous).
    pub rot: Vec<f64>,
    /// 13 logits (discrete) or 3 Gaussian means (continuous).
    pub trans: Vec<f64>,
    pub value: f64,
}

/// Upstream gradients fed into [`PolicyParams::backward`].
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub d_rot: Vec<f64>,
    pub d_trans: Vec<f64>,
    pub d_value: f64,
}

impl OutputGrads {
    pub fn zeros(cfg: &PolicyConfig) -> OutputGrads {
        let (r, t) = cfg.head_dims();
        OutputGrads {
            d_rot: vec![0.0; r],
            d_trans: vec![0.0; t],
            d_value: 0.0,
        }
    }
}

/// Cached activations of one forward pass, consumed by `backward`.
pub struct ForwardCache {
    obs: Vec<f64>,
    /// Pre-activation output of each conv layer.
    conv_pre: Vec<Vec<f64>>,
    /// Post-ReLU output of each conv layer (the last one is the flatten).
    conv_post: Vec<Vec<f64>>,
    rot_h1_pre: Vec<f64>,
    rot_h1: Vec<f64>,
    rot_h2_pre: Vec<f64>,
    rot_h2: Vec<f64>,
    trans_h1_pre: Vec<f64>,
    trans_h1: Vec<f64>,
    trans_h2_pre: Vec<f64>,
    trans_h2: Vec<f64>,
    value_h1_pre: Vec<f64>,
    value_h1: Vec<f64>,
    pub out: PolicyOutput,
}

fn relu_into(pre: &[f64], post: &mut Vec<f64>) {
    post.clear();
    post.extend(pre.iter().map(|&x| if x > 0.0 { x } else { 0.0 }));
}

fn linear_forward(w: &[f64], b: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), cols);
    let mut y = Vec::with_capacity(rows);
    for r in 0..rows {
        let wr = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in wr.iter().zip(x) {
            acc += wv * xv;
        }
        y.push(acc);
    }
    y
}

/// Accumulates `dW += dy (x) x`, `db += dy` and returns `dx = W^T dy`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    w: &[f64],
    rows: usize,
    cols: usize,
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let mut dx = if want_dx { vec![0.0; cols] } else { Vec::new() };
    for r in 0..rows {
        let g = dy[r];
        db[r] += g;
        if g == 0.0 {
            continue;
        }
        let wr = &w[r * cols..(r + 1) * cols];
        let dwr = &mut dw[r * cols..(r + 1) * cols];
        if want_dx {
            for c in 0..cols {
                dwr[c] += g * x[c];
                dx[c] += g * wr[c];
            }
        } else {
            for c in 0..cols {
                dwr[c] += g * x[c];
            }
        }
    }
    dx
}

/// Valid kernel-row range for output row `oy`: `ky` with
/// `0 <= 2*oy + ky - 1 < s_in`.
#[inline]
fn kernel_range(o: usize, s_in: usize) -> (usize, usize) {
    let lo = if o == 0 { 1 } else { 0 };
    let hi = if 2 * o + 1 >= s_in { s_in - 2 * o + 1 } else { 3 };
    (lo, hi)
}

fn conv_forward(
    w: &[f64],
    b: &[f64],
    in_c: usize,
    out_c: usize,
    s_in: usize,
    s_out: usize,
    input: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; out_c * s_out * s_out];
    // Interior columns need no kx bounds checks.
    let ox_interior_hi = if s_in >= 2 { (s_in - 2) / 2 } else { 0 };
    for oc in 0..out_c {
        let w_oc = &w[oc * in_c * 9..(oc + 1) * in_c * 9];
        let out_plane = &mut out[oc * s_out * s_out..(oc + 1) * s_out * s_out];
        for oy in 0..s_out {
            let (ky_lo, ky_hi) = kernel_range(oy, s_in);
            for ox in 0..s_out {
                let mut acc = b[oc];
                if ox >= 1 && ox <= ox_interior_hi {
                    let ix0 = 2 * ox - 1;
                    for ic in 0..in_c {
                        let wk = &w_oc[ic * 9..ic * 9 + 9];
                        let in_plane = &input[ic * s_in * s_in..(ic + 1) * s_in * s_in];
                        for ky in ky_lo..ky_hi {
                            let iy = 2 * oy + ky - 1;
                            let row = &in_plane[iy * s_in + ix0..iy * s_in + ix0 + 3];
                            let wrow = &wk[ky * 3..ky * 3 + 3];
                            acc += row[0] * wrow[0];
                            acc += row[1] * wrow[1];
                            acc += row[2] * wrow[2];
                        }
                    }
                } else {
                    let (kx_lo, kx_hi) = kernel_range(ox, s_in);
                    for ic in 0..in_c {
                        let wk = &w_oc[ic * 9..ic * 9 + 9];
                        let in_plane = &input[ic * s_in * s_in..(ic + 1) * s_in * s_in];
                        for ky in ky_lo..ky_hi {
                            let iy = 2 * oy + ky - 1;
                            let row = &in_plane[iy * s_in..(iy + 1) * s_in];
                            for kx in kx_lo..kx_hi {
                                let ix = 2 * ox + kx - 1;
                                acc += row[ix] * wk[ky * 3 + kx];
                            }
                        }
                    }
                }
                out_plane[oy * s_out + ox] = acc;
            }
        }
    }
    out
}

/// Reference implementation kept for the exactness test: the optimized
/// kernel must reproduce it bit for bit (identical accumulation order).
#[cfg(test)]
fn conv_forward_ref(
    w: &[f64],
    b: &[f64],
    in_c: usize,
    out_c: usize,
    s_in: usize,
    s_out: usize,
    input: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; out_c * s_out * s_out];
    for oc in 0..out_c {
        let w_oc = &w[oc * in_c * 9..(oc + 1) * in_c * 9];
        let out_plane = &mut out[oc * s_out * s_out..(oc + 1) * s_out * s_out];
        for oy in 0..s_out {
            for ox in 0..s_out {
                let mut acc = b[oc];
                for ic in 0..in_c {
                    let wk = &w_oc[ic * 9..ic * 9 + 9];
                    let in_plane = &input[ic * s_in * s_in..(ic + 1) * s_in * s_in];
                    for ky in 0..3usize {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= s_in as isize {
                            continue;
                        }
                        let row = &in_plane[iy as usize * s_in..(iy as usize + 1) * s_in];
                        for kx in 0..3usize {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= s_in as isize {
                                continue;
                            }
                            acc += row[ix as usize] * wk[ky * 3 + kx];
                        }
                    }
                }
                out_plane[oy * s_out + ox] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    w: &[f64],
    in_c: usize,
    out_c: usize,
    s_in: usize,
    s_out: usize,
    input: &[f64],
    d_out: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let mut dx = if want_dx {
        vec![0.0; in_c * s_in * s_in]
    } else {
        Vec::new()
    };
    let ox_interior_hi = if s_in >= 2 { (s_in - 2) / 2 } else { 0 };
    for oc in 0..out_c {
        let w_oc = &w[oc * in_c * 9..(oc + 1) * in_c * 9];
        let dw_oc = &mut dw[oc * in_c * 9..(oc + 1) * in_c * 9];
        let d_plane = &d_out[oc * s_out * s_out..(oc + 1) * s_out * s_out];
        for oy in 0..s_out {
            let (ky_lo, ky_hi) = kernel_range(oy, s_in);
            for ox in 0..s_out {
                let g = d_plane[oy * s_out + ox];
                if g == 0.0 {
                    continue;
                }
                db[oc] += g;
                if ox >= 1 && ox <= ox_interior_hi {
                    let ix0 = 2 * ox - 1;
                    for ic in 0..in_c {
                        let wk = &w_oc[ic * 9..ic * 9 + 9];
                        let dwk = &mut dw_oc[ic * 9..ic * 9 + 9];
                        let plane_off = ic * s_in * s_in;
                        for ky in ky_lo..ky_hi {
                            let iy = 2 * oy + ky - 1;
                            let at = plane_off + iy * s_in + ix0;
                            dwk[ky * 3] += g * input[at];
                            dwk[ky * 3 + 1] += g * input[at + 1];
                            dwk[ky * 3 + 2] += g * input[at + 2];
                            if want_dx {
                                dx[at] += g * wk[ky * 3];
                                dx[at + 1] += g * wk[ky * 3 + 1];
                                dx[at + 2] += g * wk[ky * 3 + 2];
                            }
                        }
                    }
                } else {
                    let (kx_lo, kx_hi) = kernel_range(ox, s_in);
                    for ic in 0..in_c {
                        let wk = &w_oc[ic * 9..ic * 9 + 9];
                        let dwk = &mut dw_oc[ic * 9..ic * 9 + 9];
                        let plane_off = ic * s_in * s_in;
                        for ky in ky_lo..ky_hi {
                            let iy = 2 * oy + ky - 1;
                            for kx in kx_lo..kx_hi {
                                let ix = 2 * ox + kx - 1;
                                let at = plane_off + iy * s_in + ix;
                                dwk[ky * 3 + kx] += g * input[at];
                                if want_dx {
                                    dx[at] += g * wk[ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl PolicyParams {
    /// Zero-filled parameters (uniform initial policy, zero value).
    pub fn zeros(cfg: PolicyConfig) -> PolicyParams {
        let (layout, n) = build_layout(&cfg);
        PolicyParams {
            cfg,
            layout,
            data: vec![0.0; n],
        }
    }

    /// Orthogonal-style init for hidden layers (gain sqrt(2) for the ReLU
    /// stack), zero init for both policy heads and the final value layer so
    /// the initial policy is uniform and the initial value is 0.
    pub fn init<R: Rng + ?Sized>(cfg: PolicyConfig, rng: &mut R) -> PolicyParams {
        let mut p = PolicyParams::zeros(cfg);
        let zero_names = ["rot_head", "trans_head", "value_fc2"];
        for i in 0..p.layout.len() {
            let spec = p.layout[i].clone();
            if zero_names.contains(&spec.name) {
                continue;
            }
            let w = orthogonal_matrix(spec.rows, spec.cols, std::f64::consts::SQRT_2, rng);
            p.data[spec.w_off..spec.w_off + spec.rows * spec.cols].copy_from_slice(&w);
            // Biases stay zero.
        }
        p
    }

    pub fn cfg(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &[LayerSpec] {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn layer(&self, name: &str) -> &LayerSpec {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no layer named {name}"))
    }

    fn w(&self, spec: &LayerSpec) -> &[f64] {
        &self.data[spec.w_off..spec.w_off + spec.rows * spec.cols]
    }

    fn b(&self, spec: &LayerSpec) -> &[f64] {
        &self.data[spec.b_off..spec.b_off + spec.rows]
    }

    /// Flat index ranges of the two policy-head layers (weights + biases).
    /// Off-policy value updates must leave these untouched.
    pub fn head_param_ranges(&self) -> Vec<std::ops::Range<usize>> {
        ["rot_head", "trans_head"]
            .iter()
            .map(|name| {
                let s = self.layer(name);
                s.w_off..s.b_off + s.rows
            })
            .collect()
    }

    pub fn obs_len(&self) -> usize {
        self.cfg.obs_channels * self.cfg.obs_res * self.cfg.obs_res
    }

    /// Spatial sizes entering each conv layer, plus the final one.
    fn conv_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.cfg.obs_res];
        for _ in &self.cfg.conv_channels {
            sizes.push(conv_out_size(*sizes.last().unwrap()));
        }
        sizes
    }

    /// Runs the network, returning all cached activations.
    pub fn forward_cached(&self, obs: &[f64]) -> ForwardCache {
        assert_eq!(
            obs.len(),
            self.obs_len(),
            "observation shape mismatch: got {}, expected {}",
            obs.len(),
            self.obs_len()
        );
        let sizes = self.conv_sizes();
        let mut conv_pre = Vec::with_capacity(self.cfg.conv_channels.len());
        let mut conv_post: Vec<Vec<f64>> = Vec::with_capacity(self.cfg.conv_channels.len());
        let mut in_c = self.cfg.obs_channels;
        for (i, &out_c) in self.cfg.conv_channels.iter().enumerate() {
            let spec = self.layer(["conv0", "conv1", "conv2", "conv3", "conv4", "conv5", "conv6", "conv7"][i]);
            let input: &[f64] = if i == 0 { obs } else { &conv_post[i - 1] };
            let pre = conv_forward(
                self.w(spec),
                self.b(spec),
                in_c,
                out_c,
                sizes[i],
                sizes[i + 1],
                input,
            );
            let mut post = Vec::new();
            relu_into(&pre, &mut post);
            conv_pre.push(pre);
            conv_post.push(post);
            in_c = out_c;
        }
        let flat: &[f64] = conv_post.last().map(|v| v.as_slice()).unwrap_or(obs);

        let branch = |fc1: &LayerSpec, fc2: &LayerSpec, head: &LayerSpec| {
            let h1_pre = linear_forward(self.w(fc1), self.b(fc1), fc1.rows, fc1.cols, flat);
            let mut h1 = Vec::new();
            relu_into(&h1_pre, &mut h1);
            let h2_pre = linear_forward(self.w(fc2), self.b(fc2), fc2.rows, fc2.cols, &h1);
            let mut h2 = Vec::new();
            relu_into(&h2_pre, &mut h2);
            let logits = linear_forward(self.w(head), self.b(head), head.rows, head.cols, &h2);
            (h1_pre, h1, h2_pre, h2, logits)
        };

        let (rot_h1_pre, rot_h1, rot_h2_pre, rot_h2, rot) = branch(
            self.layer("rot_fc1"),
            self.layer("rot_fc2"),
            self.layer("rot_head"),
        );
        let (trans_h1_pre, trans_h1, trans_h2_pre, trans_h2, trans) = branch(
            self.layer("trans_fc1"),
            self.layer("trans_fc2"),
            self.layer("trans_head"),
        );

        let vf1 = self.layer("value_fc1");
        let vf2 = self.layer("value_fc2");
        let mut vin = Vec::with_capacity(rot_h2.len() + trans_h2.len());
        vin.extend_from_slice(&rot_h2);
        vin.extend_from_slice(&trans_h2);
        let value_h1_pre = linear_forward(self.w(vf1), self.b(vf1), vf1.rows, vf1.cols, &vin);
        let mut value_h1 = Vec::new();
        relu_into(&value_h1_pre, &mut value_h1);
        let value =
            linear_forward(self.w(vf2), self.b(vf2), vf2.rows, vf2.cols, &value_h1)[0];

        ForwardCache {
            obs: obs.to_vec(),
            conv_pre,
            conv_post,
            rot_h1_pre,
            rot_h1,
            rot_h2_pre,
            rot_h2,
            trans_h1_pre,
            trans_h1,
            trans_h2_pre,
            trans_h2,
            value_h1_pre,
            value_h1,
            out: PolicyOutput {
                rot,
                trans,
                value,
            },
        }
    }

    /// Forward pass without keeping the cache.
    pub fn forward(&self, obs: &[f64]) -> PolicyOutput {
        self.forward_cached(obs).out
    }

    /// Exact reverse-mode gradients of the cached forward pass, accumulated
    /// into `grads` (same flat layout as the parameters).
    pub fn backward(&self, cache: &ForwardCache, out_grads: &OutputGrads, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.data.len(), "gradient buffer mismatch");
        let (rot_dim, trans_dim) = self.cfg.head_dims();
        assert_eq!(out_grads.d_rot.len(), rot_dim);
        assert_eq!(out_grads.d_trans.len(), trans_dim);

        let relu_back = |pre: &[f64], d_post: &mut [f64]| {
            for (d, &p) in d_post.iter_mut().zip(pre) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
        };

        // Value path first: value_fc2 -> relu -> value_fc1 -> split to branches.
        let vf1 = self.layer("value_fc1").clone();
        let vf2 = self.layer("value_fc2").clone();
        let fc = self.cfg.fc_units;
        let (mut d_rot_h2, mut d_trans_h2);
        {
            let dy = [out_grads.d_value];
            let (dw, db) = split_grads(grads, &vf2);
            let mut d_vh1 = linear_backward(
                self.w(&vf2),
                vf2.rows,
                vf2.cols,
                &cache.value_h1,
                &dy,
                dw,
                db,
                true,
            );
            relu_back(&cache.value_h1_pre, &mut d_vh1);
            let mut vin = Vec::with_capacity(2 * fc);
            vin.extend_from_slice(&cache.rot_h2);
            vin.extend_from_slice(&cache.trans_h2);
            let (dw, db) = split_grads(grads, &vf1);
            let d_vin = linear_backward(
                self.w(&vf1),
                vf1.rows,
                vf1.cols,
                &vin,
                &d_vh1,
                dw,
                db,
                true,
            );
            d_rot_h2 = d_vin[..fc].to_vec();
            d_trans_h2 = d_vin[fc..].to_vec();
        }

        // Head contributions on top of the value-path gradients.
        let mut branch_back = |head: &str,
                               fc2: &str,
                               fc1: &str,
                               d_head: &[f64],
                               d_h2: &mut Vec<f64>,
                               h2_pre: &[f64],
                               h2_in: &[f64],
                               h1_pre: &[f64],
                               h1_in: &[f64]|
         -> Vec<f64> {
            let head = self.layer(head).clone();
            let fc2 = self.layer(fc2).clone();
            let fc1 = self.layer(fc1).clone();
            {
                let (dw, db) = split_grads(grads, &head);
                let extra = linear_backward(
                    self.w(&head),
                    head.rows,
                    head.cols,
                    h2_in,
                    d_head,
                    dw,
                    db,
                    true,
                );
                for (acc, e) in d_h2.iter_mut().zip(extra) {
                    *acc += e;
                }
            }
            relu_back(h2_pre, d_h2);
            let (dw, db) = split_grads(grads, &fc2);
            let mut d_h1 = linear_backward(
                self.w(&fc2),
                fc2.rows,
                fc2.cols,
                h1_in,
                d_h2,
                dw,
                db,
                true,
            );
            relu_back(h1_pre, &mut d_h1);
            let flat: &[f64] = cache
                .conv_post
                .last()
                .map(|v| v.as_slice())
                .unwrap_or(&cache.obs);
            let (dw, db) = split_grads(grads, &fc1);
            linear_backward(
                self.w(&fc1),
                fc1.rows,
                fc1.cols,
                flat,
                &d_h1,
                dw,
                db,
                true,
            )
        };

        let d_flat_rot = branch_back(
            "rot_head",
            "rot_fc2",
            "rot_fc1",
            &out_grads.d_rot,
            &mut d_rot_h2,
            &cache.rot_h2_pre,
            &cache.rot_h2,
            &cache.rot_h1_pre,
            &cache.rot_h1,
        );
        let d_flat_trans = branch_back(
            "trans_head",
            "trans_fc2",
            "trans_fc1",
            &out_grads.d_trans,
            &mut d_trans_h2,
            &cache.trans_h2_pre,
            &cache.trans_h2,
            &cache.trans_h1_pre,
            &cache.trans_h1,
        );

        let mut d_flat: Vec<f64> = d_flat_rot
            .iter()
            .zip(&d_flat_trans)
            .map(|(a, b)| a + b)
            .collect();

        // Conv chain, last to first.
        let sizes = self.conv_sizes();
        let names = ["conv0", "conv1", "conv2", "conv3", "conv4", "conv5", "conv6", "conv7"];
        for i in (0..self.cfg.conv_channels.len()).rev() {
            let spec = self.layer(names[i]).clone();
            let in_c = if i == 0 {
                self.cfg.obs_channels
            } else {
                self.cfg.conv_channels[i - 1]
            };
            let out_c = self.cfg.conv_channels[i];
            relu_back(&cache.conv_pre[i], &mut d_flat);
            let input: &[f64] = if i == 0 {
                &cache.obs
            } else {
                &cache.conv_post[i - 1]
            };
            let (dw, db) = split_grads(grads, &spec);
            d_flat = conv_backward(
                self.w(&spec),
                in_c,
                out_c,
                sizes[i],
                sizes[i + 1],
                input,
                &d_flat,
                dw,
                db,
                i > 0,
            );
        }
    }
}

/// Splits the flat gradient buffer into the (weights, biases) views of one
/// layer. The layout guarantees the two ranges are adjacent and disjoint.
fn split_grads<'g>(grads: &'g mut [f64], spec: &LayerSpec) -> (&'g mut [f64], &'g mut [f64]) {
    let (_, rest) = grads.split_at_mut(spec.w_off);
    let (dw, rest) = rest.split_at_mut(spec.rows * spec.cols);
    let (db, _) = rest.split_at_mut(spec.rows);
    (dw, db)
}

/// Row-orthogonal (or column-orthogonal, whichever dimension is smaller)
/// Gaussian matrix scaled by `gain`, row-major `rows x cols`.
fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (small, large, transpose) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    // `small` orthonormal vectors of dimension `large`, via modified
    // Gram-Schmidt on Gaussian draws.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(small);
    while basis.len() < small {
        let mut v: Vec<f64> = (0..large).map(|_| normal.sample(rng)).collect();
        for u in &basis {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if transpose { basis[c][r] } else { basis[r][c] };
            out[r * cols + c] = gain * v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Distributions over actions.
// ---------------------------------------------------------------------------

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - max - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|&l| l.exp()).collect()
}

/// Entropy of the categorical distribution given its logits.
pub fn categorical_entropy(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().map(|&l| -l.exp() * l).sum()
}

/// Samples an index with probability proportional to `softmax(logits)`.
pub fn sample_categorical<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let probs = softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Argmax with ties broken uniformly at random, so an all-zero (untrained)
/// head behaves as a uniform-random policy under greedy evaluation.
pub fn argmax_tie_random<R: Rng + ?Sized>(values: &[f64], rng: &mut R) -> usize {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == max)
        .map(|(i, _)| i)
        .collect();
    if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.random_range(0..ties.len())]
    }
}

fn gaussian_logprob(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let mut lp = 0.0;
    for (xi, mi) in x.iter().zip(mean) {
        let z = (xi - mi) / sigma;
        lp += -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    lp
}

fn gaussian_entropy(dim: usize, sigma: f64) -> f64 {
    dim as f64 * 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln()
}

/// The action actually taken, in the form needed to recompute its
/// log-probability under new parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActionTaken {
    Discrete {
        rot: usize,
        trans: usize,
    },
    /// Raw Gaussian draws plus the catalog ops they snapped to.
    Continuous {
        rot_raw: [f64; 4],
        trans_raw: [f64; 3],
        rot: usize,
        trans: usize,
    },
}

impl ActionTaken {
    /// Catalog indices executed in the environment.
    pub fn indices(&self) -> (usize, usize) {
        match *self {
            ActionTaken::Discrete { rot, trans } => (rot, trans),
            ActionTaken::Continuous { rot, trans, .. } => (rot, trans),
        }
    }
}

/// Snaps a raw 4-vector to the catalog rotation op with the closest
/// quaternion (absolute dot product; sign-insensitive). Near-zero raw
/// vectors snap to the identity op.
pub fn snap_rotation(raw: &[f64; 4], cat: &ActionCatalog) -> usize {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return IDENTITY_ACTION;
    }
    let q = [raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm];
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (i, op) in cat.rot_ops.iter().enumerate() {
        let oq = op.delta.quaternion();
        let dot = (q[0] * oq.w + q[1] * oq.i + q[2] * oq.j + q[3] * oq.k).abs();
        if dot > best_dot {
            best_dot = dot;
            best = i;
        }
    }
    best
}

/// Snaps a raw 3-vector to the catalog translation op with the nearest
/// delta vector.
pub fn snap_translation(raw: &[f64; 3], cat: &ActionCatalog) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, op) in cat.trans_ops.iter().enumerate() {
        let d = (raw[0] - op.delta.x).powi(2)
            + (raw[1] - op.delta.y).powi(2)
            + (raw[2] - op.delta.z).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

impl PolicyParams {
    /// Draws an action from the output distributions. Returns the action
    /// and its joint log-probability (sum of the independent heads).
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        out: &PolicyOutput,
        cat: &ActionCatalog,
        rng: &mut R,
    ) -> (ActionTaken, f64) {
        match self.cfg.head_mode {
            HeadMode::Discrete13 => {
                let rot = sample_categorical(&out.rot, rng);
                let trans = sample_categorical(&out.trans, rng);
                let lp = log_softmax(&out.rot)[rot] + log_softmax(&out.trans)[trans];
                (ActionTaken::Discrete { rot, trans }, lp)
            }
            HeadMode::Continuous => {
                let nr = Normal::new(0.0, self.cfg.sigma_r).unwrap();
                let nt = Normal::new(0.0, self.cfg.sigma_t).unwrap();
                let mut rot_raw = [0.0; 4];
                for (i, r) in rot_raw.iter_mut().enumerate() {
                    *r = out.rot[i] + nr.sample(rng);
                }
                let mut trans_raw = [0.0; 3];
                for (i, t) in trans_raw.iter_mut().enumerate() {
                    *t = out.trans[i] + nt.sample(rng);
                }
                let rot = snap_rotation(&rot_raw, cat);
                let trans = snap_translation(&trans_raw, cat);
                let lp = gaussian_logprob(&rot_raw, &out.rot, self.cfg.sigma_r)
                    + gaussian_logprob(&trans_raw, &out.trans, self.cfg.sigma_t);
                (
                    ActionTaken::Continuous {
                        rot_raw,
                        trans_raw,
                        rot,
                        trans,
                    },
                    lp,
                )
            }
        }
    }

    /// Deterministic action for evaluation: per-head argmax (ties broken
    /// randomly) in discrete mode; the snapped mean in continuous mode.
    pub fn greedy_action<R: Rng + ?Sized>(
        &self,
        out: &PolicyOutput,
        cat: &ActionCatalog,
        rng: &mut R,
    ) -> (usize, usize) {
        match self.cfg.head_mode {
            HeadMode::Discrete13 => (
                argmax_tie_random(&out.rot, rng),
                argmax_tie_random(&out.trans, rng),
            ),
            HeadMode::Continuous => {
                let rot_raw = [out.rot[0], out.rot[1], out.rot[2], out.rot[3]];
                let trans_raw = [out.trans[0], out.trans[1], out.trans[2]];
                (snap_rotation(&rot_raw, cat), snap_translation(&trans_raw, cat))
            }
        }
    }

    /// Joint log-probability of a stored action under `out`.
    pub fn logprob_of(&self, out: &PolicyOutput, action: &ActionTaken) -> f64 {
        match (self.cfg.head_mode, action) {
            (HeadMode::Discrete13, ActionTaken::Discrete { rot, trans }) => {
                log_softmax(&out.rot)[*rot] + log_softmax(&out.trans)[*trans]
            }
            (
                HeadMode::Continuous,
                ActionTaken::Continuous {
                    rot_raw,
                    trans_raw,
                    ..
                },
            ) => {
                gaussian_logprob(rot_raw, &out.rot, self.cfg.sigma_r)
                    + gaussian_logprob(trans_raw, &out.trans, self.cfg.sigma_t)
            }
            _ => panic!("action kind does not match the policy head mode"),
        }
    }

    /// Log-probability plus its gradient with respect to the head outputs.
    pub fn logprob_and_grad(
        &self,
        out: &PolicyOutput,
        action: &ActionTaken,
    ) -> (f64, Vec<f64>, Vec<f64>) {
        match (self.cfg.head_mode, action) {
            (HeadMode::Discrete13, ActionTaken::Discrete { rot, trans }) => {
                let ls_r = log_softmax(&out.rot);
                let ls_t = log_softmax(&out.trans);
                let lp = ls_r[*rot] + ls_t[*trans];
                // d logp / d logit_j = delta_{j,a} - p_j.
                let d_rot: Vec<f64> = ls_r
                    .iter()
                    .enumerate()
                    .map(|(j, &l)| (j == *rot) as usize as f64 - l.exp())
                    .collect();
                let d_trans: Vec<f64> = ls_t
                    .iter()
                    .enumerate()
                    .map(|(j, &l)| (j == *trans) as usize as f64 - l.exp())
                    .collect();
                (lp, d_rot, d_trans)
            }
            (
                HeadMode::Continuous,
                ActionTaken::Continuous {
                    rot_raw,
                    trans_raw,
                    ..
                },
            ) => {
                let lp = gaussian_logprob(rot_raw, &out.rot, self.cfg.sigma_r)
                    + gaussian_logprob(trans_raw, &out.trans, self.cfg.sigma_t);
                let sr2 = self.cfg.sigma_r * self.cfg.sigma_r;
                let st2 = self.cfg.sigma_t * self.cfg.sigma_t;
                let d_rot: Vec<f64> = rot_raw
                    .iter()
                    .zip(&out.rot)
                    .map(|(x, m)| (x - m) / sr2)
                    .collect();
                let d_trans: Vec<f64> = trans_raw
                    .iter()
                    .zip(&out.trans)
                    .map(|(x, m)| (x - m) / st2)
                    .collect();
                (lp, d_rot, d_trans)
            }
            _ => panic!("action kind does not match the policy head mode"),
        }
    }

    /// Joint entropy plus its gradient with respect to the head outputs.
    /// Continuous-mode entropy is constant (fixed sigmas), so its gradient
    /// is zero.
    pub fn entropy_and_grad(&self, out: &PolicyOutput) -> (f64, Vec<f64>, Vec<f64>) {
        match self.cfg.head_mode {
            HeadMode::Discrete13 => {
                let ls_r = log_softmax(&out.rot);
                let ls_t = log_softmax(&out.trans);
                let h_r: f64 = ls_r.iter().map(|&l| -l.exp() * l).sum();
                let h_t: f64 = ls_t.iter().map(|&l| -l.exp() * l).sum();
                // dH/d logit_j = -p_j (log p_j + H).
                let d_rot: Vec<f64> = ls_r.iter().map(|&l| -l.exp() * (l + h_r)).collect();
                let d_trans: Vec<f64> = ls_t.iter().map(|&l| -l.exp() * (l + h_t)).collect();
                (h_r + h_t, d_rot, d_trans)
            }
            HeadMode::Continuous => {
                let h = gaussian_entropy(4, self.cfg.sigma_r) + gaussian_entropy(3, self.cfg.sigma_t);
                let (r, t) = self.cfg.head_dims();
                (h, vec![0.0; r], vec![0.0; t])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization: versioned binary blob.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"PRLPOL1\n";
const VERSION: u32 = 1;

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::ParamParse {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

impl PolicyParams {
    /// Serializes to the versioned binary form: magic, version, config,
    /// layer-shape table, then raw little-endian f64 parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.cfg.head_mode {
            HeadMode::Discrete13 => 0,
            HeadMode::Continuous => 1,
        });
        out.extend_from_slice(&(self.cfg.obs_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.obs_res as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.conv_channels.len() as u32).to_le_bytes());
        for &c in &self.cfg.conv_channels {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.cfg.fc_units as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.value_units as u32).to_le_bytes());
        out.extend_from_slice(&self.cfg.sigma_r.to_le_bytes());
        out.extend_from_slice(&self.cfg.sigma_t.to_le_bytes());
        out.extend_from_slice(&(self.layout.len() as u32).to_le_bytes());
        for spec in &self.layout {
            out.push(spec.name.len() as u8);
            out.extend_from_slice(spec.name.as_bytes());
            out.push(match spec.kind {
                LayerKind::Conv => 0,
                LayerKind::Linear => 1,
            });
            out.extend_from_slice(&(spec.rows as u32).to_le_bytes());
            out.extend_from_slice(&(spec.cols as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary form, validating magic, version, and the layer
    /// table against the rebuilt layout. Never returns partial parameters.
    pub fn from_bytes(buf: &[u8]) -> Result<PolicyParams> {
        let mut r = ByteReader::new(buf);
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::ParamParse {
                offset: 0,
                msg: "bad magic string".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let head_mode = match r.u8("head mode")? {
            0 => HeadMode::Discrete13,
            1 => HeadMode::Continuous,
            other => {
                return Err(Error::ParamParse {
                    offset: r.pos - 1,
                    msg: format!("unknown head mode {other}"),
                })
            }
        };
        let obs_channels = r.u32("obs channels")? as usize;
        let obs_res = r.u32("obs res")? as usize;
        let n_conv = r.u32("conv count")? as usize;
        if n_conv > 8 {
            return Err(Error::ParamParse {
                offset: r.pos - 4,
                msg: format!("conv count {n_conv} out of range"),
            });
        }
        let mut conv_channels = Vec::with_capacity(n_conv);
        for _ in 0..n_conv {
            conv_channels.push(r.u32("conv channels")? as usize);
        }
        let fc_units = r.u32("fc units")? as usize;
        let value_units = r.u32("value units")? as usize;
        let sigma_r = r.f64("sigma_r")?;
        let sigma_t = r.f64("sigma_t")?;
        let cfg = PolicyConfig {
            obs_channels,
            obs_res,
            conv_channels,
            fc_units,
            value_units,
            head_mode,
            sigma_r,
            sigma_t,
        };
        cfg.validate()
            .map_err(|e| Error::ParamParse {
                offset: r.pos,
                msg: format!("stored config invalid: {e}"),
            })?;

        let (layout, n_params) = build_layout(&cfg);
        let n_layers = r.u32("layer count")? as usize;
        if n_layers != layout.len() {
            return Err(Error::ParamParse {
                offset: r.pos - 4,
                msg: format!("layer count {n_layers} != expected {}", layout.len()),
            });
        }
        for spec in &layout {
            let name_len = r.u8("layer name length")? as usize;
            let name = r.take(name_len, "layer name")?;
            if name != spec.name.as_bytes() {
                return Err(Error::ParamParse {
                    offset: r.pos - name_len,
                    msg: format!(
                        "layer name mismatch: file has {:?}, expected {}",
                        String::from_utf8_lossy(name),
                        spec.name
                    ),
                });
            }
            let kind = r.u8("layer kind")?;
            let expect_kind = match spec.kind {
                LayerKind::Conv => 0,
                LayerKind::Linear => 1,
            };
            let rows = r.u32("layer rows")? as usize;
            let cols = r.u32("layer cols")? as usize;
            if kind != expect_kind || rows != spec.rows || cols != spec.cols {
                return Err(Error::ParamParse {
                    offset: r.pos - 9,
                    msg: format!("layer {} shape mismatch", spec.name),
                });
            }
        }
        let data_len = r.u64("data length")? as usize;
        if data_len != n_params {
            return Err(Error::ParamParse {
                offset: r.pos - 8,
                msg: format!("data length {data_len} != expected {n_params}"),
            });
        }
        let mut data = Vec::with_capacity(data_len);
        for _ in 0..data_len {
            data.push(r.f64("parameter data")?);
        }
        Ok(PolicyParams { cfg, layout, data })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<PolicyParams> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        PolicyParams::from_bytes(&buf)
    }
}
