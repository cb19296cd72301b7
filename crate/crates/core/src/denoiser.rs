//! Denoisers acting on multi-channel tensor fields.
//!
//! The learned denoiser is a 7-layer residual 3-D CNN (DnCNN-style:
//! Zhang et al. 2017) whose final layer is split into three heads so the
//! log-signal channel, the tensor diagonal, and the off-diagonal channels
//! each get their own output convolution. Forward and reverse passes are
//! written by hand; the reverse pass is exact, not approximate.
//!
//! A masked Gaussian smoother and the identity are available as fixed,
//! training-free alternatives.

use crate::fmath;
use crate::volume::{num_voxels, voxel_index, Dims, Field, Mask, Volume};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Default hidden width of the learned denoiser.
pub const DEFAULT_WIDTH: usize = 48;

/// Number of hidden layers (all 3x3x3, ReLU) before the output heads.
pub const HIDDEN_LAYERS: usize = 6;

/// He-init shrink factor for the output heads.
const HEAD_INIT_SCALE: f64 = 0.1;

/// A denoiser maps a masked field to a masked field of the same shape.
pub trait Denoiser {
    fn apply(&self, f: &Field, mask: &Mask) -> Field;
    fn name(&self) -> String;
}

pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn apply(&self, f: &Field, mask: &Mask) -> Field {
        let mut out = f.clone();
        out.apply_mask(mask);
        out
    }
    fn name(&self) -> String {
        String::from("identity")
    }
}

/// One 3x3x3 convolution, zero padding, stride 1.
/// Weight layout: `w[((tap * in_ch) + ci) * out_ch + co]` with
/// `tap = (dz*3 + dy)*3 + dx`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3 {
    pub in_ch: usize,
    pub out_ch: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv3 {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv3 {
            in_ch,
            out_ch,
            w: vec![0.0; 27 * in_ch * out_ch],
            b: vec![0.0; out_ch],
        }
    }

    /// He-normal weights (std `sqrt(2 / (27 in_ch))`), zero biases.
    pub fn he_init(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = fmath::sqrt(2.0 / (27.0 * in_ch as f64));
        let dist = Normal::new(0.0, std).unwrap();
        let w = (0..27 * in_ch * out_ch).map(|_| dist.sample(rng)).collect();
        Conv3 {
            in_ch,
            out_ch,
            w,
            b: vec![0.0; out_ch],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[inline]
fn tap_offsets(dims: Dims) -> [(isize, i32, i32, i32); 27] {
    let (n1, n2) = (dims[1] as isize, dims[2] as isize);
    let mut out = [(0isize, 0i32, 0i32, 0i32); 27];
    let mut t = 0;
    for dz in -1i32..=1 {
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                out[t] = (
                    (dz as isize * n1 + dy as isize) * n2 + dx as isize,
                    dz,
                    dy,
                    dx,
                );
                t += 1;
            }
        }
    }
    out
}

/// Forward convolution, optionally followed by ReLU.
pub fn conv3d(inp: &Field, conv: &Conv3, relu: bool) -> Field {
    assert_eq!(inp.channels, conv.in_ch);
    let dims = inp.dims;
    let (n0, n1, n2) = (dims[0], dims[1], dims[2]);
    let (cin, cout) = (conv.in_ch, conv.out_ch);
    let mut out = Field::zeros(dims, cout);
    let taps = tap_offsets(dims);

    let slab = n1 * n2 * cout;
    let run_slab = |z: usize, out_slab: &mut [f64]| {
        let mut acc = vec![0.0f64; cout];
        for y in 0..n1 {
            for x in 0..n2 {
                let v = (z * n1 + y) * n2 + x;
                acc.copy_from_slice(&conv.b);
                let interior = z >= 1
                    && z + 1 < n0
                    && y >= 1
                    && y + 1 < n1
                    && x >= 1
                    && x + 1 < n2;
                if interior {
                    for (t, &(off, _, _, _)) in taps.iter().enumerate() {
                        let u = (v as isize + off) as usize;
                        let src = &inp.data[u * cin..u * cin + cin];
                        let wt = &conv.w[t * cin * cout..(t + 1) * cin * cout];
                        for (ci, &s) in src.iter().enumerate() {
                            if s == 0.0 {
                                continue;
                            }
                            let wrow = &wt[ci * cout..(ci + 1) * cout];
                            for (a, &w) in acc.iter_mut().zip(wrow) {
                                *a += s * w;
                            }
                        }
                    }
                } else {
                    for (t, &(off, dz, dy, dx)) in taps.iter().enumerate() {
                        let zz = z as i32 + dz;
                        let yy = y as i32 + dy;
                        let xx = x as i32 + dx;
                        if zz < 0
                            || zz >= n0 as i32
                            || yy < 0
                            || yy >= n1 as i32
                            || xx < 0
                            || xx >= n2 as i32
                        {
                            continue;
                        }
                        let u = (v as isize + off) as usize;
                        let src = &inp.data[u * cin..u * cin + cin];
                        let wt = &conv.w[t * cin * cout..(t + 1) * cin * cout];
                        for (ci, &s) in src.iter().enumerate() {
                            if s == 0.0 {
                                continue;
                            }
                            let wrow = &wt[ci * cout..(ci + 1) * cout];
                            for (a, &w) in acc.iter_mut().zip(wrow) {
                                *a += s * w;
                            }
                        }
                    }
                }
                let dst = &mut out_slab[(y * n2 + x) * cout..(y * n2 + x + 1) * cout];
                if relu {
                    for (d, &a) in dst.iter_mut().zip(&acc) {
                        *d = if a > 0.0 { a } else { 0.0 };
                    }
                } else {
                    dst.copy_from_slice(&acc);
                }
            }
        }
    };

    #[cfg(feature = "rayon")]
    {
        use rayon::prelude::*;
        out.data
            .par_chunks_mut(slab)
            .enumerate()
            .for_each(|(z, out_slab)| run_slab(z, out_slab));
    }
    #[cfg(not(feature = "rayon"))]
    {
        for (z, out_slab) in out.data.chunks_mut(slab).enumerate() {
            run_slab(z, out_slab);
        }
    }
    out
}

/// Gradients of one convolution layer.
#[derive(Clone, Debug)]
pub struct Conv3Grads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Reverse pass of [`conv3d`] for the *linear* part (any activation
/// derivative must already be folded into `g_out`).
///
/// Returns gradients with respect to the kernel, the bias, and the input.
pub fn conv3d_backward(inp: &Field, conv: &Conv3, g_out: &Field) -> (Conv3Grads, Field) {
    assert_eq!(inp.channels, conv.in_ch);
    assert_eq!(g_out.channels, conv.out_ch);
    assert_eq!(inp.dims, g_out.dims);
    let dims = inp.dims;
    let (n0, n1, n2) = (dims[0], dims[1], dims[2]);
    let (cin, cout) = (conv.in_ch, conv.out_ch);
    let taps = tap_offsets(dims);
    let n = num_voxels(dims);

    let mut gw = vec![0.0f64; conv.w.len()];
    let mut gb = vec![0.0f64; cout];
    // dL/dW[t,ci,co] = sum_v inp[v + off(t), ci] * g_out[v, co]
    for z in 0..n0 {
        for y in 0..n1 {
            for x in 0..n2 {
                let v = (z * n1 + y) * n2 + x;
                let grow = &g_out.data[v * cout..(v + 1) * cout];
                for (g, &u) in gb.iter_mut().zip(grow) {
                    *g += u;
                }
                for (t, &(off, dz, dy, dx)) in taps.iter().enumerate() {
                    let zz = z as i32 + dz;
                    let yy = y as i32 + dy;
                    let xx = x as i32 + dx;
                    if zz < 0
                        || zz >= n0 as i32
                        || yy < 0
                        || yy >= n1 as i32
                        || xx < 0
                        || xx >= n2 as i32
                    {
                        continue;
                    }
                    let u = (v as isize + off) as usize;
                    let src = &inp.data[u * cin..u * cin + cin];
                    let wt = &mut gw[t * cin * cout..(t + 1) * cin * cout];
                    for (ci, &s) in src.iter().enumerate() {
                        if s == 0.0 {
                            continue;
                        }
                        let wrow = &mut wt[ci * cout..(ci + 1) * cout];
                        for (w, &g) in wrow.iter_mut().zip(grow) {
                            *w += s * g;
                        }
                    }
                }
            }
        }
    }

    // dL/d_inp[u, ci] = sum_t sum_co w[t, ci, co] * g_out[u - off(t), co]
    let mut gin = Field::zeros(dims, cin);
    for z in 0..n0 {
        for y in 0..n1 {
            for x in 0..n2 {
                let u = (z * n1 + y) * n2 + x;
                let dst = &mut gin.data[u * cin..(u + 1) * cin];
                for (t, &(off, dz, dy, dx)) in taps.iter().enumerate() {
                    let zz = z as i32 - dz;
                    let yy = y as i32 - dy;
                    let xx = x as i32 - dx;
                    if zz < 0
                        || zz >= n0 as i32
                        || yy < 0
                        || yy >= n1 as i32
                        || xx < 0
                        || xx >= n2 as i32
                    {
                        continue;
                    }
                    let v = (u as isize - off) as usize;
                    debug_assert!(v < n);
                    let grow = &g_out.data[v * cout..(v + 1) * cout];
                    let wt = &conv.w[t * cin * cout..(t + 1) * cin * cout];
                    for (ci, d) in dst.iter_mut().enumerate() {
                        let wrow = &wt[ci * cout..(ci + 1) * cout];
                        let mut s = 0.0;
                        for (&w, &g) in wrow.iter().zip(grow) {
                            s += w * g;
                        }
                        *d += s;
                    }
                }
            }
        }
    }
    (Conv3Grads { w: gw, b: gb }, gin)
}

/// The residual CNN: six hidden ReLU layers and three linear heads whose
/// outputs concatenate to the 7 field channels (1 log-signal, 3 diagonal,
/// 3 off-diagonal). Output = input + heads, so a zero-initialized head
/// stack makes the network the identity at initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct DnCnn {
    pub width: usize,
    pub hidden: Vec<Conv3>,
    pub heads: [Conv3; 3],
}

/// Channel counts of the three output heads.
pub const HEAD_CHANNELS: [usize; 3] = [1, 3, 3];

impl DnCnn {
    pub fn init(width: usize, seed: u64) -> Self {
        assert!(width >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
        hidden.push(Conv3::he_init(7, width, &mut rng));
        for _ in 1..HIDDEN_LAYERS {
            hidden.push(Conv3::he_init(width, width, &mut rng));
        }
        // Heads start small but nonzero: the residual path begins near the
        // identity map while the hidden stack still receives gradient from
        // the very first step (exactly-zero heads would block it).
        let mut heads = [
            Conv3::he_init(width, HEAD_CHANNELS[0], &mut rng),
            Conv3::he_init(width, HEAD_CHANNELS[1], &mut rng),
            Conv3::he_init(width, HEAD_CHANNELS[2], &mut rng),
        ];
        for head in &mut heads {
            for w in &mut head.w {
                *w *= HEAD_INIT_SCALE;
            }
        }
        DnCnn {
            width,
            hidden,
            heads,
        }
    }

    pub fn n_params(&self) -> usize {
        self.hidden.iter().map(|c| c.n_params()).sum::<usize>()
            + self.heads.iter().map(|c| c.n_params()).sum::<usize>()
    }

    /// Serialize all parameters in a fixed order: hidden layers then heads,
    /// kernel before bias within each.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for c in self.hidden.iter().chain(self.heads.iter()) {
            out.extend_from_slice(&c.w);
            out.extend_from_slice(&c.b);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut i = 0;
        for c in self.hidden.iter_mut().chain(self.heads.iter_mut()) {
            let (nw, nb) = (c.w.len(), c.b.len());
            c.w.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            c.b.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
    }

    pub fn forward(&self, z: &Field) -> Field {
        assert_eq!(z.channels, 7);
        let mut h = conv3d(z, &self.hidden[0], true);
        for layer in &self.hidden[1..] {
            h = conv3d(&h, layer, true);
        }
        let mut out = z.clone();
        let mut c0 = 0;
        for (head, &hc) in self.heads.iter().zip(&HEAD_CHANNELS) {
            let part = conv3d(&h, head, false);
            let n = num_voxels(z.dims);
            for v in 0..n {
                let src = part.voxel(v);
                let dst = &mut out.data[v * 7 + c0..v * 7 + c0 + hc];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            c0 += hc;
        }
        out
    }

    /// Forward pass that keeps the post-activation of every hidden layer so
    /// the reverse pass can be replayed exactly.
    pub fn forward_tape(&self, z: &Field) -> (Field, DnTape) {
        assert_eq!(z.channels, 7);
        let mut acts = Vec::with_capacity(HIDDEN_LAYERS);
        let mut h = conv3d(z, &self.hidden[0], true);
        acts.push(h.clone());
        for layer in &self.hidden[1..] {
            h = conv3d(&h, layer, true);
            acts.push(h.clone());
        }
        let mut out = z.clone();
        let mut c0 = 0;
        for (head, &hc) in self.heads.iter().zip(&HEAD_CHANNELS) {
            let part = conv3d(&h, head, false);
            let n = num_voxels(z.dims);
            for v in 0..n {
                let src = part.voxel(v);
                let dst = &mut out.data[v * 7 + c0..v * 7 + c0 + hc];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            c0 += hc;
        }
        (
            out,
            DnTape {
                input: z.clone(),
                acts,
            },
        )
    }

    /// Exact reverse pass. `g_out` is dL/d(output); returns parameter
    /// gradients and dL/d(input). The residual connection contributes
    /// `g_out` directly to the input gradient.
    pub fn backward(&self, tape: &DnTape, g_out: &Field) -> (DnGrads, Field) {
        assert_eq!(g_out.channels, 7);
        let dims = tape.input.dims;
        let n = num_voxels(dims);
        let last = tape.acts.last().unwrap();

        // Split the upstream gradient into the three head slices and push
        // through the head convolutions; accumulate gradient on h6.
        let mut g_h = Field::zeros(dims, self.width);
        let mut head_grads: Vec<Conv3Grads> = Vec::with_capacity(3);
        let mut c0 = 0;
        for (head, &hc) in self.heads.iter().zip(&HEAD_CHANNELS) {
            let mut g_part = Field::zeros(dims, hc);
            for v in 0..n {
                g_part
                    .voxel_mut(v)
                    .copy_from_slice(&g_out.data[v * 7 + c0..v * 7 + c0 + hc]);
            }
            let (hg, gi) = conv3d_backward(last, head, &g_part);
            head_grads.push(hg);
            for (a, &g) in g_h.data.iter_mut().zip(&gi.data) {
                *a += g;
            }
            c0 += hc;
        }

        // Hidden layers in reverse; ReLU derivative from the stored
        // post-activations (zero slope at zero).
        let mut g = g_h;
        let mut hidden_grads: Vec<Conv3Grads> = Vec::with_capacity(HIDDEN_LAYERS);
        for li in (0..HIDDEN_LAYERS).rev() {
            let act = &tape.acts[li];
            for (gv, &a) in g.data.iter_mut().zip(&act.data) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
            let below: &Field = if li == 0 { &tape.input } else { &tape.acts[li - 1] };
            let (lg, gi) = conv3d_backward(below, &self.hidden[li], &g);
            hidden_grads.push(lg);
            g = gi;
        }
        hidden_grads.reverse();

        // Residual path.
        let mut g_in = g;
        for (a, &u) in g_in.data.iter_mut().zip(&g_out.data) {
            *a += u;
        }
        (
            DnGrads {
                hidden: hidden_grads,
                heads: head_grads,
            },
            g_in,
        )
    }
}

/// Stored forward activations for one denoiser evaluation.
pub struct DnTape {
    pub input: Field,
    pub acts: Vec<Field>,
}

/// Parameter gradients mirroring [`DnCnn`].
#[derive(Clone, Debug)]
pub struct DnGrads {
    pub hidden: Vec<Conv3Grads>,
    pub heads: Vec<Conv3Grads>,
}

impl DnGrads {
    /// Same fixed order as [`DnCnn::flatten`].
    pub fn accumulate_flat(&self, out: &mut [f64], scale: f64) {
        let mut i = 0;
        for g in self.hidden.iter().chain(self.heads.iter()) {
            for &v in &g.w {
                out[i] += scale * v;
                i += 1;
            }
            for &v in &g.b {
                out[i] += scale * v;
                i += 1;
            }
        }
        assert_eq!(i, out.len());
    }
}

/// CNN as a plug-in denoiser (inference only).
pub struct CnnDenoiser {
    pub net: DnCnn,
}

impl Denoiser for CnnDenoiser {
    fn apply(&self, f: &Field, mask: &Mask) -> Field {
        let mut inp = f.clone();
        inp.apply_mask(mask);
        let mut out = self.net.forward(&inp);
        out.apply_mask(mask);
        out
    }
    fn name(&self) -> String {
        String::from("cnn")
    }
}

/// Mask-normalized Gaussian smoothing: blur `f*m` and `m` separately and
/// divide, so values never bleed in from outside the mask and a constant
/// field stays constant.
pub struct GaussianDenoiser {
    pub sigma_voxels: f64,
}

impl Denoiser for GaussianDenoiser {
    fn apply(&self, f: &Field, mask: &Mask) -> Field {
        gaussian_smooth_masked(f, mask, self.sigma_voxels)
    }
    fn name(&self) -> String {
        String::from("gaussian")
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = {
        let r = fmath::ceil(3.0 * sigma) as usize;
        if r == 0 {
            1
        } else {
            r
        }
    };
    let mut k = Vec::with_capacity(2 * r + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -(r as i32)..=(r as i32) {
        k.push(fmath::exp(-(i as f64) * (i as f64) * inv));
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Blur every channel along one axis with zero padding.
pub(crate) fn blur_axis(f: &Field, axis: usize, k: &[f64]) -> Field {
    let dims = f.dims;
    let c = f.channels;
    let r = (k.len() - 1) / 2;
    let mut out = Field::zeros(dims, c);
    let n_axis = dims[axis];
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let idx = [i0, i1, i2];
                let pos = idx[axis] as i64;
                let dst = voxel_index(dims, i0, i1, i2) * c;
                for (j, &kj) in k.iter().enumerate() {
                    let p = pos + j as i64 - r as i64;
                    if p < 0 || p >= n_axis as i64 {
                        continue;
                    }
                    let mut sidx = idx;
                    sidx[axis] = p as usize;
                    let src = voxel_index(dims, sidx[0], sidx[1], sidx[2]) * c;
                    for ch in 0..c {
                        out.data[dst + ch] += kj * f.data[src + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn gaussian_smooth_masked(f: &Field, mask: &Mask, sigma: f64) -> Field {
    assert_eq!(f.dims, mask.dims);
    if sigma <= 0.0 {
        let mut out = f.clone();
        out.apply_mask(mask);
        return out;
    }
    let k = gaussian_kernel(sigma);
    let mut num = f.clone();
    num.apply_mask(mask);
    let mut den = Field::zeros(f.dims, 1);
    for (d, &m) in den.data.iter_mut().zip(&mask.data) {
        *d = if m { 1.0 } else { 0.0 };
    }
    for axis in 0..3 {
        num = blur_axis(&num, axis, &k);
        den = blur_axis(&den, axis, &k);
    }
    let c = f.channels;
    let mut out = Field::zeros(f.dims, c);
    for v in 0..num_voxels(f.dims) {
        if !mask.get(v) {
            continue;
        }
        let w = den.data[v];
        if w <= 1e-12 {
            continue;
        }
        let inv = 1.0 / w;
        for ch in 0..c {
            out.data[v * c + ch] = num.data[v * c + ch] * inv;
        }
    }
    out
}

/// Blur one scalar volume (unmasked, zero padding); used for smooth
/// synthetic textures.
pub fn gaussian_blur_volume(vol: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return vol.clone();
    }
    let k = gaussian_kernel(sigma);
    let mut f = Field::from_vec(vol.dims, 1, vol.data.clone());
    for axis in 0..3 {
        f = blur_axis(&f, axis, &k);
    }
    Volume::from_vec(vol.dims, f.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_field(dims: Dims, c: usize, rng: &mut ChaCha8Rng) -> Field {
        let mut f = Field::zeros(dims, c);
        for v in &mut f.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        f
    }

    // Independent naive convolution: six nested loops, no fast path.
    fn conv_oracle(inp: &Field, conv: &Conv3, relu: bool) -> Field {
        let dims = inp.dims;
        let (cin, cout) = (conv.in_ch, conv.out_ch);
        let mut out = Field::zeros(dims, cout);
        for z in 0..dims[0] as i32 {
            for y in 0..dims[1] as i32 {
                for x in 0..dims[2] as i32 {
                    for co in 0..cout {
                        let mut acc = conv.b[co];
                        for dz in -1i32..=1 {
                            for dy in -1i32..=1 {
                                for dx in -1i32..=1 {
                                    let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                                    if zz < 0
                                        || zz >= dims[0] as i32
                                        || yy < 0
                                        || yy >= dims[1] as i32
                                        || xx < 0
                                        || xx >= dims[2] as i32
                                    {
                                        continue;
                                    }
                                    let t = (((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1)) as usize;
                                    for ci in 0..cin {
                                        let s = inp.at(zz as usize, yy as usize, xx as usize, ci);
                                        acc += s * conv.w[(t * cin + ci) * cout + co];
                                    }
                                }
                            }
                        }
                        let v = voxel_index(dims, z as usize, y as usize, x as usize);
                        out.data[v * cout + co] = if relu && acc < 0.0 { 0.0 } else { acc };
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel_is_noop() {
        let mut conv = Conv3::zeros(3, 3);
        // Center tap = identity.
        let center = 13;
        for c in 0..3 {
            conv.w[(center * 3 + c) * 3 + c] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field([4, 5, 3], 3, &mut rng);
        let out = conv3d(&f, &conv, false);
        assert_eq!(out.data, f.data);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(dims, cin, cout) in &[
            ([3usize, 3, 3], 2usize, 4usize),
            ([5, 4, 3], 3, 2),
            ([2, 2, 6], 1, 1),
            ([4, 4, 4], 7, 5),
        ] {
            let f = random_field(dims, cin, &mut rng);
            let mut conv = Conv3::zeros(cin, cout);
            for w in &mut conv.w {
                *w = rng.gen_range(-0.5..0.5);
            }
            for b in &mut conv.b {
                *b = rng.gen_range(-0.2..0.2);
            }
            for relu in [false, true] {
                let got = conv3d(&f, &conv, relu);
                let want = conv_oracle(&f, &conv, relu);
                for (a, b) in got.data.iter().zip(&want.data) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [3, 4, 3];
        let (cin, cout) = (2, 3);
        let f = random_field(dims, cin, &mut rng);
        let mut conv = Conv3::zeros(cin, cout);
        for w in &mut conv.w {
            *w = rng.gen_range(-0.5..0.5);
        }
        for b in &mut conv.b {
            *b = rng.gen_range(-0.2..0.2);
        }
        // Random linear functional of the output.
        let proj = random_field(dims, cout, &mut rng);
        let loss = |inp: &Field, conv: &Conv3| -> f64 {
            let out = conv3d(inp, conv, false);
            out.data.iter().zip(&proj.data).map(|(a, b)| a * b).sum()
        };
        let (grads, gin) = conv3d_backward(&f, &conv, &proj);

        let h = 1e-6;
        // Kernel gradient, spot-checked entries.
        for idx in [0usize, 7, 26, conv.w.len() / 2, conv.w.len() - 1] {
            let mut cp = conv.clone();
            cp.w[idx] += h;
            let up = loss(&f, &cp);
            cp.w[idx] -= 2.0 * h;
            let dn = loss(&f, &cp);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - grads.w[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "w[{idx}]: fd {fd} vs {}",
                grads.w[idx]
            );
        }
        // Bias gradient.
        for idx in 0..cout {
            let mut cp = conv.clone();
            cp.b[idx] += h;
            let up = loss(&f, &cp);
            cp.b[idx] -= 2.0 * h;
            let dn = loss(&f, &cp);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grads.b[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        // Input gradient, spot-checked.
        for idx in [0usize, 5, f.data.len() / 2, f.data.len() - 1] {
            let mut fp = f.clone();
            fp.data[idx] += h;
            let up = loss(&fp, &conv);
            fp.data[idx] -= 2.0 * h;
            let dn = loss(&fp, &conv);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - gin.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "in[{idx}]: fd {fd} vs {}",
                gin.data[idx]
            );
        }
    }

    #[test]
    fn network_starts_near_identity() {
        let net = DnCnn::init(8, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_field([4, 4, 4], 7, &mut rng);
        let out = net.forward(&f);
        let max_shift = out
            .data
            .iter()
            .zip(&f.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_shift > 0.0, "shrunk heads still alter the input");
        assert!(
            max_shift < 0.5,
            "fresh network should stay close to the identity map, shifted by {max_shift}"
        );
    }

    #[test]
    fn network_backward_matches_finite_differences() {
        // End-to-end gradient check on a 4^3 block with a small width.
        let mut net = DnCnn::init(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Widen the heads so every path carries a well-scaled gradient.
        for head in &mut net.heads {
            for w in &mut head.w {
                *w = rng.gen_range(-0.2..0.2);
            }
            for b in &mut head.b {
                *b = rng.gen_range(-0.05..0.05);
            }
        }
        let f = random_field([4, 4, 4], 7, &mut rng);
        let target = random_field([4, 4, 4], 7, &mut rng);

        // Smooth loss: 0.5 || out - target ||^2.
        let loss_of = |net: &DnCnn, inp: &Field| -> f64 {
            let out = net.forward(inp);
            0.5 * out
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };

        let (out, tape) = net.forward_tape(&f);
        let mut g_out = Field::zeros(f.dims, 7);
        for (g, (a, b)) in g_out.data.iter_mut().zip(out.data.iter().zip(&target.data)) {
            *g = a - b;
        }
        let (grads, gin) = net.backward(&tape, &g_out);
        let mut flat_g = vec![0.0; net.n_params()];
        grads.accumulate_flat(&mut flat_g, 1.0);
        let flat_p = net.flatten();

        // h trades truncation error against rounding noise in the loss sum
        // (~1e-13 absolute), which the division by 2h amplifies.
        let h = 1e-5;
        let check = |i: usize| {
            let mut p = flat_p.clone();
            p[i] += h;
            let mut n2 = net.clone();
            n2.set_from_flat(&p);
            let up = loss_of(&n2, &f);
            p[i] -= 2.0 * h;
            n2.set_from_flat(&p);
            let dn = loss_of(&n2, &f);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - flat_g[i]).abs() / (1e-8 + fd.abs().max(flat_g[i].abs()));
            assert!(
                rel < 1e-4 || (fd - flat_g[i]).abs() < 1e-8,
                "param {i}: fd {fd} vs analytic {}",
                flat_g[i]
            );
        };
        // Sample parameters across all layers.
        let np = net.n_params();
        for i in (0..np).step_by(np / 61) {
            check(i);
        }
        // Input gradient.
        for idx in [0usize, 100, f.data.len() - 1] {
            let mut fp = f.clone();
            fp.data[idx] += h;
            let up = loss_of(&net, &fp);
            fp.data[idx] -= 2.0 * h;
            let dn = loss_of(&net, &fp);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - gin.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "input {idx}"
            );
        }
    }

    #[test]
    fn flatten_round_trips() {
        let net = DnCnn::init(6, 9);
        let flat = net.flatten();
        assert_eq!(flat.len(), net.n_params());
        let mut other = DnCnn::init(6, 1234);
        other.set_from_flat(&flat);
        assert_eq!(other, net);
    }

    #[test]
    fn gaussian_keeps_masked_constants() {
        let dims = [6, 6, 6];
        let mut mask = Mask::full(dims);
        // Carve an irregular region.
        for v in 0..num_voxels(dims) {
            if v % 7 == 0 {
                mask.data[v] = false;
            }
        }
        let mut f = Field::zeros(dims, 2);
        for v in 0..num_voxels(dims) {
            f.data[v * 2] = 3.5;
            f.data[v * 2 + 1] = -1.25;
        }
        let den = GaussianDenoiser { sigma_voxels: 1.2 };
        let out = den.apply(&f, &mask);
        for v in 0..num_voxels(dims) {
            if mask.get(v) {
                assert!((out.data[v * 2] - 3.5).abs() < 1e-12);
                assert!((out.data[v * 2 + 1] + 1.25).abs() < 1e-12);
            } else {
                assert_eq!(out.data[v * 2], 0.0);
            }
        }
    }

    #[test]
    fn gaussian_smooths_noise() {
        let dims = [8, 8, 8];
        let mask = Mask::full(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = random_field(dims, 1, &mut rng);
        let out = GaussianDenoiser { sigma_voxels: 1.0 }.apply(&f, &mask);
        let var = |d: &[f64]| {
            let m = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64
        };
        assert!(var(&out.data) < 0.5 * var(&f.data));
    }

    #[test]
    fn identity_denoiser_masks_only() {
        let dims = [3, 3, 3];
        let mut mask = Mask::full(dims);
        mask.data[0] = false;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_field(dims, 7, &mut rng);
        let out = IdentityDenoiser.apply(&f, &mask);
        for c in 0..7 {
            assert_eq!(out.data[c], 0.0);
        }
        assert_eq!(&out.data[7..], &f.data[7..]);
    }
}
