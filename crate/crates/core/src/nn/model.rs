//! Forward and reverse passes of the conv trunk and linear heads.
//!
//! Activations are stored channel-major across the batch (`C × B × H × W`)
//! so every convolution is a single GEMM over an im2col matrix.

use super::scalar::{gemm, Mat, Scalar};
use super::spec::{ModelSpec, KERNEL};
use super::NnError;
use crate::data::RgbImage;

const K2: usize = KERNEL * KERNEL;

/// Batch of images as reals in `[0, 1]`, `N × 3 × side × side`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch<S> {
    pub n: usize,
    pub side: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> InputBatch<S> {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Self, NnError> {
        let mut data = Vec::new();
        let mut n = 0;
        let mut side = None;
        for img in images {
            let s = img.width() as usize;
            if img.height() as usize != s || side.is_some_and(|v| v != s) {
                return Err(NnError::ShapeMismatch(format!(
                    "batch images must share one square size, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
            side = Some(s);
            let plane = s * s;
            let start = data.len();
            data.resize(start + 3 * plane, S::ZERO);
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[start + c * plane + i] = S::from_f64(f64::from(px[c]) / 255.0);
                }
            }
            n += 1;
        }
        Ok(InputBatch {
            n,
            side: side.unwrap_or(0),
            data,
        })
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let per = 3 * self.side * self.side;
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        InputBatch {
            n: rows.len(),
            side: self.side,
            data,
        }
    }
}

/// Parameter offsets derived from a spec, in layout order.
#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub conv: Vec<(usize, usize)>,
    pub heads: Vec<(usize, usize, usize)>,
    pub total: usize,
}

impl Offsets {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut off = 0;
        let mut in_ch = 3;
        let mut conv = Vec::new();
        for b in &spec.conv_blocks {
            let w = off;
            off += b.out_channels * in_ch * K2;
            conv.push((w, off));
            off += b.out_channels;
            in_ch = b.out_channels;
        }
        let mut heads = Vec::new();
        for h in &spec.heads {
            let w = off;
            off += h.n_outputs * spec.feature_dim;
            heads.push((w, off, h.n_outputs));
            off += h.n_outputs;
        }
        Offsets {
            conv,
            heads,
            total: off,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    in_ch: usize,
    side: usize,
    cols: Vec<S>,
    act: Vec<S>,
    pool_idx: Option<Vec<u32>>,
}

/// Intermediates kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct TrunkCache<S> {
    batch: usize,
    blocks: Vec<BlockCache<S>>,
    final_side: usize,
}

/// Features `z` (`B × d`) with their cache.
#[derive(Debug, Clone)]
pub struct TrunkOutput<S> {
    pub features: Vec<S>,
    pub cache: TrunkCache<S>,
}

fn to_channel_major<S: Scalar>(input: &InputBatch<S>) -> Vec<S> {
    let plane = input.side * input.side;
    let mut out = vec![S::ZERO; input.data.len()];
    for b in 0..input.n {
        for c in 0..3 {
            let src = &input.data[(b * 3 + c) * plane..(b * 3 + c + 1) * plane];
            out[(c * input.n + b) * plane..(c * input.n + b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn im2col<S: Scalar>(x: &[S], ch: usize, batch: usize, side: usize) -> Vec<S> {
    let n = batch * side * side;
    let mut cols = vec![S::ZERO; ch * K2 * n];
    let s = side as isize;
    for c in 0..ch {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((c * K2) + ky * KERNEL + kx) * n..][..n];
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                for b in 0..batch {
                    let plane = &x[(c * batch + b) * side * side..][..side * side];
                    let dst = &mut row[b * side * side..][..side * side];
                    for y in 0..s {
                        let sy = y + dy;
                        if sy < 0 || sy >= s {
                            continue;
                        }
                        for xx in 0..s {
                            let sx = xx + dx;
                            if sx >= 0 && sx < s {
                                dst[(y * s + xx) as usize] = plane[(sy * s + sx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], ch: usize, batch: usize, side: usize) -> Vec<S> {
    let n = batch * side * side;
    let mut x = vec![S::ZERO; ch * n];
    let s = side as isize;
    for c in 0..ch {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((c * K2) + ky * KERNEL + kx) * n..][..n];
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                for b in 0..batch {
                    let plane = &mut x[(c * batch + b) * side * side..][..side * side];
                    let src = &row[b * side * side..][..side * side];
                    for y in 0..s {
                        let sy = y + dy;
                        if sy < 0 || sy >= s {
                            continue;
                        }
                        for xx in 0..s {
                            let sx = xx + dx;
                            if sx >= 0 && sx < s {
                                plane[(sy * s + sx) as usize] += src[(y * s + xx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2×2 max pool over every `side × side` plane; ties keep the first index.
fn max_pool<S: Scalar>(act: &[S], planes: usize, side: usize) -> (Vec<S>, Vec<u32>) {
    let out_side = side / 2;
    let mut out = Vec::with_capacity(planes * out_side * out_side);
    let mut idx = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let plane = &act[p * side * side..][..side * side];
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut best = (2 * oy) * side + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (2 * oy + dy) * side + 2 * ox + dx;
                    if plane[j] > plane[best] {
                        best = j;
                    }
                }
                out.push(plane[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Runs the convolutional trunk and global average pooling.
pub fn forward_trunk<S: Scalar>(
    params: &[S],
    spec: &ModelSpec,
    input: &InputBatch<S>,
) -> Result<TrunkOutput<S>, NnError> {
    let offsets = Offsets::new(spec);
    if params.len() != offsets.total {
        return Err(NnError::ShapeMismatch(format!(
            "expected {} parameters, got {}",
            offsets.total,
            params.len()
        )));
    }
    if input.side != spec.input_side {
        return Err(NnError::ShapeMismatch(format!(
            "input side {} does not match model input side {}",
            input.side, spec.input_side
        )));
    }
    if input.data.len() != input.n * 3 * input.side * input.side {
        return Err(NnError::ShapeMismatch("input buffer length".into()));
    }
    let batch = input.n;
    let mut x = to_channel_major(input);
    let mut ch = 3;
    let mut side = input.side;
    let mut blocks = Vec::with_capacity(spec.conv_blocks.len());
    for (block, &(w_off, b_off)) in spec.conv_blocks.iter().zip(&offsets.conv) {
        let out_ch = block.out_channels;
        let n = batch * side * side;
        let cols = im2col(&x, ch, batch, side);
        let w = &params[w_off..w_off + out_ch * ch * K2];
        let bias = &params[b_off..b_off + out_ch];
        let mut act = vec![S::ZERO; out_ch * n];
        for (o, row) in act.chunks_exact_mut(n).enumerate() {
            row.fill(bias[o]);
        }
        gemm(Mat::new(w, out_ch, ch * K2), Mat::new(&cols, ch * K2, n), S::ONE, &mut act);
        for v in &mut act {
            if *v < S::ZERO {
                *v = S::ZERO;
            }
        }
        let (next, pool_idx) = if block.pool {
            let (pooled, idx) = max_pool(&act, out_ch * batch, side);
            (pooled, Some(idx))
        } else {
            (act.clone(), None)
        };
        blocks.push(BlockCache {
            in_ch: ch,
            side,
            cols,
            act,
            pool_idx,
        });
        x = next;
        ch = out_ch;
        if block.pool {
            side /= 2;
        }
    }
    let plane = side * side;
    let inv = S::from_f64(1.0 / plane as f64);
    let mut features = vec![S::ZERO; batch * ch];
    for c in 0..ch {
        for b in 0..batch {
            let mut acc = 0.0f64;
            for &v in &x[(c * batch + b) * plane..][..plane] {
                acc += v.to_f64();
            }
            features[b * ch + c] = S::from_f64(acc) * inv;
        }
    }
    Ok(TrunkOutput {
        features,
        cache: TrunkCache {
            batch,
            blocks,
            final_side: side,
        },
    })
}

/// Accumulates trunk parameter gradients into `grads` given `∂loss/∂z`.
pub fn backward_trunk<S: Scalar>(
    params: &[S],
    spec: &ModelSpec,
    cache: &TrunkCache<S>,
    dz: &[S],
    grads: &mut [S],
) {
    let offsets = Offsets::new(spec);
    let batch = cache.batch;
    let d = spec.feature_dim;
    let plane = cache.final_side * cache.final_side;
    let inv = S::from_f64(1.0 / plane as f64);
    // gradient w.r.t. the last block's (post-pool) output
    let mut d_out = vec![S::ZERO; d * batch * plane];
    for c in 0..d {
        for b in 0..batch {
            let g = dz[b * d + c] * inv;
            d_out[(c * batch + b) * plane..][..plane].fill(g);
        }
    }
    for (i, (block, bc)) in spec.conv_blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let out_ch = block.out_channels;
        let side = bc.side;
        let n = batch * side * side;
        let mut d_act = match &bc.pool_idx {
            Some(idx) => {
                let out_side = side / 2;
                let mut full = vec![S::ZERO; out_ch * n];
                let per_in = side * side;
                let per_out = out_side * out_side;
                for p in 0..out_ch * batch {
                    for q in 0..per_out {
                        let j = idx[p * per_out + q] as usize;
                        full[p * per_in + j] += d_out[p * per_out + q];
                    }
                }
                full
            }
            None => d_out,
        };
        for (g, &a) in d_act.iter_mut().zip(&bc.act) {
            if a <= S::ZERO {
                *g = S::ZERO;
            }
        }
        let (w_off, b_off) = offsets.conv[i];
        let kdim = bc.in_ch * K2;
        gemm(
            Mat::new(&d_act, out_ch, n),
            Mat::new(&bc.cols, kdim, n).t(),
            S::ONE,
            &mut grads[w_off..w_off + out_ch * kdim],
        );
        for o in 0..out_ch {
            let mut acc = 0.0f64;
            for &v in &d_act[o * n..(o + 1) * n] {
                acc += v.to_f64();
            }
            grads[b_off + o] += S::from_f64(acc);
        }
        if i == 0 {
            break;
        }
        let w = &params[w_off..w_off + out_ch * kdim];
        let mut dcols = vec![S::ZERO; kdim * n];
        gemm(Mat::new(w, out_ch, kdim).t(), Mat::new(&d_act, out_ch, n), S::ZERO, &mut dcols);
        d_out = col2im(&dcols, bc.in_ch, batch, side);
    }
}

/// Logits of one sample under head `head_idx` (index into `spec.heads`).
pub(crate) fn head_logits<S: Scalar>(
    params: &[S],
    offsets: &Offsets,
    d: usize,
    head_idx: usize,
    z: &[S],
) -> Vec<f64> {
    let (w_off, b_off, n_out) = offsets.heads[head_idx];
    (0..n_out)
        .map(|j| {
            let row = &params[w_off + j * d..w_off + (j + 1) * d];
            let mut acc = params[b_off + j].to_f64();
            for k in 0..d {
                acc += row[k].to_f64() * z[k].to_f64();
            }
            acc
        })
        .collect()
}

/// Backpropagates `dlogits` of one sample into head gradients and `dz`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_backward<S: Scalar>(
    params: &[S],
    offsets: &Offsets,
    d: usize,
    head_idx: usize,
    z: &[S],
    dlogits: &[f64],
    grads: &mut [S],
    dz: &mut [S],
) {
    let (w_off, b_off, n_out) = offsets.heads[head_idx];
    debug_assert_eq!(dlogits.len(), n_out);
    for (j, &g) in dlogits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let gs = S::from_f64(g);
        grads[b_off + j] += gs;
        let row = w_off + j * d;
        for k in 0..d {
            grads[row + k] += gs * z[k];
            dz[k] += gs * params[row + k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{init_model, ConvBlock, HeadSpec};

    fn toy_spec() -> ModelSpec {
        ModelSpec::with_blocks(
            8,
            vec![ConvBlock::new(2, true), ConvBlock::new(2, false)],
            vec![HeadSpec {
                head_id: 0,
                n_outputs: 3,
            }],
            5,
        )
    }

    fn toy_input(n: usize, side: usize, seed: u64) -> InputBatch<f64> {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(seed, "input", 0);
        InputBatch {
            n,
            side,
            data: (0..n * 3 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    /// Scalar-loop reference: direct convolution with explicit padding.
    fn reference_features(params: &[f64], spec: &ModelSpec, x: &[f64], side: usize) -> Vec<f64> {
        let mut ch = 3;
        let mut s = side;
        let mut cur = x.to_vec(); // C × s × s for one sample
        let mut off = 0;
        for b in &spec.conv_blocks {
            let o_ch = b.out_channels;
            let w = &params[off..off + o_ch * ch * 9];
            off += o_ch * ch * 9;
            let bias = &params[off..off + o_ch];
            off += o_ch;
            let mut out = vec![0.0; o_ch * s * s];
            for o in 0..o_ch {
                for y in 0..s as isize {
                    for xx in 0..s as isize {
                        let mut acc = bias[o];
                        for c in 0..ch {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if sy < 0 || sx < 0 || sy >= s as isize || sx >= s as isize {
                                        continue;
                                    }
                                    acc += w[((o * ch + c) * 3 + ky as usize) * 3 + kx as usize]
                                        * cur[(c * s + sy as usize) * s + sx as usize];
                                }
                            }
                        }
                        out[(o * s + y as usize) * s + xx as usize] = acc.max(0.0);
                    }
                }
            }
            if b.pool {
                let h = s / 2;
                let mut pooled = vec![0.0; o_ch * h * h];
                for o in 0..o_ch {
                    for y in 0..h {
                        for xx in 0..h {
                            let mut m = f64::NEG_INFINITY;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                m = m.max(out[(o * s + 2 * y + dy) * s + 2 * xx + dx]);
                            }
                            pooled[(o * h + y) * h + xx] = m;
                        }
                    }
                }
                out = pooled;
                s = h;
            }
            cur = out;
            ch = o_ch;
        }
        (0..ch)
            .map(|c| cur[c * s * s..(c + 1) * s * s].iter().sum::<f64>() / (s * s) as f64)
            .collect()
    }

    #[test]
    fn matches_scalar_reference() {
        let spec = toy_spec();
        let params: Vec<f64> = init_model(&spec)
            .unwrap()
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f64::from(v) + 0.01 * (i % 7) as f64)
            .collect();
        let input = toy_input(3, 8, 1);
        let out = forward_trunk(&params, &spec, &input).unwrap();
        for b in 0..3 {
            let want = reference_features(&params, &spec, &input.data[b * 192..(b + 1) * 192], 8);
            for (c, w) in want.iter().enumerate() {
                assert!((out.features[b * 2 + c] - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let spec = toy_spec();
        let params = vec![0.0f64; spec.layout().total_len()];
        let out = forward_trunk(&params, &spec, &toy_input(2, 8, 2)).unwrap();
        assert!(out.features.iter().all(|&v| v == 0.0));
        let offsets = Offsets::new(&spec);
        assert!(head_logits(&params, &offsets, 2, 0, &out.features[..2])
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_duplicate_outputs() {
        let spec = toy_spec();
        let params: Vec<f64> = init_model(&spec).unwrap().values.iter().map(|&v| f64::from(v)).collect();
        let input = toy_input(2, 8, 3);
        let dup = input.select(&[0, 1, 0]);
        let out = forward_trunk(&params, &spec, &dup).unwrap();
        assert_eq!(out.features[0..2], out.features[4..6]);
    }

    #[test]
    fn shape_mismatch_detected() {
        let spec = toy_spec();
        let params = vec![0.0f64; spec.layout().total_len()];
        assert!(matches!(
            forward_trunk(&params, &spec, &toy_input(1, 16, 0)),
            Err(NnError::ShapeMismatch(_))
        ));
        assert!(forward_trunk(&params[1..], &spec, &toy_input(1, 8, 0)).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (ch, b, s) = (2, 2, 5);
        let x: Vec<f64> = (0..ch * b * s * s).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, ch, b, s);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, ch, b, s);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
