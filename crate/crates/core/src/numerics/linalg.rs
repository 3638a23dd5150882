//! Flat-slice compute kernels: GEMM variants, im2col, and the conv2d
//! forward/backward pair built on them.
//!
//! The dot kernels run eight independent accumulator lanes so LLVM can
//! vectorize them without reassociating a single serial sum; the lane
//! layout is fixed, which keeps every reduction order deterministic.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// out[m,n] = a[m,k] * b[n,k]^T  (dot of rows with rows).
pub fn gemm_nt<S: Element>(m: usize, n: usize, k: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (j, o) in or.iter_mut().enumerate() {
            *o = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[m,n] = a[m,k] * b[k,n]. Accumulates row-wise, vector-friendly inner loop.
pub fn gemm_nn<S: Element>(m: usize, n: usize, k: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let or = &mut out[i * n..(i + 1) * n];
        or.fill(S::zero());
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += aip * bv;
            }
        }
    }
}

#[inline]
fn dot<S: Element>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 8;
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] = acc[l] + a[base + l] * b[base + l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * LANES..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s0 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s1 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s0 + s1) + tail
}

/// Neighborhood matrix of a `[N, C, H, W]` map under zero padding: one row per
/// spatial position in `(n, y, x)` raster order, columns in `(c, ky, kx)`
/// order, `cols[(n*H+y)*W+x, (c*k+ky)*k+kx] = input[n, c, y+ky-pad, x+kx-pad]`.
pub fn im2col<S: Element>(input: &Tensor<S>, k: usize) -> Tensor<S> {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let pad = k / 2;
    let ck = c * k * k;
    let mut cols = vec![S::zero(); n * h * w * ck];
    let data = input.data();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = &mut cols[((ni * h + y) * w + x) * ck..((ni * h + y) * w + x + 1) * ck];
                let mut idx = 0;
                for ci in 0..c {
                    let plane = &data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            idx += k;
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for kx in 0..k {
                            let sx = x as isize + kx as isize - pad as isize;
                            if sx >= 0 && sx < w as isize {
                                row[idx] = src[sx as usize];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * h * w, ck], cols).expect("im2col shape")
}

/// Scatter-add the inverse of [`im2col`]: accumulate neighborhood rows back
/// onto the `[N, C, H, W]` grid. Iteration order is fixed, so accumulation is
/// deterministic.
pub fn col2im_add<S: Element>(cols: &Tensor<S>, n: usize, c: usize, h: usize, w: usize, k: usize, out: &mut [S]) {
    let pad = k / 2;
    let ck = c * k * k;
    debug_assert_eq!(cols.numel(), n * h * w * ck);
    debug_assert_eq!(out.len(), n * c * h * w);
    let data = cols.data();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = &data[((ni * h + y) * w + x) * ck..((ni * h + y) * w + x + 1) * ck];
                let mut idx = 0;
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            idx += k;
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x as isize + kx as isize - pad as isize;
                            if sx >= 0 && sx < w as isize {
                                out[base + sy as usize * w + sx as usize] += row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Same-size zero-padded stride-1 convolution. `input [N,C,H,W]`,
/// `filter [O,C,k,k]` with odd `k`; output `[N,O,H,W]`.
pub fn conv2d_forward<S: Element>(input: &Tensor<S>, filter: &Tensor<S>) -> Result<Tensor<S>> {
    check_conv_shapes(input, filter)?;
    let (n, _c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let o = filter.dim(0);
    let k = filter.dim(2);
    let ck = filter.dim(1) * k * k;
    let cols = im2col(input, k);
    // rows [(n,y,x), ck] x filter [o, ck]^T -> [(n,y,x), o]
    let mut rows = vec![S::zero(); n * h * w * o];
    gemm_nt(n * h * w, o, ck, cols.data(), filter.data(), &mut rows);
    // transpose position-major rows into [N,O,H,W]
    let mut out = vec![S::zero(); n * o * h * w];
    let plane = h * w;
    for ni in 0..n {
        for pos in 0..plane {
            let src = &rows[(ni * plane + pos) * o..(ni * plane + pos + 1) * o];
            for (oi, &v) in src.iter().enumerate() {
                out[(ni * o + oi) * plane + pos] = v;
            }
        }
    }
    Tensor::new(vec![n, o, h, w], out)
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_backward_input<S: Element>(d_out: &Tensor<S>, filter: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let o = filter.dim(0);
    let k = filter.dim(2);
    let ck = c * k * k;
    let plane = h * w;
    // gather d_out into position-major rows [(n,y,x), o]
    let mut drows = vec![S::zero(); n * plane * o];
    let dd = d_out.data();
    for ni in 0..n {
        for oi in 0..o {
            let src = &dd[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
            for (pos, &v) in src.iter().enumerate() {
                drows[(ni * plane + pos) * o + oi] = v;
            }
        }
    }
    // d_cols [(n,y,x), ck] = drows [(n,y,x), o] x filter [o, ck]
    let mut dcols = vec![S::zero(); n * plane * ck];
    gemm_nn(n * plane, ck, o, &drows, filter.data(), &mut dcols);
    let dcols = Tensor::new(vec![n * plane, ck], dcols)?;
    let mut dinput = vec![S::zero(); n * c * plane];
    col2im_add(&dcols, n, c, h, w, k, &mut dinput);
    Tensor::new(vec![n, c, h, w], dinput)
}

fn check_conv_shapes<S: Element>(input: &Tensor<S>, filter: &Tensor<S>) -> Result<()> {
    if input.rank() != 4 || filter.rank() != 4 {
        return Err(Error::Contract(format!(
            "conv2d wants input [N,C,H,W] and filter [O,C,k,k], got {:?} and {:?}",
            input.shape(),
            filter.shape()
        )));
    }
    let k = filter.dim(2);
    if k != filter.dim(3) || k % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d kernel must be square with odd size, got {}x{}",
            filter.dim(2),
            filter.dim(3)
        )));
    }
    if input.dim(1) != filter.dim(1) {
        return Err(Error::Contract(format!(
            "conv2d channel mismatch: input has {}, filter expects {}",
            input.dim(1),
            filter.dim(1)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct five-loop convolution used as the oracle for the GEMM path.
    fn conv_reference(input: &Tensor<f64>, filter: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let o = filter.dim(0);
        let k = filter.dim(2);
        let pad = k as isize / 2;
        let mut out = Tensor::zeros(&[n, o, h, w]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k as isize {
                                for kx in 0..k as isize {
                                    let (sy, sx) = (y + ky - pad, x + kx - pad);
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                        acc += input.data()[((ni * c + ci) * h + sy as usize) * w + sx as usize]
                                            * filter.data()[((oi * c + ci) * k as usize + ky as usize) * k as usize + kx as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * h + y as usize) * w + x as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn arange_tensor(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 19, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).cos()).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut out = vec![0.0; m * n];
        gemm_nt(m, n, k, &a, &b, &mut out);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-12);
            }
        }
        let bt: Vec<f64> = {
            let mut t = vec![0.0; k * n];
            for j in 0..n {
                for p in 0..k {
                    t[p * n + j] = b[j * k + p];
                }
            }
            t
        };
        let mut out2 = vec![0.0; m * n];
        gemm_nn(m, n, k, &a, &bt, &mut out2);
        for (u, v) in out.iter().zip(&out2) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(n, c, o, k, h, w) in &[(1, 1, 1, 1, 3, 3), (2, 3, 4, 3, 5, 6), (1, 2, 3, 5, 7, 4)] {
            let input = arange_tensor(&[n, c, h, w]);
            let filter = arange_tensor(&[o, c, k, k]);
            let got = conv2d_forward(&input, &filter).unwrap();
            let want = conv_reference(&input, &filter);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-10, "conv mismatch: {g} vs {w}");
            }
        }
    }

    #[test]
    fn identity_filter_is_identity() {
        let input = arange_tensor(&[2, 1, 4, 4]);
        let filter = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d_forward(&input, &filter).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn even_kernel_rejected() {
        let input = arange_tensor(&[1, 1, 4, 4]);
        let filter = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(conv2d_forward(&input, &filter), Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y: the pair is a
        // transpose, which is exactly what backward needs.
        let x = arange_tensor(&[2, 2, 4, 5]);
        let k = 3;
        let cols = im2col(&x, k);
        let y = Tensor::from_fn(&[cols.dim(0), cols.dim(1)], |i| ((i * 7 % 13) as f64) - 6.0);
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.numel()];
        col2im_add(&y, 2, 2, 4, 5, k, &mut back);
        let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    #[ignore = "manual throughput probe; run with --release -- --ignored --nocapture"]
    fn gemm_throughput_probe() {
        let (m, n, k) = (16384usize, 64usize, 288usize);
        let a: Vec<f32> = (0..m * k).map(|i| (i % 97) as f32 * 0.01).collect();
        let b: Vec<f32> = (0..n * k).map(|i| (i % 89) as f32 * 0.01).collect();
        let mut out = vec![0.0f32; m * n];
        let reps = 10;
        let start = std::time::Instant::now();
        for _ in 0..reps {
            gemm_nt(m, n, k, &a, &b, &mut out);
        }
        let secs = start.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * n * k * reps) as f64) / secs / 1e9;
        println!("gemm_nt {m}x{n}x{k} f32: {gflops:.2} GFLOP/s ({:.1} ms/call)", secs * 1000.0 / reps as f64);
    }
}
