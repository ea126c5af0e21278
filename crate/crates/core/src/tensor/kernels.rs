//! Raw numeric kernels over flat slices. Shapes are checked by the tape
//! before any of these run.

use rayon::prelude::*;

/// Blocks handled per parallel task in the convolution kernels. Fixed so the
/// floating-point reduction order does not depend on the thread count.
const CONV_CHUNK: usize = 4;

/// `c = alpha * a * b + beta * c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides));
    assert!(b.len() >= span(k, n, b_strides));
    assert!(c.len() >= span(m, n, (c_row_stride, 1)));
    // SAFETY: every index touched by dgemm lies inside the spans asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

/// Unfolds a `[c, h, w]` plane stack into a `[c*k*k, oh*ow]` patch matrix.
pub fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let src = &plane[(oy + ky) * w + kx..][..ow];
                    row[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let dst = &mut plane[(oy + ky) * w + kx..][..ow];
                    for (d, s) in dst.iter_mut().zip(&row[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (self.height - self.kernel + 1, self.width - self.kernel + 1)
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_block(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_block(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.out_channels * oh * ow
    }
}

pub(crate) fn conv2d_forward(d: ConvDims, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = d.out_hw();
    let ohw = oh * ow;
    let patch = d.patch();
    let mut out = vec![0.0; d.batch * d.out_block()];
    out.par_chunks_mut(d.out_block())
        .zip(input.par_chunks(d.in_block()))
        .for_each_init(
            || vec![0.0; patch * ohw],
            |cols, (out_b, in_b)| {
                im2col(in_b, d.in_channels, d.height, d.width, d.kernel, cols);
                for (oc, row) in out_b.chunks_mut(ohw).enumerate() {
                    row.fill(bias[oc]);
                }
                gemm(d.out_channels, patch, ohw, weight, (patch, 1), cols, (ohw, 1), 1.0, out_b, ohw);
            },
        );
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    d: ConvDims,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let (oh, ow) = d.out_hw();
    let ohw = oh * ow;
    let patch = d.patch();
    let wlen = d.out_channels * patch;
    let mut grad_input = need_input.then(|| vec![0.0; d.batch * d.in_block()]);

    let chunk_in = CONV_CHUNK * d.in_block();
    let chunk_out = CONV_CHUNK * d.out_block();
    let partials: Vec<Vec<f64>> = match grad_input.as_mut() {
        Some(gi) => gi
            .par_chunks_mut(chunk_in)
            .zip(input.par_chunks(chunk_in))
            .zip(grad_out.par_chunks(chunk_out))
            .map(|((gi_c, in_c), go_c)| conv_chunk_backward(d, in_c, weight, go_c, Some(gi_c)))
            .collect(),
        None => input
            .par_chunks(chunk_in)
            .zip(grad_out.par_chunks(chunk_out))
            .map(|(in_c, go_c)| conv_chunk_backward(d, in_c, weight, go_c, None))
            .collect(),
    };
    let mut grad_weight = vec![0.0; wlen];
    for p in &partials {
        for (g, v) in grad_weight.iter_mut().zip(p) {
            *g += v;
        }
    }

    let mut grad_bias = vec![0.0; d.out_channels];
    for go_b in grad_out.chunks(d.out_block()) {
        for (oc, row) in go_b.chunks(ohw).enumerate() {
            grad_bias[oc] += row.iter().sum::<f64>();
        }
    }
    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

fn conv_chunk_backward(
    d: ConvDims,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
) -> Vec<f64> {
    let (oh, ow) = d.out_hw();
    let ohw = oh * ow;
    let patch = d.patch();
    let mut gw = vec![0.0; d.out_channels * patch];
    let mut cols = vec![0.0; patch * ohw];
    let mut dcols = if grad_input.is_some() {
        vec![0.0; patch * ohw]
    } else {
        Vec::new()
    };
    for (b, (in_b, go_b)) in input
        .chunks(d.in_block())
        .zip(grad_out.chunks(d.out_block()))
        .enumerate()
    {
        im2col(in_b, d.in_channels, d.height, d.width, d.kernel, &mut cols);
        // dW += dY [O, ohw] * cols^T [ohw, patch]
        gemm(d.out_channels, ohw, patch, go_b, (ohw, 1), &cols, (1, ohw), 1.0, &mut gw, patch);
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcols = W^T [patch, O] * dY [O, ohw]
            gemm(patch, d.out_channels, ohw, weight, (1, patch), go_b, (ohw, 1), 0.0, &mut dcols, ohw);
            let gi_b = &mut gi[b * d.in_block()..(b + 1) * d.in_block()];
            col2im_add(&dcols, d.in_channels, d.height, d.width, d.kernel, gi_b);
        }
    }
    gw
}

/// Reference valid convolution for a single `[c, h, w]` input. Test oracle only.
pub fn conv2d_naive(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    (o, k): (usize, usize),
    bias: &[f64],
) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[oc];
                for ci in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += weight[((oc * c + ci) * k + dy) * k + dx]
                                * input[(ci * h + y + dy) * w + x + dx];
                        }
                    }
                }
                out[(oc * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// 2x2/stride-2 max pooling over `planes` planes of `h x w`. Returns the pooled
/// values and, per output, the flat input index of the first maximum in
/// row-major scan order.
pub(crate) fn max_pool2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = base + 2 * y * w + 2 * x;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_loops_with_transposed_operand() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i as f64).sin()).collect(); // stored [n, k]
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, &a, (k, 1), &b, (1, k), 1.0, &mut c, n);
        for i in 0..m {
            for j in 0..n {
                let expect: f64 = 1.0 + (0..k).map(|t| a[i * k + t] * b[j * k + t]).sum::<f64>();
                assert!((c[i * n + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 5, 6, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let cols_len = c * k * k * (h - k + 1) * (w - k + 1);
        let y: Vec<f64> = (0..cols_len).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut cols = vec![0.0; cols_len];
        im2col(&x, c, h, w, k, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * h * w];
        col2im_add(&y, c, h, w, k, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
