//! 3×3, stride-1, zero-padded convolutions on planar `C × H × W` buffers.

/// `out[co] = bias[co] + Σ_ci w[co, ci] ⋆ input[ci]`.
pub fn conv3x3(input: &[f64], weight: &[f64], bias: &[f64], cin: usize, cout: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    debug_assert_eq!(input.len(), cin * plane);
    debug_assert_eq!(weight.len(), cout * cin * 9);
    let col = im2col(input, cin, h, w);
    let mut out = vec![0.0; cout * plane];
    for (co, dst) in out.chunks_exact_mut(plane).enumerate() {
        dst.fill(bias[co]);
    }
    // out (cout × P) += W (cout × 9cin) · col (9cin × P)
    gemm(
        cout,
        cin * 9,
        plane,
        weight,
        (cin * 9, 1),
        &col,
        (plane, 1),
        &mut out,
        1.0,
    );
    out
}

/// Gradient of [`conv3x3`] with respect to its input.
pub fn conv3x3_input_grad(grad_out: &[f64], weight: &[f64], cin: usize, cout: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let k = cin * 9;
    let mut dcol = vec![0.0; k * plane];
    // dcol (9cin × P) = Wᵀ · g
    gemm(k, cout, plane, weight, (1, k), grad_out, (plane, 1), &mut dcol, 0.0);
    col2im(&dcol, cin, h, w)
}

/// Gradients of [`conv3x3`] with respect to weight and bias, accumulated
/// into `grad_w` / `grad_b`.
pub fn conv3x3_param_grad(
    input: &[f64],
    grad_out: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let plane = h * w;
    for (co, g) in grad_out.chunks_exact(plane).enumerate() {
        grad_b[co] += g.iter().sum::<f64>();
    }
    let col = im2col(input, cin, h, w);
    // dW (cout × 9cin) += g (cout × P) · colᵀ
    gemm(
        cout,
        plane,
        cin * 9,
        grad_out,
        (plane, 1),
        &col,
        (1, plane),
        grad_w,
        1.0,
    );
}

/// `c = a·b + beta·c` for row-major `c` (m × n); `a`, `b` given with
/// explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row `(ci·9 + tap)` holds `input[ci]` shifted by the tap offset, zero
/// outside the image.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut col = vec![0.0; cin * 9 * plane];
    for ci in 0..cin {
        let src = &input[ci * plane..(ci + 1) * plane];
        for tap in 0..9 {
            let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let dst = &mut col[(ci * 9 + tap) * plane..(ci * 9 + tap + 1) * plane];
            let (x0, x1) = col_range(w, dx);
            for y in row_range(h, dy) {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cin * plane];
    for ci in 0..cin {
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for tap in 0..9 {
            let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let src = &col[(ci * 9 + tap) * plane..(ci * 9 + tap + 1) * plane];
            let (x0, x1) = col_range(w, dx);
            for y in row_range(h, dy) {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                for (o, i) in dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)]
                    .iter_mut()
                    .zip(&src[y * w + x0..y * w + x1])
                {
                    *o += i;
                }
            }
        }
    }
    out
}

fn row_range(h: usize, dy: isize) -> std::ops::Range<usize> {
    match dy {
        -1 => 1..h,
        1 => 0..h.saturating_sub(1),
        _ => 0..h,
    }
}

fn col_range(w: usize, dx: isize) -> (usize, usize) {
    match dx {
        -1 => (1, w),
        1 => (0, w.saturating_sub(1)),
        _ => (0, w),
    }
}
