use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

/// Operand layout for [`gemm`]: `Normal` is stored `rows x cols` row-major,
/// `Transposed` is stored `cols x rows` row-major and read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

fn view(rows: usize, cols: usize, data: &[f64], layout: Layout) -> ArrayView2<'_, f64> {
    let strides = match layout {
        Layout::Normal => (cols, 1),
        Layout::Transposed => (1, rows),
    };
    ArrayView2::from_shape((rows, cols).strides(strides), data).expect("gemm operand view")
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let av = view(m, k, a, la);
    let bv = view(k, n, b, lb);
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm output view");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// Generic axis permutation of a row-major buffer.
pub(crate) fn permute(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if rank == 0 || data.is_empty() {
        return (out_shape, data.to_vec());
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride in the input buffer for each output axis.
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            let mut off = base;
            for _ in 0..inner_len {
                out.push(data[off]);
                off += inner_stride;
            }
        }
        // Advance the multi-index over all axes but the last.
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_layouts_agree() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expect = [4.0, 5.0, 10.0, 11.0];
        for (aa, la) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, lb) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = [0.0; 4];
                gemm(2, 3, 2, aa, la, bb, lb, 0.0, &mut c);
                assert_eq!(c, expect);
            }
        }
    }

    #[test]
    fn permute_3d_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (s1, d1) = permute(&shape, &data, &[2, 0, 1]);
        assert_eq!(s1, vec![4, 2, 3]);
        // element [i,j,k] moves to [k,i,j]
        assert_eq!(d1[3 * 6 + 3 + 2], data[12 + 2 * 4 + 3]);
        let (s2, d2) = permute(&s1, &d1, &[1, 2, 0]);
        assert_eq!(s2, shape.to_vec());
        assert_eq!(d2, data);
    }
}
