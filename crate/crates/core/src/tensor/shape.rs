pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// True when `rhs` equals a trailing slice of `lhs`.
pub(crate) fn is_suffix(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Rearranges `data` (of `shape`) so output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data<T: Copy + Default>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = vec![T::default(); total];
    if total == 0 {
        return out;
    }
    if rank == 0 {
        out[0] = data[0];
        return out;
    }
    // Odometer over the output index, innermost axis copied in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut src_base = 0usize;
    let mut o = 0usize;
    loop {
        let mut s = src_base;
        for _ in 0..inner {
            out[o] = data[s];
            o += 1;
            s += inner_stride;
        }
        // increment odometer over axes 0..rank-1
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            src_base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src_base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
