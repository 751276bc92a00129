//! Index maps for channel-last `(batch, height, width, channels)` tensors.
//!
//! Each function returns the source flat index for every element of the
//! output, ready for [`Tape::gather`](crate::autograd::Tape::gather).

use std::sync::Arc;

/// `(b, h, w, c)` -> `(b, h/s, w/s, s*s*c)`; the new channel axis is ordered `(dy, dx, c)`.
pub fn space_to_depth(b: usize, h: usize, w: usize, c: usize, s: usize) -> Arc<Vec<usize>> {
    let (ho, wo) = (h / s, w / s);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                for dy in 0..s {
                    for dx in 0..s {
                        let base = ((bi * h + i * s + dy) * w + j * s + dx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// `(b, h, w, 4c)` with channels `(dy, dx, c)` -> `(b, 2h, 2w, c)`.
pub fn depth_to_space2(b: usize, h: usize, w: usize, c: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(b * h * w * 4 * c);
    for bi in 0..b {
        for y in 0..2 * h {
            for x in 0..2 * w {
                let (i, dy, j, dx) = (y / 2, y % 2, x / 2, x % 2);
                let base = ((bi * h + i) * w + j) * 4 * c + (dy * 2 + dx) * c;
                idx.extend(base..base + c);
            }
        }
    }
    Arc::new(idx)
}

/// Nearest-neighbour upsampling by integer factor `f`.
pub fn upsample_nearest(b: usize, h: usize, w: usize, c: usize, f: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(b * h * w * c * f * f);
    for bi in 0..b {
        for y in 0..h * f {
            for x in 0..w * f {
                let base = ((bi * h + y / f) * w + x / f) * c;
                idx.extend(base..base + c);
            }
        }
    }
    Arc::new(idx)
}

/// Tiles a `(2, 2, c)` kernel over a `(b, 2h, 2w, c)` output grid.
pub fn tile_kernel2(b: usize, h: usize, w: usize, c: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(b * h * w * 4 * c);
    for _ in 0..b {
        for y in 0..2 * h {
            for x in 0..2 * w {
                let base = ((y % 2) * 2 + x % 2) * c;
                idx.extend(base..base + c);
            }
        }
    }
    Arc::new(idx)
}

/// `(n, l, heads*d)` -> `(n*heads, l, d)`.
pub fn split_heads(n: usize, l: usize, heads: usize, d: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(n * l * heads * d);
    for ni in 0..n {
        for hi in 0..heads {
            for li in 0..l {
                let base = (ni * l + li) * heads * d + hi * d;
                idx.extend(base..base + d);
            }
        }
    }
    Arc::new(idx)
}

/// Inverse of [`split_heads`]: `(n*heads, l, d)` -> `(n, l, heads*d)`.
pub fn merge_heads(n: usize, l: usize, heads: usize, d: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(n * l * heads * d);
    for ni in 0..n {
        for li in 0..l {
            for hi in 0..heads {
                let base = ((ni * heads + hi) * l + li) * d;
                idx.extend(base..base + d);
            }
        }
    }
    Arc::new(idx)
}

/// Selects a column slice `[start, start + len)` from the trailing axis of width `width`.
pub fn slice_last(rows: usize, width: usize, start: usize, len: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(rows * len);
    for r in 0..rows {
        let base = r * width + start;
        idx.extend(base..base + len);
    }
    Arc::new(idx)
}

/// Gathers whole rows of width `width`.
pub fn select_rows(rows: &[usize], width: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        idx.extend(r * width..(r + 1) * width);
    }
    Arc::new(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_merge_roundtrip() {
        let (n, l, h, d) = (2, 3, 2, 4);
        let split = split_heads(n, l, h, d);
        let merge = merge_heads(n, l, h, d);
        let composed: Vec<usize> = merge.iter().map(|&i| split[i]).collect();
        assert_eq!(composed, (0..n * l * h * d).collect::<Vec<_>>());
    }

    #[test]
    fn s2d_then_d2s_is_identity_for_factor_two() {
        let (b, h, w, c) = (2, 4, 6, 3);
        let s2d = space_to_depth(b, h, w, c, 2);
        let d2s = depth_to_space2(b, h / 2, w / 2, c);
        let composed: Vec<usize> = d2s.iter().map(|&i| s2d[i]).collect();
        assert_eq!(composed, (0..b * h * w * c).collect::<Vec<_>>());
    }

    #[test]
    fn nearest_upsample_replicates() {
        let idx = upsample_nearest(1, 1, 2, 1, 2);
        assert_eq!(*idx, vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }
}
