//! Connected-component labeling on 3-D boolean grids.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Faces, edges and corners.
    TwentySix,
}

/// Components of `mask` (row-major `[h, w, d]`). Each component lists its
/// linear indices in ascending order; components are ordered by their
/// smallest index.
pub fn components(mask: &[bool], shape: [usize; 3], conn: Connectivity) -> Vec<Vec<usize>> {
    let [h, w, d] = shape;
    assert_eq!(mask.len(), h * w * d, "mask length does not match shape");
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(v) = stack.pop() {
            comp.push(v);
            let (i, j, k) = (
                (v / (w * d)) as isize,
                ((v / d) % w) as isize,
                (v % d) as isize,
            );
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    for dk in -1isize..=1 {
                        let manhattan = di.abs() + dj.abs() + dk.abs();
                        if manhattan == 0 || (conn == Connectivity::Six && manhattan > 1) {
                            continue;
                        }
                        let (a, b, c) = (i + di, j + dj, k + dk);
                        if a < 0
                            || b < 0
                            || c < 0
                            || a >= h as isize
                            || b >= w as isize
                            || c >= d as isize
                        {
                            continue;
                        }
                        let n = ((a as usize) * w + b as usize) * d + c as usize;
                        if mask[n] && !seen[n] {
                            seen[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Size of the intersection of two ascending index lists.
pub fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let inter = intersection_size(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
