use super::PixelMask;

/// 4-connected component labels: 0 for unset pixels, components numbered from 1 in
/// order of their first pixel in row-major order. Returns `(labels, count)`.
pub fn label_components(mask: &PixelMask) -> (Vec<u32>, usize) {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    let mut labels = vec![0u32; w * h];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if bits[j] && labels[j] == 0 {
                    labels[j] = count;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    (labels, count as usize)
}

/// Splits the set pixels into 4-connected components, each as a full-size mask,
/// ordered by smallest row-major index.
pub fn connected_components(mask: &PixelMask) -> Vec<PixelMask> {
    let (labels, count) = label_components(mask);
    let (w, h) = (mask.width(), mask.height());
    let mut out = vec![PixelMask::new(w, h); count];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            out[l as usize - 1].set(i % w, i / w, true);
        }
    }
    out
}
