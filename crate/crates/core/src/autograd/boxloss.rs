//! Differentiable generalized-IoU loss for `(cx, cy, w, h)` predictions
//! against fixed `(x1, y1, x2, y2)` targets.

use crate::tensor::Element;

pub(crate) struct GiouTerm<T> {
    pub loss: T,
    /// d loss / d (cx, cy, w, h)
    pub grad: [T; 4],
    /// Distance to the nearest point where a min/max switches branch.
    pub kink: T,
}

/// `1 - giou(pred, target)` and its gradient.
pub(crate) fn giou_term<T: Element>(pred: [T; 4], target: [T; 4]) -> GiouTerm<T> {
    let half = T::c(0.5);
    let [cx, cy, w, h] = pred;
    let p = [cx - half * w, cy - half * h, cx + half * w, cy + half * h];
    let t = target;
    let zero = T::zero();

    // Intersection (x) and (y) extents; the `*_p` flags record whether the
    // prediction supplies that edge.
    let (ix1, ix1_p) = if p[0] >= t[0] { (p[0], true) } else { (t[0], false) };
    let (iy1, iy1_p) = if p[1] >= t[1] { (p[1], true) } else { (t[1], false) };
    let (ix2, ix2_p) = if p[2] <= t[2] { (p[2], true) } else { (t[2], false) };
    let (iy2, iy2_p) = if p[3] <= t[3] { (p[3], true) } else { (t[3], false) };
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;

    let area_p = (p[2] - p[0]) * (p[3] - p[1]);
    let area_t = (t[2] - t[0]) * (t[3] - t[1]);
    let union = area_p + area_t - inter;

    let (cx1, cx1_p) = if p[0] <= t[0] { (p[0], true) } else { (t[0], false) };
    let (cy1, cy1_p) = if p[1] <= t[1] { (p[1], true) } else { (t[1], false) };
    let (cx2, cx2_p) = if p[2] >= t[2] { (p[2], true) } else { (t[2], false) };
    let (cy2, cy2_p) = if p[3] >= t[3] { (p[3], true) } else { (t[3], false) };
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    let enclose = cw * ch;

    let iou = inter / union;
    let giou = iou - (enclose - union) / enclose;
    let loss = T::one() - giou;

    // loss = 1 - inter/union - union/enclose + 1  (since giou = iou - 1 + union/enclose)
    let dl_dinter_direct = -T::one() / union;
    let dl_dunion = inter / (union * union) - T::one() / enclose;
    let dl_dencl = union / (enclose * enclose);
    // union = area_p + area_t - inter
    let dl_dinter = dl_dinter_direct - dl_dunion;
    let dl_darea_p = dl_dunion;

    // Gradients w.r.t. p = [x1, y1, x2, y2].
    let mut gp = [zero; 4];
    // area_p = (x2 - x1) * (y2 - y1)
    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    gp[0] = gp[0] - dl_darea_p * ph;
    gp[2] = gp[2] + dl_darea_p * ph;
    gp[1] = gp[1] - dl_darea_p * pw;
    gp[3] = gp[3] + dl_darea_p * pw;
    // inter = relu(ix2 - ix1) * relu(iy2 - iy1)
    if iw_raw > zero && ih_raw > zero {
        let dw = dl_dinter * ih;
        let dh = dl_dinter * iw;
        if ix1_p {
            gp[0] = gp[0] - dw;
        }
        if ix2_p {
            gp[2] = gp[2] + dw;
        }
        if iy1_p {
            gp[1] = gp[1] - dh;
        }
        if iy2_p {
            gp[3] = gp[3] + dh;
        }
    }
    // enclose = (cx2 - cx1) * (cy2 - cy1)
    let dcw = dl_dencl * ch;
    let dch = dl_dencl * cw;
    if cx1_p {
        gp[0] = gp[0] - dcw;
    }
    if cx2_p {
        gp[2] = gp[2] + dcw;
    }
    if cy1_p {
        gp[1] = gp[1] - dch;
    }
    if cy2_p {
        gp[3] = gp[3] + dch;
    }

    // x1 = cx - w/2, x2 = cx + w/2
    let grad = [
        gp[0] + gp[2],
        gp[1] + gp[3],
        half * (gp[2] - gp[0]),
        half * (gp[3] - gp[1]),
    ];

    let mut kink = (p[0] - t[0]).abs();
    for k in [(p[1] - t[1]).abs(), (p[2] - t[2]).abs(), (p[3] - t[3]).abs(), iw_raw.abs(), ih_raw.abs()] {
        kink = kink.min(k);
    }

    GiouTerm { loss, grad, kink }
}
