"""Per-fragment loops compiled with numba.

All kernels iterate points in index order and pixels in row-major order so
results are bit-reproducible; they release the GIL so views can be processed
on worker threads.
"""
import math

import numba
import numpy as np

CASE_INSERT = 0
CASE_OCCLUDED = 1
CASE_VISIBLE_AWAY = 2
CASE_VISIBLE_TOWARD = 3


@numba.njit(cache=True, nogil=True)
def rasterize_kernel(centers, conics, prefactor, depth, bbox, valid, cutoff_c,
                     height, width, cache_k):
    n = centers.shape[0]
    idx = np.full((height, width, cache_k), -1, dtype=np.int64)
    dep = np.full((height, width, cache_k), np.inf)
    rho = np.zeros((height, width, cache_k))
    count = np.zeros((height, width), dtype=np.int64)
    produced = np.zeros(n, dtype=np.bool_)
    for k in range(n):
        if not valid[k]:
            continue
        u = centers[k, 0]
        v = centers[k, 1]
        a = conics[k, 0, 0]
        b = conics[k, 0, 1]
        c = conics[k, 1, 1]
        dk = depth[k]
        for row in range(bbox[k, 2], bbox[k, 3] + 1):
            dy = row - v
            for col in range(bbox[k, 0], bbox[k, 1] + 1):
                dx = col - u
                q = 0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                if q > cutoff_c:
                    continue
                produced[k] = True
                m = count[row, col]
                # stable insertion: equal depth keeps the lower (earlier) index first
                pos = m
                while pos > 0 and dep[row, col, pos - 1] > dk:
                    pos -= 1
                if pos >= cache_k:
                    continue
                last = m if m < cache_k else cache_k - 1
                for j in range(last, pos, -1):
                    idx[row, col, j] = idx[row, col, j - 1]
                    dep[row, col, j] = dep[row, col, j - 1]
                    rho[row, col, j] = rho[row, col, j - 1]
                idx[row, col, pos] = k
                dep[row, col, pos] = dk
                rho[row, col, pos] = prefactor[k] * math.exp(-q)
                if m < cache_k:
                    count[row, col] = m + 1
    return idx, dep, rho, count, produced


@numba.njit(cache=True, nogil=True)
def _blend(ws, ids, attrs, background, out):
    """Normalized attribute sum of entries ``ids`` with weights ``ws``; returns False if empty."""
    total = 0.0
    for j in range(ids.shape[0]):
        if ids[j] >= 0:
            total += ws[j]
    nc = out.shape[0]
    if total <= 0.0:
        for ch in range(nc):
            out[ch] = background[ch]
        return False
    for ch in range(nc):
        out[ch] = 0.0
    for j in range(ids.shape[0]):
        if ids[j] >= 0:
            om = ws[j] / total
            for ch in range(nc):
                out[ch] += om * attrs[ids[j], ch]
    return True


@numba.njit(cache=True, nogil=True)
def _loss_change(exact, pixel_grad, image, reference, new_val, row, col, inv_hw, smape_eps):
    """Loss change for replacing the pixel value by ``new_val``.

    ``exact`` evaluates the SMAPE difference directly; otherwise the
    first-order estimate ``dL/dI . dI`` is used.  Also returns ``|dI|^2``.
    """
    s = 0.0
    dnorm = 0.0
    for ch in range(new_val.shape[0]):
        old = image[row, col, ch]
        di = new_val[ch] - old
        dnorm += di * di
        if exact:
            ref = reference[row, col, ch]
            after = abs(new_val[ch] - ref) / (abs(new_val[ch]) + abs(ref) + smape_eps)
            before = abs(old - ref) / (abs(old) + abs(ref) + smape_eps)
            s += (after - before) * inv_hw
        else:
            s += pixel_grad[row, col, ch] * di
    return s, dnorm


@numba.njit(cache=True, nogil=True)
def visibility_kernel(centers, conics, prefactor, depth, bbox, valid, attrs, background,
                      cache_idx, cache_depth, cache_rho, cache_vis, count, image, pixel_grad,
                      camera_rotation, focal_px, merge_t, cutoff_c, epsilon, dilation,
                      record, rec_int, rec_float, exact, reference, smape_eps):
    """Linearized visibility gradient for every (point, pixel) candidate pair.

    Returns the per-point position gradient (world frame) and the number of
    recorded contributions.  When ``record`` is set, each emitted term is
    written to ``rec_int`` = (point, row, col, case) and ``rec_float`` =
    (loss change, |dI|, dp xyz, term xyz).
    """
    n = centers.shape[0]
    height = image.shape[0]
    width = image.shape[1]
    nc = image.shape[2]
    inv_hw = 1.0 / (height * width)
    cache_k = cache_idx.shape[2]
    grad_cam = np.zeros((n, 3))
    new_val = np.zeros(nc)
    ws = np.zeros(cache_k + 1)
    ids = np.full(cache_k + 1, -1, dtype=np.int64)
    n_rec = 0
    max_rec = rec_int.shape[0]
    for k in range(n):
        if not valid[k]:
            continue
        u = centers[k, 0]
        v = centers[k, 1]
        dk = depth[k]
        scale = dk / focal_px
        a = conics[k, 0, 0]
        b = conics[k, 0, 1]
        c = conics[k, 1, 1]
        r0 = max(bbox[k, 2] - dilation, 0)
        r1 = min(bbox[k, 3] + dilation, height - 1)
        c0 = max(bbox[k, 0] - dilation, 0)
        c1 = min(bbox[k, 1] + dilation, width - 1)
        if bbox[k, 1] < bbox[k, 0] or bbox[k, 3] < bbox[k, 2]:
            # footprint entirely off-screen: dilate around the clipped center
            cu = min(max(int(round(u)), 0), width - 1)
            cv = min(max(int(round(v)), 0), height - 1)
            r0 = max(cv - dilation, 0)
            r1 = min(cv + dilation, height - 1)
            c0 = max(cu - dilation, 0)
            c1 = min(cu + dilation, width - 1)
        for row in range(r0, r1 + 1):
            for col in range(c0, c1 + 1):
                nonzero = False
                for ch in range(nc):
                    if pixel_grad[row, col, ch] != 0.0:
                        nonzero = True
                if not nonzero:
                    continue
                m = count[row, col]
                slot = -1
                visible = False
                for j in range(m):
                    if cache_idx[row, col, j] == k:
                        slot = j
                        visible = cache_vis[row, col, j]
                front = cache_depth[row, col, 0] if m > 0 else np.inf
                dx = col - u
                dy = row - v
                if visible:
                    # remove k; previously occluded cached fragments may merge in
                    new_front = np.inf
                    for j in range(m):
                        if j != slot:
                            new_front = cache_depth[row, col, j]
                            break
                    for j in range(cache_k + 1):
                        ids[j] = -1
                    for j in range(m):
                        if j != slot and cache_depth[row, col, j] - new_front <= merge_t:
                            ids[j] = cache_idx[row, col, j]
                            ws[j] = cache_rho[row, col, j]
                    _blend(ws, ids, attrs, background, new_val)
                    s, dnorm = _loss_change(exact, pixel_grad, image, reference, new_val,
                                            row, col, inv_hw, smape_eps)
                    if s >= 0.0:
                        continue
                    q = 0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                    if q > 1e-12:
                        sc = math.sqrt(cutoff_c / q)
                        away_x = dx * (1.0 - sc)
                        away_y = dy * (1.0 - sc)
                        tow_x = dx * (1.0 + sc)
                        tow_y = dy * (1.0 + sc)
                    else:
                        # pixel at the center: exit along the minor axis
                        tr = 0.5 * (a + c)
                        disc = math.sqrt(max(0.25 * (a - c) * (a - c) + b * b, 0.0))
                        lam = tr + disc
                        if abs(b) > 1e-300:
                            ex = lam - c
                            ey = b
                        elif a >= c:
                            ex = 1.0
                            ey = 0.0
                        else:
                            ex = 0.0
                            ey = 1.0
                        en = math.sqrt(ex * ex + ey * ey)
                        rr = math.sqrt(2.0 * cutoff_c / lam)
                        away_x = -rr * ex / en
                        away_y = -rr * ey / en
                        tow_x = -away_x
                        tow_y = -away_y
                    for term in range(2):
                        if term == 0:
                            px = away_x * scale
                            py = -away_y * scale
                            case = CASE_VISIBLE_AWAY
                        else:
                            px = tow_x * scale
                            py = -tow_y * scale
                            case = CASE_VISIBLE_TOWARD
                        coef = s / (px * px + py * py + epsilon)
                        grad_cam[k, 0] += coef * px
                        grad_cam[k, 1] += coef * py
                        if record and n_rec < max_rec:
                            rec_int[n_rec, 0] = k
                            rec_int[n_rec, 1] = row
                            rec_int[n_rec, 2] = col
                            rec_int[n_rec, 3] = case
                            rec_float[n_rec, 0] = s
                            rec_float[n_rec, 1] = math.sqrt(dnorm)
                            rec_float[n_rec, 2] = px
                            rec_float[n_rec, 3] = py
                            rec_float[n_rec, 4] = 0.0
                            rec_float[n_rec, 5] = coef * px
                            rec_float[n_rec, 6] = coef * py
                            rec_float[n_rec, 7] = 0.0
                            n_rec += 1
                    continue
                occluded = slot >= 0 or (m > 0 and dk - front > merge_t)
                px = dx * scale
                py = -dy * scale
                pz = 0.0
                if occluded:
                    # jump in front of the current front-most layer by the merge threshold
                    pz = dk - (front - merge_t)
                    for ch in range(nc):
                        new_val[ch] = attrs[k, ch]
                    case = CASE_OCCLUDED
                else:
                    # insert k centered on the pixel and re-blend with the merged layer
                    new_front = min(front, dk)
                    for j in range(cache_k + 1):
                        ids[j] = -1
                    placed = False
                    out = 0
                    j = 0
                    while out < cache_k and (j < m or not placed):
                        if not placed and (j >= m or cache_depth[row, col, j] > dk):
                            dd = dk
                            ii = k
                            wt = prefactor[k]
                            placed = True
                        else:
                            dd = cache_depth[row, col, j]
                            ii = cache_idx[row, col, j]
                            wt = cache_rho[row, col, j]
                            j += 1
                        if dd - new_front <= merge_t:
                            ids[out] = ii
                            ws[out] = wt
                        out += 1
                    _blend(ws, ids, attrs, background, new_val)
                    case = CASE_INSERT
                s, dnorm = _loss_change(exact, pixel_grad, image, reference, new_val,
                                        row, col, inv_hw, smape_eps)
                if s >= 0.0:
                    continue
                coef = s / (px * px + py * py + pz * pz + epsilon)
                grad_cam[k, 0] += coef * px
                grad_cam[k, 1] += coef * py
                grad_cam[k, 2] += coef * pz
                if record and n_rec < max_rec:
                    rec_int[n_rec, 0] = k
                    rec_int[n_rec, 1] = row
                    rec_int[n_rec, 2] = col
                    rec_int[n_rec, 3] = case
                    rec_float[n_rec, 0] = s
                    rec_float[n_rec, 1] = math.sqrt(dnorm)
                    rec_float[n_rec, 2] = px
                    rec_float[n_rec, 3] = py
                    rec_float[n_rec, 4] = pz
                    rec_float[n_rec, 5] = coef * px
                    rec_float[n_rec, 6] = coef * py
                    rec_float[n_rec, 7] = coef * pz
                    n_rec += 1
    # camera -> world for the accumulated gradient
    grad = np.zeros((n, 3))
    for k in range(n):
        for i in range(3):
            acc = 0.0
            for j in range(3):
                acc += camera_rotation[j, i] * grad_cam[k, j]
            grad[k, i] = acc
    return grad, n_rec
