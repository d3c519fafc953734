"""Inference-time tracking and segmentation metrics.

Hungarian assignment is solved exactly (potentials method) and then
refined to the lexicographically smallest optimal assignment so results
are reproducible under ties. Metrics follow the foreground-only
convention: background (label 0 in ground truth) is never a matchable
object, while predictions label every pixel with some track.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------

def _solve_potentials(cost: np.ndarray) -> float:
    """Exact minimum assignment total for an R x C matrix with R <= C."""
    r, c = cost.shape
    if r == 0 or c == 0:
        return 0.0
    u = np.zeros(r + 1)
    v = np.zeros(c + 1)
    match = np.zeros(c + 1, dtype=np.int64)  # column -> row (1-based), 0 free
    for i in range(1, r + 1):
        match[0] = i
        j0 = 0
        minv = np.full(c + 1, np.inf)
        used = np.zeros(c + 1, dtype=bool)
        way = np.zeros(c + 1, dtype=np.int64)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, c + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(c + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    total = 0.0
    for j in range(1, c + 1):
        if match[j] != 0:
            total += cost[match[j] - 1, j - 1]
    return float(total)


def _optimal_total(cost: np.ndarray) -> float:
    if cost.size == 0 or 0 in cost.shape:
        return 0.0
    if cost.shape[0] <= cost.shape[1]:
        return _solve_potentials(cost)
    return _solve_potentials(cost.T)


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of size min(R, C) as (row, col) pairs.

    Among optimal assignments, returns the one whose (row, col) sequence
    is lexicographically smallest.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    best = _optimal_total(cost)
    tol = 1e-9 * max(1.0, abs(best))
    rows = list(range(cost.shape[0]))
    cols = list(range(cost.shape[1]))
    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    target = min(cost.shape)
    while rows and cols and len(pairs) < target:
        r = rows[0]
        rest = rows[1:]
        chosen = -1
        for c in cols:
            sub = cost[np.ix_(rest, [cc for cc in cols if cc != c])]
            if abs(fixed + cost[r, c] + _optimal_total(sub) - best) <= tol:
                chosen = c
                break
        if chosen < 0:
            # only possible with more rows than columns: this row sits out
            rows.pop(0)
            continue
        pairs.append((r, chosen))
        fixed += cost[r, chosen]
        rows.pop(0)
        cols.remove(chosen)
    return pairs


def assignment_total(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[r, c] for r, c in pairs))


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------

@dataclass
class TrackedSegmentation:
    frames: np.ndarray        # F x H x W track labels
    track_maps: list          # per frame: array mapping slot index -> track id
    n_tracks: int


def _cosine_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    na = np.where(na == 0, 1.0, na)
    nb = np.where(nb == 0, 1.0, nb)
    return 1.0 - (a / na[:, None]) @ (b / nb[:, None]).T


def link_tracks(slot_vectors: list, label_frames: list) -> TrackedSegmentation:
    """Chain per-frame slots into tracks via assignment on slot similarity.

    Matched slots inherit the earlier frame's track id; slots left
    unmatched (when counts differ) open fresh tracks.
    """
    if len(slot_vectors) != len(label_frames):
        raise ValueError("one slot-vector matrix per label frame required")
    track_maps = []
    first = np.arange(slot_vectors[0].shape[0], dtype=np.int64)
    track_maps.append(first)
    next_id = int(first.size)
    for t in range(1, len(slot_vectors)):
        prev_v, cur_v = slot_vectors[t - 1], slot_vectors[t]
        pairs = hungarian(_cosine_cost(prev_v, cur_v))
        cur_map = np.full(cur_v.shape[0], -1, dtype=np.int64)
        for i, j in pairs:
            cur_map[j] = track_maps[t - 1][i]
        for j in range(cur_v.shape[0]):
            if cur_map[j] < 0:
                cur_map[j] = next_id
                next_id += 1
        track_maps.append(cur_map)
    out = np.stack([
        track_maps[t][label_frames[t].astype(np.int64)]
        for t in range(len(label_frames))
    ])
    return TrackedSegmentation(frames=out, track_maps=track_maps, n_tracks=next_id)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def bilinear_resize(maps: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize (K, rows, cols) maps to (K, h, w) with half-pixel centers."""
    _, rows, cols = maps.shape
    ys = np.clip((np.arange(h) + 0.5) * rows / h - 0.5, 0, rows - 1)
    xs = np.clip((np.arange(w) + 0.5) * cols / w - 0.5, 0, cols - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    v00 = maps[:, y0[:, None], x0[None, :]]
    v01 = maps[:, y0[:, None], x1[None, :]]
    v10 = maps[:, y1[:, None], x0[None, :]]
    v11 = maps[:, y1[:, None], x1[None, :]]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bot * wy


def rasterize(m: np.ndarray, rows: int, cols: int, h: int, w: int) -> np.ndarray:
    """Patch-level masks to pixel-level hard labels.

    Each slot mask is reshaped to the patch grid, bilinearly upsampled,
    and pixels take the argmax slot (ties go to the lower index).
    """
    k_t, n = m.shape
    if n != rows * cols:
        raise ValueError(f"mask width {n} != grid {rows}x{cols}")
    up = bilinear_resize(m.reshape(k_t, rows, cols), h, w)
    return np.argmax(up, axis=0).astype(np.int64)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _comb2(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """ARI from the contingency table under the permutation model.

    Degenerate cases (zero expected-index denominator): 1.0 when the two
    labelings induce the same partition, 0.0 otherwise.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise ValueError("labelings must have equal length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    n_a = ai.max() + 1
    n_b = bi.max() + 1
    table = np.zeros((n_a, n_b), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(np.asarray(n))
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        same = (np.count_nonzero(table, axis=0) <= 1).all() and \
               (np.count_nonzero(table, axis=1) <= 1).all()
        return 1.0 if same else 0.0
    return float((sum_ij - expected) / (max_index - expected))


def fg_ari(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """ARI restricted to ground-truth foreground pixels of one frame.

    Returns None when fewer than 2 foreground pixels exist.
    """
    fg = gt > 0
    if fg.sum() < 2:
        return None
    return adjusted_rand_index(pred[fg], gt[fg])


def mean_fg_ari(pred_frames: np.ndarray, gt_frames: np.ndarray) -> tuple[float | None, int]:
    """Per-frame foreground ARI averaged over the video.

    Frames without enough foreground are skipped; returns (mean, skipped),
    with mean None when no frame qualified.
    """
    scores = []
    skipped = 0
    for p, g in zip(pred_frames, gt_frames):
        s = fg_ari(p, g)
        if s is None:
            skipped += 1
        else:
            scores.append(s)
    if not scores:
        return None, skipped
    return float(np.mean(scores)), skipped


def video_miou(pred_frames: np.ndarray, gt_frames: np.ndarray,
               per_frame: bool = False, exclude_pred=()) -> float | None:
    """Mean IoU of ground-truth objects after optimal track matching.

    IoU is computed over the full video volume per (gt object, pred
    track); gt objects left unmatched contribute 0. Predictions normally
    label every pixel with some track; ``exclude_pred`` names ids that
    are not tracks (thresholded background). ``per_frame`` matches each
    frame independently instead (for comparison only).
    """
    if per_frame:
        vals = [video_miou(p[None], g[None], exclude_pred=exclude_pred)
                for p, g in zip(pred_frames, gt_frames)]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None
    gt_ids = [int(i) for i in np.unique(gt_frames) if i > 0]
    if not gt_ids:
        return None
    pred_ids = [int(i) for i in np.unique(pred_frames) if i not in exclude_pred]
    if not pred_ids:
        return 0.0
    iou = np.zeros((len(gt_ids), len(pred_ids)))
    for gi, g in enumerate(gt_ids):
        gm = gt_frames == g
        for pi, p in enumerate(pred_ids):
            pm = pred_frames == p
            inter = np.logical_and(gm, pm).sum()
            union = np.logical_or(gm, pm).sum()
            iou[gi, pi] = inter / union if union else 0.0
    pairs = hungarian(1.0 - iou)
    matched = {r: iou[r, c] for r, c in pairs}
    return float(np.mean([matched.get(i, 0.0) for i in range(len(gt_ids))]))


def k_t_histogram(pred_frames: np.ndarray) -> dict[int, int]:
    """Histogram of per-frame distinct track counts."""
    hist: dict[int, int] = {}
    for frame in pred_frames:
        k = int(np.unique(frame).size)
        hist[k] = hist.get(k, 0) + 1
    return hist
