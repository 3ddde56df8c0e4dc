"""Slow, independent reference implementations used as test oracles.

Nothing here imports lesionkit internals: components come from a plain
BFS, distances from explicit pairwise differences, percentiles from a
hand-written interpolation.
"""

import itertools
import math
from collections import deque

import numpy as np


def neighbour_offsets(connectivity):
    offs = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        nz = sum(1 for v in d if v != 0)
        if nz == 0:
            continue
        if connectivity == 6 and nz > 1:
            continue
        if connectivity == 18 and nz > 2:
            continue
        offs.append(d)
    return offs


def bfs_components(mask, connectivity=26):
    """List of frozensets of (x, y, z) voxels, one per connected component."""
    mask = np.asarray(mask).astype(bool)
    nx, ny, nz = mask.shape
    seen = np.zeros_like(mask)
    offs = neighbour_offsets(connectivity)
    comps = []
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[x, y, z] or seen[x, y, z]:
                    continue
                comp = []
                queue = deque([(x, y, z)])
                seen[x, y, z] = True
                while queue:
                    v = queue.popleft()
                    comp.append(v)
                    for d in offs:
                        u = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
                        if 0 <= u[0] < nx and 0 <= u[1] < ny and 0 <= u[2] < nz and mask[u] and not seen[u]:
                            seen[u] = True
                            queue.append(u)
                comps.append(frozenset(comp))
    return comps


def naive_surface(mask):
    mask = np.asarray(mask).astype(bool)
    shape = mask.shape
    out = set()
    for v in zip(*np.nonzero(mask)):
        for d in neighbour_offsets(6):
            u = tuple(v[k] + d[k] for k in range(3))
            if any(u[k] < 0 or u[k] >= shape[k] for k in range(3)) or not mask[u]:
                out.add(tuple(int(c) for c in v))
                break
    return out


def pairwise_min_dist(src, dst, spacing):
    """For each point in src, min Euclidean distance (mm) to dst."""
    a = np.asarray(sorted(src), dtype=np.float64) * np.asarray(spacing)
    b = np.asarray(sorted(dst), dtype=np.float64) * np.asarray(spacing)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2)).min(axis=1)


def percentile_linear(values, q):
    xs = sorted(float(v) for v in values)
    rank = q / 100.0 * (len(xs) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (rank - lo)


def naive_median(values):
    xs = sorted(float(v) for v in values)
    n = len(xs)
    return xs[n // 2] if n % 2 else 0.5 * (xs[n // 2 - 1] + xs[n // 2])


def naive_hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    if not np.any(pred) or not np.any(gt):
        return None
    sp, sg = naive_surface(pred), naive_surface(gt)
    return max(
        percentile_linear(pairwise_min_dist(sp, sg, spacing), 95),
        percentile_linear(pairwise_min_dist(sg, sp, spacing), 95),
    )


def naive_hd100(pred, gt, spacing=(1.0, 1.0, 1.0)):
    sp, sg = naive_surface(pred), naive_surface(gt)
    return max(pairwise_min_dist(sp, sg, spacing).max(), pairwise_min_dist(sg, sp, spacing).max())


def naive_report(pred, gt, spacing=(1.0, 1.0, 1.0), tau=50, bins=(10, 50, 200, math.inf), eps=1e-8,
                 near=2.0, connectivity=26):
    """Every CaseReport field, computed from scratch (any-overlap hit rule)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    pv = {tuple(int(c) for c in v) for v in zip(*np.nonzero(pred))}
    gv = {tuple(int(c) for c in v) for v in zip(*np.nonzero(gt))}

    gcomps = bfs_components(gt, connectivity)
    pcomps = bfs_components(pred, connectivity)
    g_hit = [bool(c & pv) for c in gcomps]
    p_hit = [bool(c & gv) for c in pcomps]

    precision = sum(p_hit) / (len(pcomps) + eps)
    recall = sum(g_hit) / (len(gcomps) + eps)
    f1 = 2 * precision * recall / (precision + recall + eps)

    small = [h for c, h in zip(gcomps, g_hit) if len(c) <= tau]
    small_recall = None if not small else sum(small) / (len(small) + eps)

    edges = list(bins)
    labels = []
    for i, e in enumerate(edges):
        if math.isinf(e):
            labels.append(f"gt{int(edges[i - 1])}")
        else:
            labels.append(f"le{int(e)}")
    by_size = {}
    lo = 0
    for label, e in zip(labels, edges):
        members = [h for c, h in zip(gcomps, g_hit) if lo < len(c) <= e]
        by_size[label] = None if not members else sum(members) / len(members)
        lo = e

    fp = pv - gv
    fn = gv - pv
    vox = spacing[0] * spacing[1] * spacing[2]

    if pcomps:
        blob = sum(1 for h in p_hit if not h) / len(pcomps)
    else:
        blob = None
    if fp and gv:
        d = pairwise_min_dist(fp, gv, spacing)
        near_frac = sum(1 for x in d if x <= near) / len(d)
        med = naive_median(d)
    else:
        near_frac, med = None, None

    n_tot = len(pv) + len(gv)
    return {
        "dice": 1.0 if n_tot == 0 else 2.0 * len(pv & gv) / n_tot,
        "hd95_mm": naive_hd95(pred, gt, spacing),
        "lesion_precision": precision,
        "lesion_recall": recall,
        "lesion_f1": f1,
        "small_lesion_recall": small_recall,
        "fn_lesion_count": len(gcomps) - sum(g_hit),
        "miss_rate": 1.0 - recall,
        "fn_volume_fraction": len(fn) / (len(gv) + eps),
        "fp_volume_mm3": len(fp) * vox,
        "fp_blob_fraction": blob,
        "fp_near_fraction": near_frac,
        "fp_median_distance_mm": med,
        "recall_by_size_bin": by_size,
    }


def plain_tversky_loss(p, g, alpha, beta, delta):
    p = np.asarray(p, dtype=np.float64).ravel().tolist()
    g = np.asarray(g, dtype=np.float64).ravel().tolist()
    tp = math.fsum(a * b for a, b in zip(p, g))
    fp = math.fsum(a * (1 - b) for a, b in zip(p, g))
    fn = math.fsum((1 - a) * b for a, b in zip(p, g))
    return 1.0 - (tp + delta) / (tp + alpha * fp + beta * fn + delta)


def plain_soft_dice(p, g, smooth):
    p = np.asarray(p, dtype=np.float64).ravel().tolist()
    g = np.asarray(g, dtype=np.float64).ravel().tolist()
    inter = math.fsum(a * b for a, b in zip(p, g))
    return (2 * inter + smooth) / (math.fsum(p) + math.fsum(g) + smooth)
