"""Independent reference implementations: plain loops, no torch ops."""
import math

import numpy as np


def conv2d_loops(x, w, b, pad=1):
    """x (Cin, H, W), w (Cout, Cin, k, k) -> (Cout, H', W'), stride 1."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i + di, j + dj]
                out[o, i, j] = acc
    return out


def conv3d_loops(x, w, b, pad=1):
    """x (Cin, F, H, W), w (Cout, Cin, k, k, k) -> (Cout, F', H', W'), stride 1."""
    cin, f, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.zeros((cin, f + 2 * pad, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + f, pad:pad + h, pad:pad + wd] = x
    of, oh, ow = f + 2 * pad - k + 1, h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((cout, of, oh, ow))
    for o in range(cout):
        for t in range(of):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(cin):
                        for dt in range(k):
                            for di in range(k):
                                for dj in range(k):
                                    acc += w[o, c, dt, di, dj] * xp[c, t + dt, i + di, j + dj]
                    out[o, t, i, j] = acc
    return out


def maxpool2_loops(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(x[ch, 2 * i, 2 * j], x[ch, 2 * i + 1, 2 * j],
                                    x[ch, 2 * i, 2 * j + 1], x[ch, 2 * i + 1, 2 * j + 1])
    return out


def affine_loops(x, w, b):
    """y[o] = b[o] + sum_i w[o, i] x[i] for a 1-D x."""
    return np.array([b[o] + sum(w[o, i] * x[i] for i in range(len(x))) for o in range(len(b))])


def triplet_brute_force(sigs, labels, margin):
    """sigs (N, parts, E): enumerate every (a, p, n) per part."""
    n, parts, _ = sigs.shape
    per_part = []
    for q in range(parts):
        total, count = 0.0, 0
        for a in range(n):
            for p in range(n):
                if p == a or labels[p] != labels[a]:
                    continue
                for m in range(n):
                    if labels[m] == labels[a]:
                        continue
                    d_ap = math.sqrt(sum((sigs[a, q, e] - sigs[p, q, e]) ** 2 for e in range(sigs.shape[2])))
                    d_an = math.sqrt(sum((sigs[a, q, e] - sigs[m, q, e]) ** 2 for e in range(sigs.shape[2])))
                    term = max(0.0, d_ap - d_an + margin)
                    if term > 0:
                        total += term
                        count += 1
        per_part.append(total / count if count else 0.0)
    return sum(per_part) / parts


def cross_entropy_logsumexp(logits, labels):
    losses = []
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        losses.append(lse - row[y])
    return sum(losses) / len(losses)


def rank_hits_sort_scan(probes, gallery, gallery_subjects, probe_subjects, k):
    """Sort (distance, index) pairs and scan the first k."""
    hits = []
    for p, ps in zip(probes, probe_subjects):
        pairs = []
        for idx, g in enumerate(gallery):
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(p.ravel(), g.ravel())))
            pairs.append((d, idx))
        pairs.sort()
        hits.append(any(gallery_subjects[idx] == ps for _, idx in pairs[:k]))
    return hits


def resize_nearest_loops(mask, out_h, out_w):
    """Align-corners nearest neighbour with round-half-up, pixel by pixel."""
    in_h, in_w = mask.shape
    out = np.zeros((out_h, out_w), dtype=mask.dtype)
    for i in range(out_h):
        src_i = 0 if out_h == 1 else math.floor(i * (in_h - 1) / (out_h - 1) + 0.5)
        for j in range(out_w):
            src_j = 0 if out_w == 1 else math.floor(j * (in_w - 1) / (out_w - 1) + 0.5)
            out[i, j] = mask[src_i, src_j]
    return out


def finite_difference_check(fn, params, eps=1e-5, max_elements=None, seed=0):
    """Max relative error of autograd vs central differences.

    ``fn`` returns a scalar float64 torch tensor; ``params`` are float64 leaf
    tensors.  Every element is checked unless ``max_elements`` caps it, in
    which case a seeded random subset per tensor is used.  The error of a
    tensor is max|analytic - numeric| over the largest gradient magnitude.
    """
    import torch
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.numel())
        if max_elements is not None and len(idx) > max_elements:
            idx = np.sort(np.random.default_rng(seed).choice(len(idx), max_elements, replace=False))
        analytic = analytic[idx]
        numeric = torch.zeros_like(analytic)
        for n, i in enumerate(idx.tolist()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                up = fn().item()
            flat[i] = orig - eps
            with torch.no_grad():
                down = fn().item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * eps)
        scale = torch.maximum(analytic.abs().max(), numeric.abs().max()).clamp_min(1e-12)
        worst = max(worst, ((analytic - numeric).abs().max() / scale).item())
    return worst


def normalize_loops(mask, size=64):
    """Bounding box, scale longest side to ``size``, paste centered; repeat until stable."""
    def once(m):
        rows = [i for i in range(m.shape[0]) if m[i].any()]
        cols = [j for j in range(m.shape[1]) if m[:, j].any()]
        crop = m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        h, w = crop.shape
        side = max(h, w)
        out_h = max(1, math.floor(h * size / side + 0.5))
        out_w = max(1, math.floor(w * size / side + 0.5))
        scaled = resize_nearest_loops(crop, out_h, out_w)
        canvas = np.zeros((size, size), dtype=np.uint8)
        top, left = (size - out_h) // 2, (size - out_w) // 2
        for i in range(out_h):
            for j in range(out_w):
                canvas[top + i, left + j] = 1 if scaled[i, j] >= 0.5 else 0
        return canvas

    out = once((np.asarray(mask) >= 0.5).astype(np.uint8))
    while True:
        nxt = once(out)
        if (nxt == out).all():
            return out
        out = nxt
