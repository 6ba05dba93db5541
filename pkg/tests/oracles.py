"""Independent reference computations used by the tests.

These are deliberately naive (pure-Python loops, direct transcriptions of
the formulas) and share no code with the package paths they check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def smoothstep_ref(a, b, x):
    t = min(1.0, max(0.0, (x - a) / (b - a)))
    return 3 * t**2 - 2 * t**3


def crop_resize_ref(mask, r):
    rows = [i for i in range(len(mask)) if any(mask[i])]
    cols = [j for j in range(len(mask[0])) if any(mask[i][j] for i in range(len(mask)))]
    top, left = rows[0], cols[0]
    h, w = rows[-1] - top + 1, cols[-1] - left + 1
    out = [[False] * r for _ in range(r)]
    for i in range(r):
        si = int(math.floor((i + 0.5) * h / r))
        for j in range(r):
            sj = int(math.floor((j + 0.5) * w / r))
            out[i][j] = bool(mask[top + si][left + sj])
    return out


def iou_ref(m1, m2, r):
    a, b = crop_resize_ref(m1, r), crop_resize_ref(m2, r)
    inter = sum(a[i][j] and b[i][j] for i in range(r) for j in range(r))
    union = sum(a[i][j] or b[i][j] for i in range(r) for j in range(r))
    return inter / union


def cos_ref(u, v):
    dot = sum(x * y for x, y in zip(u, v))
    return dot / math.sqrt(sum(x * x for x in u) * sum(y * y for y in v))


def csc_star_ref(obs, alpha1=0.88, alpha2=0.96, beta1=0.75, beta2=0.90, r=64):
    """``obs``: list of (subject, shot, embedding, masks). Direct transcription of the penalized mean."""
    terms = []
    plain = []
    norm = {}  # (subject, shot) -> normalized silhouettes

    def silhouettes(o):
        key = (o[0], o[1])
        if key not in norm:
            norm[key] = [crop_resize_ref(m, r) for m in o[3]]
        return norm[key]

    def iou_norm(a, b):
        inter = sum(a[i][j] and b[i][j] for i in range(r) for j in range(r))
        union = sum(a[i][j] or b[i][j] for i in range(r) for j in range(r))
        return inter / union

    subjects = sorted({o[0] for o in obs})
    for s in subjects:
        mine = sorted((o for o in obs if o[0] == s), key=lambda o: o[1])
        for oi, oj in itertools.combinations(mine, 2):
            c = cos_ref(oi[2], oj[2])
            iou = sum(iou_norm(a, b) for a, b in zip(silhouettes(oi), silhouettes(oj))) / len(oi[3])
            identity_high = smoothstep_ref(alpha1, alpha2, c)
            silhouette_same = smoothstep_ref(beta1, beta2, iou)
            duplicate_risk = identity_high * silhouette_same
            terms.append(c * (1 - duplicate_risk))
            plain.append(c)
    return sum(terms) / len(terms), sum(plain) / len(plain)


def ranks_ref(xs):
    out = []
    for x in xs:
        less = sum(1 for y in xs if y < x)
        equal = sum(1 for y in xs if y == x)
        out.append(less + (equal + 1) / 2)
    return out


def pearson_ref(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


def spearman_ref(xs, ys):
    return pearson_ref(ranks_ref(xs), ranks_ref(ys))


def bga_ref(visual_embs, text_embs):
    vis, txt = [], []
    n = len(visual_embs)
    for i in range(n):
        for j in range(i + 1, n):
            vis.append(cos_ref(visual_embs[i], visual_embs[j]))
            txt.append(cos_ref(text_embs[i], text_embs[j]))
    return spearman_ref(vis, txt)


def attention_ref(memory, target, wq, wk, wv, wo):
    """Single-head attention with residual, one target row at a time."""
    d = len(wq)
    context = [list(r) for r in memory] + [list(r) for r in target]

    def matvec(row, w):
        return [sum(row[k] * w[k][j] for k in range(d)) for j in range(d)]

    keys = [matvec(c, wk) for c in context]
    vals = [matvec(c, wv) for c in context]
    out = []
    for t in target:
        q = matvec(t, wq)
        scores = [sum(qi * ki for qi, ki in zip(q, k)) / math.sqrt(d) for k in keys]
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        z = sum(e)
        mix = [sum(e[n] / z * vals[n][j] for n in range(len(context))) for j in range(d)]
        proj = matvec(mix, wo)
        out.append([t[j] + proj[j] for j in range(d)])
    return np.array(out)


def downsample_ref(mask, ph, pw, stride, threshold):
    fh, fw = ph * stride, pw * stride
    gh, gw = len(mask) // fh, len(mask[0]) // fw
    out = np.zeros((gh, gw), dtype=bool)
    for gy in range(gh):
        for gx in range(gw):
            n = sum(bool(mask[y][x]) for y in range(gy * fh, (gy + 1) * fh) for x in range(gx * fw, (gx + 1) * fw))
            out[gy, gx] = n / (fh * fw) > threshold
    return out


def check_greedy_budget(before, after, budget):
    """Characterize a budget pass without re-running it.

    ``before``: list of (entry_index, keep_score, cost) in stored order, the
    first one protected. ``after``: kept entry indices. Returns a list of
    discrepancy strings (empty when consistent).
    """
    problems = []
    if not before:
        return [] if not after else ["kept entries from an empty list"]
    kept = set(after)
    first = before[0]
    if first[0] not in kept:
        problems.append("first entry evicted")
    ranked = sorted(before[1:], key=lambda e: (-e[1], e[0]))
    for pos, (idx, _, cost) in enumerate(ranked):
        used = first[2] + sum(c for i, _, c in ranked[:pos] if i in kept)
        if idx in kept and used + cost > budget:
            problems.append(f"entry {idx} kept although it overflows ({used}+{cost}>{budget})")
        if idx not in kept and used + cost <= budget:
            problems.append(f"entry {idx} evicted although it fits ({used}+{cost}<={budget})")
    total = sum(c for i, _, c in before if i in kept)
    if total > max(budget, first[2]):
        problems.append(f"kept cost {total} over budget {budget}")
    return problems


def dyadic_band_powers(field, tile=64):
    """Mean periodogram power of a 2-D field over dyadic radial frequency bands.

    The field is split into ``tile x tile`` blocks whose mean-removed
    periodograms (``|F|^2 / n``, so white noise of variance s^2 gives s^2 per
    frequency) are averaged. Band k collects frequencies with radius in
    [2^k, 2^(k+1)) integer units; DC is excluded.
    """
    h, w = field.shape
    acc = np.zeros((tile, tile))
    n = 0
    for y in range(0, h - tile + 1, tile):
        for x in range(0, w - tile + 1, tile):
            block = field[y : y + tile, x : x + tile]
            acc += np.abs(np.fft.fft2(block - block.mean())) ** 2 / block.size
            n += 1
    power = acc / n
    f = np.fft.fftfreq(tile) * tile
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    bands = []
    k = 0
    while 2 ** (k + 1) <= tile // 2:
        sel = (radius >= 2**k) & (radius < 2 ** (k + 1))
        bands.append(float(power[sel].mean()))
        k += 1
    return bands
