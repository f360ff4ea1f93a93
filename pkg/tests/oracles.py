"""Independent brute-force oracles used by the test suite.

These deliberately avoid the library's vectorized code paths: scalar loops,
direct (non-separable) convolution, and explicit confusion-matrix counting.
"""

import math

import numpy as np


def trilinear_oracle(vol: np.ndarray, target_side: int) -> np.ndarray:
    """Scalar per-voxel trilinear evaluation, align-corners-false."""
    d, h, w = vol.shape
    out = np.zeros((target_side,) * 3)
    for oz in range(target_side):
        for oy in range(target_side):
            for ox in range(target_side):
                acc = 0.0
                coords = []
                for o, n in ((oz, d), (oy, h), (ox, w)):
                    s = (o + 0.5) * n / target_side - 0.5
                    s = min(max(s, 0.0), n - 1)
                    i0 = int(math.floor(s))
                    i1 = min(i0 + 1, n - 1)
                    coords.append((i0, i1, s - i0))
                for bz in range(2):
                    for by in range(2):
                        for bx in range(2):
                            wgt = 1.0
                            idx = []
                            for (i0, i1, f), b in zip(coords, (bz, by, bx)):
                                idx.append(i1 if b else i0)
                                wgt *= f if b else (1.0 - f)
                            acc += wgt * vol[idx[0], idx[1], idx[2]]
                out[oz, oy, ox] = acc
    return out


def bilinear_oracle(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Scalar per-pixel bilinear evaluation, align-corners-false."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        for ox in range(out_w):
            acc = 0.0
            coords = []
            for o, n, m in ((oy, h, out_h), (ox, w, out_w)):
                s = (o + 0.5) * n / m - 0.5
                s = min(max(s, 0.0), n - 1)
                i0 = int(math.floor(s))
                coords.append((i0, min(i0 + 1, n - 1), s - i0))
            for by in range(2):
                for bx in range(2):
                    wgt = 1.0
                    idx = []
                    for (i0, i1, f), b in zip(coords, (by, bx)):
                        idx.append(i1 if b else i0)
                        wgt *= f if b else (1.0 - f)
                    acc += wgt * img[idx[0], idx[1]]
            out[oy, ox] = acc
    return out


def gaussian_kernel_3d(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    ax = np.arange(-radius, radius + 1)
    g1 = np.exp(-(ax**2) / (2.0 * sigma**2))
    g1 /= g1.sum()
    return g1[:, None, None] * g1[None, :, None] * g1[None, None, :]


def direct_gaussian_3d(vol: np.ndarray, sigma: float) -> np.ndarray:
    """Direct (non-separable) 3D convolution with symmetric-reflect padding."""
    kernel = gaussian_kernel_3d(sigma)
    radius = kernel.shape[0] // 2
    padded = np.pad(vol, radius, mode="symmetric")
    out = np.zeros_like(vol, dtype=np.float64)
    d, h, w = vol.shape
    for z in range(d):
        for y in range(h):
            for x in range(w):
                block = padded[z:z + 2 * radius + 1,
                               y:y + 2 * radius + 1,
                               x:x + 2 * radius + 1]
                out[z, y, x] = float(np.sum(block * kernel))
    return out


def macro_f1_oracle(preds, labels, n_classes: int) -> float:
    """Explicit per-class tp/fp/fn counting."""
    f1s = []
    for c in range(n_classes):
        tp = fp = fn = 0
        for p, t in zip(preds, labels):
            if p == c and t == c:
                tp += 1
            elif p == c and t != c:
                fp += 1
            elif p != c and t == c:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / n_classes


def grouped_macro_f1_oracle(preds, labels, groups, n_classes: int):
    per_group = {}
    for g in sorted(set(groups)):
        ps = [p for p, gg in zip(preds, groups) if gg == g]
        ts = [t for t, gg in zip(labels, groups) if gg == g]
        per_group[g] = macro_f1_oracle(ps, ts, n_classes)
    return per_group, sum(per_group.values()) / len(per_group)


def supcon_oracle(embeddings: np.ndarray, labels, tau: float) -> float:
    """Full pairwise enumeration of the supervised contrastive loss."""
    z = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    b = len(labels)
    anchor_terms = []
    for i in range(b):
        positives = [p for p in range(b) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        denom = sum(math.exp(float(z[i] @ z[a]) / tau) for a in range(b) if a != i)
        term = 0.0
        for p in positives:
            term += math.log(math.exp(float(z[i] @ z[p]) / tau) / denom)
        anchor_terms.append(-term / len(positives))
    return sum(anchor_terms) / len(anchor_terms) if anchor_terms else 0.0


def softmax_ce_oracle(logits, labels) -> float:
    """Scalar softmax cross-entropy, no vectorization."""
    total = 0.0
    for row, lab in zip(logits, labels):
        denom = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[lab]) / denom)
    return total / len(labels)
