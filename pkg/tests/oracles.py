"""Independent reference implementations used by the tests."""

import math

import numpy as np


def loss_oracle(preds, labels, membership, alphas, eps, reduction="mean"):
    """Term-by-term evaluation of the masked multi-task cross entropy with plain Python loops."""
    total = 0.0
    for k in range(3):
        ll = 0.0
        mass = 0.0
        for b in range(len(membership)):
            if not membership[b][k]:
                continue
            p, s = preds[k][b], labels[k][b]
            H, W, C = p.shape
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        if s[i, j, c]:
                            ll += s[i, j, c] * math.log(p[i, j, c] + eps)
                            mass += s[i, j, c]
        if reduction == "mean" and mass:
            ll /= mass
        total += -alphas[k] * ll
    return total


def dice_oracle(x, y):
    """Dice by counting pixels one at a time."""
    inter = sx = sy = 0
    for a, b in zip(np.ravel(x), np.ravel(y)):
        inter += int(a and b)
        sx += int(bool(a))
        sy += int(bool(b))
    if sx + sy == 0:
        return None
    return 2 * inter / (sx + sy)


def eroded_by_disk(mask, radius):
    """Pixels whose every pixel within distance ``<= radius`` (the disk) lies in ``mask``."""
    H, W = mask.shape
    r = int(math.ceil(radius))
    offs = [(dy, dx) for dy in range(-r - 1, r + 2) for dx in range(-r - 1, r + 2) if dy * dy + dx * dx <= radius * radius]
    out = np.zeros_like(mask, dtype=bool)
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                continue
            ok = True
            for dy, dx in offs:
                y, x = i + dy, j + dx
                if not (0 <= y < H and 0 <= x < W and mask[y, x]):
                    ok = False
                    break
            out[i, j] = ok
    return out
