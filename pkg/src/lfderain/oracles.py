"""Slow, independent reference implementations used to cross-check the fast paths."""

from __future__ import annotations

import numpy as np


def direct_conv4d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Eight nested loops over output and kernel offsets (channels vectorised per tap)."""
    c_in, S, V, H, W = x.shape
    c_out = w.shape[0]
    ks, kv, kh, kw = w.shape[2:]
    ps, pv, ph, pw = (ks - 1) // 2, (kv - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((c_out, S, V, H, W))
    for s in range(S):
        for v in range(V):
            for h in range(H):
                for q in range(W):
                    acc = np.zeros(c_out) if b is None else np.array(b, dtype=np.float64)
                    for a in range(ks):
                        si = s + a - ps
                        if not 0 <= si < S:
                            continue
                        for bb in range(kv):
                            vi = v + bb - pv
                            if not 0 <= vi < V:
                                continue
                            for c in range(kh):
                                hi = h + c - ph
                                if not 0 <= hi < H:
                                    continue
                                for d in range(kw):
                                    wi = q + d - pw
                                    if 0 <= wi < W:
                                        acc = acc + w[:, :, a, bb, c, d] @ x[:, si, vi, hi, wi]
                    out[:, s, v, h, q] = acc
    return out


def direct_conv3d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded 3D cross-correlation by explicit loops, ``x[C,D1,D2,D3]``."""
    c_in, D1, D2, D3 = x.shape
    c_out, _, k1, k2, k3 = w.shape
    p1, p2, p3 = (k1 - 1) // 2, (k2 - 1) // 2, (k3 - 1) // 2
    out = np.zeros((c_out, D1, D2, D3))
    for i in range(D1):
        for j in range(D2):
            for l in range(D3):
                for a in range(k1):
                    for bb in range(k2):
                        for c in range(k3):
                            ii, jj, ll = i + a - p1, j + bb - p2, l + c - p3
                            if 0 <= ii < D1 and 0 <= jj < D2 and 0 <= ll < D3:
                                out[:, i, j, l] += w[:, :, a, bb, c] @ x[:, ii, jj, ll]
    return out


def dense_inverse_gp(f_r, F_n, F_f, sigma_eps: float):
    """GP mean and both variances with explicit inverses and scalar kernel loops."""
    def k(a, b):
        return float(np.dot(a, b) / (np.sqrt(np.dot(a, a)) * np.sqrt(np.dot(b, b))))

    def parts(F):
        n = len(F)
        G = np.array([[k(F[i], F[j]) for j in range(n)] for i in range(n)])
        G = G + sigma_eps ** 2 * np.eye(n)
        kx = np.array([k(F[i], f_r) for i in range(n)])
        return kx, np.linalg.inv(G)

    kx, Ginv = parts(F_n)
    mean = (kx @ Ginv) @ np.asarray(F_n)
    var_n = k(f_r, f_r) + sigma_eps ** 2 - kx @ Ginv @ kx
    kf, Gfinv = parts(F_f)
    var_f = k(f_r, f_r) + sigma_eps ** 2 - kf @ Gfinv @ kf
    return mean, var_n, var_f
