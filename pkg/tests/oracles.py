"""Brute-force grid oracles for the SOC filter, margin and UCB problems (m <= 2)."""
import numpy as np

from gpcbf.socp import SocConstraintData


def random_instance(rng, m, scale_hi=1.5):
    A = rng.standard_normal((m + 1, m + 1))
    P = A @ A.T * rng.uniform(0.1, 2.0)
    con = SocConstraintData(
        rng.standard_normal(m), rng.standard_normal(), P, rng.standard_normal() - 1.0, rng.uniform(0.0, scale_hi)
    )
    lo = -rng.uniform(0.5, 2.0, m)
    hi = rng.uniform(0.5, 2.0, m)
    u_nom = rng.uniform(1.5 * lo, 1.5 * hi)
    return con, lo, hi, u_nom


def _grid(lo, hi, n):
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(lo)), [ax[1] - ax[0] for ax in axes]


def grid_margin(con, lo, hi, n=None, levels=4):
    """Max slack over the box by iterated grid refinement around the incumbent."""
    m = len(lo)
    n = n or (100_001 if m == 1 else 401)
    blo, bhi = np.array(lo, float), np.array(hi, float)
    best_u, best = None, -np.inf
    for _ in range(levels):
        U, h = _grid(blo, bhi, n)
        v = con.slack_many(U)
        j = int(np.argmax(v))
        if v[j] > best:
            best, best_u = float(v[j]), U[j]
        w = 3 * np.array(h)
        blo, bhi = np.maximum(best_u - w, lo), np.minimum(best_u + w, hi)
    return best, best_u


def _feasible(con, lo, hi, U):
    inside = np.all((U >= lo) & (U <= hi), axis=1)
    return inside & (con.slack_many(U) >= 0)


def _entry_radius(con, lo, hi, u_nom, thetas, r_max):
    """Smallest r with u_nom + r (cos t, sin t) feasible, per direction (inf if the ray misses).

    The ray is clipped to the box exactly; slack is concave along it, so a
    ternary search finds its maximum and bisection then finds the entry point.
    """
    D = np.stack([np.cos(thetas), np.sin(thetas)], 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - u_nom) / D
        t_hi = (hi - u_nom) / D
    t0 = np.maximum(np.nanmax(np.minimum(t_lo, t_hi), axis=1), 0.0)
    t1 = np.minimum(np.nanmin(np.maximum(t_lo, t_hi), axis=1), r_max)
    hit = t1 >= t0
    t0, t1 = np.where(hit, t0, 0.0), np.where(hit, t1, 0.0)

    def slack(r):
        return con.slack_many(u_nom + r[:, None] * D)

    a, b = t0.copy(), t1.copy()
    for _ in range(200):  # ternary search for the slack maximiser
        c, d = a + (b - a) / 3, b - (b - a) / 3
        left = slack(c) < slack(d)
        a, b = np.where(left, c, a), np.where(left, b, d)
    r_best = 0.5 * (a + b)
    hit &= slack(r_best) >= 0
    inside0 = slack(t0) >= 0
    a, b = t0.copy(), r_best.copy()
    for _ in range(200):  # bisection on [infeasible a, feasible b]
        mid = 0.5 * (a + b)
        f = slack(mid) >= 0
        a, b = np.where(f, a, mid), np.where(f, mid, b)
    out = np.full(len(thetas), np.inf)
    out[hit] = np.where(inside0, t0, b)[hit]
    return out, D


def grid_filter(con, lo, hi, u_nom, n=None, levels=6):
    """Closest feasible input to ``u_nom``.

    m = 1: iterated grid refinement. m = 2: refinement over a grid of ray
    directions from ``u_nom``; along each ray the entry point into the
    (convex) feasible set is found by bisection, which keeps the distance
    values exact in the flat neighbourhood of the optimum.
    """
    lo, hi, u_nom = np.asarray(lo, float), np.asarray(hi, float), np.asarray(u_nom, float)
    if len(lo) == 2:
        if _feasible(con, lo, hi, u_nom[None])[0]:
            return u_nom.copy()
        r_max = np.linalg.norm(np.maximum(np.abs(hi - u_nom), np.abs(u_nom - lo))) * 1.01
        thetas = np.linspace(0, 2 * np.pi, 721)[:-1]
        width = thetas[1]
        best = None
        for _ in range(levels):
            r, D = _entry_radius(con, lo, hi, u_nom, thetas, r_max)
            if not np.isfinite(r).any():
                return best
            j = int(np.argmin(r))
            best = u_nom + r[j] * D[j]
            thetas = np.linspace(thetas[j] - 3 * width, thetas[j] + 3 * width, 121)
            width = thetas[1] - thetas[0]
        return best
    n = n or 100_001
    blo, bhi = lo.copy(), hi.copy()
    best_u, best_d = None, np.inf
    for _ in range(levels):
        U, h = _grid(blo, bhi, n)
        ok = con.slack_many(U) >= 0
        if not ok.any():
            break
        d = np.linalg.norm(U[ok] - u_nom, axis=1)
        j = int(np.argmin(d))
        if d[j] < best_d:
            best_d, best_u = float(d[j]), U[ok][j]
        w = 3 * np.array(h)
        blo, bhi = np.maximum(best_u - w, lo), np.minimum(best_u + w, hi)
    return best_u


def grid_ucb(con, lo, hi, n_total=100_000):
    m = len(lo)
    n = int(round(n_total ** (1.0 / m)))
    U, _ = _grid(np.asarray(lo, float), np.asarray(hi, float), n)
    W = np.hstack([np.ones((len(U), 1)), U])
    vals = U @ con.affine_grad + con.affine_offset + con.scale * np.linalg.norm(W @ con.factor.T, axis=1)
    return float(vals.max())
