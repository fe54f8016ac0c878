"""Small second-order-cone kernel for the GP-based barrier constraint.

At a fixed state the robust barrier condition reads

    slack(u) = c.u + d - rhs - scale * sqrt(w' P w) >= 0,   w = [1, u]

where ``c.u + d`` is the barrier derivative under the posterior mean,
``w' P w`` the summed posterior variance and ``rhs = -alpha(h(x))``.
Everything here works in box-normalised coordinates ``u = mid + half * y``
with ``y`` in [-1, 1]; coordinates with a degenerate box are held fixed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .cbf import CbfSpec, hdot_terms
from .errors import SolverFailure
from .gp import AffinePosterior, GpModel

INFEASIBLE_TOL = 1e-9
KKT_TOL = 1e-6
MAX_ITER = 200


@dataclass
class SocConstraintData:
    affine_grad: np.ndarray
    affine_offset: float
    variance_form: np.ndarray
    rhs_offset: float
    scale: float
    factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.affine_grad = np.atleast_1d(np.asarray(self.affine_grad, dtype=float))
        P = np.asarray(self.variance_form, dtype=float)
        P = 0.5 * (P + P.T)
        ev, V = np.linalg.eigh(P)
        ev = np.maximum(ev, 0.0)
        self.variance_form = (V * ev) @ V.T
        self.factor = (V * np.sqrt(ev)).T

    @property
    def m(self) -> int:
        return len(self.affine_grad)

    # tr Sigma^2(u) = u'Qu + q'u + s
    @property
    def Q(self) -> np.ndarray:
        return self.variance_form[1:, 1:]

    @property
    def q(self) -> np.ndarray:
        return 2.0 * self.variance_form[0, 1:]

    @property
    def s(self) -> float:
        return float(self.variance_form[0, 0])

    def trace_variance(self, u) -> float:
        w = np.concatenate([[1.0], np.atleast_1d(u)])
        return float(w @ self.variance_form @ w)

    def mean_term(self, u) -> float:
        return float(self.affine_grad @ np.atleast_1d(u) + self.affine_offset)

    def slack(self, u) -> float:
        w = np.concatenate([[1.0], np.atleast_1d(u)])
        return self.mean_term(u) - self.rhs_offset - self.scale * float(np.linalg.norm(self.factor @ w))

    def slack_many(self, U) -> np.ndarray:
        """Slack at each row of ``U`` (shape (K, m))."""
        U = np.asarray(U, dtype=float).reshape(-1, self.m)
        W = np.hstack([np.ones((len(U), 1)), U])
        return U @ self.affine_grad + self.affine_offset - self.rhs_offset - self.scale * np.linalg.norm(
            W @ self.factor.T, axis=1
        )

    def ucb_value(self, u) -> float:
        w = np.concatenate([[1.0], np.atleast_1d(u)])
        return self.mean_term(u) + self.scale * float(np.linalg.norm(self.factor @ w))


@dataclass
class FilterResult:
    feasible: bool
    u: Optional[np.ndarray]
    margin: float
    kkt_residual: float = 0.0
    iterations: int = 0


def assemble_from_posterior(ap: AffinePosterior, spec: CbfSpec, x, beta: float) -> SocConstraintData:
    grad, alpha_h = hdot_terms(spec, x)
    return SocConstraintData(
        affine_grad=grad @ ap.input_matrix,
        affine_offset=float(grad @ ap.drift),
        variance_form=ap.trace_cov(),
        rhs_offset=-alpha_h,
        scale=spec.lipschitz * beta,
    )


def assemble_constraint(model: GpModel, spec: CbfSpec, x, beta: Optional[float] = None) -> SocConstraintData:
    beta = model.beta_max() if beta is None else beta
    return assemble_from_posterior(model.affine_posterior(x), spec, x, beta)


# box-normalised helpers -----------------------------------------------------------

class _Frame:
    """Map between inputs u and normalised free coordinates y."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        self.free = half > 0
        self.half = half[self.free]
        self.k = int(self.free.sum())
        self.cache = {}

    def u(self, y) -> np.ndarray:
        out = self.mid.copy()
        out[self.free] += self.half * y
        return np.clip(out, self.lo, self.hi)  # mid + half can round past hi

    def y(self, u) -> np.ndarray:
        return np.clip((np.asarray(u, dtype=float)[self.free] - self.mid[self.free]) / self.half, -1, 1)


def _slack_derivs(con: SocConstraintData, fr: _Frame, y):
    """Value, gradient and Hessian of the slack in normalised coordinates."""
    key = id(con)
    pre = fr.cache.get(key)
    if pre is None:
        F0 = con.factor[:, 0] + con.factor[:, 1:] @ fr.mid
        Fu = con.factor[:, 1:][:, fr.free] * fr.half
        cg = con.affine_grad[fr.free] * fr.half
        pre = fr.cache[key] = (con, F0, Fu, cg, con.mean_term(fr.mid) - con.rhs_offset, con.scale)
    _, F0, Fu, cg, base, sc = pre
    Fw = F0 + Fu @ y
    nrm = math.sqrt(Fw @ Fw)
    val = base + cg @ y - sc * nrm
    if nrm > 1e-300:
        a = Fu.T @ (Fw / nrm)
        g = cg - sc * a
        H = (sc / nrm) * (np.outer(a, a) - Fu.T @ Fu)
    else:
        g = cg.copy()
        H = np.zeros((fr.k, fr.k))
    return val, g, H


def _projected_ascent(fun, y0, max_iter=500):
    """Maximise a concave smooth function over [-1, 1]^k."""
    y = np.clip(y0, -1.0, 1.0)
    f, g, H = fun(y)
    t = 1.0
    for _ in range(max_iter):
        while True:
            yn = np.clip(y + t * g, -1.0, 1.0)
            fn, gn, Hn = fun(yn)
            if fn >= f + 1e-4 * g @ (yn - y):
                break
            t *= 0.5
            if t < 1e-14:
                yn, fn, gn, Hn = y, f, g, H
                break
        moved = np.max(np.abs(yn - y)) if len(y) else 0.0
        y, f, g, H = yn, fn, gn, Hn
        t = min(2.0 * t, 1e6)
        if moved < 1e-13:
            break
    return y, f, g, H


def _face_maximum(con: SocConstraintData, fr: _Frame):
    """Exact maximiser of the slack by enumerating the 3^k faces of the box.

    On a face with free coordinates S the slack is g.y - s |A y + b| + const,
    whose unconstrained maximiser has a closed form; it counts only if it
    lands inside the face. Vertices are always candidates.
    """
    k = fr.k
    F0 = con.factor[:, 0] + con.factor[:, 1:] @ fr.mid
    Fu = con.factor[:, 1:][:, fr.free] * fr.half
    cg = con.affine_grad[fr.free] * fr.half
    base = con.mean_term(fr.mid) - con.rhs_offset
    s = con.scale

    def value(y):
        return base + cg @ y - s * np.linalg.norm(F0 + Fu @ y)

    best_y, best_v = None, -np.inf
    for face in itertools.product((-1.0, 0.0, 1.0), repeat=k):
        face = np.array(face)
        S = face == 0.0
        y = face.copy()
        if S.any():
            if s <= 0:
                continue
            A = Fu[:, S]
            b = F0 + Fu[:, ~S] @ face[~S]
            g = cg[S]
            lam, V = np.linalg.eigh(A.T @ A)
            tol = 1e-12 * max(lam.max(), 1e-300)
            null = lam <= tol
            if null.any() and np.linalg.norm(V[:, null].T @ g) > 1e-12 * max(np.linalg.norm(g), 1e-300):
                continue
            Vr, lr = V[:, ~null], lam[~null]
            y0 = -Vr @ ((Vr.T @ (A.T @ b)) / lr)
            r = max(float(np.sum((A @ y0 + b) ** 2)), 0.0)
            gt = (Vr.T @ g) / np.sqrt(lr)
            ng = np.linalg.norm(gt)
            if ng >= s:
                continue
            if ng > 0:
                t = ng * np.sqrt(r) / np.sqrt(s * s - ng * ng)
                yS = y0 + Vr @ (gt / ng * t / np.sqrt(lr))
            else:
                yS = y0
            if np.any(np.abs(yS) > 1.0 + 1e-12):
                continue
            y[S] = np.clip(yS, -1.0, 1.0)
        v = value(y)
        if v > best_v:
            best_y, best_v = y, v
    return best_y, best_v


def feasibility_margin(con: SocConstraintData, lo, hi, n_starts: int = 16, seed: int = 0):
    """Maximum slack over the box and its maximiser.

    The slack is concave. Up to six free inputs the maximum is found exactly
    by face enumeration; beyond that by multi-start projected ascent.
    """
    fr = _Frame(lo, hi)
    if fr.k == 0:
        return con.slack(fr.mid), fr.mid.copy()
    if fr.k <= 6:
        y, f = _face_maximum(con, fr)
        return float(con.slack(fr.u(y))), fr.u(y)
    fun = lambda y: _slack_derivs(con, fr, y)
    rng = np.random.default_rng(seed)
    starts = [np.zeros(fr.k)] + [rng.uniform(-1, 1, fr.k) for _ in range(n_starts - 1)]
    best_y, best_f = None, -np.inf
    for y0 in starts:
        y, f, _, _ = _projected_ascent(fun, y0)
        if f > best_f:
            best_y, best_f = y, f
    return float(best_f), fr.u(best_y)


# log-barrier machinery --------------------------------------------------------------

def _barrier_minimize(obj, cons, v0, nbox, t0=1.0, mu=50.0, gap=1e-9, max_iter=MAX_ITER):
    """Minimise convex ``obj`` subject to concave ``cons`` >= 0 and |v_i| <= 1 for i < nbox.

    ``obj`` and every constraint return (value, gradient, Hessian); the
    start must be strictly feasible. Returns (v, iterations).
    """
    v = v0.copy()
    t = t0
    it = 0
    ncons = len(cons) + 2 * nbox

    def phi(vv, need_derivs=True):
        if nbox and np.any(np.abs(vv[:nbox]) >= 1.0):
            return np.inf, None, None
        f, g, H = obj(vv)
        F, G, Hs = t * f, t * g, t * H
        for c in cons:
            cv, cg, cH = c(vv)
            if cv <= 0:
                return np.inf, None, None
            F -= np.log(cv)
            if need_derivs:
                G = G - cg / cv
                Hs = Hs - cH / cv + np.outer(cg, cg) / cv**2
        if nbox:
            yb = vv[:nbox]
            a, b = 1.0 - yb, 1.0 + yb
            F -= np.sum(np.log(a)) + np.sum(np.log(b))
            if need_derivs:
                G = G.copy()
                G[:nbox] += 1.0 / a - 1.0 / b
                Hs = Hs.copy()
                Hs[np.arange(nbox), np.arange(nbox)] += 1.0 / a**2 + 1.0 / b**2
        return F, G, Hs

    while True:
        for _ in range(50):
            it += 1
            F, G, H = phi(v)
            try:
                step = -np.linalg.solve(H, G)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(H, G, rcond=None)[0]
            dec = -G @ step
            if dec / 2 < 1e-12:
                break
            s = 1.0
            if nbox:
                # fraction to the box boundary
                sb, vb = step[:nbox], v[:nbox]
                lim = np.where(sb > 0, (1.0 - vb) / np.where(sb > 0, sb, 1.0),
                               np.where(sb < 0, (-1.0 - vb) / np.where(sb < 0, sb, 1.0), np.inf))
                s = min(1.0, 0.99 * float(lim.min()))
            while s > 1e-16:
                Fn = phi(v + s * step, False)[0]
                if np.isfinite(Fn) and Fn <= F - 0.25 * s * dec:
                    break
                s *= 0.5
            if s <= 1e-16:
                break
            v = v + s * step
        if ncons / t < gap or it > max_iter:
            break
        t *= mu
    return v, it


def max_min_margin(cons: Sequence[SocConstraintData], lo, hi):
    """max over the box of min_k slack_k (phase-I problem for several constraints)."""
    cons = list(cons)
    if len(cons) == 1:
        return feasibility_margin(cons[0], lo, hi)
    fr = _Frame(lo, hi)
    if fr.k == 0:
        return min(c.slack(fr.mid) for c in cons), fr.mid.copy()
    k = fr.k
    y0 = np.zeros(k)
    s0 = min(_slack_derivs(c, fr, y0)[0] for c in cons) - 1.0
    Z = np.zeros((k + 1, k + 1))
    gobj = np.zeros(k + 1)
    gobj[-1] = -1.0

    def obj(v):
        return -v[-1], gobj, Z

    bc = []
    for con in cons:
        def c(v, con=con):
            val, g, H = _slack_derivs(con, fr, v[:k])
            HH = Z.copy()
            HH[:k, :k] = H
            return val - v[-1], np.append(g, -1.0), HH
        bc.append(c)
    v, _ = _barrier_minimize(obj, bc, np.append(y0, s0), nbox=k, t0=1.0 / (1.0 + abs(s0)))
    y = v[:k]
    # finish on the exact piecewise objective from the barrier point
    fun_min = lambda yy: min(_slack_derivs(c, fr, yy)[0] for c in cons)
    best = fun_min(y)
    for yy in (np.clip(np.round(y), -1, 1), np.where(np.abs(y) > 1 - 1e-6, np.sign(y), y)):
        val = fun_min(yy)
        if val > best:
            y, best = yy, val
    return float(best), fr.u(y)


def _magnitude(con: SocConstraintData, u) -> float:
    w = np.concatenate([[1.0], np.atleast_1d(u)])
    return 1.0 + abs(con.mean_term(u)) + abs(con.rhs_offset) + con.scale * float(np.linalg.norm(con.factor @ w))


def kkt_residual(cons, lo, hi, u_nom, u) -> float:
    """Scale-free KKT residual of the filter problem at ``u``.

    Stationarity is measured in box-normalised coordinates with the
    objective gradient scaled to unit length; slacks count as active below
    1e-7 of the constraint's magnitude.
    """
    cons = [cons] if isinstance(cons, SocConstraintData) else list(cons)
    fr = _Frame(lo, hi)
    if fr.k == 0:
        return 0.0
    u = np.asarray(u, dtype=float)
    y = fr.y(u)
    grad_f = fr.half * (u[fr.free] - np.asarray(u_nom, dtype=float)[fr.free])
    gn = np.linalg.norm(grad_f)
    if gn <= 1e-14 * np.linalg.norm(fr.half):
        gn = 0.0
    vals, cols = [], []
    for c in cons:
        v, g, _ = _slack_derivs(c, fr, y)
        mag = _magnitude(c, u)
        vals.append(v / mag)
        if v < 1e-7 * mag and np.linalg.norm(g) > 0:
            cols.append(g / np.linalg.norm(g))
    for i, yi in enumerate(y):
        if yi >= 1.0 - 1e-12:
            cols.append(-np.eye(fr.k)[i])
        elif yi <= -1.0 + 1e-12:
            cols.append(np.eye(fr.k)[i])
    infeas = max([0.0] + [-v for v in vals])
    if gn == 0:
        return float(infeas)
    grad_f = grad_f / gn
    if not cols:
        return float(max(1.0, infeas))
    A = np.array(cols).T
    lam, *_ = np.linalg.lstsq(A, grad_f, rcond=None)
    res = np.linalg.norm(A @ lam - grad_f)
    return float(max(res, -min(lam.min(), 0.0), infeas))


def _interval_1d(con: SocConstraintData, lo: float, hi: float):
    """Feasible interval of a single-input constraint within [lo, hi], or None."""
    P = con.variance_form
    c, e, s = float(con.affine_grad[0]), con.affine_offset - con.rhs_offset, con.scale
    pts = [lo, hi]
    if c != 0:
        pts.append(-e / c)
    A = c * c - s * s * P[1, 1]
    B = 2 * c * e - 2 * s * s * P[0, 1]
    C = e * e - s * s * P[0, 0]
    if abs(A) > 1e-300:
        disc = B * B - 4 * A * C
        if disc >= 0:
            sq = np.sqrt(disc)
            q = -0.5 * (B + np.copysign(sq, B))
            pts += [q / A] + ([C / q] if q != 0 else [])
    elif B != 0:
        pts.append(-C / B)
    pts = np.unique(np.clip([p for p in pts if np.isfinite(p)], lo, hi))
    probes = np.concatenate([pts, 0.5 * (pts[1:] + pts[:-1])])
    tol = -1e-12 * (1.0 + abs(e) + abs(c) * max(abs(lo), abs(hi)))
    ok = probes[con.slack_many(probes[:, None]) >= tol]
    if not len(ok):
        return None
    return float(ok.min()), float(ok.max())


def _quick_start(cons, lo, hi, u_nom):
    """Cheap certificates ahead of the joint phase-I problem.

    Returns (margin, u) when one constraint is infeasible on its own (an
    upper bound below zero) or when some candidate input satisfies all of
    them strictly (a lower bound above zero); (None, None) otherwise.
    """
    cands = [np.clip(u_nom, lo, hi), 0.5 * (lo + hi)]
    for c in cons:
        fm, u = feasibility_margin(c, lo, hi)
        if fm < -INFEASIBLE_TOL:
            return fm, u
        cands.append(u)
    if len(cons) == 1:
        return None, None
    # min of concave slacks is concave: maximise it along segments between candidates
    fmin = lambda u: min(c.slack(u) for c in cons)
    base = list(cands)
    for i in range(len(base)):
        for j in range(i + 1, len(base)):
            a, b = base[i], base[j]
            res = minimize_scalar(lambda t: -fmin(a + t * (b - a)), bounds=(0.0, 1.0), method="bounded",
                                  options={"xatol": 1e-10})
            cands.append(a + res.x * (b - a))
    vals = [min(c.slack(u) for c in cons) for u in cands]
    i = int(np.argmax(vals))
    return (vals[i], cands[i]) if vals[i] > 0 else (None, None)


def _filter_objective(fr: _Frame, u_nom, u_ref):
    """Squared distance to ``u_nom`` in normalised coordinates, scaled to be O(1) at ``u_ref``."""
    d = u_ref[fr.free] - u_nom[fr.free]
    w8 = 1.0 / max(float(d @ d), 1e-300)
    target = u_nom[fr.free]
    H0 = w8 * np.diag(fr.half**2)

    def obj(y):
        r = fr.mid[fr.free] + fr.half * y - target
        return 0.5 * w8 * r @ r, w8 * fr.half * r, H0

    return obj


def solve_safety_filter(
    cons, lo, hi, u_nom, kkt_tol: float = KKT_TOL, max_iter: int = MAX_ITER, warm_start=None
) -> FilterResult:
    """Closest input to ``u_nom`` in the box satisfying every constraint.

    ``cons`` is one SocConstraintData or a sequence of them (their
    intersection is imposed). A nominal input that is already admissible is
    returned unchanged. ``warm_start`` (for instance the previous solution)
    is tried first with an active-set Newton step; it is accepted only if the
    result passes the KKT test, which certifies optimality of this convex
    problem.
    """
    cons = [cons] if isinstance(cons, SocConstraintData) else list(cons)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    u_nom = np.asarray(u_nom, dtype=float)
    # the box projection of u_nom, when admissible, solves the problem exactly
    u_c = np.clip(u_nom, lo, hi)
    m0 = min(c.slack(u_c) for c in cons)
    if m0 >= 0:
        return FilterResult(True, u_c, m0)
    if len(lo) == 1:
        # exact: intersect the per-constraint feasible intervals and clip
        a, b = lo[0], hi[0]
        for c in cons:
            iv = _interval_1d(c, lo[0], hi[0])
            if iv is None:
                a, b = 1.0, 0.0
                break
            a, b = max(a, iv[0]), min(b, iv[1])
        if a <= b:
            u = np.array([min(max(u_nom[0], a), b)])
            return FilterResult(True, u, min(c.slack(u) for c in cons), 0.0, 1)
    if warm_start is not None and len(lo) > 1:
        fr = _Frame(lo, hi)
        w = np.clip(np.asarray(warm_start, dtype=float), lo, hi)
        if fr.k and np.any(w[fr.free] != u_nom[fr.free]):
            obj = _filter_objective(fr, u_nom, w)
            slack_fns = [lambda y, c=c: _slack_derivs(c, fr, y) for c in cons]
            u, res = _polish_best(obj, slack_fns, fr.y(w), fr, cons, lo, hi, u_nom, kkt_tol, descent=False)
            if res <= kkt_tol and min(c.slack(u) for c in cons) >= -1e-10:
                return FilterResult(True, u, min(c.slack(u) for c in cons), res, 0)
    margin, u_m = _quick_start(cons, lo, hi, u_nom)
    if margin is None:
        margin, u_m = max_min_margin(cons, lo, hi)
    if margin < -INFEASIBLE_TOL:
        return FilterResult(False, None, margin)
    fr = _Frame(lo, hi)
    if margin <= 0 or fr.k == 0 or len(lo) == 1:
        return FilterResult(True, u_m, margin)

    k = fr.k
    obj = _filter_objective(fr, u_nom, u_m)

    slack_fns = [lambda y, c=c: _slack_derivs(c, fr, y) for c in cons]

    # strictly feasible start: pull the margin maximiser towards the box centre
    y0 = fr.y(u_m)
    theta = 1e-3
    while True:
        ys = (1.0 - theta) * y0
        if all(f(ys)[0] > 0 for f in slack_fns) and np.all(np.abs(ys) < 1):
            break
        theta *= 0.5
        if theta < 1e-15:
            return FilterResult(True, u_m, margin)

    # coarse central path to expose the active set, then exact polish
    y, its = _barrier_minimize(obj, slack_fns, ys, nbox=k, gap=1e-5, max_iter=max_iter)
    u, res = _polish_best(obj, slack_fns, y, fr, cons, lo, hi, u_nom, kkt_tol)
    if res > kkt_tol:
        y, more = _barrier_minimize(obj, slack_fns, y, nbox=k, t0=1e5, max_iter=max_iter)
        its += more
        u, res = _polish_best(obj, slack_fns, y, fr, cons, lo, hi, u_nom, kkt_tol)
    if res > kkt_tol:
        raise SolverFailure(f"KKT residual {res:.2e} above tolerance", best=u)
    return FilterResult(True, u, min(c.slack(u) for c in cons), res, its)


def _polish_best(obj, slack_fns, y, fr, cons, lo, hi, u_nom, tol, descent=True):
    """Polish with progressively looser activity thresholds; keep the best KKT point."""
    best_u = fr.u(y)
    best = kkt_residual(cons, lo, hi, u_nom, best_u)
    for thr in (1e-5, 1e-3, 1e-1):
        if best <= tol:
            break
        u = fr.u(_polish_filter(obj, slack_fns, y, thr, [_magnitude(c, best_u) for c in cons], descent=descent))
        r = kkt_residual(cons, lo, hi, u_nom, u)
        if r < best:
            best_u, best = u, r
    return best_u, best


def _polish_filter(obj, slack_fns, y, thr=1e-5, mags=None, iters=30, descent=True):
    """Equality-constrained Newton on the active set suggested by the barrier point.

    A constraint counts as active when its slack is below ``thr`` times its
    magnitude, a box side when y is within ``thr`` of it. With ``descent`` the
    result must not increase the objective relative to the (feasible) start.
    """
    mags = mags or [1.0] * len(slack_fns)
    act_c = [i for i, fn in enumerate(slack_fns) if fn(y)[0] < thr * mags[i]]
    act_hi = y > 1.0 - thr
    act_lo = y < -1.0 + thr
    yy = y.copy()
    yy[act_hi], yy[act_lo] = 1.0, -1.0
    free = ~(act_hi | act_lo)
    kf = int(free.sum())
    lam = np.zeros(len(act_c))
    if kf and act_c:
        # multiplier guess from stationarity at the barrier point
        _, g, _ = obj(y)
        A = np.array([slack_fns[i](y)[1][free] for i in act_c])
        lam = np.linalg.lstsq(A.T, g[free], rcond=None)[0]
        for _ in range(iters):
            _, g, H = obj(yy)
            Hl = H[np.ix_(free, free)].copy()
            cv, cg = [], []
            for j, i in enumerate(act_c):
                v, gc, Hc = slack_fns[i](yy)
                cv.append(v)
                cg.append(gc[free])
                Hl -= lam[j] * Hc[np.ix_(free, free)]
            A = np.array(cg)
            r1 = g[free] - A.T @ lam
            KKT = np.block([[Hl, -A.T], [-A, np.zeros((len(act_c), len(act_c)))]])
            try:
                d = np.linalg.solve(KKT, -np.concatenate([r1, -np.array(cv)]))
            except np.linalg.LinAlgError:
                return y
            yy = yy.copy()
            yy[free] += d[:kf]
            lam = lam + d[kf:]
            if np.linalg.norm(d) < 1e-14:
                break
    ok = (
        np.all(np.abs(yy) <= 1.0)
        and all(fn(yy)[0] >= -1e-10 for fn in slack_fns)
        and np.all(lam >= -1e-10)
        and (not descent or obj(yy)[0] <= obj(y)[0] + 1e-9)
    )
    return yy if ok else y


# exploration -----------------------------------------------------------------------

def ucb_maximize(con: SocConstraintData, lo, hi, n_starts: int = 16, seed: int = 0) -> np.ndarray:
    """Maximiser of the optimistic barrier derivative over the box.

    The objective is convex, so the maximum sits at a vertex; small input
    dimensions enumerate every vertex, larger ones use projected ascent.
    """
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    m = len(lo)
    if m <= 12:
        V = np.array(list(itertools.product(*zip(lo, hi))))
        W = np.hstack([np.ones((len(V), 1)), V])
        vals = V @ con.affine_grad + con.affine_offset + con.scale * np.linalg.norm(W @ con.factor.T, axis=1)
        return V[int(np.argmax(vals))].copy()
    fr = _Frame(lo, hi)

    def fun(y):
        v, g, H = _slack_derivs(
            SocConstraintData(con.affine_grad, con.affine_offset, con.variance_form, 0.0, -con.scale), fr, y
        )
        return v, g, H

    rng = np.random.default_rng(seed)
    best, best_val = None, -np.inf
    for _ in range(n_starts):
        y0 = rng.uniform(-1, 1, fr.k)
        y = y0
        for _ in range(200):
            _, g, _ = fun(y)
            yn = np.sign(g + (g == 0))
            if np.array_equal(yn, y):
                break
            y = yn
        u = fr.u(y)
        val = con.ucb_value(u)
        if val > best_val:
            best, best_val = u, val
    return best


def ucb_explore(model: GpModel, spec: CbfSpec, x, lo, hi, beta: Optional[float] = None) -> np.ndarray:
    return ucb_maximize(assemble_constraint(model, spec, x, beta), lo, hi)
