"""Weighted least-squares tube fitting and the contrast t-statistic.

The fit separates photometry from geometry (variable projection): for a
fixed tube geometry the contrast ``k`` and background ``m`` solve a 2x2
weighted linear system, so the nonlinear search runs over five geometric
parameters only: radius, two in-plane center offsets and two small-angle
rotations of the axis. The nonlinear loop is a damped Gauss-Newton
(Levenberg-Marquardt style) iteration with a finite-difference Jacobian.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .template import (
    DegenerateStencil,
    SampleStencil,
    TubeTemplate,
    _pow_half_gamma,
    build_stencil,
    orthonormal_frame,
    template_values,
)
from .volume import Volume3D

# Condition number of the 2x2 photometry normal matrix beyond which the
# design is treated as singular.
_SINGULAR_COND = 1e12

try:  # optional: compiles the inner residual loop, ~5x faster tracking
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    _njit = None

_residual_kernel = None


def _get_residual_kernel():
    """Lazily compile the fused residual evaluation (numba present only)."""
    global _residual_kernel
    if _residual_kernel is not None or _njit is None:
        return _residual_kernel

    @_njit(cache=True)
    def kernel(pts, pnorm2, w, y, x0, v, r, gamma_half):
        n = pts.shape[0]
        x0v = x0[0] * v[0] + x0[1] * v[1] + x0[2] * v[2]
        x0n = x0[0] * x0[0] + x0[1] * x0[1] + x0[2] * x0[2]
        rg = r ** (2.0 * gamma_half)
        tv = np.empty(n)
        s11 = 0.0
        st1 = 0.0
        stt = 0.0
        sty = 0.0
        s1y = 0.0
        for i in range(n):
            along = pts[i, 0] * v[0] + pts[i, 1] * v[1] + pts[i, 2] * v[2] - x0v
            px = pts[i, 0] * x0[0] + pts[i, 1] * x0[1] + pts[i, 2] * x0[2]
            d2 = pnorm2[i] - 2.0 * px + x0n - along * along
            if d2 < 0.0:
                d2 = 0.0
            acc = d2
            for _ in range(gamma_half - 1):
                acc *= d2
            t = rg / (acc + rg)
            tv[i] = t
            w2 = w[i] * w[i]
            s11 += w2
            st1 += w2 * t
            stt += w2 * t * t
            sty += w2 * t * y[i]
            s1y += w2 * y[i]
        tr = stt + s11
        disc = ((stt - s11) ** 2 + 4.0 * st1 * st1) ** 0.5
        lam_min = 0.5 * (tr - disc)
        lam_max = 0.5 * (tr + disc)
        det = stt * s11 - st1 * st1
        ok = det > 0.0 and lam_min > 0.0 and lam_max <= 1e12 * lam_min
        if not ok:
            return np.empty(0), 0.0, 0.0, 0.0, False
        k = (s11 * sty - st1 * s1y) / det
        m = (stt * s1y - st1 * sty) / det
        out = np.empty(n)
        rss = 0.0
        for i in range(n):
            ri = w[i] * (k * tv[i] + m - y[i])
            out[i] = ri
            rss += ri * ri
        return out, rss, k, m, True

    _residual_kernel = kernel
    return _residual_kernel


class SingularDesign(Exception):
    """Photometry normal matrix is numerically singular."""


class FitFailed(Exception):
    """No usable fit state could be evaluated."""


class NonpositiveStd(Exception):
    """t-statistic requested with a nonpositive standard deviation."""


@dataclass(frozen=True)
class FitConfig:
    """Solver knobs plus the template bounds shared with the tracker."""

    max_iterations: int = 30
    gradient_tol: float = 1e-10
    step_tol: float = 1e-6
    initial_damping: float = 1e-3
    r_min: float = 1.0
    r_max: float = 10.0
    weight_window_factor: float = 1.0
    gamma: float = 8.0

    def __post_init__(self):
        if not (0 < self.r_min < self.r_max):
            raise ValueError("need 0 < r_min < r_max")
        if self.gradient_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class FitResult:
    """Fitted template with photometry and significance statistics.

    ``t_stat`` is (k - m) / std(k); on an exact (zero-residual) fit the
    standard deviation collapses and the statistic saturates to +/-inf.
    """

    template: TubeTemplate
    contrast: float
    background: float
    k_std: float
    t_stat: float
    rss: float
    n_samples: int
    converged: bool
    iterations: int


def t_statistic(k: float, m: float, k_std: float) -> float:
    """Contrast significance (k - m) / k_std."""
    if not (k_std > 0.0):
        raise NonpositiveStd(f"k_std must be positive, got {k_std}")
    return (k - m) / k_std


def _photometry(tvals: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Weighted LS solve of y ~ k * T + m.

    Returns (k, m, k_std, rss, residual) where residual is the weighted
    residual vector w * (k T + m - y) and rss its squared norm. k_std uses
    the standard n-2 degrees-of-freedom estimate of the coefficient
    standard error.
    """
    w2 = w * w
    s11 = float(w2.sum())
    st1 = float(w2 @ tvals)
    stt = float(w2 @ (tvals * tvals))
    sty = float(w2 @ (tvals * y))
    s1y = float(w2 @ y)
    # eigenvalues of [[stt, st1], [st1, s11]]
    tr = stt + s11
    disc = math.sqrt(max((stt - s11) ** 2 + 4.0 * st1 * st1, 0.0))
    lam_max = 0.5 * (tr + disc)
    lam_min = 0.5 * (tr - disc)
    det = stt * s11 - st1 * st1
    if not (det > 0.0) or lam_min <= 0.0 or lam_max / lam_min > _SINGULAR_COND:
        raise SingularDesign(
            f"photometry design condition {lam_max / lam_min if lam_min > 0 else math.inf:.3g}"
        )
    k = (s11 * sty - st1 * s1y) / det
    m = (stt * s1y - st1 * sty) / det
    residual = w * (k * tvals + m - y)
    rss = float(residual @ residual)
    n = y.size
    sigma2 = rss / (n - 2)
    k_std = math.sqrt(max(sigma2 * s11 / det, 0.0))
    return k, m, k_std, rss, residual


def solve_linear_photometry(vol: Volume3D, t: TubeTemplate, s: SampleStencil):
    """Solve the (k, m) sub-problem for a fixed template over a stencil.

    Returns (k, m, k_std, rss). Raises SingularDesign when the template
    values carry no usable spread against the constant column.
    """
    y = vol.sample_many(s.points)
    tvals = template_values(s.points, t.center, t.direction, t.radius, t.gamma)
    k, m, k_std, rss, _ = _photometry(tvals, y, s.weights)
    return k, m, k_std, rss


class _FitProblem:
    """Projected residual of the fit as a function of geometry parameters.

    theta = (r, a, b, alpha, beta): radius, center offsets along the init
    frame axes (e1, e2), and rotations of the axis about e1 then e2. The
    sample points, weights and image values are frozen at the init template,
    so the residual is a smooth fixed-dimension function of theta.
    """

    def __init__(self, vol: Volume3D, init: TubeTemplate, cfg: FitConfig):
        self.init = init
        self.cfg = cfg
        self.e1, self.e2 = orthonormal_frame(init.direction)
        lo, hi = vol.world_bounds()
        self.stencil = build_stencil(
            init, cfg.weight_window_factor, vol.spacing, bounds=(lo, hi)
        )
        self.y = vol.sample_many(self.stencil.points)
        # fixed sample set: cache |p|^2 so the per-eval axis distance needs
        # only two matvecs
        self._pnorm2 = np.einsum("ij,ij->i", self.stencil.points, self.stencil.points)
        # weighted variance of the data: an affine-invariant scale for
        # "residual is numerically zero" tests (noiseless volumes)
        w2 = self.stencil.weights ** 2
        ybar = float(w2 @ self.y) / float(w2.sum())
        self.y_scale = float(w2 @ (self.y - ybar) ** 2)
        half = cfg.gamma / 2.0
        self._gamma_half = int(half) if half.is_integer() and 1 <= half <= 8 else 0
        self._kernel = _get_residual_kernel() if self._gamma_half else None
        # rows: (init direction, e1, e2); geometry() mixes them with scalar
        # coefficients, which avoids per-call rotation algebra
        self._basis = np.stack([init.direction, self.e1, self.e2])
        # center offsets beyond the stencil's radial extent leave the data
        # window; clamp there
        self.offset_max = 2.0 * cfg.weight_window_factor * init.radius
        r0 = init.radius
        self.scales = np.array([r0, r0, r0, 1.0, 1.0])

    def clamp(self, theta: np.ndarray) -> np.ndarray:
        out = theta.copy()
        out[0] = min(max(out[0], self.cfg.r_min), self.cfg.r_max)
        out[1] = min(max(out[1], -self.offset_max), self.offset_max)
        out[2] = min(max(out[2], -self.offset_max), self.offset_max)
        return out

    def geometry(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Template geometry at theta.

        The axis is the composition of rotations about e1 (alpha) and e2
        (beta) applied to the init direction; because e1 and e2 complete
        the init direction to an orthonormal frame this reduces to
        cos(a)cos(b) v0 + sin(b) e1 - sin(a)cos(b) e2, already unit length.
        """
        r, a, b, alpha, beta = theta
        ca, sa = math.cos(alpha), math.sin(alpha)
        cb, sb = math.cos(beta), math.sin(beta)
        x0 = self.init.center + np.array([0.0, a, b]) @ self._basis
        v = np.array([ca * cb, sb, -sa * cb]) @ self._basis
        return x0, v, float(r)

    def residual(self, theta: np.ndarray):
        """(residual vector, rss, k, m) at clamped theta."""
        x0, v, r = self.geometry(self.clamp(theta))
        if self._kernel is not None:
            resid, rss, k, m, ok = self._kernel(
                self.stencil.points, self._pnorm2, self.stencil.weights,
                self.y, x0, v, r, self._gamma_half,
            )
            if not ok:
                raise SingularDesign("singular photometry")
            return resid, rss, k, m
        pts = self.stencil.points
        along = pts @ v - float(x0 @ v)
        d2 = self._pnorm2 - 2.0 * (pts @ x0) + float(x0 @ x0) - along * along
        np.maximum(d2, 0.0, out=d2)
        rg = r ** self.cfg.gamma
        tvals = rg / (_pow_half_gamma(d2, self.cfg.gamma) + rg)
        k, m, _, rss, resid = _photometry(tvals, self.y, self.stencil.weights)
        return resid, rss, k, m

    def _residual_columns(self, thetas: np.ndarray) -> np.ndarray:
        """Weighted residual vectors for several parameter vectors at once.

        One (N, C) pass turns the ten finite-difference evaluations of the
        Jacobian into a couple of matrix products. Raises SingularDesign if
        any column's photometry degenerates.
        """
        c = thetas.shape[0]
        x0s = np.empty((c, 3))
        vs = np.empty((c, 3))
        rs = np.empty(c)
        for i in range(c):
            x0s[i], vs[i], rs[i] = self.geometry(self.clamp(thetas[i]))
        pts = self.stencil.points
        along = pts @ vs.T - np.einsum("ij,ij->i", x0s, vs)[None, :]
        d2 = (self._pnorm2[:, None] - 2.0 * (pts @ x0s.T)
              + np.einsum("ij,ij->i", x0s, x0s)[None, :] - along * along)
        np.maximum(d2, 0.0, out=d2)
        rg = rs ** self.cfg.gamma
        tvals = rg[None, :] / (_pow_half_gamma(d2, self.cfg.gamma) + rg[None, :])
        w = self.stencil.weights
        w2 = w * w
        s11 = float(w2.sum())
        st1 = w2 @ tvals
        stt = w2 @ (tvals * tvals)
        sty = (w2 * self.y) @ tvals
        s1y = float(w2 @ self.y)
        tr = stt + s11
        disc = np.sqrt(np.maximum((stt - s11) ** 2 + 4.0 * st1 * st1, 0.0))
        lam_min = 0.5 * (tr - disc)
        lam_max = 0.5 * (tr + disc)
        det = stt * s11 - st1 * st1
        bad = (~np.isfinite(det)) | (det <= 0.0) | (lam_min <= 0.0) \
            | (lam_max > _SINGULAR_COND * lam_min)
        if np.any(bad):
            raise SingularDesign("singular photometry in finite-difference evals")
        ks = (s11 * sty - st1 * s1y) / det
        ms = (stt * s1y - st1 * sty) / det
        return w[:, None] * (tvals * ks[None, :] + ms[None, :] - self.y[:, None])

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        """Central finite differences of the residual vector in theta."""
        h = 1e-4 * self.scales
        if self._kernel is not None:
            J = np.empty((self.y.size, 5))
            for j in range(5):
                up = theta.copy()
                dn = theta.copy()
                up[j] += h[j]
                dn[j] -= h[j]
                r_up, _, _, _ = self.residual(up)
                r_dn, _, _, _ = self.residual(dn)
                J[:, j] = (r_up - r_dn) / (2.0 * h[j])
            return J
        thetas = np.repeat(theta[None, :], 10, axis=0)
        for j in range(5):
            thetas[2 * j, j] += h[j]
            thetas[2 * j + 1, j] -= h[j]
        cols = self._residual_columns(thetas)
        return (cols[:, 0::2] - cols[:, 1::2]) / (2.0 * h[None, :])


def fit_template(vol: Volume3D, init: TubeTemplate, cfg: FitConfig | None = None) -> FitResult:
    """Refine a tube template against the volume.

    Keeps the best geometry seen; a fit that hits the iteration budget is
    returned with ``converged=False`` rather than dropped, since downstream
    ranking decides its fate. Raises FitFailed when no state can be
    evaluated at all (degenerate stencil or singular photometry at the
    init and every trial).
    """
    cfg = cfg or FitConfig()
    if not vol.contains(init.center):
        raise FitFailed("init center outside the volume")
    try:
        problem = _FitProblem(vol, init, cfg)
    except DegenerateStencil as exc:
        raise FitFailed(str(exc)) from exc

    theta = np.array([init.radius, 0.0, 0.0, 0.0, 0.0])
    theta = problem.clamp(theta)
    try:
        resid, rss, _, _ = problem.residual(theta)
    except SingularDesign as exc:
        raise FitFailed(f"singular photometry at init: {exc}") from exc

    # all stopping tests are invariant under affine maps of the intensities,
    # so the fitted geometry does not depend on the image value scale
    rss_floor = 1e-20 * max(problem.y_scale, 1e-300)
    lam = cfg.initial_damping
    converged = rss <= rss_floor
    iterations = 0
    while not converged and iterations < cfg.max_iterations:
        iterations += 1
        try:
            J = problem.jacobian(theta)
        except SingularDesign:
            break
        grad = J.T @ resid
        if np.max(np.abs(grad)) <= cfg.gradient_tol * max(rss, rss_floor):
            converged = True
            break
        JtJ = J.T @ J
        diag = np.maximum(np.diag(JtJ), 1e-12 * np.max(np.diag(JtJ)) + 1e-300)
        accepted = False
        while lam < 1e12:
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= 5.0
                continue
            trial = problem.clamp(theta + delta)
            try:
                t_resid, t_rss, _, _ = problem.residual(trial)
            except SingularDesign:
                lam *= 5.0
                continue
            if t_rss <= rss:
                step = trial - theta
                theta, resid, rss = trial, t_resid, t_rss
                lam = max(lam * 0.3, 1e-12)
                accepted = True
                if (np.linalg.norm(step / problem.scales) <= cfg.step_tol
                        or rss <= rss_floor):
                    converged = True
                break
            lam *= 5.0
        if not accepted or converged:
            break

    x0, v, r = problem.geometry(theta)
    fitted = TubeTemplate(center=x0, direction=v, radius=r, gamma=cfg.gamma)

    # report photometry from a fresh stencil at the fitted geometry, so the
    # returned statistics are reproducible from the returned template alone
    lo, hi = vol.world_bounds()
    try:
        final_stencil = build_stencil(
            fitted, cfg.weight_window_factor, vol.spacing, bounds=(lo, hi)
        )
        y = vol.sample_many(final_stencil.points)
        tvals = template_values(final_stencil.points, fitted.center,
                                fitted.direction, fitted.radius, fitted.gamma)
        k, m, k_std, rss_final, _ = _photometry(tvals, y, final_stencil.weights)
    except (DegenerateStencil, SingularDesign) as exc:
        raise FitFailed(f"no valid photometry at fitted geometry: {exc}") from exc

    if k_std > 0.0:
        l_stat = (k - m) / k_std
    elif k == m:
        l_stat = 0.0
    else:
        l_stat = math.inf if k > m else -math.inf

    return FitResult(
        template=fitted,
        contrast=k,
        background=m,
        k_std=k_std,
        t_stat=l_stat,
        rss=rss_final,
        n_samples=len(final_stencil),
        converged=converged,
        iterations=iterations,
    )
