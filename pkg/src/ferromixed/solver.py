"""Incremental load stepping with a monolithic Newton solver.

Each load increment solves the four-field system for all unknowns at once.
The linearized problems are sparse, symmetric and indefinite (saddle-point
structure from the divergence constraint); they are factorized by a sparse
direct LU with partial pivoting, and every solution is verified against a
relative residual bound.

The Newton iteration backtracks on a block-scaled residual norm: the four
fields carry different physical units, and an unscaled norm lets the largest
block veto progress in the others.  Per step, each block is normalized by
its first-iterate magnitude (with a floor), so accepted iterates decrease a
dimensionless residual.  Non-convergent increments are bisected into
sub-increments up to a maximum depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .assembly import Assembler, SystemState
from .material import MaterialDomainError

__all__ = [
    "LinearSolveError",
    "LoadProgram",
    "NewtonError",
    "NewtonSettings",
    "StepLog",
    "newton_step_solve",
    "run_load_program",
    "solve_linear",
]

log = logging.getLogger("ferromixed.solver")


class LinearSolveError(RuntimeError):
    """Factorization failed or the linear residual check did not pass."""


class NewtonError(RuntimeError):
    """Newton did not converge within the iteration budget."""

    def __init__(self, message, iterations=0, residual=np.nan):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass
class NewtonSettings:
    max_iterations: int = 100
    rtol: float = 1e-8
    atol: float = 1e-10
    ls_backtrack: float = 0.5
    ls_max_backtracks: int = 20
    ls_sufficient_decrease: float = 1e-4
    # Treat the step as failed (so the caller can bisect the load increment)
    # after this many consecutive iterations with step length below
    # ls_backtrack**stall_exponent.  0 disables stall detection.
    stall_patience: int = 4
    stall_exponent: int = 8
    # When a step fails from the zero-increment start, retry with the
    # dissipation smoothing temporarily inflated by these factors (walked
    # down to 1, each level seeding the next).  Starting a large increment
    # at the true smoothing scale forces the polarization increments to grow
    # multiplicatively from that tiny scale; continuation sidesteps the
    # crawl.  Empty tuple disables the fallback.
    regularization_ladder: tuple = (64.0, 16.0, 4.0)

    def __post_init__(self):
        if min(self.max_iterations, self.rtol, self.atol,
               self.ls_backtrack, self.ls_max_backtracks,
               self.ls_sufficient_decrease) <= 0:
            raise ValueError("Newton settings must be positive")
        if not 0.0 < self.ls_backtrack < 1.0:
            raise ValueError("backtracking factor must lie in (0, 1)")


@dataclass
class LoadProgram:
    """Strictly increasing load factors; depth 0 disables sub-stepping."""

    factors: tuple
    max_substep_depth: int = 4

    def __post_init__(self):
        factors = tuple(float(f) for f in self.factors)
        if not factors:
            raise ValueError("load program needs at least one factor")
        if any(b <= a for a, b in zip(factors, factors[1:])):
            raise ValueError("load factors must be strictly increasing")
        if self.max_substep_depth < 0:
            raise ValueError("max_substep_depth must be >= 0")
        self.factors = factors


@dataclass
class StepLog:
    """One machine-parsable record per target load factor."""

    step: int
    lam: float
    iterations: int
    residual: float
    substeps: int

    CSV_HEADER = "step,lambda,newton_iterations,final_residual,substeps"

    def csv_row(self) -> str:
        return (f"{self.step},{self.lam:.10g},{self.iterations},"
                f"{self.residual:.6e},{self.substeps}")


try:
    from cvxopt import matrix as _cvx_matrix, spmatrix as _cvx_spmatrix
    from cvxopt import umfpack as _umfpack
    _HAVE_UMFPACK = True
except ImportError:  # pragma: no cover - cvxopt is a hard dependency
    _HAVE_UMFPACK = False


def _factor_umfpack(A):
    coo = A.tocoo()
    Ac = _cvx_spmatrix(coo.data, coo.row.astype(int), coo.col.astype(int),
                       coo.shape)
    try:
        symbolic = _umfpack.symbolic(Ac)
        numeric = _umfpack.numeric(Ac, symbolic)
    except ArithmeticError as exc:
        raise LinearSolveError(f"factorization failed: {exc}") from exc

    def solve_once(rhs):
        v = _cvx_matrix(rhs)
        _umfpack.solve(Ac, numeric, v)
        return np.asarray(v).ravel()

    return solve_once


def _factor_superlu(A):
    try:
        lu = scipy.sparse.linalg.splu(scipy.sparse.csc_matrix(A))
    except RuntimeError as exc:
        raise LinearSolveError(f"factorization failed: {exc}") from exc
    return lu.solve


class _Factorization:
    """Equilibrated direct factorization with iterative refinement.

    The four fields differ by many orders of magnitude in their natural
    units, so the matrix is symmetrically scaled by the square root of its
    row infinity norms before factorization (multifrontal LU with threshold
    pivoting via UMFPACK; SuperLU as fallback; both stable for symmetric
    indefinite systems).  Every solve is refined until the relative residual
    passes 1e-9 and raises when that is unattainable.
    """

    def __init__(self, A):
        A = scipy.sparse.csc_matrix(A)
        self.A = A
        row_max = np.abs(A).max(axis=1).toarray().ravel()
        self.d = np.sqrt(np.where(row_max > 0.0, row_max, 1.0))
        Dinv = scipy.sparse.diags(1.0 / self.d)
        self.As = (Dinv @ A @ Dinv).tocsc()
        backend = _factor_umfpack if _HAVE_UMFPACK else _factor_superlu
        self._solve_once = backend(self.As)
        coo = self.As.tocoo()
        self._ld = (coo.data.astype(np.longdouble), coo.row, coo.col)

    def _residual_ld(self, bs, y):
        """bs - As @ y accumulated in extended precision.

        Refinement with an extra-precise residual reaches machine-level
        backward error even when the matrix is badly conditioned, which the
        switching tangents can be.
        """
        data, rows, cols = self._ld
        r = bs.astype(np.longdouble).copy()
        np.subtract.at(r, rows, data * y.astype(np.longdouble)[cols])
        return r.astype(float)

    def solve(self, b: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        bnorm = np.linalg.norm(b)
        bs = b / self.d
        y = self._solve_once(bs)
        if not np.all(np.isfinite(y)):
            raise LinearSolveError("linear solve produced non-finite entries")
        if bnorm == 0.0:
            return y / self.d
        for _ in range(5):
            x = y / self.d
            resid = np.linalg.norm(self.A @ x - b) / bnorm
            if resid <= tol:
                return x
            y = y + self._solve_once(self._residual_ld(bs, y))
        x = y / self.d
        resid = np.linalg.norm(self.A @ x - b) / bnorm
        if resid > tol:
            raise LinearSolveError(
                f"linear residual {resid:.3e} exceeds tolerance {tol:g} "
                "(matrix singular or severely ill-conditioned)")
        return x


def solve_linear(A, b: np.ndarray) -> np.ndarray:
    """Direct solve of a sparse symmetric indefinite system.

    Factorizes with equilibration and threshold-pivoted LU and refines the
    solution until the relative residual passes 1e-9; raises
    :class:`LinearSolveError` otherwise (singular or severely
    ill-conditioned matrix).
    """
    return _Factorization(A).solve(b)


class _BlockNorm:
    """Residual norm with fixed physical per-block scales.

    Residual entries of the four fields carry different units (force-like,
    voltage-flux-like, field-volume-like, charge-like).  Each block is
    scaled by a characteristic magnitude built from the material constants
    and the mesh size, so the line search trades progress between blocks at
    physically comparable rates.
    """

    def __init__(self, assembler):
        spaces = assembler.spaces
        params = assembler.material.params
        mesh = assembler.mesh
        self.offsets = spaces.offsets
        h = (6.0 * mesh.tet_volumes.mean()) ** (1.0 / 3.0)
        t_scale = params.youngs_modulus * params.saturation_strain
        e0 = params.coercive_field
        p0 = params.saturation_polarization
        # Basis amplitudes: H1 and L2 functions are O(1), their gradients
        # O(1/h); the flux-moment dual basis has amplitude O(1/h^2).
        self.scales = np.array([
            t_scale * h * h,        # stress against displacement gradients
            e0 * h,                 # electric field against flux duals
            e0 * h ** 3,            # driving force against polarization
            p0 * h * h,             # divergence constraint
        ])

    def __call__(self, r: np.ndarray) -> float:
        o = self.offsets
        total = 0.0
        for b in range(4):
            block = r[o[b]:o[b + 1]]
            total += (np.linalg.norm(block) / self.scales[b]) ** 2
        return float(np.sqrt(total))


def newton_step_solve(assembler: Assembler, state0: SystemState, lam: float,
                      settings: NewtonSettings | None = None,
                      frozen_polarization: bool = False,
                      initial_increment: np.ndarray | None = None):
    """Advance one converged state to load factor ``lam``.

    Returns ``(state, iterations)``; raises :class:`NewtonError` on failure
    (callers may sub-step).  With ``frozen_polarization`` the polarization
    block is held at its current values, which reduces the step to a linear
    electromechanical solve (used for consistent initial states).

    ``initial_increment`` seeds the Newton iteration away from the zero
    increment.  The regularized incremental problem has a unique solution
    (strong monotonicity), so the seed affects only the iteration count: the
    transverse curvature of the regularized dissipation scales like
    E0/|dP|, so an increment that must grow from the regularization scale up
    to its converged size can only do so multiplicatively, and a seed of the
    right magnitude shortcuts that crawl.
    """
    settings = settings or NewtonSettings()
    spaces = assembler.spaces
    state = state0.advance(lam)

    mask = assembler.bcs.mask.copy()
    if frozen_polarization:
        o = spaces.offsets
        mask[o[2]:o[3]] = True

    def residual_of(x):
        r = assembler.assemble_residual(state.with_vector(spaces, x))
        r[mask] = 0.0
        return r

    x = state.pack()
    # ensure prescribed values are imposed exactly before iterating
    x[assembler.bcs.mask] = assembler.bcs.values[assembler.bcs.mask]
    base = x.copy()
    norm_fn = _BlockNorm(assembler)
    x_init = base
    if initial_increment is not None:
        seed = initial_increment.copy()
        seed[mask] = 0.0
        try:
            residual_of(base + seed)
            x_init = base + seed
        except MaterialDomainError:
            pass
    norm0 = max(norm_fn(residual_of(base)), 1e-300)
    target = max(settings.rtol * norm0, settings.atol)

    try:
        x, iters, rnorm = _newton_iterate(
            assembler, state, x_init, mask, residual_of, norm_fn, target,
            settings, frozen_polarization, lam)
    except NewtonError as err:
        if not settings.regularization_ladder:
            raise
        # Continuation in the dissipation smoothing: coarse levels are easy
        # to solve and place the polarization increment at the right
        # magnitude for the next level; only the final level (scale 1)
        # defines the accepted state.
        iters = err.iterations
        x_cur = base.copy()
        try:
            for scale in (*settings.regularization_ladder, 1.0):
                assembler.dissipation_scale = scale
                lvl_norm0 = max(norm_fn(residual_of(base)), 1e-300)
                lvl_target = target if scale == 1.0 else max(
                    1e-5 * lvl_norm0, settings.atol)
                x_cur, its, rnorm = _newton_iterate(
                    assembler, state, x_cur, mask, residual_of, norm_fn,
                    lvl_target, settings, frozen_polarization, lam)
                iters += its
        except NewtonError as err2:
            raise NewtonError(
                f"regularization continuation failed at scale "
                f"{assembler.dissipation_scale:g}: {err2}",
                iterations=iters + err2.iterations,
                residual=err2.residual) from None
        finally:
            assembler.dissipation_scale = 1.0
        x = x_cur

    out = state.with_vector(spaces, x)
    out.lam = lam
    out.converged = True
    out.newton_iterations = iters
    out.residual_norm = rnorm
    return out, iters


def _newton_iterate(assembler, state, x_init, mask, residual_of, norm_fn,
                    target, settings, frozen_polarization, lam):
    """Damped Newton iteration; returns (x, iterations, residual norm)."""
    spaces = assembler.spaces

    def direction(A, rhs):
        """Newton direction; tolerates modest ill-conditioning and falls
        back to a damped tangent near singular states (the rotation of the
        polarization can transiently soften the incremental problem)."""
        try:
            f = _Factorization(A)
            return f, f.solve(rhs, tol=1e-6)
        except LinearSolveError:
            pass
        scale = scipy.sparse.diags(np.abs(A).max(axis=1).toarray().ravel())
        for tau in (1e-8, 1e-6, 1e-4):
            try:
                f = _Factorization(A + tau * scale)
                return f, f.solve(rhs, tol=1e-6)
            except LinearSolveError:
                continue
        raise LinearSolveError("tangent singular even with damping")

    x = x_init.copy()
    r = residual_of(x)
    rnorm = norm_fn(r)
    iters = 0
    slow_streak = 0
    alpha_prev = 1.0
    stale_uses = 0
    factor = None
    alpha_floor = settings.ls_backtrack ** settings.stall_exponent
    while rnorm > target and iters < settings.max_iterations:
        # In the crawl regime (short accepted steps) the tangent barely pays
        # for itself; reuse the factorization for up to two iterations.
        refresh = factor is None or alpha_prev >= 0.5 or stale_uses >= 2
        try:
            if refresh:
                A = assembler.assemble_tangent(state.with_vector(spaces, x))
                if frozen_polarization:
                    free = (~mask).astype(float)
                    Df = scipy.sparse.diags(free)
                    A = Df @ A @ Df + scipy.sparse.diags(mask.astype(float))
                factor, dx = direction(A, -r)
                stale_uses = 0
            else:
                dx = factor.solve(-r, tol=1e-6)
                stale_uses += 1
        except LinearSolveError as exc:
            raise NewtonError(
                f"tangent solve failed at |r| = {rnorm:.3e} (lam = {lam:g}): "
                f"{exc}", iterations=iters, residual=rnorm) from None
        dx[mask] = 0.0

        alpha = min(1.0, 4.0 * alpha_prev)
        accepted = False
        for _ in range(settings.ls_max_backtracks):
            try:
                r_try = residual_of(x + alpha * dx)
            except MaterialDomainError:
                alpha *= settings.ls_backtrack
                continue
            if norm_fn(r_try) <= (1.0 - settings.ls_sufficient_decrease
                                  * alpha) * rnorm:
                accepted = True
                break
            alpha *= settings.ls_backtrack
        if not accepted and stale_uses > 0:
            factor = None  # stale direction failed; retry with fresh tangent
            alpha_prev = 1.0
            continue
        if not accepted:
            raise NewtonError(
                f"line search stalled at |r| = {rnorm:.3e} (lam = {lam:g})",
                iterations=iters, residual=rnorm)
        x = x + alpha * dx
        r = r_try
        rnorm = norm_fn(r)
        alpha_prev = alpha
        iters += 1
        # crawling with tiny step lengths: give up early so the load
        # increment can be bisected instead of burning the iteration budget
        slow_streak = slow_streak + 1 if alpha <= alpha_floor else 0
        if settings.stall_patience and slow_streak >= settings.stall_patience:
            raise NewtonError(
                f"progress stalled (alpha <= {alpha_floor:g} for "
                f"{slow_streak} iterations, |r| = {rnorm:.3e}, lam = {lam:g})",
                iterations=iters, residual=rnorm)

    if rnorm > target:
        raise NewtonError(
            f"no convergence in {iters} iterations (|r| = {rnorm:.3e}, "
            f"lam = {lam:g})", iterations=iters, residual=rnorm)
    return x, iters, rnorm


def run_load_program(assembler: Assembler, initial: SystemState,
                     program: LoadProgram,
                     settings: NewtonSettings | None = None):
    """Run all load factors with bisection sub-stepping on failures.

    Returns ``(history, logs)``: one converged state and one
    :class:`StepLog` per target factor.  The initial state must be in
    equilibrium at its own load factor.
    """
    settings = settings or NewtonSettings()
    if program.max_substep_depth == 0 and settings.stall_patience:
        # without bisection to fall back on, slow steps must grind through
        settings = replace(settings, stall_patience=0)
    history = []
    logs = []
    current = initial
    lam_prev = initial.lam
    last_increment = None   # (increment vector, lam width) of last solve

    for step, lam in enumerate(program.factors):
        iterations = 0
        substeps = 0

        def advance(frm, to, depth):
            nonlocal current, iterations, substeps, last_increment
            seed = None
            if last_increment is not None and last_increment[1] > 0.0:
                seed = last_increment[0] * ((to - frm) / last_increment[1])
            try:
                nxt, its = newton_step_solve(assembler, current, to, settings,
                                             initial_increment=seed)
            except NewtonError as err:
                if depth >= program.max_substep_depth:
                    raise NewtonError(
                        f"step {step} failed at lam={to:g} after "
                        f"{depth} bisections: {err}",
                        iterations=iterations + err.iterations,
                        residual=err.residual) from None
                mid = 0.5 * (frm + to)
                substeps += 1
                log.info("bisecting load step: lam %.6g -> %.6g", frm, to)
                advance(frm, mid, depth + 1)
                advance(mid, to, depth + 1)
                return
            last_increment = (nxt.pack() - current.pack(), to - frm)
            current = nxt
            iterations += its

        advance(lam_prev, lam, 0)
        lam_prev = lam
        history.append(current)
        logs.append(StepLog(step=step, lam=lam, iterations=iterations,
                            residual=current.residual_norm,
                            substeps=substeps))
        log.info("step %d: lam=%.6g iters=%d residual=%.3e substeps=%d",
                 step, lam, iterations, current.residual_norm, substeps)
    return history, logs
