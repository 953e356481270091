"""Quasi-static load stepping for the coupled fracture system.

Each increment solves the time-lagged system with a joint Newton iteration
in which the irreversibility bound ``phi_n <= phi_{n-1}`` is enforced by a
primal-dual active set: DoFs whose multiplier/violation indicator turns
positive are pinned to the bound, the remaining rows see a plain Newton
update, and the increment counts as converged only when the residual is
small *and* the active set repeats.  Diverged increments are retried with
halved step sizes (two sub-steps per halving, up to four levels).

Mesh adaptivity follows the predictor-corrector rule: after a converged
increment, cells whose minimal nodal phase field fell below the threshold
are refined, the previous state is transferred by embedding interpolation,
and the same increment is recomputed on the new mesh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import qoi
from .assembly import (
    AssembledSystem,
    FemSpace,
    ModelKinds,
    State,
    assemble_system,
    make_space,
)
from .dofs import build_constraints
from .elements import nodes_of, shape_eval
from .meshing import Mesh, RefinementMarks, embedding_map, refine

log = logging.getLogger("pffrac.solver")

BOUND_TOL = 1e-10


class SolverError(RuntimeError):
    pass


class LinearSolveError(SolverError):
    pass


class NewtonError(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Numerical controls of the increment solver."""

    dt: float = 1e-2
    newton_rel_tol: float = 1e-8
    newton_abs_tol: float = 1e-10
    max_newton_iters: int = 40
    max_active_set_iters: int = 60
    refine_threshold: float = 0.7
    max_refine_levels: int = 0
    linear_solver: str = "direct_sparse"  # or iterative_block_preconditioned
    active_set_constant: float | None = None  # None -> 100 * gc / eps
    complementarity_tol: float = 1e-10
    max_halvings: int = 4
    line_search: bool = True
    quad_order: int = 3


@dataclass(frozen=True)
class StopCriterion:
    """Operational definition of 'loaded until total failure'."""

    t_end: float = np.inf
    force_drop_fraction: float = 0.01
    min_peak_force: float = 1e-6
    check_rupture: bool = True
    crack_threshold: float = 0.1


@dataclass
class ModelContext:
    """Everything an increment needs besides the previous state."""

    space: FemSpace
    params: object
    kinds: ModelKinds
    dirichlet: dict
    body_force: object = None
    neumann: dict | None = None

    def constraints_at(self, t):
        return build_constraints(
            self.space.mesh, self.space.dofmap, self.dirichlet, t
        )


@dataclass
class IncrementStats:
    newton_iters: int = 0
    active_set_size: int = 0
    active_set_changes: int = 0
    halvings: int = 0
    residual: float = 0.0
    clamped: int = 0
    active_dofs: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Linear solve
# ---------------------------------------------------------------------------

def linear_solve(system: AssembledSystem, config: SolverConfig = SolverConfig(),
                 field_splits=None):
    """Newton update from an assembled system: solve J x = -residual.

    The direct path factorizes with SuperLU and verifies the backward error
    to 1e-10; the iterative path runs GMRES with a block-diagonal
    preconditioner built from ``field_splits`` (offsets of the field blocks
    in the system numbering) and verifies to 1e-8.
    """
    J = system.jacobian.tocsc()
    b = -system.residual
    nb = np.linalg.norm(b)
    if nb == 0:
        return np.zeros_like(b)

    if config.linear_solver == "direct_sparse":
        try:
            lu = spla.splu(J)
        except RuntimeError as exc:  # singular factorization
            diag = _zero_pivot_hint(J)
            raise LinearSolveError(f"singular system: {exc}{diag}") from exc
        x = lu.solve(b)
        check_tol = 1e-10
    elif config.linear_solver == "iterative_block_preconditioned":
        M = _block_preconditioner(J, field_splits)
        x, info = spla.gmres(J, b, M=M, rtol=1e-10, atol=0.0, maxiter=2000,
                             restart=200)
        if info != 0:
            raise LinearSolveError(f"GMRES failed to converge (info={info})")
        check_tol = 1e-8
    else:
        raise SolverError(f"unknown linear solver '{config.linear_solver}'")

    res = np.linalg.norm(J @ x - b) / nb
    if not np.isfinite(res) or res > check_tol:
        raise LinearSolveError(
            f"linear solve residual {res:.3e} exceeds {check_tol:.0e}"
        )
    return x


def _zero_pivot_hint(J):
    d = np.abs(J.diagonal())
    if d.size and d.min() < 1e-300:
        return f" (zero diagonal at dof {int(np.argmin(d))})"
    return ""


def _block_preconditioner(J, field_splits):
    if not field_splits:
        field_splits = [0, J.shape[0]]
    lus = []
    for a, b in zip(field_splits[:-1], field_splits[1:]):
        lus.append((slice(a, b), spla.splu(J[a:b, a:b].tocsc())))

    def apply(v):
        out = np.empty_like(v)
        for sl, lu in lus:
            out[sl] = lu.solve(v[sl])
        return out

    return spla.LinearOperator(J.shape, matvec=apply)


# ---------------------------------------------------------------------------
# One increment
# ---------------------------------------------------------------------------

def _phi_free_dofs(space, constraints):
    fd = space.dofmap.field("phi")
    dofs = fd.offset + np.arange(fd.n_dofs)
    return dofs[constraints.free_index[dofs] >= 0]


def _field_splits(space, constraints):
    splits = [0]
    for name in space.dofmap.fields:
        sl = space.dofmap.field_slice(name)
        n = int(np.sum(constraints.free_index[sl] >= 0))
        splits.append(splits[-1] + n)
    return splits


def solve_increment(ctx: ModelContext, state_prev: State, config: SolverConfig,
                    dt=None, active_prev=None):
    """Advance one loading increment of size ``dt`` (default config.dt).

    Returns ``(state, stats)``.  On Newton divergence, the increment is
    bisected into sub-steps down to dt/2**max_halvings before giving up.
    """
    dt = config.dt if dt is None else dt
    return _solve_adaptive(ctx, state_prev, config, dt, 0, active_prev)


def _solve_adaptive(ctx, state_prev, config, dt, depth, active_prev):
    try:
        state, stats = _solve_single(ctx, state_prev, config,
                                     state_prev.t + dt, active_prev)
        stats.halvings = depth
        return state, stats
    except (NewtonError, LinearSolveError) as exc:
        if depth >= config.max_halvings:
            raise SolverError(
                f"increment at t={state_prev.t + dt:.6g} failed after "
                f"{depth} halvings: {exc}"
            ) from exc
        log.warning("halving increment at t=%.6g (%s)", state_prev.t + dt, exc)
        mid, stats1 = _solve_adaptive(ctx, state_prev, config, 0.5 * dt,
                                      depth + 1, active_prev)
        state, stats2 = _solve_adaptive(ctx, mid, config, 0.5 * dt,
                                        depth + 1, None)
        stats2.newton_iters += stats1.newton_iters
        stats2.halvings = depth + 1
        return state, stats2


def _solve_single(ctx, state_prev, config, t_new, active_prev):
    space = ctx.space
    params = ctx.params
    cs = ctx.constraints_at(t_new)
    splits = _field_splits(space, cs)

    phi_off = space.dofmap.field("phi").offset
    phi_free = _phi_free_dofs(space, cs)
    phi_free_local = phi_free - phi_off
    bound = state_prev.phi.copy()

    c_as = config.active_set_constant
    if c_as is None:
        c_as = 100.0 * params.gc / params.eps

    x = space.pack(state_prev)
    x = cs.apply(x)
    state = space.unpack(x, t=t_new, n=state_prev.n + 1)

    active = np.array([], dtype=np.int64) if active_prev is None else \
        np.intersect1d(active_prev, phi_free)
    stats = IncrementStats()
    norm0 = None
    as_changes = 0
    final_system = None

    for it in range(1, config.max_newton_iters + config.max_active_set_iters + 1):
        system = assemble_system(
            space, state, state_prev.phi, params, ctx.kinds,
            constraints=cs, active_set=active, phi_bound=bound,
            body_force=ctx.body_force, neumann=ctx.neumann,
        )
        # primal-dual update: multiplier = -raw residual of the phi rows
        mu = -system.raw_residual[cs.free_index[phi_free]]
        violation = state.phi[phi_free_local] - bound[phi_free_local]
        new_active = phi_free[mu + c_as * violation > 0]

        as_stable = np.array_equal(new_active, active)
        rnorm = np.linalg.norm(system.residual)
        if norm0 is None:
            norm0 = max(rnorm, 1e-300)
        stats.newton_iters = it
        stats.residual = rnorm
        log.debug(
            "  newton %2d: |R|=%.3e active=%d stable=%s",
            it, rnorm, len(new_active), as_stable,
        )
        converged = rnorm <= max(config.newton_rel_tol * norm0,
                                 config.newton_abs_tol)
        if converged and as_stable:
            stats.active_set_size = len(active)
            stats.active_set_changes = as_changes
            final_system = system
            break
        if not as_stable:
            as_changes += 1
            if as_changes > config.max_active_set_iters:
                raise NewtonError(
                    f"active set cycling beyond {config.max_active_set_iters} "
                    f"iterations"
                )
            active = new_active
            system = assemble_system(
                space, state, state_prev.phi, params, ctx.kinds,
                constraints=cs, active_set=active, phi_bound=bound,
                body_force=ctx.body_force, neumann=ctx.neumann,
            )
            rnorm = np.linalg.norm(system.residual)

        delta_free = linear_solve(system, config, splits)
        step = cs.expand(delta_free)

        if config.line_search:
            x_new, _ = _line_search(ctx, space, cs, state, state_prev,
                                    active, bound, x, step, rnorm)
        else:
            x_new = x + step
        if x_new is None:
            raise NewtonError(f"line search stalled at |R|={rnorm:.3e}")
        x = x_new
        state = space.unpack(x, t=t_new, n=state_prev.n + 1)
        if not np.all(np.isfinite(x)):
            raise NewtonError("non-finite iterate")
    else:
        raise NewtonError(
            f"no convergence after {stats.newton_iters} iterations "
            f"(|R|={stats.residual:.3e})"
        )

    state, clamped = _finalize_phi(space, cs, state, bound)
    stats.clamped = clamped
    stats.active_dofs = active
    _check_complementarity(space, cs, final_system, state, bound, active, config)
    return state, stats


def _line_search(ctx, space, cs, state, state_prev, active, bound, x, step,
                 rnorm, max_backtracks=8):
    alpha = 1.0
    best = None
    for _ in range(max_backtracks):
        x_try = x + alpha * step
        st = space.unpack(x_try, t=state.t, n=state.n)
        try:
            sys_try = assemble_system(
                space, st, state_prev.phi, ctx.params, ctx.kinds,
                constraints=cs, active_set=active, phi_bound=bound,
                body_force=ctx.body_force, neumann=ctx.neumann,
            )
            rn = np.linalg.norm(sys_try.residual)
        except Exception:
            rn = np.inf
        if np.isfinite(rn) and rn <= (1.0 - 1e-4 * alpha) * rnorm:
            return x_try, rn
        if best is None or (np.isfinite(rn) and rn < best[1]):
            best = (x_try, rn)
        alpha *= 0.5
    if best is not None and np.isfinite(best[1]):
        # accept the least-bad step; semismooth steps may transiently grow
        return best
    return None, None


def _finalize_phi(space, cs, state, bound):
    """Defensive clamp into [0, 1] and below the bound, on free DoFs."""
    x = space.pack(state)
    sl = space.dofmap.field_slice("phi")
    free = cs.free_index[np.arange(sl.start, sl.stop)] >= 0
    phi = x[sl]
    target = np.minimum(np.clip(phi, 0.0, 1.0), np.clip(bound, 0.0, 1.0))
    changed = free & (np.abs(target - phi) > 0)
    n_big = int(np.sum(np.abs(target - phi)[changed] > 1e-8))
    if n_big:
        log.info("clamped %d phi DoFs by more than 1e-8", n_big)
    phi = np.where(free, target, phi)
    x[sl] = phi
    x = cs.apply(x)
    return space.unpack(x, t=state.t, n=state.n), int(np.sum(changed))


def _check_complementarity(space, cs, system, state, bound, active, config):
    """Verify KKT conditions of the converged increment (defensive)."""
    fd = space.dofmap.field("phi")
    phi_free = _phi_free_dofs(space, cs)
    loc = phi_free - fd.offset
    mu = -system.raw_residual[cs.free_index[phi_free]]
    is_active = np.isin(phi_free, active)
    tol = config.complementarity_tol
    scale = max(1.0, np.abs(mu).max() if mu.size else 1.0)
    bad_active = is_active & (mu < -tol * scale - tol)
    bad_bound = state.phi[loc] > bound[loc] + BOUND_TOL
    if np.any(bad_bound):
        raise SolverError("irreversibility bound violated after increment")
    if np.any(bad_active):
        log.warning(
            "%d active DoFs with negative multiplier (min %.2e)",
            int(np.sum(bad_active)), float(mu[bad_active].min()),
        )


# ---------------------------------------------------------------------------
# Predictor-corrector refinement
# ---------------------------------------------------------------------------

def refinement_marks(space: FemSpace, phi, rho, max_levels) -> RefinementMarks:
    """Mark cells whose minimal nodal phase field dropped below rho."""
    mesh = space.mesh
    phi_cells = phi[mesh.cells]  # Q1 nodal values per cell
    flags = (phi_cells.min(axis=1) < rho) & (mesh.cell_level < max_levels)
    return RefinementMarks(flags)


def transfer_state(old_space: FemSpace, new_space: FemSpace, state: State) -> State:
    """Embed a state into a once-refined mesh (Q1/Q2 prolongation)."""
    old_cell, origin, scale = embedding_map(new_space.mesh)
    out = {}
    for name, fd in new_space.dofmap.fields.items():
        deg = fd.spec.degree
        comp = fd.spec.components
        ref = nodes_of(deg)                              # (nn, 2)
        xi_old = origin[:, None, :] + scale[:, None, None] * (ref[None] + 1.0)
        N, _ = shape_eval(deg, xi_old.reshape(-1, 2))
        N = N.reshape(new_space.mesh.n_cells, len(ref), -1)
        old_fd = old_space.dofmap.field(name)
        old_nodes = old_fd.cell_nodes[old_cell]          # (m_new, nn_old)
        if name == "u":
            src = state.u
        elif name == "p":
            src = state.p
        else:
            src = state.phi
        vals = np.empty((fd.n_nodes, comp))
        for c in range(comp):
            coeff = src[old_nodes * comp + c]            # (m_new, nn_old)
            node_vals = np.einsum("mni,mi->mn", N, coeff)
            vals[fd.cell_nodes, c] = node_vals
        out[name] = vals.reshape(-1) if comp > 1 else vals[:, 0]
    return State(out["u"], out["phi"], out.get("p"), state.t, state.n)


def predictor_corrector_step(ctx: ModelContext, state: State,
                             state_prev: State, config: SolverConfig):
    """Refine where the crack indicator crossed the threshold.

    Returns ``(new_ctx, new_state_prev, redo)``.  When ``redo`` is True the
    caller must recompute the increment from the transferred previous state
    on the refined mesh.
    """
    marks = refinement_marks(ctx.space, state.phi, config.refine_threshold,
                             config.max_refine_levels)
    if not marks.flags.any():
        return ctx, state_prev, False
    new_mesh, changed = refine(ctx.space.mesh, marks)
    if not changed:
        return ctx, state_prev, False
    log.info("predictor-corrector refinement: %d -> %d cells",
             ctx.space.mesh.n_cells, new_mesh.n_cells)
    new_space = FemSpace(new_mesh, ctx.space.fields, ctx.space.quad_order)
    new_prev = transfer_state(ctx.space, new_space, state_prev)
    new_ctx = replace(ctx, space=new_space)
    return new_ctx, new_prev, True


# ---------------------------------------------------------------------------
# Load loop
# ---------------------------------------------------------------------------

@dataclass
class TimeSeriesRow:
    step: int
    t_s: float
    traverse_mm: float
    Fy_paper_literal: float
    Fy_thickness_scaled_N: float
    Fx_N: float
    crack_mm: float
    E_elastic: float
    E_crack: float
    newton_iters: int
    active_set: int
    dof_u: int
    dof_p_phi: int


@dataclass
class TimeSeries:
    rows: list = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def __len__(self):
        return len(self.rows)


@dataclass
class LoadLoopResult:
    series: TimeSeries
    ctx: ModelContext
    state: State
    stopped_by: str


def run_load_loop(ctx: ModelContext, config: SolverConfig,
                  stop: StopCriterion = StopCriterion(),
                  traverse_rate=200.0 / 60.0, qoi_options=None,
                  on_increment=None, initial_state=None) -> LoadLoopResult:
    """March increments until total failure or ``stop.t_end``.

    ``traverse_rate`` (mm/s) only feeds the reported traverse displacement;
    the actual loading lives in the Dirichlet program of ``ctx``.
    ``on_increment(ctx, state, row)`` is called after every accepted
    increment (snapshots, logging).
    """
    opts = dict(sigma_eval="degraded", thickness=2.0, crack_threshold=0.1,
                force_tag="top")
    if qoi_options:
        opts.update(qoi_options)

    state_prev = initial_state if initial_state is not None else \
        _initial_state(ctx)
    series = TimeSeries()
    active = None
    peak = 0.0
    stopped = "t_end"
    step = 0

    while state_prev.t < stop.t_end - 1e-12:
        step += 1
        state, stats = solve_increment(ctx, state_prev, config,
                                       active_prev=active)
        # predictor-corrector: refine and redo this increment if needed
        redo_guard = 0
        while config.max_refine_levels > 0:
            ctx2, prev2, redo = predictor_corrector_step(ctx, state,
                                                         state_prev, config)
            if not redo:
                break
            ctx, state_prev = ctx2, prev2
            active = None
            state, stats = solve_increment(ctx, state_prev, config)
            redo_guard += 1
            if redo_guard > config.max_refine_levels + 1:
                raise SolverError("predictor-corrector failed to settle")

        active = getattr(stats, "active_dofs", None)
        row = _record_row(ctx, state, stats, step, traverse_rate, opts)
        series.append(row)
        if on_increment is not None:
            on_increment(ctx, state, row)

        peak = max(peak, row.Fy_thickness_scaled_N)
        if (
            peak > stop.min_peak_force
            and row.Fy_thickness_scaled_N < stop.force_drop_fraction * peak
        ):
            stopped = "force_drop"
            state_prev = state
            break
        if stop.check_rupture and qoi.ruptured(ctx.space, state,
                                               stop.crack_threshold):
            stopped = "rupture"
            state_prev = state
            break
        state_prev = state

    return LoadLoopResult(series, ctx, state_prev, stopped)


def _initial_state(ctx: ModelContext):
    """phi = 1 everywhere except notch-face DoFs when phi is pinned there."""
    state = ctx.space.zero_state(phi_value=1.0)
    cs = ctx.constraints_at(0.0)
    x = ctx.space.pack(state)
    x = cs.apply(x)
    return ctx.space.unpack(x, t=0.0, n=0)


def _record_row(ctx, state, stats, step, traverse_rate, opts):
    space = ctx.space
    force = qoi.boundary_force(space, state, ctx.params, ctx.kinds,
                               tag=opts["force_tag"],
                               sigma_eval=opts["sigma_eval"],
                               thickness=opts["thickness"])
    path = qoi.crack_path(space, state, threshold=opts["crack_threshold"])
    e_el, e_cr = qoi.energies(space, state, ctx.params, ctx.kinds)
    counts = space.dofmap.counts()
    return TimeSeriesRow(
        step=step,
        t_s=state.t,
        traverse_mm=traverse_rate * state.t,
        Fy_paper_literal=force.fy_mean,
        Fy_thickness_scaled_N=force.fy_N,
        Fx_N=force.fx_N,
        crack_mm=qoi.crack_length(path),
        E_elastic=e_el,
        E_crack=e_cr,
        newton_iters=stats.newton_iters,
        active_set=stats.active_set_size,
        dof_u=counts["u"],
        dof_p_phi=counts["phi"],
    )
