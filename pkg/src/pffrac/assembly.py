"""Residual/Jacobian assembly for the coupled fracture system.

Two formulations share one code path:

* mixed: three fields (u, p, phi); the elasticity pair carries the split
  stress with the pressure unknown, the mass term of the incompressibility
  equation is deliberately not degraded.
* classical: two fields (u, phi); the pressure is substituted by
  lam * tr(E) pointwise.

The degradation factor in the elasticity equations is evaluated at the
previous increment's phase field (time lag), so those equations do not
couple to the current phi; the phi equation couples to (u, p) through its
driving term.  The assembled ``residual`` is the weak-form left-hand side
(the energy gradient for the variationally consistent terms) and
``jacobian`` is its branch-frozen derivative, so finite differences of the
residual reproduce the Jacobian.

Assembly is vectorized over cells and deterministic (fixed summation
order), which makes repeated runs bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import materials as mat
from .dofs import MIXED_FIELDS, ConstraintSet, DofMap, classical_fields, distribute_dofs
from .elements import gauss_rule, gauss_rule_1d, shape_eval
from .materials import CONTRACTION_WEIGHTS as WV
from .materials import IDENTITY_VOIGT as IV


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelKinds:
    """Crack-energy functional, stress split, and positive-part flavor."""

    crack: str = "wu"                 # wu | at1 | at2
    split: str = "amor_mixed"         # amor_mixed | none
    positive_part: str = "spectral"   # spectral | componentwise


@dataclass
class State:
    """Coefficient vectors of one load increment."""

    u: np.ndarray
    phi: np.ndarray
    p: np.ndarray | None = None
    t: float = 0.0
    n: int = 0

    def copy(self):
        return State(
            self.u.copy(),
            self.phi.copy(),
            None if self.p is None else self.p.copy(),
            self.t,
            self.n,
        )


@dataclass
class AssembledSystem:
    """Residual and Jacobian, optionally condensed and active-set pinned."""

    residual: np.ndarray
    jacobian: sp.csr_matrix
    raw_residual: np.ndarray | None = None  # condensed, before pinning
    condensed: bool = False


class FemSpace:
    """Dof map plus cached cell/face geometry for one mesh.

    Immutable once built; all assembly routines take it as context.
    """

    def __init__(self, mesh, fields=MIXED_FIELDS, quad_order=3):
        self.mesh = mesh
        self.fields = tuple(fields)
        self.dofmap = distribute_dofs(mesh, fields)
        self.mixed = "p" in self.dofmap.fields
        self.quad_order = quad_order
        self.rule = gauss_rule(quad_order)

        pts = self.rule.points
        verts = mesh.vertices[mesh.cells]                    # (m, 4, 2)
        _, dN1 = shape_eval(1, pts)                          # (nq, 4, 2)
        J = np.einsum("mnd,qns->mqds", verts, dN1)           # (m, nq, 2, 2)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(det <= 0):
            raise AssemblyError("non-positive Jacobian in geometry cache")
        inv = np.empty_like(J)
        inv[..., 0, 0] = J[..., 1, 1]
        inv[..., 0, 1] = -J[..., 0, 1]
        inv[..., 1, 0] = -J[..., 1, 0]
        inv[..., 1, 1] = J[..., 0, 0]
        inv /= det[..., None, None]                          # J^{-1}
        self.detJ = det
        self.JxW = det * self.rule.weights[None, :]

        self.N = {}
        self.dN_phys = {}
        for deg in sorted({f.degree for f in self.fields}):
            N, dN = shape_eval(deg, pts)                     # (nq, nn), (nq, nn, 2)
            self.N[deg] = N
            # grad_x N = (J^{-T}) grad_xi N;  inv holds J^{-1}
            self.dN_phys[deg] = np.einsum("qns,mqsd->mqnd", dN, inv)

        u_deg = self.dofmap.field("u").spec.degree
        nn = self.N[u_deg].shape[1]
        dNu = self.dN_phys[u_deg]
        m, nq = self.JxW.shape
        B = np.zeros((m, nq, 3, 2 * nn))
        B[..., 0, 0::2] = dNu[..., 0]
        B[..., 1, 1::2] = dNu[..., 1]
        B[..., 2, 0::2] = 0.5 * dNu[..., 1]
        B[..., 2, 1::2] = 0.5 * dNu[..., 0]
        self.B = B

        self.cell_dofs = {
            name: fd.cell_dofs() for name, fd in self.dofmap.fields.items()
        }
        self._face_cache = {}

    # -- state packing ----------------------------------------------------

    def pack(self, state: State):
        parts = [state.u]
        if self.mixed:
            parts.append(state.p)
        parts.append(state.phi)
        return np.concatenate(parts)

    def unpack(self, x, t=0.0, n=0):
        dm = self.dofmap
        u = x[dm.field_slice("u")]
        phi = x[dm.field_slice("phi")]
        p = x[dm.field_slice("p")] if self.mixed else None
        return State(u.copy(), phi.copy(), None if p is None else p.copy(), t, n)

    def zero_state(self, phi_value=1.0):
        dm = self.dofmap
        return State(
            u=np.zeros(dm.field("u").n_dofs),
            phi=np.full(dm.field("phi").n_dofs, float(phi_value)),
            p=np.zeros(dm.field("p").n_dofs) if self.mixed else None,
        )

    # -- field evaluation at quadrature points -----------------------------

    def eval_scalar(self, name, coeffs, gradients=False):
        fd = self.dofmap.field(name)
        deg = fd.spec.degree
        ce = coeffs[fd.cell_nodes]                            # (m, nn)
        vals = np.einsum("qn,mn->mq", self.N[deg], ce)
        if not gradients:
            return vals
        grads = np.einsum("mqnd,mn->mqd", self.dN_phys[deg], ce)
        return vals, grads

    def eval_strain(self, u):
        ue = u[self.cell_dofs["u"] - self.dofmap.field("u").offset]
        return np.einsum("mqin,mn->mqi", self.B, ue)

    def face_geometry(self, tag, n_points=3):
        """Quadrature data on all faces with a tag.

        Returns a dict with cell indices, reference points, basis tables,
        arc-length weights ``dsxW`` and outward unit normals.
        """
        key = (tag, n_points)
        if key in self._face_cache:
            return self._face_cache[key]
        mesh = self.mesh
        faces = [
            (c, k)
            for c, k, t in zip(mesh.face_cell, mesh.face_ledge, mesh.face_tag)
            if t == tag
        ]
        if not faces:
            raise AssemblyError(f"no faces tagged '{tag}'")
        line = gauss_rule_1d(n_points)
        t1 = line.points
        ref = {
            0: np.column_stack([t1, -np.ones_like(t1)]),
            1: np.column_stack([np.ones_like(t1), t1]),
            2: np.column_stack([-t1, np.ones_like(t1)]),
            3: np.column_stack([-np.ones_like(t1), -t1]),
        }
        dref = {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (-1.0, 0.0), 3: (0.0, -1.0)}

        cells = np.array([c for c, _ in faces])
        ledges = np.array([k for _, k in faces])
        nf = len(faces)
        refpts = np.empty((nf, n_points, 2))
        for i, k in enumerate(ledges):
            refpts[i] = ref[k]
        verts = mesh.vertices[mesh.cells[cells]]              # (nf, 4, 2)
        _, dN1 = shape_eval(1, refpts.reshape(-1, 2))
        dN1 = dN1.reshape(nf, n_points, 4, 2)
        J = np.einsum("fnd,fqns->fqds", verts, dN1)
        tdir = np.array([dref[k] for k in ledges])            # (nf, 2)
        tang = np.einsum("fqds,fs->fqd", J, tdir)
        ds = np.linalg.norm(tang, axis=-1)
        normal = np.stack([tang[..., 1], -tang[..., 0]], axis=-1) / ds[..., None]
        out = {
            "cells": cells,
            "ledges": ledges,
            "refpts": refpts,
            "dsxW": ds * line.weights[None, :],
            "normals": normal,
        }
        basis = {}
        for deg in self.N:
            N, dN = shape_eval(deg, refpts.reshape(-1, 2))
            nn = N.shape[-1]
            basis[deg] = (
                N.reshape(nf, n_points, nn),
                dN.reshape(nf, n_points, nn, 2),
            )
        out["basis"] = basis
        self._face_cache[key] = out
        return out


def make_space(mesh, formulation="mixed", u_degree=2, quad_order=3) -> FemSpace:
    if formulation == "mixed":
        if u_degree != 2:
            raise AssemblyError("the mixed formulation uses Q2 displacements")
        return FemSpace(mesh, MIXED_FIELDS, quad_order)
    if formulation == "classical":
        return FemSpace(mesh, classical_fields(u_degree), quad_order)
    raise AssemblyError(f"unknown formulation '{formulation}'")


# ---------------------------------------------------------------------------
# Core assembly
# ---------------------------------------------------------------------------

def _constitutive(space, kinds, params, eps_v, p_q, philag_q,
                  branch_smoothing_rel=0.0):
    """Split stress state and branch-frozen tangents at quadrature points.

    Returns total stress, its derivatives w.r.t. strain and pressure, the
    crack driving density D and its derivatives.  For the classical
    formulation ``p_q`` is None and lam*tr(E) substitutes the pressure.
    ``branch_smoothing_rel`` scales a C^1 regularization of the max-type
    branches with the current strain/pressure magnitude (0 = exact kinks).
    """
    mu, lam, kappa = params.mu, params.lam, params.kappa
    g_lag = mat.degradation(philag_q, kappa)
    classical = p_q is None
    p_eff = lam * (eps_v[..., 0] + eps_v[..., 1]) if classical else p_q

    if branch_smoothing_rel > 0.0:
        d_eps = branch_smoothing_rel * float(
            np.sqrt(np.mean(mat.contract(eps_v, eps_v)))
        )
        d_p = branch_smoothing_rel * float(np.sqrt(np.mean(p_eff**2)))
    else:
        d_eps = d_p = 0.0

    if kinds.split == "amor_mixed":
        sp_, sm_, dspE, dsmE, dspp, dsmp = mat.stress_split_with_tangents(
            eps_v, p_eff, mu, kinds.positive_part, d_eps, d_p
        )
        if classical:
            # dp = lam * (1,1,0) : dE folds the pressure branch into C
            fold = lam * IV[None, None, None, :]
            dspE = dspE + dspp[..., :, None] * fold
            dsmE = dsmE + dsmp[..., :, None] * fold
            dspp = dsmp = None
        sig = g_lag[..., None] * sp_ + sm_
        C = g_lag[..., None, None] * dspE + dsmE
        if not classical:
            dsig_dp = g_lag[..., None] * dspp + dsmp
        drive_sig, ddrive_dE, ddrive_dp = sp_, dspE, (None if classical else dspp)
    elif kinds.split == "none":
        trE = eps_v[..., 0] + eps_v[..., 1]
        if classical:
            bare = 2.0 * mu * eps_v + (lam * trE)[..., None] * IV
            Cb = 2.0 * mu * np.eye(3) + lam * np.multiply.outer(IV, IV)
        else:
            bare = 2.0 * mu * eps_v + p_eff[..., None] * IV
            Cb = 2.0 * mu * np.eye(3)
        Cb = np.broadcast_to(Cb, eps_v.shape[:-1] + (3, 3))
        sig = g_lag[..., None] * bare
        C = g_lag[..., None, None] * Cb
        if not classical:
            dsig_dp = g_lag[..., None] * IV[None, None, :]
        drive_sig, ddrive_dE = bare, Cb
        ddrive_dp = None if classical else np.broadcast_to(
            IV, eps_v.shape[:-1] + (3,)
        )
    else:
        raise AssemblyError(f"unknown split kind '{kinds.split}'")

    D = mat.contract(drive_sig, eps_v)
    # dD/dE = sig_drive : W + E : W : ddrive/dE   (row per strain component)
    dD_dE = WV * drive_sig + np.einsum("...i,i,...ij->...j", eps_v, WV, ddrive_dE)
    dD_dp = (
        None
        if ddrive_dp is None
        else np.einsum("...i,i,...i->...", eps_v, WV, ddrive_dp)
    )
    if classical:
        dsig_dp = None
    return sig, C, dsig_dp, D, dD_dE, dD_dp, g_lag


def _check_finite(space, name, arr):
    if np.all(np.isfinite(arr)):
        return
    bad = np.argwhere(~np.isfinite(np.atleast_2d(arr)))[0]
    raise AssemblyError(
        f"non-finite value in {name} assembly (cell {bad[0]})"
    )


def assemble_system(space: FemSpace, state: State, phi_lag, params, kinds,
                    constraints: ConstraintSet | None = None,
                    active_set=None, phi_bound=None,
                    body_force=None, neumann=None) -> AssembledSystem:
    """Assemble residual and Jacobian of the coupled system.

    Parameters
    ----------
    phi_lag : array
        Phase-field coefficients of the previous increment (time lag for the
        degradation of the elasticity block).
    constraints : ConstraintSet, optional
        When given, the system is condensed to free DoFs.
    active_set : array of global phi DoF ids, optional
        Rows replaced by the pinning equation ``phi - bound = 0``; requires
        ``constraints`` and ``phi_bound`` (field vector of bound values).
    body_force, neumann : optional
        ``body_force(x, y) -> (fx, fy)`` volume load; ``neumann`` maps a
        boundary tag to a traction ``(tx, ty)`` (constants or callables).
    """
    dm = space.dofmap
    mixed = space.mixed
    kappa = params.kappa

    eps_v = space.eval_strain(state.u)
    phi_q, gphi_q = space.eval_scalar("phi", state.phi, gradients=True)
    philag_q = space.eval_scalar("phi", phi_lag)
    p_q = space.eval_scalar("p", state.p) if mixed else None

    sig, C, dsig_dp, D, dD_dE, dD_dp, g_lag = _constitutive(
        space, kinds, params, eps_v, p_q, philag_q
    )
    c_lin, c_const, c_grad = mat.crack_residual_coefficients(
        kinds.crack, params.gc, params.eps
    )

    JxW = space.JxW
    B = space.B
    N1 = space.N[1]
    dN1 = space.dN_phys[1]
    BW = B * WV[None, None, :, None]          # rows pre-weighted for contractions

    # --- residual blocks --------------------------------------------------
    r_u = np.einsum("mqin,mqi,mq->mn", BW, sig, JxW)
    if mixed:
        trE = eps_v[..., 0] + eps_v[..., 1]
        r_p = np.einsum("qn,mq,mq->mn", N1, g_lag * trE - p_q / params.lam, JxW)
    drive = (1.0 - kappa) * phi_q * D + c_lin * phi_q + c_const
    r_phi = np.einsum("qn,mq,mq->mn", N1, drive, JxW)
    r_phi += c_grad * np.einsum("mqnd,mqd,mq->mn", dN1, gphi_q, JxW)

    residual = np.zeros(dm.n_dofs)
    np.add.at(residual, space.cell_dofs["u"], r_u)
    if mixed:
        np.add.at(residual, space.cell_dofs["p"], r_p)
    np.add.at(residual, space.cell_dofs["phi"], r_phi)

    if body_force is not None:
        residual -= _body_force_vector(space, body_force)
    if neumann:
        residual -= _neumann_vector(space, neumann, state.t)

    _check_finite(space, "residual", residual)

    # --- Jacobian blocks ---------------------------------------------------
    blocks = []

    CB = np.einsum("mqij,mqjn->mqin", C, B)
    K_uu = np.einsum("mqin,mqik,mq->mnk", BW, CB, JxW)
    blocks.append((space.cell_dofs["u"], space.cell_dofs["u"], K_uu))

    trB = B[..., 0, :] + B[..., 1, :]         # d(tr E)/d(u dofs)

    if mixed:
        K_up = np.einsum("mqin,mqi,qk,mq->mnk", BW, dsig_dp, N1, JxW)
        blocks.append((space.cell_dofs["u"], space.cell_dofs["p"], K_up))
        K_pu = np.einsum("qn,mq,mqk,mq->mnk", N1, g_lag, trB, JxW)
        blocks.append((space.cell_dofs["p"], space.cell_dofs["u"], K_pu))
        K_pp = -np.einsum("qn,qk,mq->mnk", N1, N1, JxW) / params.lam
        blocks.append((space.cell_dofs["p"], space.cell_dofs["p"], K_pp))

    coeff = (1.0 - kappa) * D + c_lin
    K_ff = np.einsum("qn,qk,mq,mq->mnk", N1, N1, coeff, JxW)
    K_ff += c_grad * np.einsum("mqnd,mqkd,mq->mnk", dN1, dN1, JxW)
    blocks.append((space.cell_dofs["phi"], space.cell_dofs["phi"], K_ff))

    dD_du = np.einsum("mqi,mqin->mqn", dD_dE, B)
    K_fu = (1.0 - kappa) * np.einsum("qn,mq,mqk,mq->mnk", N1, phi_q, dD_du, JxW)
    blocks.append((space.cell_dofs["phi"], space.cell_dofs["u"], K_fu))

    if mixed and dD_dp is not None:
        K_fp = (1.0 - kappa) * np.einsum(
            "qn,mq,mq,qk,mq->mnk", N1, phi_q, dD_dp, N1, JxW
        )
        blocks.append((space.cell_dofs["phi"], space.cell_dofs["p"], K_fp))

    rows, cols, vals = [], [], []
    for rd, cd, K in blocks:
        nr, nc = K.shape[1], K.shape[2]
        rows.append(np.repeat(rd, nc, axis=1).ravel())
        cols.append(np.tile(cd, (1, nr)).ravel())
        vals.append(K.reshape(len(K), -1).ravel())
    jacobian = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dm.n_dofs, dm.n_dofs),
    ).tocsr()

    if constraints is None:
        return AssembledSystem(residual, jacobian)

    Jc, Rc = constraints.condense(jacobian, residual)
    raw = Rc.copy()
    if active_set is not None and len(active_set) > 0:
        if phi_bound is None:
            raise AssemblyError("active-set pinning requires phi_bound")
        fidx = constraints.free_index[np.asarray(active_set)]
        if np.any(fidx < 0):
            raise AssemblyError("active set contains constrained DoFs")
        keep = np.ones(constraints.n_free)
        keep[fidx] = 0.0
        Dk = sp.diags(keep)
        pin = sp.coo_matrix(
            (np.ones(len(fidx)), (fidx, fidx)),
            shape=(constraints.n_free, constraints.n_free),
        )
        Jc = (Dk @ Jc + pin).tocsr()
        foff = dm.field("phi").offset
        Rc = Rc.copy()
        Rc[fidx] = state.phi[np.asarray(active_set) - foff] - phi_bound[
            np.asarray(active_set) - foff
        ]
    return AssembledSystem(Rc, Jc, raw_residual=raw, condensed=True)


def _body_force_vector(space, body_force):
    """Volume load vector (u block), f given as callable (x, y) -> (fx, fy)."""
    mesh = space.mesh
    pts = space.rule.points
    N1v, _ = shape_eval(1, pts)
    xq = np.einsum("qn,mnd->mqd", N1v, mesh.vertices[mesh.cells])
    f = np.asarray(body_force(xq[..., 0], xq[..., 1]))  # (2, m, nq)
    fd = space.dofmap.field("u")
    Nu = space.N[fd.spec.degree]
    fe = np.zeros((mesh.n_cells, space.B.shape[-1]))
    fe[:, 0::2] = np.einsum("qn,mq,mq->mn", Nu, f[0], space.JxW)
    fe[:, 1::2] = np.einsum("qn,mq,mq->mn", Nu, f[1], space.JxW)
    out = np.zeros(space.dofmap.n_dofs)
    np.add.at(out, space.cell_dofs["u"], fe)
    return out


def _neumann_vector(space, neumann, t):
    """Boundary traction vector (u block)."""
    out = np.zeros(space.dofmap.n_dofs)
    fd = space.dofmap.field("u")
    deg = fd.spec.degree
    for tag, traction in neumann.items():
        fg = space.face_geometry(tag)
        Nv = fg["basis"][deg][0]                       # (nf, nq, nn)
        cells = fg["cells"]
        mesh = space.mesh
        verts = mesh.vertices[mesh.cells[cells]]
        nf, nq = Nv.shape[:2]
        N1f, _ = shape_eval(1, fg["refpts"].reshape(-1, 2))
        xq = np.einsum("fqn,fnd->fqd", N1f.reshape(nf, nq, 4), verts)
        if callable(traction):
            tx, ty = traction(xq[..., 0], xq[..., 1], t)
        else:
            tx = np.full(xq.shape[:2], float(traction[0]))
            ty = np.full(xq.shape[:2], float(traction[1]))
        fe = np.zeros((len(cells), space.B.shape[-1]))
        fe[:, 0::2] = np.einsum("fqn,fq,fq->fn", Nv, tx, fg["dsxW"])
        fe[:, 1::2] = np.einsum("fqn,fq,fq->fn", Nv, ty, fg["dsxW"])
        np.add.at(out, space.cell_dofs["u"][cells], fe)
    return out


def assemble_mixed(space, state, phi_lag, params, kinds, **kw) -> AssembledSystem:
    """Three-field assembly (u, p, phi); see :func:`assemble_system`."""
    if not space.mixed:
        raise AssemblyError("space was built for the classical formulation")
    return assemble_system(space, state, phi_lag, params, kinds, **kw)


def assemble_classical(space, state, phi_lag, params, kinds, **kw) -> AssembledSystem:
    """Two-field assembly (u, phi) with lam*tr(E) in place of the pressure."""
    if space.mixed:
        raise AssemblyError("space was built for the mixed formulation")
    return assemble_system(space, state, phi_lag, params, kinds, **kw)


def discrete_energy(space, state, params, kinds):
    """Total discrete energy (elastic + crack) for potential formulations.

    Only defined where the residual is an exact gradient: the classical
    formulation with the undecomposed stress.  Used by tests and oracles.
    """
    if space.mixed or kinds.split != "none":
        raise AssemblyError("discrete energy defined for classical/none only")
    eps_v = space.eval_strain(state.u)
    phi_q, gphi_q = space.eval_scalar("phi", state.phi, gradients=True)
    bare = mat.isotropic_stress(eps_v, params.mu, params.lam)
    elastic = 0.5 * mat.degradation(phi_q, params.kappa) * mat.contract(bare, eps_v)
    crack = mat.crack_energy_density(
        kinds.crack, phi_q, gphi_q, params.gc, params.eps
    )
    return float(np.sum((elastic + crack) * space.JxW))
