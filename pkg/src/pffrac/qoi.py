"""Quantities of interest: boundary loads, crack paths, energies.

All evaluations are read-only over a converged state.  Forces are reported
both ways: the mean-traction value printed in the reference formula
(1/|Gamma| * integral of the undegraded stress times the normal) and the
physically scaled resultant (integral of the chosen stress times thickness,
in N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import materials as mat
from .assembly import AssemblyError, FemSpace, State
from .elements import shape_eval


@dataclass
class ForceRecord:
    """Boundary load at one increment."""

    fx_N: float            # resultant * thickness, degraded or undegraded
    fy_N: float
    fx_mean: float         # 1/|Gamma| integral sigma(u) n ds (literal form)
    fy_mean: float
    boundary_length: float
    tag: str
    t: float = 0.0


@dataclass
class CrackPath:
    points: np.ndarray     # (k, 2) ordered polyline
    touches_left: bool = False
    touches_right: bool = False
    touches_hole: bool = False
    is_simple: bool = True

    def __len__(self):
        return len(self.points)


def _face_strain(space: FemSpace, fg, u):
    """Strain in Voigt form at face quadrature points."""
    mesh = space.mesh
    cells = fg["cells"]
    verts = mesh.vertices[mesh.cells[cells]]
    fd = space.dofmap.field("u")
    deg = fd.spec.degree
    _, dNu = fg["basis"][deg]
    nf, nq = dNu.shape[:2]
    _, dN1 = shape_eval(1, fg["refpts"].reshape(-1, 2))
    dN1 = dN1.reshape(nf, nq, 4, 2)
    J = np.einsum("fnd,fqns->fqds", verts, dN1)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1]
    inv[..., 0, 1] = -J[..., 0, 1]
    inv[..., 1, 0] = -J[..., 1, 0]
    inv[..., 1, 1] = J[..., 0, 0]
    inv /= det[..., None, None]
    dN_phys = np.einsum("fqns,fqsd->fqnd", dNu, inv)

    ue = u[space.cell_dofs["u"][cells] - fd.offset]           # (nf, 2*nn)
    ux, uy = ue[:, 0::2], ue[:, 1::2]
    gux = np.einsum("fqnd,fn->fqd", dN_phys, ux)
    guy = np.einsum("fqnd,fn->fqd", dN_phys, uy)
    eps = np.stack(
        [gux[..., 0], guy[..., 1], 0.5 * (gux[..., 1] + guy[..., 0])], axis=-1
    )
    return eps


def boundary_force(space: FemSpace, state: State, params, kinds, tag="top",
                   sigma_eval="degraded", thickness=2.0) -> ForceRecord:
    """Load vector on a tagged boundary.

    ``sigma_eval`` selects the stress entering the thickness-scaled
    resultant: "degraded" uses g(phi) sigma+ + sigma-, "undegraded" the bare
    isotropic sigma(u).  The mean-traction components always use the bare
    stress, mirroring the printed evaluation formula.
    """
    fg = space.face_geometry(tag)
    eps = _face_strain(space, fg, state.u)
    dsw = fg["dsxW"]
    normals = fg["normals"]
    length = float(np.sum(dsw))

    def resultant(sig_v):
        sig = np.empty(sig_v.shape[:-1] + (2, 2))
        sig[..., 0, 0] = sig_v[..., 0]
        sig[..., 1, 1] = sig_v[..., 1]
        sig[..., 0, 1] = sig[..., 1, 0] = sig_v[..., 2]
        tr = np.einsum("fqde,fqe->fqd", sig, normals)
        return np.einsum("fqd,fq->d", tr, dsw)

    bare = mat.isotropic_stress(eps, params.mu, params.lam)
    mean = resultant(bare) / length

    if sigma_eval == "undegraded":
        scaled = resultant(bare) * thickness
    elif sigma_eval == "degraded":
        cells = fg["cells"]
        fd_phi = space.dofmap.field("phi")
        N1 = fg["basis"][1][0]
        phi_q = np.einsum("fqn,fn->fq", N1, state.phi[fd_phi.cell_nodes[cells]])
        if space.mixed:
            fd_p = space.dofmap.field("p")
            p_q = np.einsum("fqn,fn->fq", N1, state.p[fd_p.cell_nodes[cells]])
        else:
            p_q = params.lam * (eps[..., 0] + eps[..., 1])
        sp_, sm_ = mat.stress_split(eps, p_q, params.mu, kinds.positive_part)
        g = mat.degradation(phi_q, params.kappa)
        scaled = resultant(g[..., None] * sp_ + sm_) * thickness
    else:
        raise AssemblyError(f"unknown sigma_eval variant '{sigma_eval}'")

    return ForceRecord(
        fx_N=float(scaled[0]), fy_N=float(scaled[1]),
        fx_mean=float(mean[0]), fy_mean=float(mean[1]),
        boundary_length=length, tag=tag, t=state.t,
    )


# ---------------------------------------------------------------------------
# Crack path extraction
# ---------------------------------------------------------------------------

def _broken_vertices(mesh, phi_vertex, threshold):
    return np.nonzero(phi_vertex < threshold)[0]


def _touch_flags(mesh, vids):
    pts = mesh.vertices[vids] if len(vids) else np.zeros((0, 2))
    xs = mesh.vertices[:, 0]
    tol = 1e-8 * (xs.max() - xs.min() + 1.0)
    left = bool(np.any(pts[:, 0] < xs.min() + tol)) if len(pts) else False
    right = bool(np.any(pts[:, 0] > xs.max() - tol)) if len(pts) else False
    hole = False
    if mesh.hole is not None and len(pts):
        cx, cy, r = mesh.hole
        d = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)
        hole = bool(np.any(np.abs(d - r) < 1e-6 * r + 1e-9))
    return left, right, hole


def _segments_intersect(p, q, r, s):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p, q, r), orient(p, q, s)
    d3, d4 = orient(r, s, p), orient(r, s, q)
    return d1 * d2 < 0 and d3 * d4 < 0


def crack_path(space: FemSpace, state: State, threshold=0.1) -> CrackPath:
    """Medial polyline of the sub-threshold phase-field region.

    Broken vertices are binned along the dominant extent of the region (one
    bin per background-cell width); each bin contributes the centroid of its
    vertices and the polyline walks the bins in order.
    """
    mesh = space.mesh
    phi_vertex = state.phi[: mesh.n_vertices]
    vids = _broken_vertices(mesh, phi_vertex, threshold)
    left, right, hole = _touch_flags(mesh, vids)
    if len(vids) == 0:
        return CrackPath(np.zeros((0, 2)), False, False, False, True)

    pts = mesh.vertices[vids]
    span = pts.max(axis=0) - pts.min(axis=0)
    axis = 0 if span[0] >= span[1] else 1
    diam = np.median(mesh.cell_diameters())
    lo = pts[:, axis].min()
    n_bins = max(1, int(np.ceil((span[axis] + 1e-12) / max(diam, 1e-12))))
    which = np.clip(
        ((pts[:, axis] - lo) / max(span[axis], 1e-12) * n_bins).astype(int),
        0, n_bins - 1,
    )
    centroids = []
    for b in range(n_bins):
        sel = which == b
        if np.any(sel):
            centroids.append(pts[sel].mean(axis=0))
    path = np.array(centroids)

    simple = True
    for i in range(len(path) - 1):
        for j in range(i + 2, len(path) - 1):
            if _segments_intersect(path[i], path[i + 1], path[j], path[j + 1]):
                simple = False
    return CrackPath(path, left, right, hole, simple)


def crack_length(path: CrackPath) -> float:
    """Arc length of the path polyline (0 for an empty path)."""
    if len(path) < 2:
        return 0.0
    d = np.diff(path.points, axis=0)
    return float(np.sum(np.hypot(d[:, 0], d[:, 1])))


def ruptured(space: FemSpace, state: State, threshold=0.1) -> bool:
    """True when the broken band (merged with the hole) joins left to right."""
    mesh = space.mesh
    phi_vertex = state.phi[: mesh.n_vertices]
    broken = phi_vertex < threshold
    if not np.any(broken):
        return False

    parent = np.arange(mesh.n_vertices + 1)  # extra node = the hole

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj

    for quad in mesh.cells:
        b = [v for v in quad if broken[v]]
        for v in b[1:]:
            union(b[0], v)
    hole_node = mesh.n_vertices
    if mesh.hole is not None:
        cx, cy, r = mesh.hole
        d = np.hypot(mesh.vertices[:, 0] - cx, mesh.vertices[:, 1] - cy)
        for v in np.nonzero(broken & (np.abs(d - r) < 1e-6 * r))[0]:
            union(v, hole_node)

    xs = mesh.vertices[:, 0]
    tol = 1e-8 * (xs.max() - xs.min() + 1.0)
    lefts = np.nonzero(broken & (xs < xs.min() + tol))[0]
    rights = np.nonzero(broken & (xs > xs.max() - tol))[0]
    if len(lefts) == 0 or len(rights) == 0:
        return False
    left_roots = {find(v) for v in lefts}
    right_roots = {find(v) for v in rights}
    return bool(left_roots & right_roots)


def energies(space: FemSpace, state: State, params, kinds):
    """(elastic, crack) energy of the state.

    The elastic part integrates g(phi)/2 * sigma(u, p) : E(u) with the mixed
    stress 2 mu E + p I (classical runs substitute p = lam tr E).
    """
    eps_v = space.eval_strain(state.u)
    phi_q, gphi_q = space.eval_scalar("phi", state.phi, gradients=True)
    if space.mixed:
        p_q = space.eval_scalar("p", state.p)
    else:
        p_q = params.lam * (eps_v[..., 0] + eps_v[..., 1])
    sig = 2.0 * params.mu * eps_v + p_q[..., None] * mat.IDENTITY_VOIGT
    elastic = 0.5 * mat.degradation(phi_q, params.kappa) * mat.contract(sig, eps_v)
    crack = mat.crack_energy_density(
        kinds.crack, phi_q, gphi_q, params.gc, params.eps
    )
    return float(np.sum(elastic * space.JxW)), float(np.sum(crack * space.JxW))
