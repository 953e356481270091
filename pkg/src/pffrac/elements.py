"""Reference-element machinery on the square [-1, 1]^2.

Tensor-product Lagrange shape functions (Q1, Q2) and Gauss-Legendre
quadrature.  Node ordering follows the mesh convention:

* Q1 (4 nodes): the cell vertices, counterclockwise, starting at (-1, -1).
* Q2 (9 nodes): the 4 vertices, then the 4 edge midpoints in edge order
  bottom/right/top/left, then the cell center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Reference coordinates of the Q1 / Q2 node sets.
Q1_NODES = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])
Q2_NODES = np.array(
    [
        (-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0),
        (0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0),
        (0.0, 0.0),
    ]
)


def _lagrange_1d(degree, x):
    """Values and derivatives of the 1D Lagrange basis on [-1, 1].

    Node order: degree 1 -> (-1, 1); degree 2 -> (-1, 1, 0), i.e. the
    endpoint functions first, midpoint last, matching the tensor
    construction below.
    """
    x = np.asarray(x, dtype=float)
    if degree == 1:
        vals = np.stack([0.5 * (1.0 - x), 0.5 * (1.0 + x)], axis=-1)
        grads = np.stack([np.full_like(x, -0.5), np.full_like(x, 0.5)], axis=-1)
    elif degree == 2:
        vals = np.stack(
            [0.5 * x * (x - 1.0), 0.5 * x * (x + 1.0), 1.0 - x * x], axis=-1
        )
        grads = np.stack([x - 0.5, x + 0.5, -2.0 * x], axis=-1)
    else:
        raise ValueError(f"unsupported polynomial degree {degree}")
    return vals, grads


# (i, j) tensor indices per node, in the orderings declared above.
_Q1_IJ = [(0, 0), (1, 0), (1, 1), (0, 1)]
_Q2_IJ = [(0, 0), (1, 0), (1, 1), (0, 1), (2, 0), (1, 2), (2, 1), (0, 2), (2, 2)]


def shape_eval(degree, points):
    """Evaluate the scalar Q1/Q2 basis at reference points.

    Parameters
    ----------
    degree : int
        1 or 2.
    points : array_like, shape (..., 2)
        Reference coordinates in [-1, 1]^2.

    Returns
    -------
    values : ndarray, shape (..., n_nodes)
    gradients : ndarray, shape (..., n_nodes, 2)
        Derivatives with respect to the reference coordinates.
    """
    pts = np.asarray(points, dtype=float)
    vx, gx = _lagrange_1d(degree, pts[..., 0])
    vy, gy = _lagrange_1d(degree, pts[..., 1])
    index = _Q1_IJ if degree == 1 else _Q2_IJ
    values = np.stack([vx[..., i] * vy[..., j] for i, j in index], axis=-1)
    gradients = np.stack(
        [
            np.stack([gx[..., i] * vy[..., j], vx[..., i] * gy[..., j]], axis=-1)
            for i, j in index
        ],
        axis=-2,
    )
    return values, gradients


def nodes_of(degree):
    """Reference coordinates of the Q1/Q2 node set, in node order."""
    if degree == 1:
        return Q1_NODES.copy()
    if degree == 2:
        return Q2_NODES.copy()
    raise ValueError(f"unsupported polynomial degree {degree}")


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product quadrature on [-1, 1]^2 (or the edge [-1, 1])."""

    points: np.ndarray   # (nq, 2) for cells, (nq,) for edges
    weights: np.ndarray  # (nq,), positive

    def __len__(self):
        return len(self.weights)


def gauss_rule_1d(n):
    if not 1 <= n <= 5:
        raise ValueError(f"points_per_axis must be in [1, 5], got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(points=x, weights=w)


def gauss_rule(points_per_axis):
    """Tensor-product Gauss-Legendre rule on [-1, 1]^2.

    Exact for polynomials up to degree 2*points_per_axis - 1 per axis;
    weights sum to 4 (the reference-square area).
    """
    line = gauss_rule_1d(points_per_axis)
    X, Y = np.meshgrid(line.points, line.points, indexing="ij")
    W = np.outer(line.weights, line.weights)
    return QuadratureRule(
        points=np.column_stack([X.ravel(), Y.ravel()]),
        weights=W.ravel(),
    )
