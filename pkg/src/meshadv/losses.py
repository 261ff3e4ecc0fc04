"""Attack objectives and perceptibility metrics.

Differentiable terms take and return :class:`~meshadv.grad.Tensor` objects
(plain arrays are accepted and treated as constants); metrics used only
for reporting return floats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .errors import DimensionMismatch, InvalidTarget, ZeroEdgeError
from .grad import Tensor
from .mesh import Mesh
from .spectral import mass_matrix, mean_curvature, stiffness_matrix

RECONSTRUCTION_TERMS = ("l2", "edge", "local_euclidean", "chamfer")


@dataclass(frozen=True)
class LossBreakdown:
    """``total = misclass_weight * misclassification + c * reconstruction
    + smoothing_weight * smoothing``.

    The generator objective uses ``misclass_weight = 1``; the per-shape
    optimization attack weights the hinge by ``c`` and the reconstruction by 1.
    """

    misclassification: float
    reconstruction: float
    smoothing: float
    total: float
    c: float
    smoothing_weight: float
    misclass_weight: float = 1.0

    @classmethod
    def combine(cls, misclassification, reconstruction, smoothing=0.0, c=1.0,
                smoothing_weight=0.0, misclass_weight=1.0) -> LossBreakdown:
        total = misclass_weight * misclassification + c * reconstruction + smoothing_weight * smoothing
        return cls(float(misclassification), float(reconstruction), float(smoothing), float(total),
                   float(c), float(smoothing_weight), float(misclass_weight))


def _check_target(t, n_classes):
    t = np.asarray(t)
    if t.dtype.kind not in "iu" or (t < 0).any() or (t >= n_classes).any():
        raise InvalidTarget(f"target {t.tolist()} outside [0, {n_classes})")
    return t


def margin_loss(logits, target) -> Tensor:
    """Hinged logit margin ``max(0, max_{i != t} Z_i - Z_t)``.

    ``logits`` of shape (C,) with an int target gives a scalar; a batch
    (B, C) with B targets gives one value per row.
    """
    z = G.as_tensor(logits)
    C = z.shape[-1]
    if C < 2:
        raise InvalidTarget("margin loss needs at least two classes")
    t = _check_target(target, C)
    if z.ndim == 1:
        t = int(t)
        others = G.index(z, np.array([i for i in range(C) if i != t]))
        return G.relu(G.max(others) - z[t])
    B = z.shape[0]
    t = np.broadcast_to(t, (B,))
    cols = np.array([[i for i in range(C) if i != ti] for ti in t])
    rows = np.arange(B)[:, None]
    others = G.index(z, (rows, cols))
    return G.relu(G.max(others, axis=1) - G.index(z, (np.arange(B), t)))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits."""
    z = G.as_tensor(logits)
    labels = np.asarray(labels)
    shift = z.value.max(axis=1, keepdims=True)
    lse = G.log(G.sum(G.exp(z - shift), axis=1)) + shift[:, 0]
    picked = G.index(z, (np.arange(z.shape[0]), labels))
    return G.mean(lse - picked)


def _same_shape(X, Xp):
    if X.shape != Xp.shape:
        raise DimensionMismatch(f"shapes {X.shape} and {Xp.shape} differ")


def l2_loss(X, Xp) -> Tensor:
    """Frobenius norm ``|X' - X|``."""
    X, Xp = G.as_tensor(X), G.as_tensor(Xp)
    _same_shape(X, Xp)
    return G.sqrt(G.sum(G.square(Xp - X)))


def _edge_lengths(X, edges) -> Tensor:
    d = G.index(X, edges[:, 0]) - G.index(X, edges[:, 1])
    return G.sqrt(G.sum(G.square(d), axis=1))


def edge_loss(mesh: Mesh, Xp) -> Tensor:
    """Mean over edges of ``| |X'_i - X'_j| / |X_i - X_j| - 1 |``."""
    Xp = G.as_tensor(Xp)
    _same_shape(mesh.vertices, Xp)
    edges = mesh.edges.edges
    rest = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    if (rest == 0).any():
        raise ZeroEdgeError(f"{int(np.sum(rest == 0))} edges have zero length")
    ratio = _edge_lengths(Xp, edges) / rest
    return G.mean(G.abs(ratio - 1.0))


def local_euclidean_loss(mesh: Mesh, X, Xp) -> Tensor:
    """Sum over vertices and their one-ring of squared neighbour-distance change.

    Each undirected edge appears twice in the double sum.
    """
    X, Xp = G.as_tensor(X), G.as_tensor(Xp)
    _same_shape(X, Xp)
    edges = mesh.edges.edges
    diff = _edge_lengths(X, edges) - _edge_lengths(Xp, edges)
    return 2.0 * G.sum(G.square(diff))


def chamfer_loss(X, Xp) -> Tensor:
    """One-sided, unsquared: sum over rows of X' of the distance to the nearest row of X."""
    X, Xp = G.as_tensor(X), G.as_tensor(Xp)
    if X.shape[0] == 0 or Xp.shape[0] == 0:
        raise DimensionMismatch("chamfer distance needs non-empty clouds")
    d = G.reshape(Xp, (Xp.shape[0], 1, 3)) - G.reshape(X, (1, X.shape[0], 3))
    d2 = G.sum(G.square(d), axis=2)
    return G.sum(G.sqrt(G.min(d2, axis=1)))


def laplacian_smoothing(A, W, V, operator: str = "mass") -> Tensor:
    """``n |L V|_F^2`` with ``L = A^-1 W`` (``operator="mass"``) or ``L = W``.

    Lists of ``A``, ``W`` and ``V`` are treated as a batch and averaged.
    """
    if isinstance(A, (list, tuple)):
        terms = [laplacian_smoothing(a, w, v, operator) for a, w, v in zip(A, W, V)]
        return G.mean(G.concat([G.reshape(t, (1,)) for t in terms]))
    V = G.as_tensor(V)
    A = np.asarray(A, dtype=np.float64)
    if V.shape[0] != len(A) or W.shape[0] != len(A):
        raise DimensionMismatch(f"field has {V.shape[0]} rows, operators {len(A)}")
    LV = G.spmatmul(W, V)
    if operator == "mass":
        LV = LV * (1.0 / A)[:, None]
    elif operator != "stiffness":
        raise ValueError(f"unknown Laplacian operator {operator!r}")
    return len(A) * G.sum(G.square(LV))


def reconstruction_loss(mesh: Mesh, Xp, terms=("local_euclidean",)) -> Tensor:
    """Unweighted sum of the selected reconstruction terms between the mesh and X'."""
    X = mesh.vertices
    parts = []
    for name in terms:
        if name == "l2":
            parts.append(l2_loss(X, Xp))
        elif name == "edge":
            parts.append(edge_loss(mesh, Xp))
        elif name == "local_euclidean":
            parts.append(local_euclidean_loss(mesh, X, Xp))
        elif name == "chamfer":
            parts.append(chamfer_loss(X, Xp))
        else:
            raise ValueError(f"unknown reconstruction term {name!r}")
    if not parts:
        return Tensor(0.0)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def curvature_distortion(mesh: Mesh, Xp, A=None, W=None) -> float:
    """Mean over vertices of ``|H(X) - H(X')|`` on the shared connectivity."""
    Xp = np.asarray(Xp, dtype=np.float64)
    _same_shape(mesh.vertices, Xp)
    if A is None:
        A = mass_matrix(mesh)
    if W is None:
        W = stiffness_matrix(mesh)
    h0 = mean_curvature(mesh, A, W)
    h1 = mean_curvature(mesh, vertices=Xp)
    return float(np.mean(np.abs(h0 - h1)))


def spike_score(V) -> float:
    """Max over median per-vertex displacement magnitude."""
    mags = np.linalg.norm(np.asarray(V, dtype=np.float64), axis=1)
    med = float(np.median(mags))
    if med == 0.0:
        return float("inf") if mags.max() > 0 else 0.0
    return float(mags.max() / med)
