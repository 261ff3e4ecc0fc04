"""Linear-FEM Laplace-Beltrami discretization and band-limited fields.

The Laplacian is represented by a lumped (diagonal) mass matrix ``A`` and
the cotangent stiffness ``W``, normalized here to be positive
semi-definite with zero row sums. Eigenpairs solve ``W phi = lambda A phi``
and are ``A``-orthonormal.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import BoundaryError, ConvergenceError, DimensionMismatch, NearDegenerateWarning
from .mesh import Mesh

COT_CLAMP = 1e6
CACHE_MAGIC = b"MSPB"


def mass_matrix(mesh: Mesh) -> np.ndarray:
    """Diagonal of the lumped mass matrix: a_i = 1/3 of the incident triangle areas."""
    areas = mesh.areas
    a = np.zeros(mesh.n_vertices)
    for c in range(3):
        np.add.at(a, mesh.faces[:, c], areas / 3.0)
    return a


def stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Cotangent stiffness: w_ij = -(cot a_ij + cot b_ij)/2 off the diagonal, rows sum to 0."""
    edges = mesh.edges
    cots = np.array(edges.cotangents)
    if np.any(np.abs(cots) > COT_CLAMP):
        warnings.warn(
            f"{int(np.sum(np.abs(cots) > COT_CLAMP))} cotangents exceed {COT_CLAMP:g}; clamped",
            NearDegenerateWarning, stacklevel=2,
        )
        cots = np.clip(cots, -COT_CLAMP, COT_CLAMP)
    w = -0.5 * cots.sum(axis=1)
    i, j = edges.edges[:, 0], edges.edges[:, 1]
    n = mesh.n_vertices
    off = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def laplacian_operators(mesh: Mesh, closed: bool = True) -> tuple[np.ndarray, sp.csr_matrix]:
    """``(A, W)`` for a mesh; closed meshes are required by default."""
    if closed and not mesh.edges.is_closed:
        raise BoundaryError("the mesh has boundary edges; a closed mesh is required")
    return mass_matrix(mesh), stiffness_matrix(mesh)


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """First k Laplacian eigenpairs: nondecreasing ``eigenvalues`` and
    ``A``-orthonormal ``eigenvectors`` (n, k), with the mass diagonal they refer to."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray

    @property
    def k(self) -> int:
        return self.eigenvectors.shape[1]

    @property
    def n(self) -> int:
        return self.eigenvectors.shape[0]

    def truncate(self, k: int) -> SpectralBasis:
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot truncate a {self.k}-band basis to {k}")
        return SpectralBasis(self.eigenvalues[:k], self.eigenvectors[:, :k], self.mass)


def eigendecompose(W, A: np.ndarray, k: int) -> SpectralBasis:
    """Solve ``W phi = lambda A phi`` for the k smallest eigenpairs.

    ``A`` is diagonal, so the problem is reduced to the standard symmetric
    one for ``A^-1/2 W A^-1/2`` and solved densely. Each eigenvector is
    signed so that its largest-magnitude entry is positive.
    """
    A = np.asarray(A, dtype=np.float64)
    n = len(A)
    if not 1 <= k <= n:
        raise ValueError(f"bandwidth k must lie in [1, {n}], got {k}")
    Wd = W.toarray() if sp.issparse(W) else np.asarray(W, dtype=np.float64)
    s = 1.0 / np.sqrt(A)
    B = Wd * s[:, None] * s[None, :]
    B = 0.5 * (B + B.T)
    try:
        lam, U = scipy.linalg.eigh(B, subset_by_index=[0, k - 1], driver="evr")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ConvergenceError(f"symmetric eigensolver failed: {exc}") from exc
    phi = U * s[:, None]
    rows = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[rows, np.arange(k)])
    signs[signs == 0] = 1.0
    phi = phi * signs
    lam = np.asarray(lam, dtype=np.float64)
    if abs(lam[0]) < 1e-8 * max(1.0, float(np.abs(lam).max())):
        lam[0] = 0.0
    lam.flags.writeable = False
    phi.flags.writeable = False
    return SpectralBasis(lam, phi, A.copy())


def mesh_basis(mesh: Mesh, k: int, cache_dir=None) -> SpectralBasis:
    """Spectral basis of a closed mesh, going through the on-disk cache if given."""
    if cache_dir is not None:
        path = cache_path(cache_dir, mesh, k)
        if path.exists():
            return load_basis(path, mass_matrix(mesh))
    A, W = laplacian_operators(mesh)
    basis = eigendecompose(W, A, k)
    if cache_dir is not None:
        save_basis(basis, path)
    return basis


def eigen_residuals(W, A: np.ndarray, basis: SpectralBasis) -> np.ndarray:
    """Per-column ``|W phi - lambda A phi| / (|W|_1 |phi|)``."""
    phi, lam = basis.eigenvectors, basis.eigenvalues
    r = W @ phi - (A[:, None] * phi) * lam[None, :]
    wnorm = abs(W).sum(axis=0).max() if sp.issparse(W) else np.abs(W).sum(axis=0).max()
    return np.linalg.norm(r, axis=0) / (float(wnorm) * np.linalg.norm(phi, axis=0))


def synthesize(basis: SpectralBasis, v: np.ndarray) -> np.ndarray:
    """Field ``Phi v`` from (k, d) coefficients."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != basis.k:
        raise DimensionMismatch(f"expected {basis.k} coefficient rows, got {v.shape[0]}")
    return basis.eigenvectors @ v


def analyze(basis: SpectralBasis, f: np.ndarray) -> np.ndarray:
    """Coefficients ``Phi^T A f`` of an (n, d) field."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] != basis.n:
        raise DimensionMismatch(f"expected a field with {basis.n} rows, got {f.shape[0]}")
    af = basis.mass * f if f.ndim == 1 else basis.mass[:, None] * f
    return basis.eigenvectors.T @ af


def field_norm(A: np.ndarray, V: np.ndarray) -> float:
    """``sqrt(tr(A V V^T)) = sqrt(sum_i a_i |V_i|^2)``."""
    V = np.asarray(V, dtype=np.float64)
    if V.shape[0] != len(A):
        raise DimensionMismatch(f"field has {V.shape[0]} rows, mass matrix {len(A)}")
    V2 = V.reshape(len(A), -1)
    return float(np.sqrt(np.sum(A * np.sum(V2 * V2, axis=1))))


def mean_curvature(mesh: Mesh, A: np.ndarray | None = None, W=None, vertices=None) -> np.ndarray:
    """Per-vertex magnitude of ``A^-1 W X``.

    The operators default to those of ``mesh``; pass ``vertices`` to evaluate
    at other positions with the operators rebuilt on the same connectivity.
    No factor of 1/2 is applied (a unit sphere gives about 2).
    """
    if vertices is not None:
        mesh = mesh.with_vertices(vertices)
        A = W = None
    if A is None:
        A = mass_matrix(mesh)
    if W is None:
        W = stiffness_matrix(mesh)
    LX = (W @ mesh.vertices) / A[:, None]
    return np.linalg.norm(LX, axis=1)


# --------------------------------------------------------------------------
# on-disk cache: magic, uint64 n, uint64 k, then float64 eigenvalues and
# row-major eigenvectors, all little-endian

def cache_path(cache_dir, mesh: Mesh, k: int) -> Path:
    return Path(cache_dir) / f"{mesh.content_hash()[:32]}_k{k}.spb"


def save_basis(basis: SpectralBasis, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<QQ", basis.n, basis.k))
        fh.write(np.ascontiguousarray(basis.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenvectors, dtype="<f8").tobytes())


def load_basis(path, mass: np.ndarray) -> SpectralBasis:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path} is not a spectral basis cache file")
    n, k = struct.unpack("<QQ", raw[4:20])
    body = np.frombuffer(raw, dtype="<f8", offset=20)
    if body.size != k + n * k or len(mass) != n:
        raise DimensionMismatch(f"{path}: cached basis does not match the mesh")
    lam = body[:k].astype(np.float64)
    phi = body[k:].reshape(n, k).astype(np.float64)
    return SpectralBasis(lam, phi, np.asarray(mass, dtype=np.float64))
