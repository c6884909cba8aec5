"""Plant description and the delay-augmented model used by the jump filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space

__all__ = [
    "SystemModel",
    "AugmentedModel",
    "DetectabilityReport",
    "augment",
    "check_detectability",
    "stacked_index",
]


def _as_matrix(name: str, value, ndim: int = 2) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SystemModel:
    """Linear time-invariant plant ``x+ = A x + B w``, ``y_s = c_s x + v_s``.

    ``sigma2[s]`` is the variance of the scalar noise on output ``s``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    W: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        A = _as_matrix("A", self.A)
        B = _as_matrix("B", self.B)
        C = _as_matrix("C", self.C)
        W = _as_matrix("W", self.W)
        sigma2 = _as_matrix("sigma2", self.sigma2, ndim=1)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got shape {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n} (rows of A)")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, expected {n} (size of A)")
        nw = B.shape[1]
        if W.shape != (nw, nw):
            raise ValueError(f"W has shape {W.shape}, expected ({nw}, {nw}) from columns of B")
        if not np.allclose(W, W.T, atol=1e-12):
            raise ValueError("W is not symmetric")
        if np.linalg.eigvalsh(W).min() < -1e-12:
            raise ValueError("W is not positive semidefinite")
        if sigma2.shape != (C.shape[0],):
            raise ValueError(
                f"sigma2 has {sigma2.shape[0]} entries, expected {C.shape[0]} (rows of C)"
            )
        if np.any(sigma2 <= 0):
            raise ValueError("sigma2 entries must be positive")
        for name, arr in (("A", A), ("B", B), ("C", C), ("W", W), ("sigma2", sigma2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_w(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class AugmentedModel:
    """Stacked model over ``[x[k]; x[k-1]; ...; x[k-dbar]]``.

    Measurement coordinates are ordered sensor-major, delay-minor:
    row ``s*(dbar+1) + d`` of ``Cbar`` is ``c_s`` placed in block ``d``.
    """

    Abar: np.ndarray
    Bbar: np.ndarray
    Cbar: np.ndarray
    V: np.ndarray
    Cx: np.ndarray
    W: np.ndarray
    dbar: int
    n: int
    n_y: int

    @property
    def N(self) -> int:
        """Dimension of the stacked state."""
        return self.Abar.shape[0]

    @property
    def n_m(self) -> int:
        """Number of stacked measurement coordinates."""
        return self.Cbar.shape[0]

    @property
    def Q(self) -> np.ndarray:
        """Process noise covariance of the stacked model, ``Bbar W Bbar^T``."""
        return self.Bbar @ self.W @ self.Bbar.T


def stacked_index(s: int, d: int, dbar: int) -> int:
    """Position of measurement ``(s, d)`` in the stacked vector."""
    return s * (dbar + 1) + d


def augment(sys: SystemModel, dbar: int) -> AugmentedModel:
    if dbar < 0 or int(dbar) != dbar:
        raise ValueError(f"dbar must be a nonnegative integer, got {dbar}")
    dbar = int(dbar)
    n, ny = sys.n, sys.n_y
    N = (dbar + 1) * n
    Abar = np.zeros((N, N))
    Abar[:n, :n] = sys.A
    for d in range(dbar):
        Abar[(d + 1) * n:(d + 2) * n, d * n:(d + 1) * n] = np.eye(n)
    Bbar = np.zeros((N, sys.n_w))
    Bbar[:n] = sys.B
    Cbar = np.zeros((ny * (dbar + 1), N))
    vdiag = np.zeros(ny * (dbar + 1))
    for s in range(ny):
        for d in range(dbar + 1):
            row = stacked_index(s, d, dbar)
            Cbar[row, d * n:(d + 1) * n] = sys.C[s]
            vdiag[row] = sys.sigma2[s]
    Cx = np.zeros((n, N))
    Cx[:, :n] = np.eye(n)
    return AugmentedModel(
        Abar=Abar, Bbar=Bbar, Cbar=Cbar, V=np.diag(vdiag), Cx=Cx,
        W=np.array(sys.W), dbar=dbar, n=n, n_y=ny,
    )


@dataclass(frozen=True)
class DetectabilityReport:
    detectable: bool
    unobservable_radius: float


def check_detectability(M: np.ndarray, H: np.ndarray, steps: int | None = None,
                        rtol: float = 1e-10) -> DetectabilityReport:
    """Detectability of the pair ``(M, H)``.

    The unobservable subspace is the kernel of the stacked observability
    matrix ``[H; H M; ...; H M^(steps-1)]``. ``unobservable_radius`` is the
    spectral radius of ``M`` restricted to it (0 when fully observable).
    """
    M = np.asarray(M, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    N = M.shape[0]
    if M.shape != (N, N):
        raise ValueError(f"M must be square, got shape {M.shape}")
    if H.shape[1] != N:
        raise ValueError(f"H has {H.shape[1]} columns, expected {N}")
    steps = N if steps is None else steps
    blocks, Hk = [], H
    for _ in range(steps):
        blocks.append(Hk)
        Hk = Hk @ M
    obs = np.vstack(blocks)
    # null_space thresholds singular values relative to the largest one
    basis = null_space(obs, rcond=rtol) if np.any(obs) else np.eye(N)
    if basis.shape[1] == 0:
        return DetectabilityReport(True, 0.0)
    restricted = basis.T @ M @ basis
    radius = float(np.max(np.abs(np.linalg.eigvals(restricted))))
    return DetectabilityReport(radius < 1.0, radius)
