"""Conjugate kernels of deep fully-connected networks.

The conjugate kernel of a depth-``L`` network is built from the data Gram
matrix ``K0 = X X^T`` by ``L - 1`` applications of the covariance step

    K_next(x, x') = E[ phi(u1) phi(u2) ],
    (u1, u2) ~ bivariate Gaussian with covariance
    [[K(x,x), K(x,x')], [K(x,x'), K(x',x')]],

evaluated with tensor-product Gauss-Hermite quadrature after the
substitution ``u1 = sqrt(Kxx) z1``, ``u2 = sqrt(Kyy) (rho z1 +
sqrt(1 - rho^2) z2)``.  One quadrature path covers every activation,
including those with known closed forms, so the step itself is exercised
uniformly; for the identity the quadrature is exact to roundoff.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DegenerateKernelError, InvalidArgumentError

_PAIR_CHUNK = 2048  # pairs per quadrature batch, keeps the work array ~64 MB


@dataclass(frozen=True)
class Activation:
    """Pointwise activation with a tag; ``custom`` requires an explicit
    assertion that the function is measurable."""

    tag: str
    fn: object
    measurable: bool = True

    def __post_init__(self):
        if not self.measurable:
            raise InvalidArgumentError("activations must be asserted measurable")

    def __call__(self, u):
        return self.fn(u)

    @staticmethod
    def identity() -> "Activation":
        return Activation("identity", lambda u: u)

    @staticmethod
    def relu() -> "Activation":
        return Activation("relu", lambda u: np.maximum(u, 0.0))

    @staticmethod
    def tanh() -> "Activation":
        return Activation("tanh", np.tanh)

    @staticmethod
    def erf() -> "Activation":
        return Activation("erf", special.erf)

    @staticmethod
    def custom(fn, name: str = "custom", measurable: bool = True) -> "Activation":
        return Activation(name, fn, measurable)

    @staticmethod
    def by_name(name: str) -> "Activation":
        table = {
            "identity": Activation.identity,
            "relu": Activation.relu,
            "tanh": Activation.tanh,
            "erf": Activation.erf,
        }
        if name not in table:
            raise InvalidArgumentError(f"unknown activation {name!r}")
        return table[name]()


@dataclass(frozen=True)
class QuadratureRule:
    """Normalized tensor-product Gauss-Hermite rule in two dimensions.

    ``z1``, ``z2`` are standard-normal nodes and ``weights`` sum to one,
    so ``E[g(z1, z2)] ~= sum_k weights_k g(z1_k, z2_k)`` for independent
    standard Gaussians.
    """

    order: int = 64
    z1: np.ndarray = field(init=False, repr=False)
    z2: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.order < 2:
            raise InvalidArgumentError("quadrature order must be at least 2")
        nodes, w = np.polynomial.hermite.hermgauss(self.order)
        nodes = nodes * math.sqrt(2.0)          # physicists' -> standard normal
        w = w / math.sqrt(math.pi)
        z1, z2 = np.meshgrid(nodes, nodes, indexing="ij")
        ww = np.outer(w, w).ravel()
        ww = ww / ww.sum()                       # exact unit mass
        for arr in (z1, z2, ww):
            arr.setflags(write=False)
        object.__setattr__(self, "z1", z1.ravel())
        object.__setattr__(self, "z2", z2.ravel())
        object.__setattr__(self, "weights", ww)


@dataclass(frozen=True)
class KernelMatrix:
    """Symmetric PSD matrix of kernel evaluations with provenance."""

    entries: np.ndarray
    provenance: str = "exact-conjugate"  # or "finite-width-sample"
    depth: int = 2
    activation: str = "identity"

    def __post_init__(self):
        K = np.asarray(self.entries, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise InvalidArgumentError("kernel matrix must be square")
        asym = np.max(np.abs(K - K.T)) if K.size else 0.0
        scale = max(1.0, float(np.max(np.abs(K)))) if K.size else 1.0
        if asym > 1e-12 * scale:
            raise InvalidArgumentError(f"kernel matrix asymmetric by {asym:.2e}")
        K = 0.5 * (K + K.T)
        w = np.linalg.eigvalsh(K)
        if w.size and w[0] < -1e-8 * max(w[-1], 1e-300):
            raise DegenerateKernelError(
                f"kernel matrix indefinite: min eigenvalue {w[0]:.3e}"
            )
        K.setflags(write=False)
        object.__setattr__(self, "entries", K)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def to_csv(self) -> str:
        """Upper triangle as (i, j, value) rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        K = self.entries
        for i in range(self.n):
            for j in range(i, self.n):
                w.writerow([i, j, repr(float(K[i, j]))])
        return buf.getvalue()

    def metadata(self) -> dict:
        return {
            "n": self.n,
            "depth": self.depth,
            "activation": self.activation,
            "provenance": self.provenance,
        }

    def save(self, path_stem):
        csv_path = f"{path_stem}.csv"
        json_path = f"{path_stem}.json"
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv())
        with open(json_path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return [csv_path, json_path]


def _step_batch(k_xx, k_xy, k_yy, phi: Activation, quad: QuadratureRule) -> np.ndarray:
    """Vectorized covariance step over arrays of (k_xx, k_xy, k_yy)."""
    k_xx = np.asarray(k_xx, dtype=float)
    k_xy = np.asarray(k_xy, dtype=float)
    k_yy = np.asarray(k_yy, dtype=float)
    if np.any(k_xx <= 0) or np.any(k_yy <= 0):
        raise DegenerateKernelError("diagonal kernel values must be positive")
    rho = np.clip(k_xy / np.sqrt(k_xx * k_yy), -1.0, 1.0)
    out = np.empty(k_xx.shape, dtype=float)
    m = k_xx.size
    sx = np.sqrt(k_xx)
    sy = np.sqrt(k_yy)
    orth = np.sqrt(np.clip(1.0 - rho**2, 0.0, None))
    for lo in range(0, m, _PAIR_CHUNK):
        hi = min(lo + _PAIR_CHUNK, m)
        u1 = sx[lo:hi, None] * quad.z1[None, :]
        u2 = sy[lo:hi, None] * (
            rho[lo:hi, None] * quad.z1[None, :] + orth[lo:hi, None] * quad.z2[None, :]
        )
        out[lo:hi] = (phi(u1) * phi(u2)) @ quad.weights
    return out


def kernel_step(k_xx: float, k_xy: float, k_yy: float, phi: Activation,
                quad: QuadratureRule) -> float:
    """One covariance-map step: ``E[phi(u1) phi(u2)]`` under the bivariate
    Gaussian with covariance ``[[k_xx, k_xy], [k_xy, k_yy]]``.

    The correlation computed from finite-precision entries is clamped into
    ``[-1, 1]`` before the change of variables.
    """
    if k_xx <= 0 or k_yy <= 0:
        raise DegenerateKernelError("k_xx and k_yy must be positive")
    return float(_step_batch(
        np.array([k_xx]), np.array([k_xy]), np.array([k_yy]), phi, quad
    )[0])


def gram_matrix(X) -> np.ndarray:
    """Input-layer kernel ``K0 = X X^T``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise InvalidArgumentError("X must be an n x d matrix")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("X must be finite")
    K = X @ X.T
    return 0.5 * (K + K.T)


def _apply_steps(K: np.ndarray, steps: int, phi: Activation, quad: QuadratureRule) -> np.ndarray:
    n = K.shape[0]
    iu = np.triu_indices(n, k=1)
    for _ in range(steps):
        diag = np.diag(K).copy()
        bad = np.nonzero(diag <= 0)[0]
        if bad.size:
            raise DegenerateKernelError(
                f"degenerate diagonal at row {bad[0]}", row=int(bad[0])
            )
        # diagonals first: off-diagonal steps consume the same-layer diagonals
        new_diag = _step_batch(diag, diag, diag, phi, quad)
        if n > 1:
            off = _step_batch(diag[iu[0]], K[iu], diag[iu[1]], phi, quad)
        K_next = np.zeros_like(K)
        K_next[np.diag_indices(n)] = new_diag
        if n > 1:
            K_next[iu] = off
            K_next[(iu[1], iu[0])] = off
        K = K_next
    return K


def conjugate_kernel_matrix(X, L: int, phi: Activation,
                            quad: QuadratureRule | None = None) -> KernelMatrix:
    """Exact conjugate kernel matrix of a depth-``L`` network on inputs ``X``.

    ``K0 = X X^T`` followed by ``L - 1`` covariance steps.  For the
    identity activation every step is the identity map, so the result is
    ``X X^T`` for any depth.
    """
    if L < 2:
        raise InvalidArgumentError("depth L must be at least 2")
    quad = quad or QuadratureRule()
    K = _apply_steps(gram_matrix(X), L - 1, phi, quad)
    return KernelMatrix(K, provenance="exact-conjugate", depth=L, activation=phi.tag)


def preactivation_kernel_matrix(X, L: int, phi: Activation,
                                quad: QuadratureRule | None = None) -> KernelMatrix:
    """Covariance of the last hidden preactivations of a depth-``L`` network.

    This is the kernel the finite-width sampler draws from: the data Gram
    matrix for ``L = 2`` and ``L - 2`` covariance steps beyond it for
    deeper networks (all earlier widths already taken to infinity).
    """
    if L < 2:
        raise InvalidArgumentError("depth L must be at least 2")
    quad = quad or QuadratureRule()
    K = _apply_steps(gram_matrix(X), L - 2, phi, quad)
    return KernelMatrix(K, provenance="exact-conjugate", depth=L - 1, activation=phi.tag)


@dataclass(frozen=True)
class KernelRecipe:
    """Bundle (activation, depth, quadrature) describing one kernel family."""

    activation: Activation
    depth: int = 2
    quad: QuadratureRule = field(default_factory=QuadratureRule)

    def __post_init__(self):
        if self.depth < 2:
            raise InvalidArgumentError("depth must be at least 2")
