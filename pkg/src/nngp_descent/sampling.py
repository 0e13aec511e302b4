"""Teacher data, finite-width kernel random matrices, and spectra.

The teacher draws inputs from a fixed-covariance Gaussian (isotropic
``N(0, I/d)`` by default) and labels ``y = f(x) + tau``.  The finite-width
kernel estimator draws ``N`` Gaussian preactivation vectors with the
exact covariance of the last hidden layer, applies the activation, and
forms the feature Gram matrix ``(1/N) Phi^T Phi`` -- an unbiased,
``O(1/N)``-variance estimate of the conjugate kernel whose spectrum is the
object of study.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateKernelError, InvalidArgumentError, NumericalError
from .kernels import Activation, KernelMatrix

_JITTER_START = 1e-12
_JITTER_MAX = 1e-6


@dataclass(frozen=True)
class RngSpec:
    """Deterministic random stream: (master seed, stream id).

    Identical pairs reproduce identical draws bit-for-bit; distinct stream
    ids (trial indices) give independent streams.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream),))
        return np.random.default_rng(ss)

    def with_stream(self, stream: int) -> "RngSpec":
        return RngSpec(self.seed, stream)


@dataclass(frozen=True)
class TeacherModel:
    """Data-generating process: input law, target function, noise level.

    ``input_covariance`` of ``None`` means the isotropic law ``N(0, I/d)``.
    ``beta`` of ``None`` with ``target='zero'`` gives the pure-noise
    teacher; a linear teacher holds a unit-norm coefficient vector.
    """

    d: int
    sigma_tau: float = 0.0
    target: str = "linear"          # "linear" | "zero" | "custom"
    beta: np.ndarray | None = None
    target_fn: object = None
    input_covariance: np.ndarray | None = None

    def __post_init__(self):
        if self.d < 1:
            raise InvalidArgumentError("d must be at least 1")
        if self.sigma_tau < 0:
            raise InvalidArgumentError("sigma_tau must be non-negative")
        if self.target == "linear":
            if self.beta is None:
                raise InvalidArgumentError("linear teacher requires beta")
            b = np.asarray(self.beta, dtype=float)
            if b.shape != (self.d,):
                raise InvalidArgumentError("beta must have shape (d,)")
            if abs(b @ b - 1.0) > 1e-12:
                raise InvalidArgumentError("linear teacher requires beta^T beta = 1")
            b.setflags(write=False)
            object.__setattr__(self, "beta", b)
        elif self.target == "custom":
            if self.target_fn is None:
                raise InvalidArgumentError("custom teacher requires target_fn")
        elif self.target != "zero":
            raise InvalidArgumentError(f"unknown target {self.target!r}")
        if self.input_covariance is not None:
            cov = np.asarray(self.input_covariance, dtype=float)
            if cov.shape != (self.d, self.d):
                raise InvalidArgumentError("input covariance must be d x d")
            if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, np.max(np.abs(cov))):
                raise InvalidArgumentError("input covariance must be symmetric")
            w = np.linalg.eigvalsh(cov)
            if w[0] < -1e-10 * max(w[-1], 1e-300):
                raise InvalidArgumentError("input covariance must be PSD")
            cov.setflags(write=False)
            object.__setattr__(self, "input_covariance", cov)

    @staticmethod
    def linear(d: int, sigma_tau: float = 0.0, seed: int = 0,
               input_covariance=None) -> "TeacherModel":
        """Linear teacher with a reproducible unit-norm coefficient vector."""
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(0xBE7A,)))
        b = rng.standard_normal(d)
        b /= np.linalg.norm(b)
        # renormalize exactly so beta^T beta = 1 at machine precision
        b /= np.sqrt(b @ b)
        return TeacherModel(d=d, sigma_tau=sigma_tau, target="linear", beta=b,
                            input_covariance=input_covariance)

    @staticmethod
    def zero(d: int, sigma_tau: float = 0.0, input_covariance=None) -> "TeacherModel":
        return TeacherModel(d=d, sigma_tau=sigma_tau, target="zero",
                            input_covariance=input_covariance)

    def f(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.target == "linear":
            return X @ self.beta
        if self.target == "zero":
            return np.zeros(X.shape[0])
        return np.asarray(self.target_fn(X), dtype=float)


def sample_inputs(teacher: TeacherModel, n: int, rng: RngSpec) -> np.ndarray:
    """Draw ``n`` i.i.d. rows from the teacher's input law."""
    if n < 1:
        raise InvalidArgumentError("n must be at least 1")
    gen = rng.generator()
    if teacher.input_covariance is None:
        return gen.normal(0.0, 1.0 / np.sqrt(teacher.d), size=(n, teacher.d))
    w, V = np.linalg.eigh(teacher.input_covariance)
    sq = V * np.sqrt(np.clip(w, 0.0, None))
    return gen.standard_normal((n, teacher.d)) @ sq.T


def sample_labels(teacher: TeacherModel, X, rng: RngSpec) -> np.ndarray:
    """``Y = f(X) + tau`` with ``tau`` i.i.d. ``N(0, sigma_tau^2)``."""
    X = np.asarray(X, dtype=float)
    gen = rng.generator()
    noise = gen.normal(0.0, teacher.sigma_tau, size=X.shape[0]) if teacher.sigma_tau > 0 \
        else np.zeros(X.shape[0])
    return teacher.f(X) + noise


def _psd_sqrt_factor(K: np.ndarray) -> np.ndarray:
    """Cholesky factor with escalating diagonal jitter eps * trace(K)/n.

    The preactivation covariance is PSD but numerically rank-deficient
    whenever n exceeds the input dimension, so jitter is the norm here.
    """
    n = K.shape[0]
    base = np.trace(K) / n
    eps = _JITTER_START
    while True:
        try:
            return np.linalg.cholesky(K + eps * base * np.eye(n))
        except np.linalg.LinAlgError:
            eps *= 10
            if eps > _JITTER_MAX * 10:
                raise DegenerateKernelError(
                    f"Cholesky failed up to jitter {_JITTER_MAX:g} * trace/n"
                )


def sample_feature_matrix(K_prev: KernelMatrix | np.ndarray, N: int,
                          phi: Activation, rng: RngSpec) -> np.ndarray:
    """``N`` activated preactivation rows: ``Phi[k, i] = phi(h_k(x_i))``
    with ``h_k ~ N(0, K_prev)`` i.i.d. over ``k``."""
    if N < 1:
        raise InvalidArgumentError("N must be at least 1")
    K = K_prev.entries if isinstance(K_prev, KernelMatrix) else np.asarray(K_prev, float)
    L = _psd_sqrt_factor(K)
    gen = rng.generator()
    H = gen.standard_normal((N, K.shape[0])) @ L.T
    return phi(H)


def sample_finite_width_kernel(K_prev: KernelMatrix, N: int, phi: Activation,
                               rng: RngSpec) -> KernelMatrix:
    """Finite-width kernel matrix ``(1/N) Phi^T Phi``.

    PSD by construction with rank at most ``min(n, N)``; entrywise an
    unbiased estimator of the conjugate kernel one covariance step above
    ``K_prev``, with variance ``O(1/N)``.
    """
    Phi = sample_feature_matrix(K_prev, N, phi, rng)
    K = (Phi.T @ Phi) / N
    depth = (K_prev.depth + 1) if isinstance(K_prev, KernelMatrix) else 2
    return KernelMatrix(0.5 * (K + K.T), provenance="finite-width-sample",
                        depth=depth, activation=phi.tag)


def eigenvalues(K: KernelMatrix | np.ndarray) -> np.ndarray:
    """Ascending eigenvalues with tiny negatives clipped to zero.

    Negative values below ``-1e-8 * lambda_max`` indicate a broken input
    and raise instead of being hidden by clipping.
    """
    M = K.entries if isinstance(K, KernelMatrix) else np.asarray(K, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidArgumentError("kernel matrix must be square")
    if np.max(np.abs(M - M.T)) > 1e-10 * max(1.0, float(np.max(np.abs(M)))):
        raise InvalidArgumentError("matrix must be symmetric")
    try:
        w = np.linalg.eigvalsh(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    lam_max = max(float(w[-1]), 1e-300)
    if w[0] < -1e-8 * lam_max:
        raise NumericalError(f"negative eigenvalue {w[0]:.3e} beyond tolerance")
    return np.clip(w, 0.0, None)


def eigenvalues_to_csv(ev) -> str:
    lines = ["eigenvalue"]
    lines += [repr(float(x)) for x in np.asarray(ev, dtype=float).ravel()]
    return "\n".join(lines) + "\n"


def histogram_to_csv(counts, edges) -> str:
    lines = ["bin_left,bin_right,count"]
    counts = np.asarray(counts)
    edges = np.asarray(edges, dtype=float)
    for i, c in enumerate(counts):
        lines.append(f"{edges[i]!r},{edges[i + 1]!r},{int(c)}")
    return "\n".join(lines) + "\n"
