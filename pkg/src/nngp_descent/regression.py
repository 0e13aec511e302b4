"""Gaussian-process posterior prediction and Monte-Carlo generalisation error.

With observation noise the posterior mean weights solve
``(K + sigma_eps^2 I) alpha = Y`` via Cholesky.  Ridgeless regression
(``sigma_eps = 0``) uses the Moore-Penrose convention: eigenvalues above a
relative cutoff are inverted, the rest are annihilated.

The generalisation-error estimator draws fresh teacher data each trial,
builds the kernel on training and test inputs jointly from a single
feature realisation (the sampled kernel is one random function per trial,
so its test columns reuse the training draw), and averages the squared
prediction error over fresh test points and trials.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import InvalidArgumentError, NumericalError
from .kernels import KernelMatrix, KernelRecipe, conjugate_kernel_matrix, \
    preactivation_kernel_matrix
from .sampling import RngSpec, TeacherModel, sample_feature_matrix, sample_inputs, \
    sample_labels


@dataclass(frozen=True)
class GpConfig:
    """Observation noise and the relative pseudo-inverse cutoff."""

    sigma_eps: float = 0.0
    pinv_rcond: float = 1e-10

    def __post_init__(self):
        if self.sigma_eps < 0:
            raise InvalidArgumentError("sigma_eps must be non-negative")
        if self.pinv_rcond <= 0:
            raise InvalidArgumentError("pinv_rcond must be positive")


@dataclass(frozen=True)
class Posterior:
    """Fitted posterior: mean weights plus the solved system for reuse."""

    alpha: np.ndarray
    sigma_eps: float
    _cho: tuple | None = None
    _eig: tuple | None = None

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    def apply_inverse(self, v: np.ndarray) -> np.ndarray:
        """``(K + sigma_eps^2 I)^{-1} v`` (pseudo-inverse when ridgeless)."""
        if self._cho is not None:
            return sla.cho_solve(self._cho, v)
        lam, V, inv = self._eig
        return V @ (inv * (V.T @ v))


def fit(K_xx: KernelMatrix | np.ndarray, Y, cfg: GpConfig) -> Posterior:
    """Solve for the posterior mean weights ``alpha``.

    ``sigma_eps > 0``: Cholesky of ``K + sigma_eps^2 I``.
    ``sigma_eps = 0``: eigendecomposition, inverting eigenvalues above
    ``pinv_rcond * lambda_max`` and zeroing the rest.
    """
    K = K_xx.entries if isinstance(K_xx, KernelMatrix) else np.asarray(K_xx, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (K.shape[0],):
        raise InvalidArgumentError("Y length must match the kernel size")
    if not np.all(np.isfinite(Y)):
        raise InvalidArgumentError("Y must be finite")
    if cfg.sigma_eps > 0:
        A = K + cfg.sigma_eps**2 * np.eye(K.shape[0])
        try:
            cho = sla.cho_factor(A, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - PSD + ridge
            raise NumericalError(f"Cholesky failed with positive noise: {exc}") from exc
        alpha = sla.cho_solve(cho, Y)
        resid = np.linalg.norm(A @ alpha - Y)
        if resid > 1e-6 * max(1.0, np.linalg.norm(Y)):
            raise NumericalError(f"solve residual {resid:.3e} too large")
        return Posterior(alpha=alpha, sigma_eps=cfg.sigma_eps, _cho=cho)
    lam, V = np.linalg.eigh(K)
    cutoff = cfg.pinv_rcond * max(float(lam[-1]), 0.0)
    inv = np.where(lam > cutoff, 1.0 / np.where(lam > 0, lam, 1.0), 0.0)
    alpha = V @ (inv * (V.T @ Y))
    return Posterior(alpha=alpha, sigma_eps=0.0, _eig=(lam, V, inv))


def predict_mean(post: Posterior, k_star) -> float:
    """Posterior mean ``k_star^T alpha`` at one test point."""
    k = np.asarray(k_star, dtype=float)
    if k.shape != (post.n,):
        raise InvalidArgumentError("k_star length must match the training size")
    return float(k @ post.alpha)


def predict_variance(post: Posterior, k_star, k_star_star: float) -> float:
    """Posterior variance, clipped at zero against roundoff."""
    k = np.asarray(k_star, dtype=float)
    if k.shape != (post.n,):
        raise InvalidArgumentError("k_star length must match the training size")
    var = float(k_star_star - k @ post.apply_inverse(k))
    if var < -1e-8 * max(1.0, abs(float(k_star_star))):
        raise NumericalError(f"posterior variance {var:.3e} below tolerance")
    return max(var, 0.0)


@dataclass(frozen=True)
class EgEstimate:
    """Monte-Carlo generalisation error: mean, standard error, trials."""

    mean: float
    stderr: float
    trials: int
    per_trial: tuple = ()


def _trial_generalisation_error(teacher, recipe, n, N, cfg, n_test, rng,
                                cross_kernel):
    X = sample_inputs(teacher, n + n_test, rng)
    Y = sample_labels(teacher, X, rng.with_stream(rng.stream + 500_000))
    if N is None:
        K_joint = conjugate_kernel_matrix(X, recipe.depth, recipe.activation,
                                          recipe.quad).entries
        K_train, K_cross = K_joint[:n, :n], K_joint[n:, :n]
    else:
        K_prev = preactivation_kernel_matrix(X, recipe.depth, recipe.activation,
                                             recipe.quad)
        Phi = sample_feature_matrix(K_prev, N, recipe.activation,
                                    rng.with_stream(rng.stream + 1_000_000))
        K_joint = (Phi.T @ Phi) / N
        K_joint = 0.5 * (K_joint + K_joint.T)
        K_train = K_joint[:n, :n]
        if cross_kernel == "sampled":
            K_cross = K_joint[n:, :n]
        elif cross_kernel == "exact":
            K_exact = conjugate_kernel_matrix(X, recipe.depth, recipe.activation,
                                              recipe.quad).entries
            K_cross = K_exact[n:, :n]
        else:
            raise InvalidArgumentError(f"unknown cross_kernel {cross_kernel!r}")
    post = fit(K_train, Y[:n], cfg)
    preds = K_cross @ post.alpha
    return float(np.mean((preds - Y[n:]) ** 2))


def empirical_generalisation_error(
    teacher: TeacherModel,
    recipe: KernelRecipe,
    n: int,
    N: int | None,
    cfg: GpConfig,
    n_test: int = 200,
    trials: int = 30,
    rng: RngSpec = RngSpec(0),
    cross_kernel: str = "sampled",
    threads: int = 1,
) -> EgEstimate:
    """Monte-Carlo estimate of the squared prediction error.

    ``N`` is the sampled feature width; ``None`` uses the exact conjugate
    kernel instead of a finite-width draw.  ``cross_kernel`` selects how
    test columns are built in the sampled case: ``"sampled"`` (default)
    extends the training trial's feature draw to the test inputs,
    ``"exact"`` substitutes exact kernel cross-terms.
    """
    if n_test < 1:
        raise InvalidArgumentError("n_test must be at least 1")
    if trials < 1:
        raise InvalidArgumentError("trials must be at least 1")

    def run(trial):
        return _trial_generalisation_error(
            teacher, recipe, n, N, cfg, n_test,
            rng.with_stream(rng.stream + trial), cross_kernel,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vals = list(pool.map(run, range(trials)))
    else:
        vals = [run(trial) for trial in range(trials)]
    vals = np.asarray(vals)
    stderr = float(np.std(vals, ddof=1) / np.sqrt(trials)) if trials > 1 else float("inf")
    return EgEstimate(mean=float(np.mean(vals)), stderr=stderr, trials=trials,
                      per_trial=tuple(float(v) for v in vals))
