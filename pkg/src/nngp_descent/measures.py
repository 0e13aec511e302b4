"""Spectral measures and the Marchenko-Pastur fixed-point machinery.

A :class:`SpectralMeasure` is a probability measure on the real line stored
as a list of atoms plus a gridded density.  The module provides the
Stieltjes transform of such a measure, the inversion back to a density, the
damped fixed-point solver for the multiplicative Marchenko-Pastur map
``rho_MP^gamma (x) mu`` (the limiting spectrum of ``Psi^{1/2} X^T X Psi^{1/2}``
when ``Psi`` has limiting spectrum ``mu`` and ``gamma = n/N``), and grid
quadrature against a measure.

Conventions
-----------
* Stieltjes transform: ``S(z) = int dF(t) / (t - z)``, so ``Im S(z) > 0``
  on the upper half-plane and densities are recovered as
  ``rho(x) = (1/pi) * lim_{y->0+} Im S(x + iy)``.
* Rank deficiency is kept explicit: when the map has ratio ``gamma > 1``
  (or the input measure itself has an atom at zero) the missing mass is an
  atom at 0, never a density spike.
* Inversion evaluates at two offsets ``y0`` and ``y0/2`` and extrapolates
  linearly to ``y -> 0``.  Off the support, ``Im S`` is linear in ``y``, so
  the extrapolation cancels the Lorentzian leakage that would otherwise
  pollute moments like ``int 1/lambda^2``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceError,
    InvalidArgumentError,
    NumericalError,
    SingularEvaluationError,
)

ZERO_ATOM_TOL = 1e-12
# A measure whose resolved mass deviates from its declared mass by less than
# this is silently renormalized; larger deficits are kept in metadata as
# unresolved edge mass (they occur when the support touches zero and the
# density has an integrable singularity the uniform grid cannot capture).
RENORMALIZE_TOL = 2e-2
MASS_HARD_TOL = 1e-1


@dataclass(frozen=True)
class SpectralMeasure:
    """Probability measure on the real line: atoms plus a gridded density.

    Attributes
    ----------
    atoms:
        Tuple of ``(location, weight)`` pairs, weights in ``[0, 1]``.
    grid:
        Strictly increasing array of density nodes (may be empty).
    density:
        Non-negative density values on ``grid``.
    mass_deficit:
        Probability mass known to exist but not resolved by the grid
        (placed between 0 and ``grid[0]`` for CDF purposes).
    """

    atoms: tuple[tuple[float, float], ...] = ()
    grid: np.ndarray = field(default_factory=lambda: np.empty(0))
    density: np.ndarray = field(default_factory=lambda: np.empty(0))
    mass_deficit: float = 0.0

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        density = np.asarray(self.density, dtype=float)
        if grid.shape != density.shape:
            raise InvalidArgumentError("grid and density must have equal length")
        if grid.size and np.any(np.diff(grid) <= 0):
            raise InvalidArgumentError("density grid must be strictly increasing")
        if np.any(density < 0):
            raise InvalidArgumentError("densities must be non-negative")
        if any(w < 0 for _, w in self.atoms):
            raise InvalidArgumentError("atom weights must be non-negative")
        grid.setflags(write=False)
        density.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", density)
        object.__setattr__(self, "atoms", tuple((float(a), float(w)) for a, w in self.atoms))
        if abs(self.total_mass() - 1.0) > MASS_HARD_TOL:
            raise InvalidArgumentError(
                f"total mass {self.total_mass():.4f} too far from 1"
            )

    # -- mass bookkeeping -------------------------------------------------
    def atom_mass(self) -> float:
        return float(sum(w for _, w in self.atoms))

    def bulk_mass(self) -> float:
        if self.grid.size < 2:
            return 0.0
        return float(np.trapezoid(self.density, self.grid))

    def total_mass(self) -> float:
        return self.atom_mass() + self.bulk_mass() + self.mass_deficit

    def zero_mass(self) -> float:
        """Weight of the explicit atom(s) at zero."""
        return float(sum(w for a, w in self.atoms if abs(a) <= ZERO_ATOM_TOL))

    # -- geometry ---------------------------------------------------------
    def support_max(self) -> float:
        top = max((a for a, w in self.atoms if w > 0), default=-np.inf)
        if self.grid.size:
            nz = np.nonzero(self.density > 0)[0]
            if nz.size:
                top = max(top, float(self.grid[nz[-1]]))
        if not np.isfinite(top):
            raise InvalidArgumentError("measure has no support")
        return top

    def positive_support_min(self) -> float:
        """Smallest strictly positive support point (atoms or density)."""
        lo = min(
            (a for a, w in self.atoms if w > 0 and a > ZERO_ATOM_TOL),
            default=np.inf,
        )
        if self.grid.size:
            nz = np.nonzero((self.density > 0) & (self.grid > ZERO_ATOM_TOL))[0]
            if nz.size:
                lo = min(lo, float(self.grid[nz[0]]))
        return lo

    # -- evaluation -------------------------------------------------------
    def cdf(self, x) -> np.ndarray:
        """Right-continuous CDF, normalized to total mass 1."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        for a, w in self.atoms:
            out += w * (x >= a - ZERO_ATOM_TOL)
        if self.grid.size >= 2:
            cum = np.concatenate(
                [[0.0], np.cumsum(0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.grid))]
            )
            out += np.interp(x, self.grid, cum, left=0.0, right=cum[-1])
            if self.mass_deficit > 0:
                # unresolved edge mass ramps up over [0, grid[0]]
                g0 = self.grid[0]
                out += self.mass_deficit * np.clip(x / g0 if g0 > 0 else (x >= 0), 0.0, 1.0)
        tot = self.total_mass()
        return out / tot

    # -- serialization ----------------------------------------------------
    def to_csv(self) -> str:
        """Two-column (lambda, density) CSV body."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "density"])
        for lam, rho in zip(self.grid, self.density):
            w.writerow([repr(float(lam)), repr(float(rho))])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "atoms": [[a, w] for a, w in self.atoms],
            "mass_deficit": self.mass_deficit,
            "grid_min": float(self.grid[0]) if self.grid.size else None,
            "grid_max": float(self.grid[-1]) if self.grid.size else None,
            "grid_points": int(self.grid.size),
            "bulk_mass": self.bulk_mass(),
        }

    def save(self, path_stem):
        """Write ``<stem>.csv`` plus a ``<stem>.json`` sidecar; returns paths."""
        csv_path = f"{path_stem}.csv"
        json_path = f"{path_stem}.json"
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv())
        with open(json_path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return [csv_path, json_path]


@dataclass(frozen=True)
class MpMapParams:
    """Numerical knobs for :func:`mp_map`.

    ``gamma`` is the shape ratio of the map.  ``eval_offset_y`` is the
    imaginary offset used for inversion; the solver also evaluates at half
    this offset for the extrapolation to the real axis.
    """

    gamma: float
    eval_offset_y: float = 1e-3
    grid: np.ndarray | None = None
    grid_points: int = 2000
    max_iters: int = 10_000
    damping: float = 0.5
    tol: float = 1e-9

    def __post_init__(self):
        if self.gamma <= 0:
            raise InvalidArgumentError("gamma must be positive")
        if self.eval_offset_y <= 0:
            raise InvalidArgumentError("eval_offset_y must be positive")
        if not (0 < self.damping <= 1):
            raise InvalidArgumentError("damping must lie in (0, 1]")
        if self.tol <= 0:
            raise InvalidArgumentError("tol must be positive")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be at least 1")


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def point_mass(location: float) -> SpectralMeasure:
    return SpectralMeasure(atoms=((float(location), 1.0),))


def empirical_spectral_measure(eigenvalues) -> SpectralMeasure:
    """Atomic measure ``(1/n) sum_i delta_{lambda_i}``.

    Identical eigenvalues merge into a single atom, so three equal values
    become one atom of weight one.
    """
    ev = np.asarray(eigenvalues, dtype=float).ravel()
    if ev.size == 0:
        raise InvalidArgumentError("eigenvalue list must be non-empty")
    if not np.all(np.isfinite(ev)):
        raise InvalidArgumentError("eigenvalues must be finite")
    locs, counts = np.unique(ev, return_counts=True)
    atoms = tuple((float(a), float(c) / ev.size) for a, c in zip(locs, counts))
    return SpectralMeasure(atoms=atoms)


def mp_closed_form(gamma: float, lam: float):
    """Marchenko-Pastur bulk density at ``lam`` for shape ratio ``gamma``.

    Support is ``[(1-sqrt(gamma))^2, (1+sqrt(gamma))^2]``; the point mass
    ``1 - 1/gamma`` at zero for ``gamma > 1`` is reported separately by the
    caller.  The bulk integrates to ``min(1, 1/gamma)``.
    """
    if gamma <= 0:
        raise InvalidArgumentError("gamma must be positive")
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    lo = (1 - np.sqrt(gamma)) ** 2
    hi = (1 + np.sqrt(gamma)) ** 2
    out = np.zeros_like(lam_arr)
    inside = (lam_arr > lo) & (lam_arr < hi)
    lam_in = lam_arr[inside]
    out[inside] = np.sqrt((hi - lam_in) * (lam_in - lo)) / (2 * np.pi * gamma * lam_in)
    if np.isscalar(lam) or np.ndim(lam) == 0:
        return float(out[0])
    return out


def marchenko_pastur_measure(psi: float, grid_points: int = 2000) -> SpectralMeasure:
    """Closed-form MP(psi) as a SpectralMeasure (zero atom when psi > 1)."""
    if psi <= 0:
        raise InvalidArgumentError("psi must be positive")
    lo = (1 - np.sqrt(psi)) ** 2
    hi = (1 + np.sqrt(psi)) ** 2
    pad = 1e-6 * (hi - lo)
    grid = np.linspace(lo + pad, hi - pad, grid_points)
    density = mp_closed_form(psi, grid)
    bulk_target = min(1.0, 1.0 / psi)
    raw = np.trapezoid(density, grid)
    density = density * (bulk_target / raw)
    atoms = ()
    if psi > 1:
        atoms = ((0.0, 1.0 - 1.0 / psi),)
    return SpectralMeasure(atoms=atoms, grid=grid, density=density)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def _quad_nodes(measure: SpectralMeasure):
    """Trapezoid nodes/weights of the density part plus atom lists."""
    t = measure.grid
    w = np.zeros_like(t)
    if t.size >= 2:
        dt = np.diff(t)
        w[:-1] += 0.5 * dt * measure.density[:-1]
        w[1:] += 0.5 * dt * measure.density[1:]
    locs = np.array([a for a, _ in measure.atoms])
    wts = np.array([w_ for _, w_ in measure.atoms])
    return t, w, locs, wts


def stieltjes(measure: SpectralMeasure, z):
    """``S(z) = int dF(t)/(t - z)`` for complex or off-support real ``z``."""
    z = complex(z)
    t, w, locs, wts = _quad_nodes(measure)
    if z.imag == 0:
        on_atom = locs.size and np.any(np.abs(locs - z.real) <= 1e-14 * max(1.0, abs(z.real)))
        in_bulk = t.size and t[0] <= z.real <= t[-1] and np.interp(z.real, t, measure.density) > 0
        if on_atom or in_bulk:
            raise SingularEvaluationError(
                f"z = {z.real} lies on the support; a strictly complex z is required",
                grid_point=z.real,
            )
    val = 0.0 + 0.0j
    if t.size:
        val += np.sum(w / (t - z))
    if locs.size:
        val += np.sum(wts / (locs - z))
    if measure.mass_deficit > 0 and t.size:
        val += measure.mass_deficit / (0.5 * t[0] - z)
    return val


def invert_stieltjes(
    S,
    grid,
    y0: float = 1e-3,
    declared_mass: float = 1.0,
    extrapolate: bool = True,
    atoms: tuple = (),
) -> SpectralMeasure:
    """Recover a density on ``grid`` from a Stieltjes transform callable.

    ``S`` must accept a complex ndarray and return the transform values.
    The density is ``(1/pi) Im S(x + i y0)`` clipped at zero; with
    ``extrapolate`` the two-offset linear extrapolation in ``y`` is used.
    The result carries ``atoms`` (e.g. a zero atom for rank-deficient
    spectra) and is renormalized to ``declared_mass`` when the resolved
    mass is within tolerance; otherwise the deficit is recorded.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise InvalidArgumentError("grid must be a 1-D array with at least 2 points")
    if y0 <= 0:
        raise InvalidArgumentError("y0 must be positive")
    vals1 = np.asarray(S(grid + 1j * y0), dtype=complex)
    if not np.all(np.isfinite(vals1)):
        bad = grid[~np.isfinite(vals1)][0]
        raise NumericalError("non-finite transform value", grid_point=float(bad))
    if extrapolate:
        vals2 = np.asarray(S(grid + 1j * y0 / 2), dtype=complex)
        if not np.all(np.isfinite(vals2)):
            bad = grid[~np.isfinite(vals2)][0]
            raise NumericalError("non-finite transform value", grid_point=float(bad))
        imag = 2 * vals2.imag - vals1.imag
    else:
        imag = vals1.imag
    density = np.clip(imag / np.pi, 0.0, None)

    atom_mass = float(sum(w for _, w in atoms))
    bulk_target = declared_mass - atom_mass
    raw = float(np.trapezoid(density, grid))
    deficit = 0.0
    if raw > 0 and abs(raw - bulk_target) <= RENORMALIZE_TOL * max(declared_mass, 1e-12):
        density = density * (bulk_target / raw)
    else:
        deficit = max(0.0, bulk_target - raw)
    return SpectralMeasure(atoms=tuple(atoms), grid=grid, density=density, mass_deficit=deficit)


# ---------------------------------------------------------------------------
# the Marchenko-Pastur map
# ---------------------------------------------------------------------------

def solve_mp_fixed_point(
    z,
    mu: SpectralMeasure,
    params: MpMapParams,
    S0=None,
):
    """Solve ``S(z) = int dmu(t) / (t (1 - g - g z S(z)) - z)`` pointwise.

    Damped Picard iteration from ``S0 = -1/z`` (or a caller-provided warm
    start), vectorized over ``z`` with converged points retired from the
    active set.  Raises :class:`ConvergenceError` naming the worst grid
    point if any point fails to reach tolerance.
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    gamma = params.gamma
    t, w, locs, wts = _quad_nodes(mu)
    has_bulk = t.size >= 2
    has_atoms = locs.size > 0

    S = (-1.0 / z) if S0 is None else np.array(S0, dtype=complex, copy=True)
    active = np.ones(z.shape, dtype=bool)
    residual = np.full(z.shape, np.inf)
    it = 0
    while active.any() and it < params.max_iters:
        za = z[active]
        Sa = S[active]
        a = 1.0 - gamma - gamma * za * Sa
        integ = np.zeros_like(Sa)
        if has_bulk:
            integ = integ + (w[None, :] / (t[None, :] * a[:, None] - za[:, None])).sum(axis=1)
        if has_atoms:
            integ = integ + (wts[None, :] / (locs[None, :] * a[:, None] - za[:, None])).sum(axis=1)
        S_new = (1.0 - params.damping) * Sa + params.damping * integ
        delta = np.abs(S_new - Sa)
        S[active] = S_new
        idx = np.where(active)[0]
        residual[idx] = delta
        active[idx[delta < params.tol]] = False
        it += 1
    if active.any():
        worst = int(np.argmax(np.where(active, residual, -np.inf)))
        raise ConvergenceError(
            f"fixed point unconverged at z = {z[worst]} after {it} iterations "
            f"(residual {residual[worst]:.3e})",
            grid_point=complex(z[worst]),
            residual=float(residual[worst]),
            iterations=it,
        )
    return S


def default_map_grid(mu: SpectralMeasure, params: MpMapParams) -> np.ndarray:
    """Uniform grid over ``(0, lambda_max]`` with the first point clipped
    away from zero; ``lambda_max = (1 + sqrt(gamma))^2 * sup(mu) * 1.2``."""
    lam_max = (1 + np.sqrt(params.gamma)) ** 2 * mu.support_max() * 1.2
    return np.linspace(0.0, lam_max, params.grid_points + 1)[1:]


def mp_map(mu: SpectralMeasure, params: MpMapParams) -> SpectralMeasure:
    """Marchenko-Pastur map ``rho_MP^gamma (x) mu`` as a SpectralMeasure.

    The output spectrum is the limit of ``Psi^{1/2} X^T X Psi^{1/2}`` with
    ``X`` an ``N x n`` matrix of i.i.d. ``N(0, 1/N)`` entries,
    ``gamma = n/N``, and ``Psi`` spectrally distributed as ``mu``.  Rank
    counting fixes the atom at zero: the positive part has mass
    ``min(s, 1/gamma)`` where ``s`` is the positive mass of ``mu``.
    """
    if abs(mu.total_mass() - 1.0) > RENORMALIZE_TOL:
        raise InvalidArgumentError("input measure must have mass 1")
    grid = params.grid if params.grid is not None else default_map_grid(mu, params)
    grid = np.asarray(grid, dtype=float)

    s_pos = 1.0 - mu.zero_mass()
    zero_mass = 1.0 - min(s_pos, 1.0 / params.gamma)
    atoms = ((0.0, zero_mass),) if zero_mass > 1e-12 else ()

    last = {}

    def transform(zv):
        # warm-start the half-offset pass from the full-offset solution
        warm = last.get("S") if last.get("shape") == np.shape(zv) else None
        S = solve_mp_fixed_point(zv, mu, params, S0=warm)
        last["S"] = S
        last["shape"] = np.shape(zv)
        return S

    return invert_stieltjes(
        transform,
        grid,
        y0=params.eval_offset_y,
        declared_mass=1.0,
        extrapolate=True,
        atoms=atoms,
    )


# ---------------------------------------------------------------------------
# quadrature and distances
# ---------------------------------------------------------------------------

def integrate_against(measure: SpectralMeasure, f, exclude_zero_atom: bool = False) -> float:
    """``int f dF``: atoms contribute ``weight * f(location)``, the density
    contributes trapezoid quadrature on its grid.

    With ``exclude_zero_atom`` the atom at zero is skipped, which
    implements integration over the strictly positive part of the
    spectrum (the pseudo-inverse convention for rank-deficient kernels).
    """
    total = 0.0
    for loc, wt in measure.atoms:
        if exclude_zero_atom and abs(loc) <= ZERO_ATOM_TOL:
            continue
        if wt == 0.0:
            continue
        val = f(loc)
        if not np.isfinite(val):
            raise NumericalError(
                f"integrand non-finite on atom at {loc}", grid_point=loc
            )
        total += wt * float(val)
    if measure.grid.size >= 2:
        vals = np.asarray([f(x) for x in measure.grid], dtype=float) \
            if not _vectorizable(f, measure.grid) else np.asarray(f(measure.grid), dtype=float)
        integrand = vals * measure.density
        if not np.all(np.isfinite(integrand[measure.density > 0])):
            bad = measure.grid[(measure.density > 0) & ~np.isfinite(integrand)][0]
            raise NumericalError("integrand non-finite on density support", grid_point=float(bad))
        integrand = np.where(measure.density > 0, integrand, 0.0)
        total += float(np.trapezoid(integrand, measure.grid))
    return total


def _vectorizable(f, grid) -> bool:
    try:
        out = f(grid[:2])
        return np.shape(out) == np.shape(grid[:2])
    except Exception:
        return False


def ks_distance(samples, measure: SpectralMeasure) -> float:
    """Kolmogorov-Smirnov distance between an empirical sample and the
    measure's CDF, with ties (atoms) handled exactly."""
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    if s.size == 0:
        raise InvalidArgumentError("empty sample")
    n = s.size
    vals, counts = np.unique(s, return_counts=True)
    cum = np.cumsum(counts)
    F_emp_at = cum / n                      # right-continuous empirical CDF
    F_emp_before = (cum - counts) / n       # left limit
    F_th = measure.cdf(vals)
    # left limit of the model CDF: subtract atom weights sitting exactly there
    atom_w = np.zeros_like(vals)
    for a, w in measure.atoms:
        atom_w += np.where(np.abs(vals - a) <= ZERO_ATOM_TOL, w, 0.0)
    F_th_before = F_th - atom_w / measure.total_mass()
    return float(
        max(np.max(np.abs(F_emp_at - F_th)), np.max(np.abs(F_emp_before - F_th_before)))
    )
