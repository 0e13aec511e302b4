"""Experiment runners: spectrum, descent, variance scaling, limit checks.

Every runner writes its result tables (CSV or JSON), static SVG figures
rendered from those tables, and a manifest.  The manifest is written even
when a stage fails, with the error recorded, so a run directory is never
silently incomplete.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import plots
from .config import ExperimentConfig
from .errors import HypothesisViolationError
from .kernels import (
    Activation,
    KernelRecipe,
    QuadratureRule,
    preactivation_kernel_matrix,
)
from .measures import MpMapParams, ks_distance, mp_map
from .regression import EgEstimate, GpConfig, empirical_generalisation_error
from .sampling import (
    RngSpec,
    TeacherModel,
    eigenvalues,
    eigenvalues_to_csv,
    histogram_to_csv,
    sample_finite_width_kernel,
    sample_inputs,
)
from .theory import (
    AbcConstants,
    DescentCurve,
    DescentTheoryInputs,
    abc_constants,
    asymptotic_limits,
    check_integrability,
    limit_kernel_measure,
    resolution_limited,
    spectral_g,
    theoretical_generalisation_error,
)

VERSION = "0.1.0"


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = VERSION
    stages: dict = field(default_factory=dict)   # stage name -> seconds
    outputs: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "stages": self.stages,
            "outputs": sorted(self.outputs),
            "extras": self.extras,
            "error": self.error,
        }

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")
        return path


class _Stage:
    """Context helper recording wall-clock per stage into the manifest."""

    def __init__(self, manifest: RunManifest, name: str):
        self.manifest = manifest
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.stages[self.name] = round(time.perf_counter() - self.t0, 4)
        return False


def _prepare(cfg: ExperimentConfig):
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = RunManifest(config_hash=cfg.config_hash())
    cfg_path = os.path.join(cfg.out_dir, "config.json")
    with open(cfg_path, "w") as fh:
        fh.write(cfg.to_json())
    manifest.outputs.append(cfg_path)
    return manifest


def _write(manifest: RunManifest, path: str, text: str) -> str:
    with open(path, "w") as fh:
        fh.write(text)
    manifest.outputs.append(path)
    return path


def _mp_params(cfg: ExperimentConfig, gamma: float) -> MpMapParams:
    return MpMapParams(gamma=gamma, eval_offset_y=cfg.y0,
                       grid_points=cfg.grid_points, max_iters=cfg.max_iters,
                       damping=cfg.damping, tol=cfg.tol)


def _recipe(cfg: ExperimentConfig) -> KernelRecipe:
    return KernelRecipe(activation=Activation.by_name(cfg.activation),
                        depth=cfg.L, quad=QuadratureRule(cfg.quad_order))


def _rows_to_json(rows, columns):
    return json.dumps([dict(zip(columns, r)) for r in rows], indent=2) + "\n"


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------

def run_spectrum_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Pool sampled kernel eigenvalues, solve for the limiting density,
    and emit histogram, density, overlay figure, and KS distance."""
    manifest = _prepare(cfg)
    try:
        recipe = _recipe(cfg)
        teacher = TeacherModel.zero(cfg.d)
        gamma = cfg.n / cfg.N
        psi = cfg.n / cfg.d

        with _Stage(manifest, "sampling"):
            def one_trial(t):
                rng = RngSpec(cfg.seed, t)
                X = sample_inputs(teacher, cfg.n, rng)
                K_prev = preactivation_kernel_matrix(X, cfg.L, recipe.activation,
                                                     recipe.quad)
                K = sample_finite_width_kernel(K_prev, cfg.N, recipe.activation,
                                               rng.with_stream(t + 1_000_000))
                return eigenvalues(K)

            if cfg.threads > 1:
                with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                    evs = list(pool.map(one_trial, range(cfg.trials)))
            else:
                evs = [one_trial(t) for t in range(cfg.trials)]
            pooled = np.concatenate(evs)

        with _Stage(manifest, "theory"):
            mu = limit_kernel_measure(recipe.activation, psi, cfg.L)
            mapped = mp_map(mu, _mp_params(cfg, gamma))

        with _Stage(manifest, "outputs"):
            ks = ks_distance(pooled, mapped)
            zero_frac = float(np.mean(pooled < 1e-8 * pooled.max()))
            manifest.extras.update({
                "ks_distance": ks,
                "zero_fraction_sampled": zero_frac,
                "zero_mass_theory": mapped.zero_mass(),
                "trials_pooled": cfg.trials,
                "gamma": gamma,
                "psi": psi,
            })
            _write(manifest, os.path.join(cfg.out_dir, "eigenvalues.csv"),
                   eigenvalues_to_csv(pooled))
            bins = cfg.histogram_bins
            counts, edges = np.histogram(pooled, bins=bins)
            _write(manifest, os.path.join(cfg.out_dir, "histogram.csv"),
                   histogram_to_csv(counts, edges))
            manifest.outputs.extend(
                mapped.save(os.path.join(cfg.out_dir, "theory_density")))
            svg = plots.spectrum_overlay(
                os.path.join(cfg.out_dir, "spectrum_overlay.svg"),
                counts, edges, mapped.grid, mapped.density, mapped.zero_mass(),
                salt=cfg.config_hash(),
                title=f"spectrum N={cfg.N} n={cfg.n} d={cfg.d} ({cfg.activation}, L={cfg.L})",
            )
            manifest.outputs.append(svg)
        return manifest
    except Exception as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest.write(cfg.out_dir)


# ---------------------------------------------------------------------------
# descent
# ---------------------------------------------------------------------------

def _theory_inputs(cfg: ExperimentConfig, abc: AbcConstants, limit_f2: float,
                   mu) -> DescentTheoryInputs:
    return DescentTheoryInputs(
        psi=cfg.n / cfg.d, limit_measure=mu, abc=abc, limit_f2=limit_f2,
        sigma_eps=cfg.sigma_eps, sigma_tau=cfg.sigma_tau,
        g2_ceiling=cfg.g2_ceiling,
    )


def descent_theory_providers(cfg: ExperimentConfig, mu) -> dict:
    """The two constants pairings for the theory curve.

    ``closed-form`` pairs (psi, 0, psi^2) with unit limiting signal power,
    the normalization those constants presuppose.  ``monte-carlo`` pairs
    the estimated defining expectations with the estimated limiting signal
    power of the literal teacher (which vanishes like 1/d).
    """
    psi = cfg.n / cfg.d
    providers = {}
    if cfg.activation == "identity":
        if cfg.teacher == "linear":
            closed = abc_constants("linear", Activation.by_name(cfg.activation),
                                   cfg.L, psi, mode="closed-form")
            providers["closed-form"] = _theory_inputs(cfg, closed, 1.0, mu)
        else:
            # zero teacher, identity kernel: only the noise moment survives,
            # B = psi sigma_tau^2 exactly
            closed = AbcConstants(A=0.0, B=psi * cfg.sigma_tau**2, C=0.0,
                                  provenance="closed-form")
            providers["closed-form"] = _theory_inputs(cfg, closed, 0.0, mu)
    mc = abc_constants(cfg.teacher, Activation.by_name(cfg.activation),
                       cfg.L, psi, mode="monte-carlo", sigma_tau=cfg.sigma_tau,
                       samples_per_d=80_000, rng=RngSpec(cfg.seed, 999))
    f2_mc = estimate_limit_f2(cfg.teacher, psi, rng=RngSpec(cfg.seed, 998))
    providers["monte-carlo"] = _theory_inputs(cfg, mc, f2_mc, mu)
    return providers


def estimate_limit_f2(teacher_kind: str, psi: float,
                      d_ladder=(100, 200, 400), samples: int = 200_000,
                      rng: RngSpec = RngSpec(0)) -> float:
    """Monte-Carlo limit of E[f(x)^2] extrapolated in 1/d."""
    if teacher_kind == "zero":
        return 0.0
    vals = []
    for j, d in enumerate(d_ladder):
        gen = rng.with_stream(j).generator()
        beta = gen.standard_normal(d)
        beta /= np.linalg.norm(beta)
        x = gen.normal(0.0, 1.0 / np.sqrt(d), (samples, d))
        vals.append(float(np.mean((x @ beta) ** 2)))
    coef = np.polyfit(1.0 / np.asarray(d_ladder, dtype=float), vals, 1)
    return float(np.polyval(coef, 0.0))


def run_descent_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Sweep the feature width, estimate the regression error by Monte
    Carlo, evaluate the limiting-error formula under both constants
    pairings, and emit the paired curve."""
    manifest = _prepare(cfg)
    try:
        recipe = _recipe(cfg)
        psi = cfg.n / cfg.d
        if cfg.teacher == "linear":
            teacher = TeacherModel.linear(cfg.d, cfg.sigma_tau, seed=cfg.seed)
        else:
            teacher = TeacherModel.zero(cfg.d, cfg.sigma_tau)
        gp_cfg = GpConfig(sigma_eps=cfg.sigma_eps, pinv_rcond=cfg.pinv_rcond)
        widths = sorted(set(int(N) for N in cfg.N_list))

        with _Stage(manifest, "simulation"):
            sims: dict[int, EgEstimate] = {}
            for i, N in enumerate(widths):
                sims[N] = empirical_generalisation_error(
                    teacher, recipe, cfg.n, N, gp_cfg, n_test=cfg.n_test,
                    trials=cfg.trials, rng=RngSpec(cfg.seed, i * 10_000),
                    cross_kernel=cfg.cross_kernel, threads=cfg.threads,
                )

        theory_valid = True
        theory_error = None
        with _Stage(manifest, "theory"):
            mu = limit_kernel_measure(recipe.activation, psi, cfg.L)
            try:
                check_integrability(mu)
            except HypothesisViolationError as exc:
                theory_valid = False
                theory_error = str(exc)
            curves = {}
            providers = {}
            if theory_valid:
                providers = descent_theory_providers(cfg, mu)
                moments = {}
                for N in widths:
                    gamma = cfg.n / N
                    mapped = mp_map(mu, _mp_params(cfg, gamma))
                    g = spectral_g(mapped, cfg.sigma_eps, 1, exclude_zero_atom=True)
                    g2 = spectral_g(mapped, cfg.sigma_eps, 2, exclude_zero_atom=True)
                    div = bool(g2 > cfg.g2_ceiling) or resolution_limited(mapped, cfg.sigma_eps)
                    moments[N] = (g, g2, div)
                for name, inputs in providers.items():
                    abc = inputs.abc
                    recs = []
                    for N in widths:
                        g, g2, div = moments[N]
                        val = (inputs.limit_f2 + inputs.sigma_tau**2
                               + abc.C * g**2 + abc.B * g2 - 2 * abc.A * g)
                        recs.append({"N": N, "gamma": cfg.n / N, "eg_theory": val,
                                     "diverged": div})
                    curves[name] = recs

        with _Stage(manifest, "outputs"):
            def build_records(theory_recs):
                out = []
                for N in widths:
                    sim = sims[N]
                    if theory_recs is None:
                        th, div = None, False
                    else:
                        rec = next(r for r in theory_recs if r["N"] == N)
                        th, div = rec["eg_theory"], rec["diverged"]
                    out.append({
                        "N": N, "gamma": cfg.n / N, "eg_theory": th,
                        "eg_sim_mean": sim.mean, "eg_sim_stderr": sim.stderr,
                        "diverged": div,
                    })
                # strictly monotone gamma: widths ascending means gamma descending
                return sorted(out, key=lambda r: -r["gamma"])

            primary_name = "closed-form" if "closed-form" in curves else "monte-carlo"
            primary = build_records(curves.get(primary_name) if theory_valid else None)
            curve = DescentCurve(records=tuple(primary), metadata={
                "config_hash": cfg.config_hash(), "seed": cfg.seed,
                "abc_provenance": primary_name, "theory_valid": theory_valid,
            })
            _write(manifest, os.path.join(cfg.out_dir, "descent_curve.csv"),
                   curve.to_csv())
            if theory_valid and "monte-carlo" in curves and primary_name != "monte-carlo":
                mc_records = build_records(curves["monte-carlo"])
                mc_curve = DescentCurve(records=tuple(mc_records), metadata={
                    "config_hash": cfg.config_hash(), "seed": cfg.seed,
                    "abc_provenance": "monte-carlo",
                })
                _write(manifest,
                       os.path.join(cfg.out_dir, "descent_curve_mc.csv"),
                       mc_curve.to_csv())
                mc_extra = [("theory (defining-limit constants)",
                             [(1.0 / r["gamma"], r["eg_theory"]) for r in mc_records
                              if not r["diverged"] and r["eg_theory"] > 0])]
                abc_mc = providers["monte-carlo"].abc
                manifest.extras["abc_monte_carlo"] = {
                    "A": abc_mc.A, "B": abc_mc.B, "C": abc_mc.C,
                    "stderr": list(abc_mc.stderr),
                    "closed_form_reference": abc_mc.closed_form_reference,
                    "discrepancy": abc_mc.discrepancy,
                }
            else:
                mc_extra = []
                if not theory_valid:
                    manifest.extras["theory_error"] = theory_error
                elif "monte-carlo" in providers:
                    abc_mc = providers["monte-carlo"].abc
                    manifest.extras["abc_monte_carlo"] = {
                        "A": abc_mc.A, "B": abc_mc.B, "C": abc_mc.C,
                        "stderr": list(abc_mc.stderr),
                        "closed_form_reference": abc_mc.closed_form_reference,
                        "discrepancy": abc_mc.discrepancy,
                    }
            svg = plots.descent_overlay(
                os.path.join(cfg.out_dir, "descent_overlay.svg"),
                primary, salt=cfg.config_hash(),
                title=f"double descent n={cfg.n} d={cfg.d} ({cfg.activation}, L={cfg.L})",
                extra_curves=mc_extra,
            )
            manifest.outputs.append(svg)
            peak_N = max(sims, key=lambda N: sims[N].mean)
            manifest.extras.update({
                "theory_valid": theory_valid,
                "sim_peak_N": peak_N,
                "gamma_at_peak": cfg.n / peak_N,
            })
        return manifest
    except Exception as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest.write(cfg.out_dir)


# ---------------------------------------------------------------------------
# variance scaling
# ---------------------------------------------------------------------------

def run_variance_scaling(cfg: ExperimentConfig) -> RunManifest:
    """Entrywise variance of the sampled kernel versus width: log-log
    slope with confidence interval, passing at -1 +- 0.1."""
    manifest = _prepare(cfg)
    try:
        recipe = _recipe(cfg)
        teacher = TeacherModel.zero(cfg.d)
        widths = sorted(set(int(N) for N in cfg.N_list)) or [50, 100, 200, 400, 800, 1600]

        with _Stage(manifest, "sampling"):
            X = sample_inputs(teacher, cfg.n, RngSpec(cfg.seed, 0))
            K_prev = preactivation_kernel_matrix(X, cfg.L, recipe.activation,
                                                 recipe.quad)
            rows = []
            for j, N in enumerate(widths):
                samples = np.empty((cfg.trials, cfg.n, cfg.n))
                for t in range(cfg.trials):
                    K = sample_finite_width_kernel(
                        K_prev, N, recipe.activation,
                        RngSpec(cfg.seed, 1 + j * 100_000 + t))
                    samples[t] = K.entries
                ent_var = samples.var(axis=0, ddof=1)
                iu = np.triu_indices(cfg.n)
                rows.append((N, float(ent_var[iu].mean())))

        with _Stage(manifest, "fit"):
            logN = np.log([r[0] for r in rows])
            logV = np.log([r[1] for r in rows])
            design = np.vstack([logN, np.ones_like(logN)]).T
            coef, residuals, *_ = np.linalg.lstsq(design, logV, rcond=None)
            slope, intercept = float(coef[0]), float(coef[1])
            dof = len(rows) - 2
            resid = logV - design @ coef
            s2 = float(resid @ resid) / max(dof, 1)
            cov = s2 * np.linalg.inv(design.T @ design)
            slope_se = float(np.sqrt(cov[0, 0]))
            ci = (slope - 1.96 * slope_se, slope + 1.96 * slope_se)
            passes = -1.1 <= slope <= -0.9

        with _Stage(manifest, "outputs"):
            lines = ["N,entry_variance"]
            lines += [f"{N},{v!r}" for N, v in rows]
            _write(manifest, os.path.join(cfg.out_dir, "variance_scaling.csv"),
                   "\n".join(lines) + "\n")
            svg = plots.variance_scaling_plot(
                os.path.join(cfg.out_dir, "variance_scaling.svg"),
                [r[0] for r in rows], [r[1] for r in rows], slope, intercept,
                salt=cfg.config_hash(),
                title=f"kernel entry variance vs width ({cfg.activation}, L={cfg.L})",
            )
            manifest.outputs.append(svg)
            manifest.extras.update({
                "slope": slope, "slope_ci": list(ci), "slope_stderr": slope_se,
                "passes": bool(passes),
            })
        return manifest
    except Exception as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest.write(cfg.out_dir)


# ---------------------------------------------------------------------------
# limits
# ---------------------------------------------------------------------------

def run_limits_check(cfg: ExperimentConfig) -> RunManifest:
    """Compare the error curve at extreme ratios against the closed-form
    asymptotic endpoints; 2% relative tolerance."""
    manifest = _prepare(cfg)
    try:
        psi = cfg.n / cfg.d
        mu = limit_kernel_measure(Activation.by_name(cfg.activation), psi, cfg.L)

        with _Stage(manifest, "theory"):
            providers = descent_theory_providers(cfg, mu)
            inputs = providers[cfg.abc_mode if cfg.abc_mode in providers else "closed-form"]
            under, over = asymptotic_limits(inputs)  # raises on violation
            at_under = theoretical_generalisation_error(
                inputs, cfg.gamma_under, _mp_params(cfg, cfg.gamma_under))
            at_over = theoretical_generalisation_error(
                inputs, cfg.gamma_over, _mp_params(cfg, cfg.gamma_over))
            rel_under = abs(at_under.value - under) / max(abs(under), 1e-300)
            rel_over = abs(at_over.value - over) / max(abs(over), 1e-300)
            result = {
                "psi": psi,
                "abc_provenance": inputs.abc.provenance,
                "underparam_limit": under,
                "curve_at_gamma_under": at_under.value,
                "rel_err_under": rel_under,
                "under_ok": bool(rel_under <= 0.02),
                "overparam_limit": over,
                "curve_at_gamma_over": at_over.value,
                "rel_err_over": rel_over,
                "over_ok": bool(rel_over <= 0.02),
                "gamma_under": cfg.gamma_under,
                "gamma_over": cfg.gamma_over,
            }

        with _Stage(manifest, "outputs"):
            _write(manifest, os.path.join(cfg.out_dir, "limits.json"),
                   json.dumps(result, indent=2, sort_keys=True) + "\n")
            svg = plots.limits_plot(
                os.path.join(cfg.out_dir, "limits.svg"),
                [("underparameterized", at_under.value, under),
                 ("overparameterized", at_over.value, over)],
                salt=cfg.config_hash(),
                title=f"asymptotic endpoints, psi={psi:g}",
            )
            manifest.outputs.append(svg)
            manifest.extras.update(result)
        return manifest
    except Exception as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest.write(cfg.out_dir)


RUNNERS = {
    "spectrum": run_spectrum_experiment,
    "descent": run_descent_experiment,
    "variance-scaling": run_variance_scaling,
    "limits": run_limits_check,
}


def run(cfg: ExperimentConfig) -> RunManifest:
    cfg.validate()
    return RUNNERS[cfg.kind](cfg)
