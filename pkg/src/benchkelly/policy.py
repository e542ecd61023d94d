"""Optimal feedback policies and portfolio decompositions.

All policies are affine in the factor state.  The optimal allocation is
computed by two provably equivalent routes:

* "direct": from the gradient of the log exponential criterion,
  h = 1/(theta+1) (SS')^{-1} (a + A x + theta S Xi + S L' Du);
* "twostep": from the gradient of the certainty-equivalent surface,
  h = 1/(theta+1) (SS')^{-1} (a + A x + theta S Xi - theta S L' DCE).

The adverse tilt gamma, the transformed-measure tilt nu, and the
fractional-Kelly decomposition (Kelly + benchmark-tracking - hedging) are
evaluated with runtime cross-checks: every quantity with two published
representations is computed both ways and compared.

theta == 0 is the exact Kelly branch: the allocation is (SS')^{-1}(a + A x)
with no value-gradient correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RepresentationMismatch
from .model import ValidatedModel
from .valuefn import ValueCoefficients, value_function

CROSS_CHECK_TOL = 1e-10


@dataclass(frozen=True)
class PolicyAction:
    """All policy outputs at one (t, x) point.

    Invariants (enforced at construction by fractional_kelly):
      allocation = kf*kelly + (1-kf)*bench_track - (1-kf)*hedge
      allocation = kelly + (SS')^{-1} Sigma tilt
      tilt = tilt_twostep - theta (Sigma' allocation - Xi)
    """

    allocation: np.ndarray     # h*, (m,)
    tilt: np.ndarray           # adverse measure tilt, (d,)
    tilt_twostep: np.ndarray   # transformed-measure tilt, (d,)
    kelly: np.ndarray          # growth-optimal component, (m,)
    bench_track: np.ndarray    # benchmark-tracking component, (m,)
    hedge: np.ndarray          # intertemporal hedging component, (m,)
    kelly_fraction: float      # 1/(theta+1)


def _drift_vec(block, x):
    return block.asset_drift + block.asset_factor_loading @ x


def optimal_h(
    model: ValidatedModel,
    vc: ValueCoefficients,
    t: float,
    x: np.ndarray,
    route: str = "direct",
) -> np.ndarray:
    """Optimal allocation at (t, x) by the requested route."""
    x = np.asarray(x, dtype=float)
    block = model.coefficients(t)
    gram = model.gram_blocks(t)
    theta = model.theta
    if theta == 0.0:
        return gram.ss_solve(_drift_vec(block, x))
    ve = value_function(vc, t, x)
    if route == "direct":
        correction = gram.sl @ ve.gradient
    elif route == "twostep":
        correction = -theta * (gram.sl @ ve.ce_gradient)
    else:
        raise ValueError(f"unknown route '{route}'")
    rhs = _drift_vec(block, x) + theta * gram.s_xi + correction
    return gram.ss_solve(rhs) / (theta + 1.0)


def optimal_gamma(
    model: ValidatedModel,
    vc: ValueCoefficients,
    t: float,
    x: np.ndarray,
) -> np.ndarray:
    """Adverse measure tilt at (t, x).

    Computed from its defining form (value gradient minus scaled tracking
    error) and from the projected closed form; the two must agree to
    CROSS_CHECK_TOL or the upstream solve is inconsistent.
    """
    x = np.asarray(x, dtype=float)
    block = model.coefficients(t)
    gram = model.gram_blocks(t)
    theta = model.theta
    lam = block.factor_vol
    sigma = block.asset_vol
    grad = value_function(vc, t, x).gradient

    h = optimal_h(model, vc, t, x)
    form1 = lam.T @ grad - theta * (sigma.T @ h - block.bench_vol)

    proj = model.projection_matrices(t, theta)
    form2 = (
        proj.pminus @ (lam.T @ grad)
        - (theta / (theta + 1.0)) * (sigma.T @ gram.ss_solve(_drift_vec(block, x)))
        + theta * (proj.pminus @ block.bench_vol)
    )
    gap = float(np.abs(form1 - form2).max())
    if gap > CROSS_CHECK_TOL * (1.0 + float(np.abs(form1).max())):
        raise RepresentationMismatch(
            f"tilt representations disagree by {gap:.3e} at t={t:g}"
        )
    return form1


def optimal_nu(
    model: ValidatedModel,
    vc: ValueCoefficients,
    t: float,
    x: np.ndarray,
) -> np.ndarray:
    """Transformed-measure tilt: -theta * Lambda' DCE(t, x)."""
    x = np.asarray(x, dtype=float)
    lam = model.coefficients(t).factor_vol
    ce_grad = value_function(vc, t, x).ce_gradient
    return -model.theta * (lam.T @ ce_grad)


def fractional_kelly(
    model: ValidatedModel,
    vc: ValueCoefficients,
    t: float,
    x: np.ndarray,
) -> PolicyAction:
    """Full policy decomposition at (t, x) with all identity checks enforced."""
    x = np.asarray(x, dtype=float)
    block = model.coefficients(t)
    gram = model.gram_blocks(t)
    theta = model.theta
    sigma = block.asset_vol
    kf = 1.0 / (theta + 1.0)

    ce_grad = value_function(vc, t, x).ce_gradient
    kelly = gram.ss_solve(_drift_vec(block, x))
    bench_track = gram.ss_solve(gram.s_xi)
    hedge = gram.ss_solve(gram.sl @ ce_grad)
    allocation = kf * kelly + (1.0 - kf) * bench_track - (1.0 - kf) * hedge

    h_ref = optimal_h(model, vc, t, x)
    scale = 1.0 + float(np.abs(h_ref).max())
    if float(np.abs(allocation - h_ref).max()) > 1e-12 * scale:
        raise RepresentationMismatch(
            f"fractional-Kelly recomposition deviates from the optimal allocation at t={t:g}"
        )

    if theta == 0.0:
        tilt = np.zeros(model.d)
        nu = np.zeros(model.d)
    else:
        tilt = optimal_gamma(model, vc, t, x)
        nu = optimal_nu(model, vc, t, x)

    regularized = kelly + gram.ss_solve(sigma @ tilt)
    if float(np.abs(allocation - regularized).max()) > 1e-12 * scale:
        raise RepresentationMismatch(
            f"regularized-Kelly identity violated at t={t:g}"
        )
    tilt_residual = tilt - nu + theta * (sigma.T @ allocation - block.bench_vol)
    if float(np.abs(tilt_residual).max()) > 1e-12 * (1.0 + float(np.abs(tilt).max())):
        raise RepresentationMismatch(
            f"tilt relation between the two routes violated at t={t:g}"
        )

    return PolicyAction(
        allocation=allocation,
        tilt=tilt,
        tilt_twostep=nu,
        kelly=kelly,
        bench_track=bench_track,
        hedge=hedge,
        kelly_fraction=kf,
    )


# ---------------------------------------------------------------------------
# Batch evaluators over a state matrix X of shape (paths, n); the simulator
# uses these so there is a single source of policy arithmetic.
# ---------------------------------------------------------------------------

def batch_kelly(model: ValidatedModel, t: float, X: np.ndarray) -> np.ndarray:
    block = model.coefficients(t)
    gram = model.gram_blocks(t)
    rhs = block.asset_drift + X @ block.asset_factor_loading.T
    return gram.ss_solve(rhs.T).T


def batch_allocation(
    model: ValidatedModel,
    vc: ValueCoefficients,
    t: float,
    X: np.ndarray,
    route: str = "direct",
) -> np.ndarray:
    block = model.coefficients(t)
    gram = model.gram_blocks(t)
    theta = model.theta
    if theta == 0.0:
        return batch_kelly(model, t, X)
    quad, lin, _ = vc.at(t)
    ce_grad = X @ quad.T + lin
    if route == "direct":
        correction = (-theta * ce_grad) @ gram.sl.T
    elif route == "twostep":
        correction = -theta * (ce_grad @ gram.sl.T)
    else:
        raise ValueError(f"unknown route '{route}'")
    rhs = block.asset_drift + X @ block.asset_factor_loading.T + theta * gram.s_xi + correction
    return gram.ss_solve(rhs.T).T / (theta + 1.0)


def batch_gamma(
    model: ValidatedModel,
    vc: ValueCoefficients,
    t: float,
    X: np.ndarray,
    H: np.ndarray,
) -> np.ndarray:
    """Adverse tilt along a batch, from the gradient and the applied allocation."""
    block = model.coefficients(t)
    theta = model.theta
    quad, lin, _ = vc.at(t)
    grad = -theta * (X @ quad.T + lin)
    return grad @ block.factor_vol - theta * (H @ block.asset_vol - block.bench_vol)


def batch_nu(
    model: ValidatedModel,
    vc: ValueCoefficients,
    t: float,
    X: np.ndarray,
) -> np.ndarray:
    block = model.coefficients(t)
    quad, lin, _ = vc.at(t)
    return -model.theta * ((X @ quad.T + lin) @ block.factor_vol)
