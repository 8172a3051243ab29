"""Training objectives for outlier-guided collaborative adaptation.

The outlier-guided loss standardizes each group member's prediction
against the group consensus, d = (g - mu) / sigma, and charges

    gamma * |Phi(d) - Phi(0)|  +  1[|d| > u] * |d|

where Phi is the standard-normal CDF and u is its (1 - epsilon)
quantile. Inside the reliable band the CDF term gives a small, bounded
gradient; a standardized prediction beyond the quantile is treated as an
outlier and pulled back with a full linear penalty. The feature-alignment
loss is a symmetric KL between exponential-normalized feature vectors of
an online member and its momentum twin; the source term is a plain L1
anchor on labeled source batches.

All losses are torch expressions, differentiable in the online group's
outputs. Group statistics (mu, sigma) are always detached: members are
punished relative to the consensus, the consensus itself is never pushed.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

LOG_FLOOR = 1e-8
DEFAULT_SIGMA_FLOOR = 1e-3


class TrainingDiverged(RuntimeError):
    """Raised when a loss term stops being finite."""


def std_normal_cdf(x):
    """Cumulative distribution of the standard normal.

    Accepts a float or a tensor; tensor inputs stay on the autodiff graph
    (the derivative is the standard normal density).
    """
    if isinstance(x, torch.Tensor):
        return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"std_normal_cdf requires finite input, got {x}")
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def std_normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF for p strictly inside (0, 1)."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must be in (0, 1), got {p}")
    return float(torch.special.ndtri(torch.tensor(p, dtype=torch.float64)))


@dataclass(frozen=True)
class OGLossParams:
    """Hyperparameters of the outlier-guided loss.

    quantile_u is derived from epsilon; passing an explicit value that
    disagrees with std_normal_quantile(1 - epsilon) by more than 1e-6 is
    rejected. sigma_floor bounds the standardization denominator away
    from zero so a converged group cannot blow up d.
    """

    gamma: float = 0.01
    epsilon: float = 0.05
    quantile_u: float | None = None
    sigma_floor: float = DEFAULT_SIGMA_FLOOR

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must be in (0, 0.5), got {self.epsilon}")
        if self.sigma_floor <= 0.0:
            raise ValueError(f"sigma_floor must be > 0, got {self.sigma_floor}")
        u = std_normal_quantile(1.0 - self.epsilon)
        if self.quantile_u is None:
            object.__setattr__(self, "quantile_u", u)
        elif abs(self.quantile_u - u) > 1e-6:
            raise ValueError(
                f"quantile_u={self.quantile_u} inconsistent with epsilon={self.epsilon} "
                f"(expected {u:.8f})"
            )


@dataclass
class GroupStats:
    """Per-element, per-component consensus statistics of a model group."""

    mu: torch.Tensor
    sigma: torch.Tensor
    source: str  # "online" or "momentum"


def group_stats(
    predictions: torch.Tensor, source: str, sigma_floor: float = DEFAULT_SIGMA_FLOOR
) -> GroupStats:
    """Mean and unbiased std of grouped predictions across the member axis.

    predictions is (H, B, 2); statistics are taken over H with the H - 1
    denominator, independently per batch element and output component.
    The results are detached constants: gradient never flows through the
    consensus, only through the member predictions standardized by it.
    """
    if predictions.ndim != 3:
        raise ValueError(f"expected (H, B, C) predictions, got shape {tuple(predictions.shape)}")
    if predictions.shape[0] < 2:
        raise ValueError(f"group statistics require H >= 2 members, got {predictions.shape[0]}")
    if source not in ("online", "momentum"):
        raise ValueError(f"unknown statistics source {source!r}")
    if sigma_floor <= 0.0:
        raise ValueError(f"sigma_floor must be > 0, got {sigma_floor}")
    preds = predictions.detach()
    mu = preds.mean(dim=0)
    sigma = preds.var(dim=0, correction=1).sqrt().clamp_min(sigma_floor)
    return GroupStats(mu=mu, sigma=sigma, source=source)


def _standardize(predictions: torch.Tensor, stats: GroupStats) -> torch.Tensor:
    if predictions.ndim != 3:
        raise ValueError(f"expected (H, B, C) predictions, got shape {tuple(predictions.shape)}")
    if stats.mu.shape != predictions.shape[1:] or stats.sigma.shape != predictions.shape[1:]:
        raise ValueError(
            f"stats shape {tuple(stats.mu.shape)} does not match "
            f"predictions {tuple(predictions.shape)}"
        )
    return (predictions - stats.mu) / stats.sigma


def outlier_mask(d: torch.Tensor, params: OGLossParams) -> torch.Tensor:
    """Boolean mask of standardized deviations beyond the reliable band.

    Two-sided test |d| > u_(1-eps); under normality it fires with
    probability 2 * epsilon.
    """
    return d.detach().abs() > params.quantile_u


def outlier_guided_loss(
    predictions: torch.Tensor, stats: GroupStats, params: OGLossParams
) -> torch.Tensor:
    """Outlier-guided loss over an (H, B, 2) prediction tensor.

    Per element: gamma * |Phi(d) - 0.5| plus |d| gated by the outlier
    mask, then mean-reduced over members, batch, and components. The mask
    is a constant during differentiation (standard subgradient choice at
    the threshold); the gated |d| term itself carries gradient.
    """
    d = _standardize(predictions, stats)
    band_term = params.gamma * (std_normal_cdf(d) - 0.5).abs()
    gate = outlier_mask(d, params).to(d.dtype)
    return (band_term + gate * d.abs()).mean()


def baseline_loss(
    predictions: torch.Tensor, stats: GroupStats, kind: str
) -> torch.Tensor:
    """L1 or L2 loss over the same standardized deviations as the OG loss.

    Interchangeable with outlier_guided_loss in the adaptation engine for
    loss-function comparisons.
    """
    d = _standardize(predictions, stats)
    if kind == "l1":
        return d.abs().mean()
    if kind == "l2":
        return (d * d).mean()
    raise ValueError(f"unknown baseline loss kind {kind!r}")


def js_feature_loss(
    z_online: torch.Tensor, z_momentum: torch.Tensor, literal_form: bool = False
) -> torch.Tensor:
    """Symmetric KL between exponential-normalized feature vectors.

    Raw features are mapped to probability vectors with a softmax along
    the feature axis, then KL(p || q) = sum p * log(p / q) is evaluated
    with a 1e-8 additive floor inside the logarithms and symmetrized as
    (KL(p || q) + KL(q || p)) / 2, mean over the batch.

    literal_form=True is a debug mode that drops the leading p factor
    from the KL sum; the symmetrized combination then cancels to zero
    identically, which is why the standard form is the default.
    """
    if z_online.shape != z_momentum.shape:
        raise ValueError(
            f"feature shape mismatch: {tuple(z_online.shape)} vs {tuple(z_momentum.shape)}"
        )
    if z_online.ndim != 2 or z_online.shape[1] < 2:
        raise ValueError(f"expected (B, F) features with F >= 2, got {tuple(z_online.shape)}")
    p = torch.softmax(z_online, dim=-1)
    q = torch.softmax(z_momentum, dim=-1)
    log_ratio = torch.log(p + LOG_FLOOR) - torch.log(q + LOG_FLOOR)
    if literal_form:
        kl_pq = log_ratio.sum(dim=-1)
        kl_qp = (-log_ratio).sum(dim=-1)
    else:
        kl_pq = (p * log_ratio).sum(dim=-1)
        kl_qp = (q * -log_ratio).sum(dim=-1)
    return (0.5 * (kl_pq + kl_qp)).mean()


def source_gaze_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between predictions and labels on (B, 2)."""
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(label.shape)}")
    return (pred - label).abs().mean()


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective: lambda1 on the feature term,
    lambda2 on the two outlier-guided terms, unit weight on the source
    anchor."""

    lambda1: float = 0.01
    lambda2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def total_loss(l_js, l_sg, l_og_online, l_og_momentum, weights: LossWeights):
    """Weighted sum lambda1 * js + sg + lambda2 * (og + og_momentum).

    Raises TrainingDiverged if any term is non-finite, so a blown-up run
    aborts instead of silently optimizing NaNs.
    """
    terms = {"js": l_js, "sg": l_sg, "og": l_og_online, "og_m": l_og_momentum}
    for name, value in terms.items():
        if not math.isfinite(float(value)):
            raise TrainingDiverged(f"loss term {name!r} is non-finite: {float(value)}")
    return weights.lambda1 * l_js + l_sg + weights.lambda2 * (l_og_online + l_og_momentum)


def loss_curve_table(
    params: OGLossParams,
    d_range: tuple[float, float] = (-4.0, 4.0),
    n_points: int = 1601,
) -> np.ndarray:
    """Tabulate the OG, L1, and L2 losses over scalar deviations d.

    Returns an (n_points, 4) array with columns (d, og, l1, l2). The OG
    column has a jump of height u_(1-eps) at |d| = u_(1-eps).
    """
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    lo, hi = float(d_range[0]), float(d_range[1])
    if not lo < hi:
        raise ValueError(f"invalid d_range ({lo}, {hi})")
    d = np.linspace(lo, hi, n_points)
    d[np.abs(d) < 1e-12] = 0.0  # make the d=0 row exact on symmetric grids
    phi = std_normal_cdf(torch.from_numpy(d)).numpy()
    og = params.gamma * np.abs(phi - 0.5) + np.where(
        np.abs(d) > params.quantile_u, np.abs(d), 0.0
    )
    return np.column_stack([d, og, np.abs(d), d * d])


def write_loss_curve(table: np.ndarray, path) -> None:
    """Write a loss-curve table as delimiter-separated text with header d,og,l1,l2."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("d,og,l1,l2\n")
        for row in table:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
