"""Loss terms: multi-view flow, landmark, eye/lip offsets, regularization.

All terms are non-negative and vanish at a perfect reconstruction.  By
default each term is count-normalized (a mean) so magnitudes are resolution-
and landmark-count-invariant; `normalize=False` gives the raw-sum variant.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from mvflame.flow import mean_flow_magnitude

REG_EPS = 1e-12

TERM_NAMES = ("multiop", "singlelmk", "eye", "lip", "reg")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total loss; defaults follow the trained-model settings."""

    multiop: float = 1.0
    singlelmk: float = 1.0
    eye: float = 1.0
    lip: float = 0.5
    reg: float = 1e-4

    def __post_init__(self):
        for name in TERM_NAMES:
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"loss weight {name} must be finite and >= 0")

    def as_dict(self):
        return {name: float(getattr(self, name)) for name in TERM_NAMES}


@dataclass
class LossReport:
    """Unweighted term values plus bookkeeping for one evaluation."""

    terms: dict
    weights: LossWeights
    total: float
    per_view: dict = field(default_factory=dict)
    covisible_counts: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "total": self.total,
            "terms": {k: float(v) for k, v in self.terms.items()},
            "weights": self.weights.as_dict(),
            "per_view": self.per_view,
            "covisible_counts": {str(k): int(v) for k, v in self.covisible_counts.items()},
        }


def mask_array(mask):
    """Boolean pixel array from either a BinaryMask or a plain ndarray."""
    if isinstance(mask, np.ndarray):
        return mask
    return np.asarray(mask.data)


def landmarks_in_mask(landmarks2d, mask):
    """Inclusion flags: landmark's ground-truth pixel lies inside the mask."""
    data = mask_array(mask)
    h, w = data.shape
    pts = np.asarray(landmarks2d, dtype=np.float64)
    xi = np.floor(pts[:, 0]).astype(np.int64)
    yi = np.floor(pts[:, 1]).astype(np.int64)
    inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros(len(pts), dtype=bool)
    out[inb] = data[yi[inb], xi[inb]]
    return out


def landmark_loss(landmarks_obs, landmarks_proj, include=None, normalize=True):
    """L1 keypoint discrepancy over the included landmarks.

    `include` is a boolean inclusion vector (e.g. from landmarks_in_mask);
    None includes all landmarks (strict-literal reading).
    """
    obs = np.asarray(landmarks_obs, dtype=np.float64)
    proj = np.asarray(landmarks_proj, dtype=np.float64)
    if include is None:
        include = np.ones(len(obs), dtype=bool)
    n = int(include.sum())
    if n == 0:
        return 0.0
    diff = np.abs(obs[include] - proj[include]).sum()
    return float(diff / n) if normalize else float(diff)


def _pair_offset_loss(landmarks_obs, landmarks_proj, pairs, normalize):
    obs = np.asarray(landmarks_obs, dtype=np.float64)
    proj = np.asarray(landmarks_proj, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return 0.0
    d_obs = obs[pairs[:, 0]] - obs[pairs[:, 1]]
    d_proj = proj[pairs[:, 0]] - proj[pairs[:, 1]]
    total = np.abs(d_obs - d_proj).sum()
    return float(total / len(pairs)) if normalize else float(total)


def eye_loss(landmarks_obs, landmarks_proj, eye_pairs, normalize=True):
    """Relative-offset L1 loss over eyelid landmark pairs."""
    return _pair_offset_loss(landmarks_obs, landmarks_proj, eye_pairs, normalize)


def lip_loss(landmarks_obs, landmarks_proj, lip_pairs, normalize=True):
    """Relative-offset L1 loss over lip landmark pairs."""
    return _pair_offset_loss(landmarks_obs, landmarks_proj, lip_pairs, normalize)


def smoothed_norm(x, eps=REG_EPS):
    """sqrt(sum(x^2) + eps): an L2 norm with a well-defined gradient at 0."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.sum(x * x) + eps))


def reg_loss(beta, psi, albedo_offset, eps=REG_EPS):
    """||beta|| + ||psi|| + ||albedo offset||, eps-smoothed plain norms."""
    return (smoothed_norm(beta, eps) + smoothed_norm(psi, eps)
            + smoothed_norm(albedo_offset, eps))


def multiview_flow_loss(image_b, image_ab, mc_mask, estimator):
    """Flow loss for one ordered view pair: mean |F(MC*I_b, MC*I_ab)| over MC.

    Returns (value, count).  The caller averages over ordered pairs.  An
    empty covisible mask contributes (0.0, 0).
    """
    data = mask_array(mc_mask)
    if not data.any():
        return 0.0, 0
    m = data[:, :, None].astype(np.float64)
    flow = estimator(np.asarray(image_b) * m, np.asarray(image_ab) * m)
    return mean_flow_magnitude(flow, data)


def total_loss(terms, weights: LossWeights):
    """Weighted sum of the five terms; exact (correctly rounded) summation."""
    products = [float(getattr(weights, name)) * float(terms.get(name, 0.0))
                for name in TERM_NAMES]
    total = math.fsum(products)
    report = LossReport(
        terms={name: float(terms.get(name, 0.0)) for name in TERM_NAMES},
        weights=weights,
        total=total,
    )
    return total, report
