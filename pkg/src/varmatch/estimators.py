"""Stochastic gradient estimators for expected detection likelihoods.

The latent state of one scene is a per-anchor triple (cls logit, mu[4],
log_sigma[4]); estimators differentiate the expectation of an objective
f(logits, z) under z ~ N(mu, sigma^2) w.r.t. all of them.  Three routes:

* reparameterization: z = mu + sigma * eps, pathwise chain rule (the
  low-variance route used for training);
* score function: (f - baseline) * grad log q, value-only, high variance,
  kept for comparison (the classification logits do not parameterize q, so
  their gradient is still taken pathwise);
* central finite differences of the Monte-Carlo value with common random
  numbers, the oracle the other two are checked against.

Flat parameter layout is [cls_logits, mu.ravel(), log_sigma.ravel()].

Also here: Monte-Carlo expected-IoU surfaces over a 2-d slice of the
encoding space, used to show how sampling noise smooths the IoU landscape's
kinks (sigma = 0 reproduces the raw piecewise surface).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import draw_noise
from .geometry import FA, FCOS, box, decode, fa_decode_jacobian_diag, iou
from .likelihood import pseudo_log_likelihood, build_bags

REPARAM = "reparam"
SCORE_FN = "score_fn"
FINITE_DIFF = "finite_diff"


@dataclass
class ProposalParams:
    """Per-anchor variational parameters: (A,), (A, 4), (A, 4)."""

    cls_logits: np.ndarray
    mu: np.ndarray
    log_sigma: np.ndarray

    @property
    def n_anchors(self) -> int:
        return self.cls_logits.shape[0]

    def copy(self) -> "ProposalParams":
        return ProposalParams(self.cls_logits.copy(), self.mu.copy(), self.log_sigma.copy())


def pack(params: ProposalParams) -> np.ndarray:
    return np.concatenate([params.cls_logits, params.mu.ravel(), params.log_sigma.ravel()])


def unpack(flat: np.ndarray, n_anchors: int) -> ProposalParams:
    flat = np.asarray(flat, dtype=float)
    a = n_anchors
    return ProposalParams(
        cls_logits=flat[:a].copy(),
        mu=flat[a : a + 4 * a].reshape(a, 4).copy(),
        log_sigma=flat[a + 4 * a :].reshape(a, 4).copy(),
    )


def zero_params(n_anchors: int) -> ProposalParams:
    return ProposalParams(np.zeros(n_anchors), np.zeros((n_anchors, 4)), np.zeros((n_anchors, 4)))


@dataclass
class GradientEstimate:
    value: float
    grad: np.ndarray
    n_samples: int
    estimator: str


class SceneObjective:
    """Pseudo detection log-likelihood of one scene as a function of
    (cls logits, sampled encodings z).

    Bags are built once from the fixed anchor boxes; z decodes through the
    anchor-relative ("fa") parameterization, and box gradients chain through
    its diagonal Jacobian.
    """

    def __init__(self, gt_boxes, anchor_boxes, *, bag_size=8, gamma=2.0, negatives="all"):
        self.gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
        self.anchor_boxes = np.asarray(anchor_boxes, dtype=float).reshape(-1, 4)
        self.bag_size = int(bag_size)
        self.gamma = float(gamma)
        self.negatives = negatives
        self.bags = build_bags(self.gt_boxes, self.anchor_boxes, self.bag_size)
        self.last_report = None  # decomposition of the most recent evaluation

    @property
    def n_anchors(self) -> int:
        return self.anchor_boxes.shape[0]

    def value_and_grad(self, cls_logits, z):
        boxes = decode(z, self.anchor_boxes, FA)
        report, d_logits, d_boxes = pseudo_log_likelihood(
            self.gt_boxes,
            self.bags,
            cls_logits,
            boxes,
            bag_size=self.bag_size,
            gamma=self.gamma,
            negatives=self.negatives,
        )
        d_z = d_boxes * fa_decode_jacobian_diag(z, self.anchor_boxes)
        self.last_report = report
        return -report.total_loss, d_logits, d_z

    def value(self, cls_logits, z) -> float:
        return self.value_and_grad(cls_logits, z)[0]


class QuadraticObjective:
    """f(z) = -sum((z - center)^2): the closed-form Gaussian test hook.

    E[f] = -sum((mu - c)^2 + sigma^2), so grad_mu = -2 (mu - c) and
    grad_log_sigma = -2 sigma^2 exactly.
    """

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float).reshape(-1, 4)

    @property
    def n_anchors(self) -> int:
        return self.center.shape[0]

    def value_and_grad(self, cls_logits, z):
        diff = z - self.center
        return float(-np.sum(diff * diff)), np.zeros_like(cls_logits), -2.0 * diff

    def value(self, cls_logits, z) -> float:
        diff = z - self.center
        return float(-np.sum(diff * diff))

    def expected_value(self, params: ProposalParams) -> float:
        sigma2 = np.exp(2.0 * params.log_sigma)
        return float(-np.sum((params.mu - self.center) ** 2 + sigma2))

    def expected_gradient(self, params: ProposalParams) -> np.ndarray:
        g = zero_params(self.n_anchors)
        g.mu[:] = -2.0 * (params.mu - self.center)
        g.log_sigma[:] = -2.0 * np.exp(2.0 * params.log_sigma)
        return pack(g)


def sample_block(seed, stream, n_samples, shape):
    """(n_samples,) + shape standard normals from one addressed stream.

    The block is generated front-to-back, so the first k samples are the
    same regardless of n_samples; estimates with different sample counts
    share their prefix draws.
    """
    return draw_noise(seed, tuple(stream), (int(n_samples),) + tuple(shape)).epsilon


def reparam_gradient(objective, params: ProposalParams, n_samples: int, seed: int, stream=(0,)) -> GradientEstimate:
    """Pathwise Monte-Carlo gradient of E[f] (higher-is-better convention).

    Deterministic given (seed, stream, params, n_samples).
    """
    sigma = np.exp(params.log_sigma)
    grad = np.zeros(9 * params.n_anchors)
    a = params.n_anchors
    value = 0.0
    eps_block = sample_block(seed, stream, n_samples, params.mu.shape)
    for s in range(n_samples):
        eps = eps_block[s]
        z = params.mu + sigma * eps
        val, d_logits, d_z = objective.value_and_grad(params.cls_logits, z)
        value += val
        grad[:a] += d_logits
        grad[a : 5 * a] += d_z.ravel()
        grad[5 * a :] += (d_z * sigma * eps).ravel()
    grad /= n_samples
    return GradientEstimate(value / n_samples, grad, int(n_samples), REPARAM)


def score_function_gradient(
    objective, params: ProposalParams, n_samples: int, seed: int, stream=(0,), baseline: str = "none"
) -> GradientEstimate:
    """REINFORCE gradient for the distribution parameters.

    grad log q is eps/sigma for mu and eps^2 - 1 for log_sigma.  With
    baseline="mean" each sample is centered by the leave-one-out mean of the
    other samples, which keeps the estimator unbiased (hence n_samples >= 2).
    Classification logits are not distribution parameters; their gradient is
    the averaged pathwise one.
    """
    if baseline not in ("none", "mean"):
        raise ValueError(f"unknown baseline {baseline!r}")
    if baseline == "mean" and n_samples < 2:
        raise ValueError("baseline='mean' needs at least 2 samples")
    sigma = np.exp(params.log_sigma)
    a = params.n_anchors
    values = np.empty(n_samples)
    eps_all = sample_block(seed, stream, n_samples, params.mu.shape)
    d_logits_sum = np.zeros(a)
    for s in range(n_samples):
        z = params.mu + sigma * eps_all[s]
        val, d_logits, _ = objective.value_and_grad(params.cls_logits, z)
        values[s] = val
        d_logits_sum += d_logits

    if baseline == "mean":
        total = values.sum()
        base = (total - values) / (n_samples - 1)
    else:
        base = np.zeros(n_samples)
    centered = values - base

    score_mu = eps_all / sigma
    score_ls = eps_all * eps_all - 1.0
    grad = np.zeros(9 * a)
    grad[:a] = d_logits_sum / n_samples
    grad[a : 5 * a] = np.tensordot(centered, score_mu, axes=1).ravel() / n_samples
    grad[5 * a :] = np.tensordot(centered, score_ls, axes=1).ravel() / n_samples
    return GradientEstimate(float(values.mean()), grad, int(n_samples), SCORE_FN)


def mc_expected_value(objective, params: ProposalParams, n_samples: int, seed: int, stream=(0,)) -> float:
    """Monte-Carlo estimate of E[f] on the fixed noise streams."""
    sigma = np.exp(params.log_sigma)
    total = 0.0
    eps_block = sample_block(seed, stream, n_samples, params.mu.shape)
    for s in range(n_samples):
        total += objective.value(params.cls_logits, params.mu + sigma * eps_block[s])
    return total / n_samples


def finite_diff_gradient(
    objective, params: ProposalParams, n_samples: int, seed: int, stream=(0,), step: float = 1e-5
) -> GradientEstimate:
    """Central differences of the Monte-Carlo value, common random numbers.

    The same noise streams are replayed at params +/- step, so this
    differentiates the exact surrogate the pathwise estimator averages and
    serves as its oracle.
    """
    if not (1e-6 <= step <= 1e-3):
        raise ValueError("step must lie in [1e-6, 1e-3]")
    flat = pack(params)
    a = params.n_anchors
    grad = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        hi = mc_expected_value(objective, unpack(bumped, a), n_samples, seed, stream)
        bumped[i] = flat[i] - step
        lo = mc_expected_value(objective, unpack(bumped, a), n_samples, seed, stream)
        grad[i] = (hi - lo) / (2.0 * step)
    value = mc_expected_value(objective, params, n_samples, seed, stream)
    return GradientEstimate(value, grad, int(n_samples), FINITE_DIFF)


# ---------------------------------------------------------------------------
# expected-IoU surfaces


@dataclass
class SurfaceGrid:
    """Expected IoU over a 2-d slice of encoding space.

    values[i, j] corresponds to (axis1_values[i], axis2_values[j]).
    """

    kind: str
    axis_names: tuple
    axis_values: tuple
    values: np.ndarray
    sigma: float
    n_samples: int

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(f"{self.axis_names[0]},{self.axis_names[1]},expected_iou\n")
            for i, u in enumerate(self.axis_values[0]):
                for j, v in enumerate(self.axis_values[1]):
                    fh.write(f"{float(u)!r},{float(v)!r},{float(self.values[i, j])!r}\n")


_UNIT_GT = box(0.0, 0.0, 1.0, 1.0)


def _surface_mu(kind: str, u: float, v: float) -> np.ndarray:
    if kind == FA:  # axes (x, w): offset and width of the proposal box
        return np.array([u, 0.0, np.log(v), 0.0])
    if kind == FCOS:  # axes (r, l): distances to right and left sides
        return np.array([np.log(v), np.log(0.5), np.log(u), np.log(0.5)])
    raise ValueError(f"unknown encoding kind {kind!r}")


def expected_iou_surface(
    kind: str,
    axis1,
    axis2,
    sigma: float,
    n_samples: int = 10_000,
    seed: int = 0,
) -> SurfaceGrid:
    """E[IoU(decode(z), unit gt)] with z ~ N(mu(point), sigma^2 I).

    The ground truth is the unit box at the origin and, for "fa", so is the
    anchor.  Axes are (name, lo, hi, resolution); "fa" axes are (x, w) with
    mu = (x, 0, log w, 0), "fcos" axes are (r, l) with the top/bottom
    log-distances pinned at the ground truth's.  sigma = 0 degenerates to
    the pointwise IoU of the decoded means; sigma > 0 shares one noise
    block across all grid points (common random numbers), so the sampled
    surface is itself smooth in the grid coordinates.
    """
    name1, lo1, hi1, n1 = axis1
    name2, lo2, hi2, n2 = axis2
    if n1 < 2 or n2 < 2:
        raise ValueError("resolution must be >= 2 per axis")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    vals1 = np.linspace(lo1, hi1, int(n1))
    vals2 = np.linspace(lo2, hi2, int(n2))
    anchor = _UNIT_GT
    eps = None
    if sigma > 0:
        eps = draw_noise(seed, (0,), (int(n_samples), 4)).epsilon
    values = np.empty((len(vals1), len(vals2)))
    for i, u in enumerate(vals1):
        for j, v in enumerate(vals2):
            mu = _surface_mu(kind, u, v)
            if sigma == 0:
                values[i, j] = iou(decode(mu, anchor, kind), _UNIT_GT)
            else:
                boxes = decode(mu + sigma * eps, anchor, kind)
                values[i, j] = iou(boxes, _UNIT_GT).mean()
    return SurfaceGrid(
        kind=kind,
        axis_names=(name1, name2),
        axis_values=(vals1, vals2),
        values=values,
        sigma=float(sigma),
        n_samples=int(n_samples) if sigma > 0 else 0,
    )


def kink_derivative_jump(
    kind: str = FA,
    sigma: float = 0.0,
    n_samples: int = 100_000,
    seed: int = 0,
    delta: float = 1e-2,
    cross_values=None,
) -> float:
    """Max jump of the one-sided numerical derivative across the kink line.

    For "fa" the surface is probed at x in {-delta, 0, +delta} for each
    width in cross_values (default includes the w = 1 row where the x-kink
    sits); the jump at a row is |forward slope - backward slope| at x = 0.
    Larger sigma smooths the expected surface and shrinks the jump.
    """
    if cross_values is None:
        cross_values = np.linspace(0.7, 1.4, 8)
    cross_values = np.asarray(cross_values, dtype=float)
    if kind == FA:
        grid = expected_iou_surface(
            kind,
            ("x", -delta, delta, 3),
            ("w", cross_values[0], cross_values[-1], len(cross_values)),
            sigma,
            n_samples,
            seed,
        )
        f = grid.values  # rows: x in (-delta, 0, delta); columns: widths
        forward = (f[2] - f[1]) / delta
        backward = (f[1] - f[0]) / delta
        return float(np.max(np.abs(forward - backward)))
    if kind == FCOS:
        grid = expected_iou_surface(
            kind,
            ("r", 0.5 - delta, 0.5 + delta, 3),
            ("l", cross_values[0], cross_values[-1], len(cross_values)),
            sigma,
            n_samples,
            seed,
        )
        f = grid.values
        forward = (f[2] - f[1]) / delta
        backward = (f[1] - f[0]) / delta
        return float(np.max(np.abs(forward - backward)))
    raise ValueError(f"unknown encoding kind {kind!r}")
