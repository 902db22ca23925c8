"""Trainable maps from a scene to per-anchor proposal distributions.

Every anchor gets 9 outputs: one classification logit, four means and four
log standard deviations of the box-encoding Gaussian.  Two backends:

* "table": free parameters per (scene, anchor); isolates the matching
  dynamics from representation learning.  Allocated for a fixed dataset and
  refuses scenes outside it.
* "linear": one shared affine map from the anchor's rasterized patch feature
  to the 9 outputs; the amortized model.

Both initialize at zero, so an untrained model outputs mu = 0, sigma = 1 and
cls score 0.5 everywhere: the variational posterior starts at its prior.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .estimators import ProposalParams
from .scenes import rasterize

TABLE = "table"
LINEAR = "linear"

OUTPUTS_PER_ANCHOR = 9  # cls logit + 4 mu + 4 log_sigma


@dataclass
class ProposalModel:
    backend: str
    params: np.ndarray
    n_anchors: int
    n_scenes: int = 0  # table only
    patch: int = 0  # linear only; feature dim = patch * patch

    @classmethod
    def table(cls, n_scenes: int, n_anchors: int) -> "ProposalModel":
        size = n_scenes * n_anchors * OUTPUTS_PER_ANCHOR
        return cls(backend=TABLE, params=np.zeros(size), n_anchors=n_anchors, n_scenes=n_scenes)

    @classmethod
    def linear(cls, patch: int, n_anchors: int) -> "ProposalModel":
        feat = patch * patch
        size = OUTPUTS_PER_ANCHOR * feat + OUTPUTS_PER_ANCHOR
        return cls(backend=LINEAR, params=np.zeros(size), n_anchors=n_anchors, patch=patch)

    @property
    def feature_dim(self) -> int:
        return self.patch * self.patch

    def features_for(self, scene, grid) -> np.ndarray:
        if self.backend == TABLE:
            return None
        return rasterize(scene, grid, self.patch)[1]

    def raw_outputs(self, scene, features=None) -> np.ndarray:
        """(n_anchors, 9) head outputs before any clamping."""
        if self.backend == TABLE:
            if not (0 <= scene.scene_id < self.n_scenes):
                raise ValueError(
                    f"table model allocated for {self.n_scenes} scenes, "
                    f"got scene_id {scene.scene_id}"
                )
            table = self.params.reshape(self.n_scenes, self.n_anchors, OUTPUTS_PER_ANCHOR)
            return table[scene.scene_id]
        weight = self.params[: OUTPUTS_PER_ANCHOR * self.feature_dim].reshape(
            OUTPUTS_PER_ANCHOR, self.feature_dim
        )
        bias = self.params[OUTPUTS_PER_ANCHOR * self.feature_dim :]
        return features @ weight.T + bias

    def backprop(self, scene, features, d_out: np.ndarray) -> np.ndarray:
        """Chain (n_anchors, 9) output gradients back to a flat param gradient."""
        grad = np.zeros_like(self.params)
        if self.backend == TABLE:
            table = grad.reshape(self.n_scenes, self.n_anchors, OUTPUTS_PER_ANCHOR)
            table[scene.scene_id] = d_out
            return grad
        f = self.feature_dim
        grad[: OUTPUTS_PER_ANCHOR * f] = (d_out.T @ features).ravel()
        grad[OUTPUTS_PER_ANCHOR * f :] = d_out.sum(axis=0)
        return grad

    def copy(self) -> "ProposalModel":
        return ProposalModel(
            backend=self.backend,
            params=self.params.copy(),
            n_anchors=self.n_anchors,
            n_scenes=self.n_scenes,
            patch=self.patch,
        )


def split_outputs(out: np.ndarray):
    """(logits, mu, raw log_sigma) views of a (n_anchors, 9) output block."""
    return out[:, 0], out[:, 1:5], out[:, 5:9]


def forward(
    model: ProposalModel,
    scene,
    grid=None,
    features=None,
    log_sigma_clamp=(-6.0, 2.0),
) -> ProposalParams:
    """Per-anchor variational parameters with log_sigma clamped into range."""
    if model.backend == LINEAR and features is None:
        features = model.features_for(scene, grid)
    out = model.raw_outputs(scene, features)
    logits, mu, log_sigma = split_outputs(out)
    lo, hi = log_sigma_clamp
    return ProposalParams(
        cls_logits=np.array(logits, dtype=float),
        mu=np.array(mu, dtype=float),
        log_sigma=np.clip(log_sigma, lo, hi),
    )


def model_to_dict(model: ProposalModel) -> dict:
    return {
        "backend": model.backend,
        "n_anchors": model.n_anchors,
        "n_scenes": model.n_scenes,
        "patch": model.patch,
        "params": model.params.tolist(),
    }


def model_from_dict(data: dict) -> ProposalModel:
    return ProposalModel(
        backend=data["backend"],
        params=np.array(data["params"], dtype=float),
        n_anchors=int(data["n_anchors"]),
        n_scenes=int(data["n_scenes"]),
        patch=int(data["patch"]),
    )


def save_model(model: ProposalModel, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> ProposalModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
