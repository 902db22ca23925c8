"""Stochastic training of proposal models.

Each step draws a minibatch of scenes and, per scene, Monte-Carlo samples of
the latent encodings; the update direction is alpha * g1 + g2, where g1 is
the analytic gradient of the summed KL to the standard-normal prior and g2
is the pathwise gradient of the negated data term (the expected pseudo
log-likelihood).  Parameters move by SGD with momentum and weight decay:
v <- momentum * v + (g + wd * p);  p <- p - lr * v.

Everything is replayable: noise streams are addressed by (sample, step,
scene id), the epoch shuffle by (seed, epoch), and per-scene contributions
are reduced in dataset order regardless of thread count, so a fixed seed
yields a bit-identical run.  Epoch wall times are kept in memory only and
never serialized, keeping written logs byte-stable.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evaluation
from .distributions import TAG_SHUFFLE, kl_gradient, kl_to_standard_normal, philox_generator
from .estimators import SceneObjective, sample_block
from .model import ProposalModel, model_from_dict, model_to_dict, split_outputs

CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    alpha: float = 0.01
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 24
    batch_size: int = 16
    n_samples: int = 1
    bag_size: int = 8
    gamma: float = 2.0
    seed: int = 0
    lr_decay_epochs: tuple = (16, 22)
    lr_decay_factor: float = 0.1
    log_sigma_min: float = -6.0
    log_sigma_max: float = 2.0
    negatives: str = "all"
    threads: int = 1
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    match_iou: float = 0.5

    @property
    def log_sigma_clamp(self):
        return (self.log_sigma_min, self.log_sigma_max)


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    log_pos: float
    log_neg: float
    kl: float
    mean_meanmax: float


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    log_pos: float
    log_neg: float
    kl: float
    mean_sigma: float
    fg_sigma: float
    bg_sigma: float
    eval_mr: float  # -1.0 when no eval split was given
    wall_time: float = 0.0  # in-memory only, dropped on serialization


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        epochs = []
        for rec in self.epochs:
            d = asdict(rec)
            d.pop("wall_time")
            epochs.append(d)
        return {"steps": [asdict(s) for s in self.steps], "epochs": epochs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class SceneCache:
    """Per-scene immutable pieces: bags/objective and input features."""

    def __init__(self, scenes, grid, config: TrainConfig, model: ProposalModel):
        self.grid = grid
        self.objectives = {}
        self.features = {}
        for scene in scenes:
            self.objectives[scene.scene_id] = SceneObjective(
                scene.gt_boxes,
                grid.boxes,
                bag_size=config.bag_size,
                gamma=config.gamma,
                negatives=config.negatives,
            )
            self.features[scene.scene_id] = model.features_for(scene, grid)

    def foreground_mask(self, scene) -> np.ndarray:
        mask = np.zeros(len(self.grid), dtype=bool)
        bags = self.objectives[scene.scene_id].bags
        if bags.size:
            mask[np.unique(bags)] = True
        return mask


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.lr * config.lr_decay_factor**drops


def _scene_terms(model, scene, cache: SceneCache, config: TrainConfig, step: int):
    """One scene's g1/g2 in model-parameter space plus report numbers."""
    objective = cache.objectives[scene.scene_id]
    features = cache.features[scene.scene_id]
    raw = model.raw_outputs(scene, features)
    logits, mu, raw_ls = split_outputs(raw)
    lo, hi = config.log_sigma_clamp
    log_sigma = np.clip(raw_ls, lo, hi)
    clamp_open = (raw_ls > lo) & (raw_ls < hi)
    sigma = np.exp(log_sigma)

    a = model.n_anchors
    g_logit = np.zeros(a)
    g_mu = np.zeros((a, 4))
    g_ls = np.zeros((a, 4))
    data_ll = 0.0
    log_pos = 0.0
    log_neg = 0.0
    meanmax_sum = 0.0
    eps_block = sample_block(config.seed, (step, scene.scene_id), config.n_samples, (a, 4))
    for s in range(config.n_samples):
        eps = eps_block[s]
        z = mu + sigma * eps
        ll, d_logit, d_z = objective.value_and_grad(logits, z)
        rep = objective.last_report
        data_ll += ll
        log_pos += rep.log_pos
        log_neg += rep.log_neg
        meanmax_sum += float(rep.per_gt_meanmax.mean()) if rep.per_gt_meanmax.size else 0.0
        g_logit += d_logit
        g_mu += d_z
        g_ls += d_z * sigma * eps
    inv = 1.0 / config.n_samples
    data_ll *= inv

    kl = float(np.sum(kl_to_standard_normal(mu, log_sigma)))
    kl_mu, kl_ls = kl_gradient(mu, log_sigma)

    g1_out = np.zeros((a, 9))
    g1_out[:, 1:5] = kl_mu
    g1_out[:, 5:9] = kl_ls * clamp_open
    g2_out = np.zeros((a, 9))
    g2_out[:, 0] = -g_logit * inv
    g2_out[:, 1:5] = -g_mu * inv
    g2_out[:, 5:9] = -g_ls * inv * clamp_open

    return {
        "g1": model.backprop(scene, features, g1_out),
        "g2": model.backprop(scene, features, g2_out),
        "data_ll": data_ll,
        "kl": kl,
        "log_pos": log_pos * inv,
        "log_neg": log_neg * inv,
        "mean_meanmax": meanmax_sum * inv,
        "scene_id": scene.scene_id,
    }


def batch_gradient(model, scenes, cache: SceneCache, config: TrainConfig, step: int):
    """Scene-averaged (g1, g2) and the aggregated report for one minibatch.

    Scene contributions may be computed on a thread pool; the reduction
    happens on the caller in dataset order, so results do not depend on
    the thread count.
    """
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            terms = list(pool.map(lambda sc: _scene_terms(model, sc, cache, config, step), scenes))
    else:
        terms = [_scene_terms(model, sc, cache, config, step) for sc in scenes]

    n = len(scenes)
    g1 = sum(t["g1"] for t in terms) / n
    g2 = sum(t["g2"] for t in terms) / n
    kl = sum(t["kl"] for t in terms) / n
    data_ll = sum(t["data_ll"] for t in terms) / n
    loss = config.alpha * kl - data_ll
    if not np.isfinite(loss) or not np.all(np.isfinite(g1)) or not np.all(np.isfinite(g2)):
        bad = [t["scene_id"] for t in terms if not np.isfinite(t["data_ll"]) or not np.isfinite(t["kl"])]
        raise NonFiniteLossError(
            f"non-finite loss at step {step}",
            diagnostics={"step": step, "loss": float(loss), "scenes": bad},
        )
    record = {
        "loss": float(loss),
        "kl": float(kl),
        "log_pos": float(sum(t["log_pos"] for t in terms) / n),
        "log_neg": float(sum(t["log_neg"] for t in terms) / n),
        "mean_meanmax": float(sum(t["mean_meanmax"] for t in terms) / n),
    }
    return g1, g2, record


def train_step(model, scenes, cache, config, step, epoch, velocity, lr) -> StepRecord:
    g1, g2, rec = batch_gradient(model, scenes, cache, config, step)
    grad = config.alpha * g1 + g2
    velocity *= config.momentum
    velocity += grad + config.weight_decay * model.params
    model.params -= lr * velocity
    return StepRecord(
        step=step,
        epoch=epoch,
        loss=rec["loss"],
        log_pos=rec["log_pos"],
        log_neg=rec["log_neg"],
        kl=rec["kl"],
        mean_meanmax=rec["mean_meanmax"],
    )


def sigma_summary(model, scenes, cache: SceneCache, config: TrainConfig):
    """Geometric-mean sigma overall plus a foreground/background split.

    Foreground is the per-ground-truth bag leader (the anchor with top IoU
    to that gt): the anchor that carries the detection and feels the data
    term most.  Background is every anchor in no bag at all; mid-bag members
    sit in neither bucket since they serve both objective terms.
    """
    fg_logs, bg_logs, all_logs = [], [], []
    for scene in scenes:
        raw = model.raw_outputs(scene, cache.features[scene.scene_id])
        _, _, raw_ls = split_outputs(raw)
        ls = np.clip(raw_ls, *config.log_sigma_clamp)
        bags = cache.objectives[scene.scene_id].bags
        all_logs.append(ls.ravel())
        if bags.size:
            fg_logs.append(ls[bags[:, 0]].ravel())
        bg_logs.append(ls[~cache.foreground_mask(scene)].ravel())

    def geomean(chunks):
        flat = np.concatenate([c for c in chunks if c.size]) if any(c.size for c in chunks) else np.zeros(1)
        return float(np.exp(flat.mean()))

    return geomean(all_logs), geomean(fg_logs), geomean(bg_logs)


def evaluate_mr(model, scenes, grid, config: TrainConfig, features=None) -> float:
    dets = []
    gts = []
    for scene in scenes:
        feats = features.get(scene.scene_id) if features else None
        dets.append(
            evaluation.infer(
                model,
                scene,
                grid,
                score_thresh=config.score_thresh,
                nms_iou=config.nms_iou,
                features=feats,
                log_sigma_clamp=config.log_sigma_clamp,
            )
        )
        gts.append(scene.gt_boxes)
    return evaluation.log_average_miss_rate(dets, gts, match_iou=config.match_iou).mr


def train(
    model: ProposalModel,
    train_scenes,
    grid,
    config: TrainConfig,
    eval_scenes=None,
    start_epoch: int = 0,
    velocity: np.ndarray = None,
    log: TrainLog = None,
) -> TrainLog:
    """Run the epoch loop; mutates the model in place and returns the log.

    Resuming: pass start_epoch and the velocity from a checkpoint; because
    noise and shuffle streams are addressed by absolute (step, epoch), the
    continuation reproduces the uninterrupted run exactly.
    """
    log = log if log is not None else TrainLog()
    if velocity is None:
        velocity = np.zeros_like(model.params)
    cache = SceneCache(train_scenes, grid, config, model)
    eval_cache = None
    if eval_scenes:
        eval_cache = {s.scene_id: model.features_for(s, grid) for s in eval_scenes}

    steps_per_epoch = -(-len(train_scenes) // config.batch_size)
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        order = philox_generator(config.seed, TAG_SHUFFLE, (epoch,)).permutation(len(train_scenes))
        step = epoch * steps_per_epoch
        for chunk_start in range(0, len(order), config.batch_size):
            batch = [train_scenes[i] for i in order[chunk_start : chunk_start + config.batch_size]]
            log.steps.append(train_step(model, batch, cache, config, step, epoch, velocity, lr))
            step += 1

        mean_sigma, fg_sigma, bg_sigma = sigma_summary(model, train_scenes, cache, config)
        eval_mr = -1.0
        if eval_scenes:
            eval_mr = evaluate_mr(model, eval_scenes, grid, config, features=eval_cache)
        epoch_steps = log.steps[-steps_per_epoch:]
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                loss=float(np.mean([s.loss for s in epoch_steps])),
                log_pos=float(np.mean([s.log_pos for s in epoch_steps])),
                log_neg=float(np.mean([s.log_neg for s in epoch_steps])),
                kl=float(np.mean([s.kl for s in epoch_steps])),
                mean_sigma=mean_sigma,
                fg_sigma=fg_sigma,
                bg_sigma=bg_sigma,
                eval_mr=float(eval_mr),
                wall_time=time.perf_counter() - t0,
            )
        )
    return log


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, velocity, next_epoch, config_hash=""):
    payload = {
        "version": CHECKPOINT_VERSION,
        "model": model_to_dict(model),
        "velocity": np.asarray(velocity).tolist(),
        "next_epoch": int(next_epoch),
        "config_hash": config_hash,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = model_from_dict(payload["model"])
    velocity = np.array(payload["velocity"], dtype=float)
    return model, velocity, int(payload["next_epoch"]), payload.get("config_hash", "")
