"""Self-supervised training of the velocity estimator.

The loss for one region pair is the symmetric squared Chamfer distance
between the Euler-integrated moving points and the reference points, plus a
weighted simplex smoothness penalty on the raw velocities. Gradients flow
through the Chamfer assignments, the unrolled integrator, and the network.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from . import model as model_mod
from .geometry import RegionSurface
from .model import AdamState, ModelParams, adam_step
from .svf import SvfSample, exp_svf, exp_svf_backward

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference configuration."""

    lr: float = 1e-4
    lambda_reg: float = 1e-5
    batch_size: int = 50
    epochs: int = 1000
    steps: int = 12
    sigma: float = 1e-2
    epsilon: float = 1e-8
    target_points: int = 1100
    target_simplices: int = 2000
    seed: int = 0
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr", "lambda_reg", "epochs", "steps", "sigma", "epsilon",
                     "target_points", "target_simplices"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def save(self, path):
        with open(path, "w") as f:
            for fld in fields(self):
                f.write(f"{fld.name} = {getattr(self, fld.name)}\n")

    @classmethod
    def load(cls, path):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        casts = {"int": int, "float": float, "str": str}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, val = line.partition("=")
                key, val = key.strip(), val.strip()
                if key not in types:
                    raise ValueError(f"unknown config key {key!r}")
                kwargs[key] = casts[types[key]](val)
        return cls(**kwargs)


@dataclass
class RegionPair:
    """Moving/reference surfaces of the same anatomical region."""

    moving: RegionSurface
    reference: RegionSurface
    moving_subject: str = ""
    reference_subject: str = ""

    def __post_init__(self):
        if self.moving.region != self.reference.region:
            raise ValueError("region id mismatch in pair")


def chamfer(p: np.ndarray, q: np.ndarray, brute_force: bool = False) -> float:
    """Symmetric squared Chamfer distance between two point sets.

    Mean over p of the squared distance to its nearest point of q, plus the
    same with roles swapped. The KD-tree path recomputes distances from the
    matched coordinates so it is exactly equal to the double loop.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("empty point set")
    ipq, iqp = _nn_indices(p, q, brute_force)
    d_pq = ((p - q[ipq]) ** 2).sum(axis=1)
    d_qp = ((q - p[iqp]) ** 2).sum(axis=1)
    return float(d_pq.mean() + d_qp.mean())


def _nn_indices(p, q, brute_force=False):
    if brute_force or (len(p) * len(q) <= 4096):
        d2 = ((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1), d2.argmin(axis=0)
    ipq = cKDTree(q).query(p)[1]
    iqp = cKDTree(p).query(q)[1]
    return ipq, iqp


def chamfer_brute_force(p: np.ndarray, q: np.ndarray) -> float:
    """Literal O(n^2) double-loop oracle."""
    total_pq = 0.0
    for a in p:
        total_pq += min(float(((a - b) ** 2).sum()) for b in q)
    total_qp = 0.0
    for b in q:
        total_qp += min(float(((b - a) ** 2).sum()) for a in p)
    return total_pq / len(p) + total_qp / len(q)


def chamfer_backward(p: np.ndarray, q: np.ndarray, upstream: float = 1.0) -> np.ndarray:
    """Gradient of chamfer(p, q) w.r.t. p, assignments held locally constant."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    ipq, iqp = _nn_indices(p, q)
    grad = 2.0 * (p - q[ipq]) / len(p)
    np.add.at(grad, iqp, 2.0 * (p[iqp] - q) / len(q))
    return upstream * grad


def simplex_regularizer(p: np.ndarray, simplices: np.ndarray,
                        v: np.ndarray) -> float:
    """Velocity smoothness along the surface.

    Mean over simplices of the sum over ordered vertex pairs (i != j) of
    ||v_i - v_j||^2 / ||p_i - p_j||^2. Each unordered pair is counted twice,
    matching the ordered double sum.
    """
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(simplices, dtype=np.int64).reshape(-1, 3)
    if len(s) == 0:
        raise ValueError("no simplices")
    total = 0.0
    for a, b in ((0, 1), (1, 2), (0, 2)):
        dv = ((v[s[:, a]] - v[s[:, b]]) ** 2).sum(axis=1)
        dp = ((p[s[:, a]] - p[s[:, b]]) ** 2).sum(axis=1)
        if np.any(dp == 0):
            raise ValueError("zero-length simplex edge")
        total += 2.0 * float((dv / dp).sum())  # ordered pairs: both (i,j),(j,i)
    return total / len(s)


def simplex_regularizer_backward(p: np.ndarray, simplices: np.ndarray,
                                 v: np.ndarray, upstream: float = 1.0) -> np.ndarray:
    """Gradient of the regularizer w.r.t. the velocities."""
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(simplices, dtype=np.int64).reshape(-1, 3)
    grad = np.zeros_like(v)
    for a, b in ((0, 1), (1, 2), (0, 2)):
        diff = v[s[:, a]] - v[s[:, b]]
        dp = ((p[s[:, a]] - p[s[:, b]]) ** 2).sum(axis=1)
        coeff = 4.0 / dp  # two ordered pairs, each contributing 2*diff/dp
        np.add.at(grad, s[:, a], coeff[:, None] * diff)
        np.add.at(grad, s[:, b], -coeff[:, None] * diff)
    return upstream * grad / len(s)


def pair_loss_and_grads(params: ModelParams, pair: RegionPair, cfg: TrainConfig):
    """Loss and parameter gradients for one region pair."""
    p = pair.moving.points
    q = pair.reference.points
    v, cache = model_mod.forward(params, p, q)
    svf = SvfSample(p, v, sigma=cfg.sigma, epsilon=cfg.epsilon)
    moved = exp_svf(svf, p, steps=cfg.steps)
    fit = chamfer(moved, q)
    reg = simplex_regularizer(p, pair.moving.simplices, v)
    loss = fit + cfg.lambda_reg * reg

    d_moved = chamfer_backward(moved, q)
    dv = exp_svf_backward(svf, p, cfg.steps, d_moved)
    dv += cfg.lambda_reg * simplex_regularizer_backward(
        p, pair.moving.simplices, v)
    grads = model_mod.backward(params, cache, dv)
    return loss, fit, reg, grads


def pair_loss(params: ModelParams, pair: RegionPair, cfg: TrainConfig) -> float:
    p = pair.moving.points
    q = pair.reference.points
    v, _ = model_mod.forward(params, p, q)
    svf = SvfSample(p, v, sigma=cfg.sigma, epsilon=cfg.epsilon)
    moved = exp_svf(svf, p, steps=cfg.steps)
    return chamfer(moved, q) + cfg.lambda_reg * simplex_regularizer(
        p, pair.moving.simplices, v)


def train_step(params: ModelParams, state: AdamState, batch: list[RegionPair],
               cfg: TrainConfig):
    """One optimizer step on the batch-mean loss. Mutates params/state."""
    if not batch:
        raise ValueError("empty batch")
    total = model_mod.zero_grads(params)
    losses = []
    for pair in batch:
        loss, fit, reg, grads = pair_loss_and_grads(params, pair, cfg)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite loss for region {pair.moving.region} "
                f"({pair.moving_subject} -> {pair.reference_subject})")
        losses.append((loss, fit, reg))
        for name in total:
            total[name] += grads[name]
    n = len(batch)
    for name in total:
        total[name] /= n
    adam_step(params, total, state, lr=cfg.lr)
    arr = np.array(losses)
    return {"loss": float(arr[:, 0].mean()), "fit": float(arr[:, 1].mean()),
            "reg": float(arr[:, 2].mean())}


@dataclass
class Dataset:
    """Region surfaces per subject, split into train/validation subjects."""

    train: dict[str, list[RegionSurface]]
    val: dict[str, list[RegionSurface]]

    def __post_init__(self):
        if set(self.train) & set(self.val):
            raise ValueError("train and validation subjects must be disjoint")


def _sample_pairs(subjects: dict[str, list[RegionSurface]], count: int,
                  rng: np.random.Generator) -> list[RegionPair]:
    names = sorted(subjects)
    if len(names) < 2:
        raise ValueError("need at least two subjects to form pairs")
    by_region = {}
    for name in names:
        for surf in subjects[name]:
            by_region.setdefault(surf.region, []).append((name, surf))
    regions = sorted(r for r, lst in by_region.items() if len(lst) >= 2)
    if not regions:
        raise ValueError("no region present in two subjects")
    pairs = []
    for _ in range(count):
        region = regions[rng.integers(len(regions))]
        cands = by_region[region]
        i = rng.integers(len(cands))
        j = rng.integers(len(cands) - 1)
        if j >= i:
            j += 1
        (mn, ms), (rn, rs) = cands[i], cands[j]
        pairs.append(RegionPair(ms, rs, mn, rn))
    return pairs


def train(cfg: TrainConfig, dataset: Dataset, params: ModelParams | None = None,
          pairs_per_epoch: int | None = None, val_pairs: int = 20,
          log_every: int = 1):
    """Epoch loop returning the best-validation checkpoint and history.

    Each epoch draws seeded random region pairs from the training subjects;
    validation pairs are fixed once from the validation subjects. History
    rows are (epoch, train loss, val loss, wall seconds).
    """
    if not dataset.train:
        raise ValueError("empty training set")
    if params is None:
        params = model_mod.init_params(cfg.seed)
    state = AdamState.for_params(params)
    val_rng = np.random.default_rng(cfg.seed + 1)
    if len(dataset.val) >= 2 and val_pairs > 0:
        validation = _sample_pairs(dataset.val, val_pairs, val_rng)
    else:
        if dataset.val:
            logger.warning("fewer than two validation subjects; "
                           "tracking training loss instead")
        validation = []
    n_pairs = pairs_per_epoch or max(cfg.batch_size, 200)

    best = None
    best_val = np.inf
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng((cfg.seed, epoch))
        pairs = _sample_pairs(dataset.train, n_pairs, rng)
        epoch_losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            stats = train_step(params, state, pairs[start:start + cfg.batch_size], cfg)
            epoch_losses.append(stats["loss"])
        train_loss = float(np.mean(epoch_losses))
        if validation:
            val_loss = float(np.mean([pair_loss(params, pr, cfg) for pr in validation]))
        else:
            val_loss = train_loss
        history.append((epoch, train_loss, val_loss, time.perf_counter() - t0))
        if val_loss < best_val:
            best_val = val_loss
            best = _copy_params(params)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
    return best if best is not None else _copy_params(params), history


def _copy_params(params: ModelParams) -> ModelParams:
    return ModelParams(
        [(w.copy(), b.copy()) for w, b in params.local],
        [(w.copy(), b.copy()) for w, b in params.global_],
        [(w.copy(), b.copy()) for w, b in params.head],
        params.seed, params.local_sizes, params.global_sizes, params.head_sizes)


def write_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
        for row in history:
            writer.writerow(row)
