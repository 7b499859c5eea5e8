"""Loss, momentum SGD, plateau decay and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from . import numeric as nm
from .config import TrainConfig
from .metrics import EvalConfig, recall_at_k
from .model import SceneGraphModel, SceneInput
from .numeric import GradTape, NumericError, ParamStore, Tensor
from .prior import FrequencyPrior, build_prior
from .protocols import gt_scene_input, run_protocol
from .scene import Scene

log = logging.getLogger(__name__)


@dataclass
class TrainSample:
    inputs: SceneInput
    object_targets: np.ndarray
    pair_targets: np.ndarray


def sample_pairs(scene: Scene, rng: np.random.Generator, neg_ratio: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Every gt triplet's pair plus up to ``neg_ratio`` unrelated pairs per positive."""
    ann = scene.annotation
    n = len(ann.gt_boxes)
    pos = [(s, o) for s, _, o in ann.gt_triplets]
    targets = [p for _, p, _ in ann.gt_triplets]
    related = set(pos)
    negatives = [(i, j) for i in range(n) for j in range(n) if i != j and (i, j) not in related]
    n_neg = min(len(negatives), neg_ratio * max(1, len(pos)))
    if n_neg:
        chosen = np.sort(rng.choice(len(negatives), size=n_neg, replace=False))
        pos += [negatives[c] for c in chosen]
        targets += [0] * n_neg
    return np.array(pos, dtype=np.intp).reshape(-1, 2), np.array(targets, dtype=np.intp)


def make_sample(scene: Scene, rng: np.random.Generator, neg_ratio: int = 3, protocol: str = "predcls") -> TrainSample:
    pairs, targets = sample_pairs(scene, rng, neg_ratio)
    inputs = gt_scene_input(scene, pairs, labels_given=(protocol == "predcls"))
    return TrainSample(inputs, np.array(scene.annotation.gt_labels, dtype=np.intp), targets)


def loss(model: SceneGraphModel, batch: Sequence[TrainSample]) -> Tensor:
    """Mean object cross-entropy plus mean predicate cross-entropy over the batch."""
    out = model.forward([s.inputs for s in batch])
    obj_targets = np.concatenate([s.object_targets for s in batch])
    total = nm.scale(nm.sum_(nm.pick(nm.log_softmax(out.class_logits, axis=1), obj_targets)),
                     -1.0 / len(obj_targets))
    pair_targets = np.concatenate([s.pair_targets for s in batch])
    if len(pair_targets):
        rel = nm.sum_(nm.pick(nm.log_softmax(out.rel_scores, axis=1), pair_targets))
        total = total + nm.scale(rel, -1.0 / len(pair_targets))
    return total


@njit(cache=True)
def _momentum_update(theta, v, g, lr, momentum):
    for i in range(g.size):
        if not np.isfinite(g[i]):
            return False
    for i in range(theta.size):
        step = momentum * v[i] - lr * g[i]
        v[i] = step
        theta[i] += step
    return True


def sgd_step(store: ParamStore, velocity: dict[str, np.ndarray], learning_rate: float, momentum: float) -> None:
    """v <- momentum * v - lr * g;  theta <- theta + v, per parameter in name order."""
    for name in store.names():
        g = store.grad(name)
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(g)
        if not _momentum_update(store.value(name).reshape(-1), v.reshape(-1), g.reshape(-1),
                                float(learning_rate), float(momentum)):
            raise NumericError(f"non-finite gradient for {name}")


class PlateauScheduler:
    """Divide the learning rate when the monitored metric stops improving."""

    def __init__(self, learning_rate: float, factor: float = 10.0, patience: int = 3, max_decays: int = 2):
        self.lr = learning_rate
        self.factor = factor
        self.patience = patience
        self.max_decays = max_decays
        self.best = -np.inf
        self.stale = 0
        self.decays = 0

    def step(self, value: float) -> float:
        if value > self.best:
            self.best, self.stale = value, 0
        else:
            self.stale += 1
            if self.stale >= self.patience and self.decays < self.max_decays:
                self.lr /= self.factor
                self.decays += 1
                self.stale = 0
        return self.lr


def plateau_scheduler(history: Sequence[float], config: TrainConfig) -> float:
    sched = PlateauScheduler(config.learning_rate, config.lr_decay_factor, config.plateau_patience,
                             config.max_decays)
    for v in history:
        sched.step(v)
    return sched.lr


def validation_recall(model: SceneGraphModel, scenes: Sequence[Scene], k: int = 20) -> float:
    evals = run_protocol(scenes, model, "predcls")
    return recall_at_k(evals, EvalConfig("predcls", k, True))


@dataclass
class TrainResult:
    model: SceneGraphModel
    losses: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    rng: np.random.Generator | None = None


def train(config: TrainConfig, scenes: Sequence[Scene], val_scenes: Sequence[Scene] | None = None,
          prior: FrequencyPrior | None = None,
          on_eval: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Train from scratch; validation (PredCls R@20) drives the plateau decay."""
    scenes = [s for s in scenes if s.annotation.gt_triplets]
    if not scenes:
        raise ValueError("no training scene has ground-truth triplets")
    val_scenes = list(val_scenes) if val_scenes is not None else scenes
    prior = prior if prior is not None else build_prior(s.annotation for s in scenes)
    model = SceneGraphModel(config.model_config(), prior, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])
    sched = PlateauScheduler(config.learning_rate, config.lr_decay_factor, config.plateau_patience,
                             config.max_decays)
    result = TrainResult(model, rng=rng)
    velocity: dict[str, np.ndarray] = {}
    order: list[int] = []
    for it in range(1, config.max_iterations + 1):
        picks = []
        while len(picks) < config.batch_size:
            if not order:
                order = list(rng.permutation(len(scenes)))
            picks.append(order.pop())
        batch = [make_sample(scenes[i], rng, config.neg_ratio) for i in picks]
        with GradTape() as tape:
            value = loss(model, batch)
        if not np.isfinite(value.item()):
            raise NumericError(f"iteration {it}: non-finite loss on scenes {[scenes[i].name for i in picks]}")
        nm.backward(tape, value, model.store)
        sgd_step(model.store, velocity, sched.lr, config.momentum)
        result.losses.append(value.item())
        result.lr_history.append(sched.lr)
        if it % config.eval_interval == 0 or it == config.max_iterations:
            r20 = validation_recall(model, val_scenes)
            sched.step(r20)
            result.val_history.append((it, r20))
            log.info("iter %d loss %.4f val R@20 %.2f lr %g", it, value.item(), r20, sched.lr)
            if on_eval:
                on_eval(it, value.item(), r20)
    return result
