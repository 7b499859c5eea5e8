import math

import numpy as np
import pytest

from scenegraph import numeric as nm
from scenegraph.config import TrainConfig
from scenegraph.model import ForwardOutput, SceneGraphModel
from scenegraph.numeric import NumericError, ParamStore, Tensor
from scenegraph.prior import build_prior
from scenegraph.synthetic import SyntheticSpec, generate_scenes
from scenegraph.training import (PlateauScheduler, TrainSample, loss, make_sample, plateau_scheduler,
                                 sample_pairs, sgd_step, train)

from conftest import TINY

TINY_TRAIN = dict(d_model=16, heads=2, d_ff=24, n_blocks=2, d_fuse=12)


class FixedOutput:
    """Stands in for a model: returns preset logits regardless of input."""

    def __init__(self, class_logits, rel_scores):
        self.out = ForwardOutput(Tensor(class_logits), Tensor(rel_scores), None, None, None)

    def forward(self, inputs):
        return self.out


def stub_batch(obj_targets, pair_targets):
    return [TrainSample(None, np.array(obj_targets), np.array(pair_targets))]


@pytest.fixture(scope="module")
def smoke_scenes():
    return generate_scenes(SyntheticSpec(n_scenes=6, min_objects=3, max_objects=4), seed=3)


# --- loss ----------------------------------------------------------------------------------

def test_loss_one_hot_correct_is_zero():
    cls = np.full((3, 151), -1e4)
    cls[[0, 1, 2], [4, 9, 2]] = 0.0
    rel = np.full((2, 50), -1e4)
    rel[[0, 1], [7, 0]] = 0.0
    value = loss(FixedOutput(cls, rel), stub_batch([4, 9, 2], [7, 0])).item()
    assert 0.0 <= value < 1e-12


def test_loss_uniform_outputs():
    value = loss(FixedOutput(np.zeros((3, 151)), np.zeros((4, 50))), stub_batch([1, 2, 3], [0, 1, 2, 3])).item()
    assert value == pytest.approx(math.log(151) + math.log(50), abs=1e-12)


def test_loss_hand_cross_entropy(rng, smoke_scenes):
    model = SceneGraphModel(TINY, build_prior(s.annotation for s in smoke_scenes), seed=1)
    batch = [make_sample(smoke_scenes[0], rng), make_sample(smoke_scenes[1], rng)]
    value = loss(model, batch).item()
    out = model.forward([s.inputs for s in batch])

    def ce(logits, targets):
        total = 0.0
        for row, t in zip(logits, targets):
            m = max(row)
            total += m + math.log(sum(math.exp(v - m) for v in row)) - row[t]
        return total / len(targets)

    obj_t = np.concatenate([s.object_targets for s in batch])
    rel_t = np.concatenate([s.pair_targets for s in batch])
    expected = ce(out.class_logits.data, obj_t) + ce(out.rel_scores.data, rel_t)
    assert abs(value - expected) < 1e-10


def test_sample_pairs_keeps_positives_and_ratio(rng, smoke_scenes):
    scene = smoke_scenes[0]
    pairs, targets = sample_pairs(scene, rng, neg_ratio=1)
    n_pos = len(scene.annotation.gt_triplets)
    assert [tuple(p) for p in pairs[:n_pos]] == [(s, o) for s, _, o in scene.annotation.gt_triplets]
    assert list(targets[:n_pos]) == [p for _, p, _ in scene.annotation.gt_triplets]
    assert np.all(targets[n_pos:] == 0) and len(targets) - n_pos <= n_pos
    assert len({tuple(p) for p in pairs}) == len(pairs)


# --- optimizer -----------------------------------------------------------------------------

def store_with(theta, grad):
    store = ParamStore()
    store.add("w", np.array(theta, dtype=float))
    store.grad("w")[...] = grad
    return store


def test_sgd_gradient_equal_to_theta_zeroes():
    store = store_with([1.5, -2.0, 3.0], [1.5, -2.0, 3.0])
    sgd_step(store, {}, learning_rate=1.0, momentum=0.0)
    assert np.array_equal(store.value("w"), np.zeros(3))


def test_sgd_zero_gradient_unchanged():
    store = store_with([1.5, -2.0], [0.0, 0.0])
    sgd_step(store, {}, learning_rate=0.1, momentum=0.9)
    assert np.array_equal(store.value("w"), [1.5, -2.0])


def test_sgd_two_step_hand_recursion():
    store = store_with([1.0], [0.5])
    velocity = {}
    sgd_step(store, velocity, 0.1, 0.9)  # v = -0.05, theta = 0.95
    store.grad("w")[...] = -0.2
    sgd_step(store, velocity, 0.1, 0.9)  # v = 0.9 * -0.05 + 0.02 = -0.025, theta = 0.925
    assert velocity["w"][0] == pytest.approx(-0.025, abs=1e-15)
    assert store.value("w")[0] == pytest.approx(0.925, abs=1e-15)


def test_sgd_rejects_non_finite_gradient():
    store = store_with([1.0, 2.0], [0.0, np.inf])
    with pytest.raises(NumericError, match="w"):
        sgd_step(store, {}, 0.1, 0.9)
    assert np.array_equal(store.value("w"), [1.0, 2.0])


# --- scheduler -----------------------------------------------------------------------------

def test_scheduler_monotone_history_keeps_rate():
    cfg = TrainConfig()
    assert plateau_scheduler([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], cfg) == cfg.learning_rate


def test_scheduler_flat_patience_plus_one_decays_once():
    cfg = TrainConfig(plateau_patience=3)
    assert plateau_scheduler([5.0] * 4, cfg) == pytest.approx(cfg.learning_rate / 10)
    assert plateau_scheduler([5.0] * 3, cfg) == cfg.learning_rate


def test_scheduler_flat_forever_two_decays():
    sched = PlateauScheduler(1e-3, factor=10.0, patience=3, max_decays=2)
    rates = [sched.step(1.0) for _ in range(100)]
    assert sched.decays == 2
    assert rates[-1] == pytest.approx(1e-5)
    assert len(set(rates)) == 3


# --- loop ------------------------------------------------------------------------------------

def test_loss_decreases_on_smoke_set(smoke_scenes):
    cfg = TrainConfig(max_iterations=50, batch_size=2, learning_rate=0.01, eval_interval=25, seed=4, **TINY_TRAIN)
    result = train(cfg, smoke_scenes)
    first, last = np.mean(result.losses[:5]), np.mean(result.losses[-5:])
    assert last < first
    assert len(result.val_history) == 2 and len(result.lr_history) == 50


def test_train_requires_triplets():
    scenes = generate_scenes(SyntheticSpec(n_scenes=2, min_objects=1, max_objects=1), seed=0)
    with pytest.raises(ValueError):
        train(TrainConfig(max_iterations=1, **TINY_TRAIN), scenes)


def test_fs_ba_off_is_plain_softmax_of_logits(rng, smoke_scenes):
    prior = build_prior(s.annotation for s in smoke_scenes)
    on = SceneGraphModel(TINY, prior, seed=2)
    off_cfg = type(TINY)(**{**TINY.__dict__, "fs_ba": False})
    off = SceneGraphModel(off_cfg, prior, store=on.store)
    inp = [make_sample(smoke_scenes[0], rng).inputs]
    out = off.forward(inp)
    # without the bias term the scores are exactly the classifier logits
    f_on = on.forward(inp)
    head_logits = f_on.rel_scores.data - (inp[0].union @ on.store.value("w_p"))[:, None] * \
        prior.slices(f_on.prior_labels[inp[0].pairs[:, 0]], f_on.prior_labels[inp[0].pairs[:, 1]])
    np.testing.assert_allclose(out.rel_scores.data, head_logits, rtol=0, atol=1e-12)
    assert np.array_equal(out.rel_dist(), nm.softmax(nm.constant(out.rel_scores.data), axis=1).data)
