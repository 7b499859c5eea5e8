import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from scenegraph.prior import (FrequencyPrior, build_prior, count_from_annotations, format_top_predicates, soften,
                              to_probabilities, zero_shot_triples)
from scenegraph.scene import BoundingBox, SceneAnnotation

PERSON, SHIRT, WEARS = 78, 108, 31
BOX = BoundingBox(0, 0, 1, 1)


def ann(labels, triplets):
    return SceneAnnotation([BOX] * len(labels), labels, triplets)


def test_empty_scene_list_gives_zero_counts():
    prior = count_from_annotations([])
    assert prior.counts.shape == (151, 151, 50) and not prior.counts.any()


def test_single_triplet_single_cell():
    prior = count_from_annotations([ann([PERSON, SHIRT], [(0, WEARS, 1)])])
    assert np.count_nonzero(prior.counts) == 1
    assert prior.counts[PERSON, SHIRT, WEARS] == 1


def test_hand_count_two_scenes():
    scenes = [ann([1, 2, 3], [(0, 4, 1), (1, 4, 2)]), ann([1, 2], [(0, 4, 1)])]
    prior = count_from_annotations(scenes)
    assert prior.counts.sum() == 3
    assert prior.counts[1, 2, 4] == 2 and prior.counts[2, 3, 4] == 1


def test_probabilities_from_counts():
    prior = FrequencyPrior.empty()
    prior.counts[5, 6, 1:4] = [1, 1, 2]
    to_probabilities(prior)
    expected = np.zeros(50)
    expected[1:4] = [0.25, 0.25, 0.5]
    np.testing.assert_array_equal(prior.probabilities[5, 6], expected)


def test_zero_count_pair_is_uniform():
    prior = to_probabilities(FrequencyPrior.empty())
    np.testing.assert_array_equal(prior.probabilities[3, 9], np.full(50, 1 / 50))


def test_random_counts_normalise(rng):
    prior = FrequencyPrior(rng.integers(0, 5, size=(151, 151, 50)).astype(float))
    to_probabilities(prior)
    np.testing.assert_allclose(prior.probabilities.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_soften_uniform_slice():
    prior = soften(to_probabilities(FrequencyPrior.empty()))
    np.testing.assert_allclose(prior.softened[0, 0], -math.log(50), rtol=0, atol=1e-15)
    assert round(-math.log(50), 6) == -3.912023


def test_soften_half_half_slice():
    prior = FrequencyPrior.empty()
    prior.counts[1, 1, :2] = [3, 3]
    soften(to_probabilities(prior))
    s = prior.softened[1, 1]
    assert s[0] == s[1] and np.all(s[2:] < s[0])


def test_soften_depends_only_on_probabilities(rng):
    a = FrequencyPrior(rng.integers(0, 3, size=(151, 151, 50)).astype(float))
    b = FrequencyPrior(a.counts * 7)  # same probabilities, different counts
    soften(to_probabilities(a))
    soften(to_probabilities(b))
    np.testing.assert_array_equal(a.softened, b.softened)


def test_argmax_preserved_random(rng):
    prior = FrequencyPrior(rng.integers(0, 10, size=(151, 151, 50)).astype(float))
    soften(to_probabilities(prior))
    assert np.array_equal(prior.softened.argmax(-1), prior.probabilities.argmax(-1))


@given(st.lists(st.integers(0, 20), min_size=50, max_size=50))
def test_softening_is_monotone_and_negative(counts):
    prior = FrequencyPrior.empty(2, 50)
    prior.counts[0, 1] = counts
    soften(to_probabilities(prior))
    p, s = prior.probabilities[0, 1], prior.softened[0, 1]
    for i in range(50):
        for j in range(50):
            if p[i] > p[j]:
                assert s[i] > s[j]
            elif p[i] == p[j]:
                assert s[i] == s[j]
    assert np.all(np.isfinite(s)) and np.all(s < 0)
    assert np.all(s >= -math.log(50) - (p.max() - p.min()) - 1e-12)


def test_rebuild_is_bit_reproducible():
    scenes = [ann([1, 2, 3], [(0, 4, 1), (2, 7, 0)]), ann([5, 5], [(1, 2, 0)])]
    a, b = build_prior(scenes), build_prior(scenes)
    for part in ("counts", "probabilities", "softened"):
        assert getattr(a, part).tobytes() == getattr(b, part).tobytes()


def test_zero_shot_triples_from_training_only():
    train = [ann([1, 2], [(0, 3, 1)])]
    evaluation = [ann([1, 2, 4], [(0, 3, 1), (2, 3, 1), (0, 5, 1)])]
    assert zero_shot_triples(train, evaluation) == {(4, 3, 2), (1, 5, 2)}


def test_top_predicates_summary():
    prior = build_prior([ann([1, 2], [(0, 3, 1), (0, 3, 1), (0, 9, 1)])])
    assert prior.top_predicates(1, 2, 2) == [(3, 2 / 3), (9, 1 / 3)]
    text = format_top_predicates(prior, [(1, 2)], k=2)
    assert text == "1 -> 2 (n=3): 3=0.6667, 9=0.3333"
