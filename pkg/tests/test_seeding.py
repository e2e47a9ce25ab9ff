import numpy as np
import pytest

from sreseg import seeding


def test_streams_repeat_and_differ():
    a = seeding.rng_for(42, seeding.DATA, 1, 3).random(5)
    assert np.array_equal(a, seeding.rng_for(42, seeding.DATA, 1, 3).random(5))
    assert not np.array_equal(a, seeding.rng_for(42, seeding.DATA, 1, 4).random(5))
    assert not np.array_equal(a, seeding.rng_for(43, seeding.DATA, 1, 3).random(5))


def test_child_seed_range():
    s = seeding.child_seed(42, seeding.INIT)
    assert 0 <= s < 2**63 and s == seeding.child_seed(42, seeding.INIT)
    assert s != seeding.child_seed(42, seeding.SHUFFLE)


def test_negative_path_rejected():
    with pytest.raises(ValueError):
        seeding.seed_sequence(1, -1)
