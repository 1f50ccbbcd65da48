"""Counter RNG against a reference implementation and distribution checks."""

import numpy as np
import pytest

from r3mc import CounterRng

MASK = (1 << 64) - 1


def reference_stream(seed, count):
    """Direct scalar transcription of the mixing function."""
    out = []
    for i in range(1, count + 1):
        z = (seed + i * 0x9E3779B97F4A7C15) & MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_raw_matches_reference_stream():
    for seed in (0, 1, 42, 2**63, MASK):
        rng = CounterRng(seed)
        got = rng.raw(8).tolist()
        assert got == reference_stream(seed, 8)


def test_raw_is_stateful_and_seed_deterministic():
    a = CounterRng(7)
    first, second = a.raw(5), a.raw(5)
    assert first.tolist() != second.tolist()
    b = CounterRng(7)
    assert b.raw(10).tolist() == first.tolist() + second.tolist()


def test_uniform_range_and_resolution():
    u = CounterRng(3).uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    # 53-bit mantissa construction: values are multiples of 2**-53
    assert np.all(u * 2.0**53 == np.round(u * 2.0**53))


def test_uniform_mean_and_spread():
    u = CounterRng(11).uniform(200000)
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1.0 / 12.0) < 0.005


def test_standard_normal_shape_and_moments():
    z = CounterRng(5).standard_normal((400, 500))
    assert z.shape == (400, 500)
    flat = z.ravel()
    assert abs(flat.mean()) < 0.01
    assert abs(flat.std() - 1.0) < 0.01
    assert abs((flat**3).mean()) < 0.02
    assert abs((flat**4).mean() - 3.0) < 0.05


def test_standard_normal_deterministic():
    a = CounterRng(9).standard_normal((3, 4))
    b = CounterRng(9).standard_normal((3, 4))
    assert np.array_equal(a, b)


def test_below_bounds_and_rejects_bias():
    rng = CounterRng(2)
    draws = np.array([rng.below(10) for _ in range(5000)])
    assert draws.min() >= 0 and draws.max() < 10
    counts = np.bincount(draws, minlength=10)
    # uniform to ~5 sigma of a binomial(5000, 0.1)
    assert np.all(np.abs(counts - 500) < 5 * np.sqrt(5000 * 0.1 * 0.9))


def test_permutation_is_a_permutation():
    for seed in range(20):
        p = CounterRng(seed).permutation(100)
        assert sorted(p.tolist()) == list(range(100))


def test_permutation_varies_with_seed():
    assert (
        CounterRng(0).permutation(50).tolist()
        != CounterRng(1).permutation(50).tolist()
    )


def test_sample_without_replacement_properties():
    for seed in range(20):
        s = CounterRng(seed).sample_without_replacement(1000, 50)
        lst = s.tolist()
        assert len(set(lst)) == 50
        assert lst == sorted(lst)
        assert min(lst) >= 0 and max(lst) < 1000


def test_sample_without_replacement_full_population():
    s = CounterRng(4).sample_without_replacement(30, 30)
    assert s.tolist() == list(range(30))


def test_sample_without_replacement_rejects_oversized():
    with pytest.raises(ValueError):
        CounterRng(0).sample_without_replacement(10, 11)


def test_sample_covers_population_uniformly():
    hits = np.zeros(40)
    for seed in range(300):
        hits[CounterRng(seed).sample_without_replacement(40, 10)] += 1
    # each index expected 75 times; allow a generous band
    assert hits.min() > 40 and hits.max() < 115
