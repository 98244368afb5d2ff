import numpy as np
import pytest
from scipy import stats

from shuffle_audit.core import ConfigError, RngStreamKey, SamplerSpec, derive_stream
from shuffle_audit.sampler import assign_batches, target_batch_index, target_support

SPECS = {
    'full': SamplerSpec.full_shuffle(),
    'partial': SamplerSpec.partial_shuffle(4),
    'bts': SamplerSpec.batch_then_shuffle(),
}


def stream(idx=0, seed=11):
    return derive_stream(RngStreamKey(seed, idx))


@pytest.mark.parametrize('spec', SPECS.values(), ids=SPECS.keys())
def test_assignment_is_permutation(spec):
    s = stream()
    for _ in range(50):
        a = assign_batches(20, 2, spec, s)
        assert sorted(a.perm) == list(range(20))
        assert np.array_equal(a.batch_of[a.batches()], np.repeat(np.arange(10), 2).reshape(10, 2))


def test_batch_then_shuffle_keeps_blocks():
    s = stream()
    orders = set()
    for _ in range(200):
        b = assign_batches(8, 4, SamplerSpec.batch_then_shuffle(), s).batches()
        assert {frozenset(row) for row in b} == {frozenset(range(4)), frozenset(range(4, 8))}
        orders.add(int(b[0, 0] == 0))
    assert orders == {0, 1}


@pytest.mark.parametrize('spec', list(SPECS.values()) + [SamplerSpec.partial_shuffle(4)])
def test_single_batch_unique(spec):
    a = assign_batches(4, 4, spec, stream())
    assert set(a.perm) == {0, 1, 2, 3}
    assert np.all(a.batch_of == 0)
    assert np.all(target_batch_index(4, 4, spec, stream(), size=10) == 0)


def test_partial_shuffle_frequency():
    s = stream()
    hits = np.array([assign_batches(8, 2, SamplerSpec.partial_shuffle(4), s).batch_of[0]
                     for _ in range(10_000)])
    assert set(hits) == {0, 1}
    assert abs(np.mean(hits == 0) - 0.5) < 0.02


def test_full_shuffle_target_uniform():
    t = target_batch_index(10_000, 100, SamplerSpec.full_shuffle(), stream(), size=100_000)
    counts = np.bincount(t, minlength=100)
    assert stats.chisquare(counts).pvalue > 0.01


def test_partial_shuffle_support():
    spec = SamplerSpec.partial_shuffle(1000)
    assert target_support(10_000, 100, spec) == 10
    t = target_batch_index(10_000, 100, spec, stream(), size=20_000)
    assert set(np.unique(t)) == set(range(10))


@pytest.mark.parametrize('spec', SPECS.values(), ids=SPECS.keys())
def test_target_law_matches_assignment(spec):
    n, b, draws = 20, 2, 100_000
    s = stream(1)
    direct = np.bincount(target_batch_index(n, b, spec, stream(2), size=draws), minlength=10)
    via = np.bincount([assign_batches(n, b, spec, s).batch_of[0] for _ in range(draws)],
                      minlength=10)
    tv = 0.5 * np.abs(direct / draws - via / draws).sum()
    assert tv < 0.01


def test_full_equals_partial_with_whole_buffer():
    a = target_batch_index(20, 2, SamplerSpec.full_shuffle(), stream(3), size=20_000)
    b = [assign_batches(20, 2, SamplerSpec.partial_shuffle(20), stream(4, i)).batch_of[0]
         for i in range(20_000)]
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_divisibility_rejected():
    with pytest.raises(ConfigError):
        assign_batches(10, 3, SamplerSpec.full_shuffle(), stream())
    with pytest.raises(ConfigError):
        target_batch_index(12, 4, SamplerSpec.partial_shuffle(6), stream())
