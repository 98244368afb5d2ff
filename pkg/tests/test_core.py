import json

import numpy as np
import pytest
from scipy import stats

from shuffle_audit.core import (ConfigError, MechanismParams, ObservationMatrix, RngStreamKey,
                                SamplerKind, SamplerSpec, derive_stream, load_config,
                                parse_overrides)


def test_params_derived_quantities():
    p = MechanismParams(batch_size=100, steps_per_epoch=100, epochs=3)
    assert p.dataset_size == 10_000
    assert p.sampling_rate == pytest.approx(0.01)
    assert p.total_steps == 300


@pytest.mark.parametrize('kwargs', [
    dict(batch_size=0, steps_per_epoch=1),
    dict(batch_size=1, steps_per_epoch=0),
    dict(batch_size=1, steps_per_epoch=1, epochs=0),
    dict(batch_size=1, steps_per_epoch=1, noise_multiplier=-1),
    dict(batch_size=1, steps_per_epoch=1, clip_norm=0),
    dict(batch_size=1, steps_per_epoch=1, delta=1),
    dict(batch_size=1.5, steps_per_epoch=1),
])
def test_params_rejects(kwargs):
    with pytest.raises(ConfigError):
        MechanismParams(**kwargs)


def test_zero_noise_allowed():
    assert MechanismParams(1, 2, noise_multiplier=0.0).noise_multiplier == 0.0


def test_sampler_spec_checks():
    with pytest.raises(ConfigError):
        SamplerSpec(SamplerKind.PARTIAL_SHUFFLE)
    with pytest.raises(ConfigError):
        SamplerSpec(SamplerKind.FULL_SHUFFLE, buffer=4)
    with pytest.raises(ConfigError):
        SamplerSpec.full_shuffle().validate(10, 3)
    with pytest.raises(ConfigError):
        SamplerSpec.partial_shuffle(6).validate(16, 4)
    with pytest.raises(ConfigError):
        SamplerSpec.partial_shuffle(32).validate(16, 4)
    SamplerSpec.partial_shuffle(8).validate(16, 4)
    assert SamplerSpec('partial_shuffle', 8).label() == 'partial_shuffle(K=8)'


def test_observation_matrix():
    obs = ObservationMatrix(np.zeros((2, 3)), 1)
    assert (obs.epochs, obs.steps) == (2, 3)
    with pytest.raises(ValueError):
        obs.values[0, 0] = 1.0
    obs.check_shape(MechanismParams(1, 3, epochs=2))
    with pytest.raises(ValueError):
        obs.check_shape(MechanismParams(1, 3, epochs=1))
    with pytest.raises(ValueError):
        ObservationMatrix(np.zeros(3), 0)
    with pytest.raises(ValueError):
        ObservationMatrix(np.array([[np.nan]]), 0)
    with pytest.raises(ValueError):
        ObservationMatrix(np.zeros((1, 1)), 2)


def test_stream_key_range():
    RngStreamKey(2**64 - 1, 0)
    with pytest.raises(ValueError):
        RngStreamKey(-1, 0)
    with pytest.raises(ValueError):
        RngStreamKey(0, 2**64)


def test_same_key_same_stream():
    a = derive_stream(RngStreamKey(1, 0)).normal(100)
    b = derive_stream(RngStreamKey(1, 0)).normal(100)
    assert a.tobytes() == b.tobytes()
    c = derive_stream(RngStreamKey(1, 1)).normal(100)
    assert not np.array_equal(a, c)


def test_adjacent_streams_independent():
    u0 = derive_stream(RngStreamKey(1, 0)).uint64(10_000)
    u1 = derive_stream(RngStreamKey(1, 1)).uint64(10_000)
    # 10x10 contingency table of the top decimal-ish digit of each stream
    b0 = (u0 >> np.uint64(60)).astype(int) % 10
    b1 = (u1 >> np.uint64(60)).astype(int) % 10
    table = np.zeros((10, 10))
    np.add.at(table, (b0, b1), 1)
    assert stats.chi2_contingency(table)[1] > 0.01


def test_normal_moments_and_ks():
    x = derive_stream(RngStreamKey(1, 0)).normal(1_000_000)
    assert abs(x.mean()) < 0.01
    assert 0.99 <= x.var() <= 1.01
    assert stats.kstest(x, 'norm').statistic < 0.002


def test_integers_and_permutation():
    s = derive_stream(RngStreamKey(7, 3))
    v = s.integers(2, 5, size=1000)
    assert v.min() == 2 and v.max() == 4
    assert sorted(s.permutation(10)) == list(range(10))


def test_load_config_file_and_overrides(tmp_path):
    path = tmp_path / 'c.json'
    path.write_text(json.dumps({'batch_size': 2, 'steps_per_epoch': 10, 'observations': '1e6'}))
    cfg = load_config(path, parse_overrides(['steps_per_epoch=20', 'delta=1e-6']))
    assert cfg == {'batch_size': 2, 'steps_per_epoch': 20, 'observations': 1_000_000,
                   'delta': 1e-6}


def test_load_config_reads_manifest(tmp_path):
    path = tmp_path / 'run_manifest.json'
    path.write_text(json.dumps({'command': 'audit', 'config': {'seed': 5}, 'seed': 5}))
    assert load_config(path) == {'seed': 5}


@pytest.mark.parametrize('overrides', [{'nope': 1}, {'repeats': 1.5}])
def test_load_config_rejects(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_load_config_bad_file(tmp_path):
    bad = tmp_path / 'bad.json'
    bad.write_text('[1, 2]')
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'missing.json')


def test_parse_overrides_needs_equals():
    with pytest.raises(ConfigError):
        parse_overrides(['seed'])
