import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dysi import scheduling as S
from dysi.data import BOS, PAD
from dysi.errors import ConfigError, DegenerateInputError


def test_accuracy_examples():
    assert S.training_accuracy([5, 6, 7], [5, 6, 7]) == 1.0
    assert S.training_accuracy([5, 6, 7], [8, 9, 10]) == 0.0
    y = np.array([5, 6, 7, PAD])
    pred = np.array([5, 9, 7, 11])
    assert S.training_accuracy(y, pred, y == PAD) == pytest.approx(2 / 3)


def test_accuracy_errors():
    with pytest.raises(DegenerateInputError):
        S.training_accuracy([PAD], [4], [True])
    with pytest.raises(ValueError):
        S.training_accuracy([1, 2], [1])


def test_eligible_positions():
    assert S.eligible_positions([False, False, False, True, True]).tolist() == [1, 2]
    assert S.eligible_positions([False]).tolist() == []


def test_count_zero_cases():
    rng = np.random.default_rng(0)
    assert all(S.dynamic_sample_count(0.0, 10, 0.5, rng) == 0 for _ in range(1000))
    assert all(S.dynamic_sample_count(1.0, 10, 0.0, rng) == 0 for _ in range(1000))


def test_count_statistics():
    rng = np.random.default_rng(1)
    n = np.array([S.dynamic_sample_count(1.0, 10, 0.5, rng) for _ in range(100_000)])
    assert abs(n.mean() - 2.5) / 2.5 < 0.02
    assert n.max() <= 5 and n.min() >= 0


def test_count_clamped_to_eligible():
    rng = np.random.default_rng(2)
    assert max(S.dynamic_sample_count(1.0, 10, 1.0, rng, n_eligible=3) for _ in range(500)) == 3


def test_count_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        S.dynamic_sample_count(0.5, 10, 1.5, rng)
    with pytest.raises(ValueError):
        S.dynamic_sample_count(0.5, 0, 0.5, rng)


@settings(max_examples=200, deadline=None)
@given(acc=st.floats(0, 1), t=st.integers(1, 60), beta=st.floats(0, 1), seed=st.integers(0, 2**32 - 1))
def test_count_bounded(acc, t, beta, seed):
    n = S.dynamic_sample_count(acc, t, beta, np.random.default_rng(seed))
    assert 0 <= n <= round(beta * acc * t + 1e-9)


def test_select_positions_edges():
    rng = np.random.default_rng(0)
    assert S.select_positions([1, 2, 3], 0, rng).size == 0
    assert S.select_positions([1, 2, 3], 3, rng).tolist() == [1, 2, 3]
    with pytest.raises(ValueError):
        S.select_positions([1, 2], 3, rng)


def test_select_positions_uniform():
    rng = np.random.default_rng(3)
    picks = np.array([S.select_positions([1, 2, 3, 4], 1, rng)[0] for _ in range(100_000)])
    freq = np.bincount(picks, minlength=5)[1:] / picks.size
    assert np.all(np.abs(freq - 0.25) < 0.01)


def test_mix_sequence_examples():
    tin = np.array([BOS, 10, 11, 12])
    pred = np.array([20, 21, 22, 2])
    assert S.mix_sequence(tin, pred, []).tolist() == tin.tolist()
    assert S.mix_sequence(tin, pred, [2]).tolist() == [BOS, 10, 21, 12]
    # a self-consistent model predicts exactly the next ground-truth input
    consistent = np.array([10, 11, 12, 2])
    assert S.mix_sequence(tin, consistent, [1, 2, 3]).tolist() == tin.tolist()


def test_mix_sequence_never_touches_bos():
    with pytest.raises(ValueError):
        S.mix_sequence([BOS, 4, 5], [6, 7, 8], [0])
    with pytest.raises(ValueError):
        S.mix_sequence([BOS, 4, 5], [6, 7, 8], [3])


def test_dynamic_mix_batch_respects_padding():
    rng = np.random.default_rng(0)
    tin = np.array([[BOS, 4, 5, PAD], [BOS, 6, 7, 8]])
    tout = np.array([[4, 5, 2, PAD], [6, 7, 8, 2]])
    pad = tout == PAD
    pred = tout.copy()
    pred[pad] = 9
    for _ in range(200):
        mixed, dec = S.dynamic_mix_batch(tin, pred, tout, pad, 1.0, rng)
        assert (mixed[:, 0] == BOS).all()
        assert mixed[0, 3] == PAD
        assert dec[0].acc == 1.0 and dec[0].n <= 2


def test_epsilon_examples():
    assert S.step_decay_epsilon(S.EXPONENTIAL, 0) == 1.0
    assert S.step_decay_epsilon(S.LINEAR, 0, c=1e-3) == 1.0
    assert S.step_decay_epsilon(S.LINEAR, 10**9, c=1e-3, eps_min=0.3) == 0.3
    assert S.step_decay_epsilon(S.EXPONENTIAL, 2000, k=0.5, decay_unit=1000) == pytest.approx(0.25)


def test_epsilon_errors():
    with pytest.raises(ConfigError):
        S.step_decay_epsilon(S.EXPONENTIAL, 5, k=1.5)
    with pytest.raises(ConfigError):
        S.step_decay_epsilon("sigmoid", 5)
    with pytest.raises(ValueError):
        S.step_decay_epsilon(S.LINEAR, -1)


def test_bernoulli_examples():
    rng = np.random.default_rng(0)
    tin = np.array([[BOS, 4, 5, 6]])
    pred = np.array([[7, 8, 9, 2]])
    assert np.array_equal(S.bernoulli_mix(tin, pred, 1.0, rng), tin)
    assert S.bernoulli_mix(tin, pred, 0.0, rng).tolist() == [[BOS, 7, 8, 9]]


def test_bernoulli_rate():
    rng = np.random.default_rng(4)
    tin = np.full((1000, 101), 4)
    tin[:, 0] = BOS
    pred = np.full((1000, 101), 5)
    _, mask = S.bernoulli_mix(tin, pred, 0.5, rng, return_mask=True)
    assert mask[:, 0].sum() == 0
    assert abs(mask[:, 1:].mean() - 0.5) < 0.01


def test_bernoulli_skips_padding():
    rng = np.random.default_rng(0)
    tin = np.array([[BOS, 4, PAD]])
    out = S.bernoulli_mix(tin, np.array([[7, 8, 9]]), 0.0, rng, pad_mask=tin == PAD)
    assert out.tolist() == [[BOS, 7, PAD]]


def test_scheduler_config_validation():
    with pytest.raises(ConfigError):
        S.SchedulerConfig(beta=1.5)
    with pytest.raises(ConfigError):
        S.SchedulerConfig(kind="curriculum")
    assert S.current_epsilon(S.SchedulerConfig(kind=S.DYNAMIC), 10) is None
    cfg = S.SchedulerConfig(kind=S.VANILLA_SS, decay_scheme=S.EXPONENTIAL, k=0.5, decay_unit=10)
    assert S.current_epsilon(cfg, 10) == pytest.approx(0.5)
