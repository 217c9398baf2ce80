import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmtransfer.buffers import (BEHAVIORAL, EXPERT, DatasetError, ReplayBuffer, WarmingUp,
                                load_dataset, sample_segments, save_dataset)
from wmtransfer.envs import Episode


def make_episode(T, s_dim=4, a_dim=2, offset=0.0, task="reach"):
    # state k of the episode encodes (offset, k) so windows can be traced back
    states = np.zeros((T + 1, s_dim))
    states[:, 0] = offset
    states[:, 1] = np.arange(T + 1)
    actions = np.tile(np.arange(T, dtype=float)[:, None], (1, a_dim))
    ends = np.zeros(T, dtype=bool)
    ends[-1] = True
    return Episode(task, states, actions, np.zeros(T, dtype=bool), ends)


def test_push_size():
    assert len(ReplayBuffer(EXPERT).push_episode(make_episode(20))) == 20


def test_behavioral_evicts_whole_oldest_episode():
    buf = ReplayBuffer(BEHAVIORAL, capacity=30)
    buf.push_episode(make_episode(20, offset=1)).push_episode(make_episode(20, offset=2))
    assert len(buf) == 20
    assert buf.episodes[0].states[0, 0] == 2


def test_expert_ignores_capacity():
    buf = ReplayBuffer(EXPERT, capacity=30)
    buf.extend([make_episode(20), make_episode(20)])
    assert len(buf) == 40


def test_dimension_drift_rejected():
    buf = ReplayBuffer(EXPERT).push_episode(make_episode(5))
    with pytest.raises(ValueError):
        buf.push_episode(make_episode(5, s_dim=6))


def test_non_terminating_episode_rejected():
    ep = make_episode(5)
    ep.episode_end[-1] = False
    with pytest.raises(ValueError):
        ReplayBuffer(EXPERT).push_episode(ep)


def test_unknown_role_rejected():
    with pytest.raises(ValueError):
        ReplayBuffer("other")


def _buffers():
    exp = ReplayBuffer(EXPERT).extend([make_episode(6, offset=1), make_episode(9, offset=2)])
    beh = ReplayBuffer(BEHAVIORAL, 1000).extend([make_episode(7, offset=-1)])
    return exp, beh


def test_segment_shapes_and_sources():
    exp, beh = _buffers()
    b = sample_segments(exp, beh, 10, 3, 0.5, np.random.default_rng(0))
    assert b.states.shape == (10, 4, 4) and b.actions.shape == (10, 3, 2)
    assert b.expert.sum() == 5 and b.horizon == 3 and len(b) == 10
    np.testing.assert_array_equal(b.states[b.expert, 0, 0] > 0, True)
    np.testing.assert_array_equal(b.states[~b.expert, 0, 0] < 0, True)


def test_expert_fraction_rounds_up():
    exp, beh = _buffers()
    assert sample_segments(exp, beh, 5, 3, 0.5, np.random.default_rng(0)).expert.sum() == 3
    assert sample_segments(exp, None, 8, 3, 1.0, np.random.default_rng(0)).expert.all()


def test_warming_up_signals():
    exp = ReplayBuffer(EXPERT).push_episode(make_episode(2))
    with pytest.raises(WarmingUp):
        sample_segments(exp, None, 4, 3, 1.0, np.random.default_rng(0))
    with pytest.raises(WarmingUp):
        sample_segments(_buffers()[0], ReplayBuffer(BEHAVIORAL), 4, 3, 0.5, np.random.default_rng(0))


@settings(max_examples=50)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=5), st.integers(1, 4), st.integers(0, 2**31))
def test_segments_are_contiguous_slices_of_one_episode(lengths, horizon, seed):
    buf = ReplayBuffer(EXPERT).extend([make_episode(T, offset=i + 1) for i, T in enumerate(lengths)])
    if max(lengths) < horizon:
        with pytest.raises(WarmingUp):
            buf.draw(4, horizon, np.random.default_rng(seed))
        return
    states, actions, ends = buf.draw(16, horizon, np.random.default_rng(seed))
    for row in range(16):
        assert np.all(states[row, :, 0] == states[row, 0, 0])
        assert np.all(np.diff(states[row, :, 1]) == 1)
        np.testing.assert_array_equal(actions[row, :, 0], states[row, :-1, 1])
        # only the final transition of a window may carry the episode end
        assert not ends[row, :-1].any()


def test_sampling_reproducible():
    exp, beh = _buffers()
    a = sample_segments(exp, beh, 32, 3, 0.5, np.random.default_rng(9))
    b = sample_segments(exp, beh, 32, 3, 0.5, np.random.default_rng(9))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)


def test_start_indices_uniform():
    buf = ReplayBuffer(EXPERT).extend([make_episode(5, offset=1), make_episode(8, offset=2)])
    # windows of 3 actions: 3 starts in the first episode, 6 in the second
    n_cells = 9
    assert buf.num_windows(3) == n_cells
    n = 10_000
    states, _, _ = buf.draw(n, 3, np.random.default_rng(0))
    keys = [(int(s[0, 0]), int(s[0, 1])) for s in states]
    cells = sorted(set(keys))
    assert len(cells) == n_cells
    counts = np.array([keys.count(c) for c in cells])
    p = 1.0 / n_cells
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


# ------------------------------------------------------------- persistence


def test_dataset_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    eps = []
    for T in (3, 7, 1, 4, 9):
        ep = make_episode(T)
        ep.states[:] = rng.normal(size=ep.states.shape) * 1e-3 + 1 / 3
        ep.actions[:] = rng.normal(size=ep.actions.shape)
        eps.append(ep)
    path = tmp_path / "d.jsonl"
    save_dataset(path, eps)
    back = load_dataset(path)
    assert len(back) == 5
    for x, y in zip(eps, back):
        assert x.task == y.task
        for f in ("states", "actions", "success", "episode_end"):
            assert np.array_equal(getattr(x, f), getattr(y, f))


def test_empty_file_loads_empty(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_truncated_line_names_line_number(tmp_path):
    path = tmp_path / "t.jsonl"
    save_dataset(path, [make_episode(10), make_episode(10)])
    lines = path.read_text().splitlines()
    lines[16] = lines[16][: len(lines[16]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="line 17"):
        load_dataset(path)


def test_non_contiguous_transition_rejected(tmp_path):
    path = tmp_path / "g.jsonl"
    save_dataset(path, [make_episode(4)])
    lines = path.read_text().splitlines()
    del lines[1]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(path)
