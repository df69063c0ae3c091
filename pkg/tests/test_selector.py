import numpy as np
import pytest
from hypothesis import given, strategies as st

from seil import microsim as sim
from seil import nn
from seil import selector as sel
from seil.rng import SplitMix64

SMALL = sel.SelectorSpec(img_hidden=6, act_hidden=5, hidden=7, epochs=30, batch_size=4)


def _fake(task_id, idx, source="base"):
    return sim.Trajectory(task_id, 0, sim.reset_with_aug(sim.make_tasks()[task_id], 0, sim.EnvAugConfig()),
                          np.zeros((1, 20), np.float32), np.zeros((1, 3), np.float32),
                          np.zeros((16, 16, 3), np.float32), True, source, 1, False, idx)


def _scored(confs):
    return [sel.ScoredDemo(_fake(0, i), c) for i, c in enumerate(confs)]


def test_zero_params_uniform_confidence(expert_trajs):
    ps = nn.init_params(sel.SelectorSpec().layers(), 0)
    z = {k: np.zeros_like(v) for k, v in ps.params.items()}
    tr = expert_trajs[0]
    assert not sel.selector_logits(z, tr.first_frame, tr.actions).any()
    assert sel.score_confidence(z, tr).confidence == pytest.approx(0.125)


def test_empty_sequence_rejected(expert_trajs):
    ps = nn.init_params(SMALL.layers(), 0)
    with pytest.raises(ValueError):
        sel.selector_logits(ps.params, expert_trajs[0].first_frame, np.zeros((0, 3)), SMALL)


def test_logits_deterministic_and_order_sensitive(expert_trajs):
    ps = nn.init_params(SMALL.layers(), 1)
    tr = expert_trajs[2]
    a = sel.selector_logits(ps.params, tr.first_frame, tr.actions, SMALL)
    assert np.array_equal(a, sel.selector_logits(ps.params, tr.first_frame, tr.actions, SMALL))
    swapped = tr.actions.copy()
    swapped[[0, -1]] = swapped[[-1, 0]]
    assert not np.allclose(a, sel.selector_logits(ps.params, tr.first_frame, swapped, SMALL))


def test_selector_gradients():
    ps = nn.init_params(SMALL.layers(), 2)
    p64 = {k: v.astype(np.float64) for k, v in ps.params.items()}
    demos = [_fake(t, 0) for t in range(3)]
    rng = np.random.default_rng(0)
    for d in demos:
        d.actions = rng.uniform(-1, 1, (4, 3)).astype(np.float32)
        d.first_frame = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    frames, acts, lengths = sel.pad_batch(demos)
    batch = ((frames.astype(np.float64), acts.astype(np.float64), lengths), np.array([0, 1, 2]))
    assert nn.check_gradients(SMALL, p64, batch, "cross_entropy") < 1e-3


def test_training_needs_every_task(expert_trajs):
    with pytest.raises(ValueError, match="no demos"):
        sel.train_selector(expert_trajs[:5], 0, SMALL)


def test_small_selector_learns_and_is_deterministic(expert_trajs):
    a = sel.train_selector(expert_trajs, 3, SMALL)
    b = sel.train_selector(expert_trajs, 3, SMALL)
    assert all(np.array_equal(a[k], b[k]) for k in a.names())
    init = nn.init_params(SMALL.layers(), 3)
    assert sel.selector_loss(a, expert_trajs, SMALL) < sel.selector_loss(init, expert_trajs, SMALL)
    probs = sel.predict_proba(a, expert_trajs, SMALL)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((probs >= 0) & (probs <= 1))


def test_sequence_only_ignores_frame(expert_trajs):
    spec = sel.SelectorSpec(img_hidden=6, act_hidden=5, hidden=7, sequence_only=True)
    ps = nn.init_params(spec.layers(), 4)
    tr = expert_trajs[0]
    a = sel.selector_logits(ps.params, tr.first_frame, tr.actions, spec)
    b = sel.selector_logits(ps.params, np.ones_like(tr.first_frame), tr.actions, spec)
    assert np.array_equal(a, b)


def test_select_examples():
    s = _scored([0.9, 0.2, 0.5])
    assert [x.confidence for x in sel.select(s, 2, "ascending")] == [0.2, 0.5]
    s = _scored([0.9, 0.2, 0.5, 0.7])
    assert sorted(x.confidence for x in sel.select(s, 2, "mixed")) == [0.2, 0.9]
    assert [x.confidence for x in sel.select(s, 2, "descending")] == [0.9, 0.7]
    assert sel.select(s, 0, "ascending") == []
    assert len(sel.select(s, 10, "descending")) == 4


def test_select_ties_break_on_order_key():
    s = _scored([0.5, 0.5, 0.5])
    assert [x.demo.rollout_idx for x in sel.select(s[::-1], 2, "ascending")] == [0, 1]
    assert [x.demo.rollout_idx for x in sel.select(s[::-1], 2, "descending")] == [0, 1]


def test_select_rejects_bad_input():
    with pytest.raises(ValueError):
        sel.select(_scored([0.1, 0.2]), 1, "random")
    with pytest.raises(ValueError):
        sel.select(_scored([0.1, 0.2]), 1, "uniform")


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 30), st.integers(0, 2**64 - 1))
def test_select_properties(confs, k, seed):
    s = _scored(confs)
    n = min(k, len(s))
    for scheme in sel.SCHEMES:
        out = sel.select(s, k, scheme, SplitMix64(seed))
        assert len(out) == n
        assert len({id(x) for x in out}) == n
    u1 = sel.select(s, k, "uniform", SplitMix64(seed))
    u2 = sel.select(s, k, "uniform", SplitMix64(seed))
    assert [x.key for x in u1] == [x.key for x in u2]
    asc = sel.select(s, k, "ascending")
    desc = sel.select(s, k, "descending")
    if asc and desc and not ({id(x) for x in asc} & {id(x) for x in desc}):
        assert max(x.confidence for x in asc) <= min(x.confidence for x in desc)
