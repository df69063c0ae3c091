"""Acceptance criteria, each at its stated tolerance.

Every test appends one ``PASS``/``FAIL`` line to the terminal summary.  Run
alone with ``pytest tests/test_acceptance.py -v`` (about 20 minutes on one
core) or as a script: ``python3 tests/test_acceptance.py``.
"""

import dataclasses
import functools
import statistics
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES  # noqa: E402
from seil import cli, nn  # noqa: E402
from seil import evolution as evo  # noqa: E402
from seil import microsim as sim  # noqa: E402
from seil import selector as sel  # noqa: E402
from seil.policy import MLPPolicy, evaluate  # noqa: E402
from seil.rng import TAG_BASE, TAG_EMA, TAG_EXPERT, derive_seed  # noqa: E402

E = 20
NO_STOP = 10**9
CACHE = evo.StageCache()


def report(cid: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} C{cid}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def default_config(seed: int, **kw) -> evo.ExperimentConfig:
    return evo.ExperimentConfig(master_seed=seed, eval_episodes=E, max_rounds=4, patience=NO_STOP, **kw)


def total_successes(sr) -> int:
    return sum(sr.successes)


@functools.lru_cache(maxsize=None)
def evolution_run(seed: int, **kw):
    t0 = time.time()
    rep = CACHE.run(default_config(seed, **kw))
    return rep, time.time() - t0


def test_c01_gradient_check():
    t0 = time.time()
    errs = {kind: max(nn.grad_check(kind, s, 1e-3) for s in range(5)) for kind in nn.GRAD_CHECK_KINDS}
    dt = time.time() - t0
    worst = max(errs.values())
    ok = worst < 1e-3 and dt < 5.0
    report("01", ok, f"grad_check max rel err {worst:.2e} (<1e-3) over {len(errs)} kinds x 5 seeds in {dt:.2f}s (<5s)")
    assert ok


def test_c02_ema_closed_form():
    rng = np.random.default_rng(0)
    worst, exact = 0.0, True
    for tau in (0.0, 0.5, 0.9, 0.999):
        for t in (1, 10, 100):
            theta = rng.standard_normal(64).astype(np.float32)
            s0 = rng.standard_normal(64).astype(np.float32)
            ps = nn.ParamSet({"w": theta.copy()}, {"w": s0.copy()})
            for _ in range(t):
                nn.ema_update(ps, tau)
            want = theta.astype(np.float64) + tau**t * (s0.astype(np.float64) - theta)
            worst = max(worst, float(np.max(np.abs(ps.ema["w"] - want))))
            if tau == 0.0:
                exact &= bool(np.array_equal(ps.ema["w"], ps["w"]))
    ok = worst <= 1e-5 and exact
    report("02", ok, f"EMA closed form max abs err {worst:.1e} (<=1e-5), tau=0 bit-equal: {exact}")
    assert ok


def test_c03_replay_determinism():
    cfg = default_config(0)
    ps = CACHE.policy(cfg)
    tasks = sim.make_tasks()
    trajs = []
    for i in range(100):
        task = tasks[i % len(tasks)]
        aug = sim.EnvAugConfig(i % 2 == 0, cfg.delta)
        kind = i % 3
        if kind == 0:
            seed = derive_seed(cfg.master_seed, 1, TAG_EXPERT, task.task_id, i)
            trajs.append(sim.expert_rollout(task, seed, aug, rollout_idx=i))
        else:
            tag, source, weights = (TAG_BASE, "base", ps.params) if kind == 1 else (TAG_EMA, "ema", ps.ema)
            seed = derive_seed(cfg.master_seed, 1, tag, task.task_id, i)
            trajs.append(sim.rollout(MLPPolicy(weights), task, seed, aug, source, 1, i))
    passed = sum(sim.replay_check(t) for t in trajs)
    mix = {s: sum(t.source == s for t in trajs) for s in ("expert", "base", "ema")}
    ok = passed == 100
    report("03", ok, f"{passed}/100 recorded rollouts replay bit-exactly (sources {mix}, aug on/off 50/50)")
    assert ok


def test_c04_bc_sanity():
    t0 = time.time()
    srs = []
    for seed in range(3):
        cfg = default_config(seed)
        ps = CACHE.policy(cfg)
        srs.append(evaluate(ps.params, sim.TaskSuite(seed), E, cfg.delta).mean)
    dt = time.time() - t0
    med = statistics.median(srs)
    ok = med >= 0.60 and dt < 300
    report("04", ok, f"8-shot BC SR per seed {[round(s, 4) for s in srs]}, median {med:.4f} (>=0.60), {dt:.0f}s (<300s)")
    assert ok


def test_c05_self_evolution_gain():
    gains, lines, total = [], [], 0.0
    for seed in range(5):
        rep, dt = evolution_run(seed)
        total += dt
        first, last = rep.rounds[0].base, rep.rounds[-1].base
        # success counts are integers, so the gain is exact
        gain = Fraction(total_successes(last) - total_successes(first), E * sim.N_TASKS)
        gains.append(gain)
        lines.append(f"{first.mean:.4f}->{last.mean:.4f}")
    med = statistics.median(gains)
    ok = med >= Fraction(5, 100) and total < 1800
    report("05", ok, f"base SR round0->round4 {lines}, gains {[float(g) for g in gains]}, "
                     f"median {float(med):+.4f} (>=+0.05), {total:.0f}s (<1800s)")
    assert ok


def test_c06_selection_ordering():
    asc, uni = [], []
    for seed in range(5):
        cfg = dataclasses.replace(default_config(seed), rollouts=50, select_k=20, max_rounds=1)
        asc.append(CACHE.run(dataclasses.replace(cfg, scheme="ascending")).rounds[-1].base.mean)
        uni.append(CACHE.run(dataclasses.replace(cfg, scheme="uniform")).rounds[-1].base.mean)
    ma, mu = statistics.median(asc), statistics.median(uni)
    ok = ma >= mu
    report("06", ok, f"k=20 of 50, one round: ascending {[round(x, 4) for x in asc]} median {ma:.4f} "
                     f">= uniform {[round(x, 4) for x in uni]} median {mu:.4f}")
    assert ok


def test_c07_selector_validity():
    full, seq = [], []
    for seed in range(3):
        cfg = default_config(seed)
        held = evo.holdout_demos(cfg, sim.TaskSuite(seed), 20)
        full.append(sel.accuracy(CACHE.selector(cfg), held, cfg.selector_spec))
        seq_cfg = dataclasses.replace(cfg, sequence_only_selector=True)
        seq.append(sel.accuracy(CACHE.selector(seq_cfg), held, seq_cfg.selector_spec))
    mf, ms = statistics.median(full), statistics.median(seq)
    ok = mf >= 0.25 and mf >= ms
    report("07", ok, f"held-out accuracy img+seq {full} median {mf:.2f} (>=0.25), sequence-only {seq} median {ms:.2f} "
                     f"(img+seq >= seq)")
    assert ok


def test_c08_inconsistency_reproduction():
    on, off = [], []
    for seed in range(5):
        on.append(evolution_run(seed)[0].rounds[-1].base.mean)
        off.append(evolution_run(seed, e_aug=False)[0].rounds[-1].base.mean)
    m_on, m_off = statistics.median(on), statistics.median(off)
    ok = m_off <= m_on
    report("08", ok, f"4-round SR m_aug without e_aug {[round(x, 4) for x in off]} median {m_off:.4f} "
                     f"<= with e_aug {[round(x, 4) for x in on]} median {m_on:.4f}")
    assert ok


def test_c09_cli_determinism(tmp_path):
    overrides = ["--set", "rollouts=5", "--set", "select_k=3", "--set", "max_rounds=2",
                 "--set", "eval_episodes=5", "--set", "selector_epochs=3", "--set", "round_steps=300"]
    outs = []
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        code = cli.main(["evolve", "--out", str(out), "--seed", "11", "--threads", str(threads)] + overrides)
        assert code == 0
        outs.append(out)
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in ("report.csv", "scored.csv"))
    report("09", same, f"evolve --threads 1 vs --threads 8: report.csv and scored.csv byte-identical: {same}")
    assert same


def test_c10_growth_rate_arithmetic():
    g = evo.growth_rate(4.6, 14.6)
    shown = round(g, 1)
    ok = shown == 217.4 and abs(shown - 217.3) <= 0.2
    report("10", ok, f"growth_rate(4.6, 14.6) = {g:.4f}% reported as {shown}% (within 0.2 pp of 217.3%)")
    assert ok


if __name__ == "__main__":
    import pytest

    sys.exit(pytest.main([__file__, "-v", "-s"]))
