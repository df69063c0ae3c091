"""``seil`` command line.

Exit codes: 0 success, 1 usage error (bad flag, unknown key or study),
2 runtime failure.  Every verb that writes to ``--out`` also writes
``config.json`` holding the effective configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import evolution as evo
from . import microsim as sim
from . import nn
from . import storage
from .policy import POLICY_NET, MLPPolicy, evaluate
from .rng import TAG_BASE, TAG_EXPERT, derive_seed

log = logging.getLogger("seil")

VERBS = ("gen-demos", "train-baseline", "evolve", "eval", "ablate", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seil", description="Self-evolving imitation learning experiments.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    p.add_argument("--out", default="seil-out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, help="rollout worker threads")
    p.add_argument("--verify", action="store_true", help="replay-check demos after writing/reading")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--study", help=f"ablation study: {', '.join(evo.STUDIES)}")
    p.add_argument("--checkpoint", help="checkpoint to evaluate (eval)")
    p.add_argument("--demos", help="demo file to read (eval --verify, train-baseline)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_DEFAULTS = evo.ExperimentConfig().to_dict()


def parse_value(key: str, raw: str):
    """Coerce ``raw`` to the type of the field's default."""
    if key not in _DEFAULTS:
        raise UsageError(f"unknown config key {key!r}")
    default = _DEFAULTS[key]
    if key == "pool_filter":
        if raw.lower() in ("", "none", "null"):
            return None
        return raw.split("+") if not raw.startswith("[") else json.loads(raw)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def effective_config(args) -> evo.ExperimentConfig:
    d = {}
    if args.config:
        try:
            d = storage.read_config(args.config)
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config: {e}") from None
        unknown = sorted(set(d) - set(_DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys in {args.config}: {unknown}")
    for item in args.overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        d[key.strip()] = parse_value(key.strip(), raw.strip())
    if args.seed is not None:
        d["master_seed"] = args.seed
    if args.threads is not None:
        d["threads"] = args.threads
    try:
        return evo.ExperimentConfig.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None


def _out(args, name: str) -> str:
    return os.path.join(args.out, name)


def cmd_gen_demos(args, cfg) -> None:
    suite = sim.TaskSuite(cfg.master_seed)
    demos = evo.expert_demos(cfg, suite)
    path = _out(args, "expert_demos.jsonl")
    storage.write_demos(path, demos)
    if args.verify:
        storage.read_demos(path, verify=True)
    print(f"wrote {len(demos)} expert demos to {path}")


def cmd_train_baseline(args, cfg) -> None:
    suite = sim.TaskSuite(cfg.master_seed)
    demos = storage.read_demos(args.demos, verify=args.verify) if args.demos else evo.expert_demos(cfg, suite)
    ps = evo.train_initial_policy(cfg, demos)
    base, ema = evo._eval_pair(ps, suite, cfg, 0)
    report = evo.EvolutionReport(cfg.to_dict(), [evo.RoundReport(0, base, ema, len(demos))])
    storage.write_report(_out(args, "baseline.csv"), report)
    storage.write_checkpoint(_out(args, "baseline.ckpt"), ps)
    print(f"baseline SR base {base.mean:.4f} ema {ema.mean:.4f}")


def cmd_evolve(args, cfg) -> None:
    report_path = _out(args, "report.csv")
    partial = evo.EvolutionReport(cfg.to_dict())

    def flush(rr):
        partial.rounds.append(rr)
        storage.write_report(report_path, partial)

    report = evo.run_seil(cfg, on_round=flush)
    storage.write_report(report_path, report)
    storage.write_scored(_out(args, "scored.csv"), report.scored, cfg.scheme)
    storage.write_checkpoint(_out(args, "final.ckpt"), report.final_policy)
    h = report.base_history()
    g = report.growth_rate
    print(f"rounds {len(h) - 1}  base SR {h[0]:.4f} -> {h[-1]:.4f} (best {max(h):.4f})  "
          f"growth {'undefined' if g is None else f'{g:.1f}%'}")


def cmd_eval(args, cfg) -> None:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    expected = {k: v.shape for k, v in nn.init_params(POLICY_NET.layers(), 0).params.items()}
    ps = storage.read_checkpoint(args.checkpoint, expected_shapes=expected)
    suite = sim.TaskSuite(cfg.master_seed)
    rows = []
    models = [("base", ps.params)] + ([("ema", ps.ema)] if ps.ema is not None else [])
    for model, weights in models:
        sr = evaluate(weights, suite, cfg.eval_episodes, cfg.delta, model, 0, cfg.threads)
        rows.extend(dict(model=model, task_id=t, sr=v) for t, v in enumerate(sr.per_task))
        rows.append(dict(model=model, task_id="mean", sr=sr.mean))
        print(f"{model} SR {sr.mean:.4f}")
    storage.write_table(_out(args, "eval.csv"), rows)


def cmd_ablate(args, cfg) -> None:
    if args.study not in evo.STUDIES:
        raise UsageError(f"unknown study {args.study!r}; valid studies: {', '.join(evo.STUDIES)}")
    rows = evo.run_ablation(args.study, cfg)
    storage.write_table(_out(args, f"ablation_{args.study}.csv"), rows)
    for row in rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def selftest() -> list[tuple[str, bool, str]]:
    """Fast built-in checks; returns (name, ok, detail) per suite."""
    results = []
    errs = [nn.grad_check(kind, seed, 1e-3) for kind in nn.GRAD_CHECK_KINDS for seed in range(5)]
    worst = max(errs)
    results.append(("grad_check", worst < 1e-3, f"max relative error {worst:.3e}"))

    rng = np.random.default_rng(0)
    ok = True
    for tau in (0.0, 0.5, 0.9, 0.999):
        theta = {"w": rng.standard_normal(16).astype(np.float32)}
        s0 = rng.standard_normal(16).astype(np.float32)
        ps = nn.ParamSet(theta, {"w": s0.copy()})
        for t in range(1, 101):
            nn.ema_update(ps, tau)
            if t in (1, 10, 100):
                want = theta["w"].astype(np.float64) + tau ** t * (s0.astype(np.float64) - theta["w"])
                ok &= bool(np.max(np.abs(ps.ema["w"] - want)) <= 1e-5)
                if tau == 0.0:
                    ok &= bool(np.array_equal(ps.ema["w"], theta["w"]))
    results.append(("ema_closed_form", ok, ""))

    tasks = sim.make_tasks()
    trajs = []
    for i in range(16):
        task = tasks[i % len(tasks)]
        aug = sim.EnvAugConfig(bool(i % 2), 0.05)
        seed = derive_seed(0, 1, TAG_EXPERT if i < 8 else TAG_BASE, task.task_id, i)
        trajs.append(sim.expert_rollout(task, seed, aug, rollout_idx=i) if i < 8
                     else sim.rollout(MLPPolicy(nn.init_params(POLICY_NET.layers(), i)), task, seed, aug, "base", 1, i))
    results.append(("replay", all(sim.replay_check(t) for t in trajs), f"{len(trajs)} rollouts"))

    ok = True
    for t in trajs:
        back = storage.decode_demo(json.loads(json.dumps(storage.encode_demo(t))))
        ok &= np.array_equal(back.observations, t.observations) and np.array_equal(back.actions, t.actions)
        ok &= back.init_state == t.init_state and back.demo_id == t.demo_id
    ps = nn.init_params(POLICY_NET.layers(), 3)
    ps.init_ema()
    ps.init_adam()
    back = storage.decode_checkpoint(storage.encode_checkpoint(ps))
    for role in ("params", "ema", "adam_m", "adam_v"):
        a, b = getattr(ps, role), getattr(back, role)
        ok &= all(np.array_equal(a[k], b[k]) for k in a)
    results.append(("codec_roundtrip", bool(ok), ""))
    return results


def cmd_selftest(args, cfg) -> int:
    failed = 0
    for name, ok, detail in selftest():
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        failed += not ok
    return 2 if failed else 0


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train-baseline": cmd_train_baseline,
    "evolve": cmd_evolve,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
        if args.verb == "ablate" and args.study not in evo.STUDIES:
            raise UsageError(f"unknown study {args.study!r}; valid studies: {', '.join(evo.STUDIES)}")
        if args.verb == "eval" and not args.checkpoint:
            raise UsageError("eval needs --checkpoint")
    except UsageError as e:
        print(f"seil: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    t0 = time.time()
    try:
        if args.verb != "selftest":
            storage.ensure_dir(args.out)
            storage.write_config(_out(args, "config.json"), cfg.to_dict())
        code = COMMANDS[args.verb](args, cfg) or 0
    except UsageError as e:
        print(f"seil: error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError, nn.TrainingDiverged) as e:
        print(f"seil: {args.verb} failed: {e}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.verb, time.time() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
