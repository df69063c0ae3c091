"""Persistence: JSONL demonstration files, binary checkpoints, CSV reports.

Demo files start with a tag line ``{"format": "seil-demos", "version": 1}``
and hold one trajectory per line.  Floats are written with Python's
shortest round-trip repr, so float32 arrays decode bit-exactly.

Checkpoints::

    b"SEILCKPT1" | u64 header length | JSON header | float32 LE payload | u64 FNV-1a(payload)

The header lists ``{"name", "shape", "role"}`` entries in payload order plus
the Adam step counter.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from typing import Iterable, Optional, Sequence

import numpy as np

from . import microsim as sim
from .nn import ParamSet

DEMO_FORMAT = "seil-demos"
DEMO_VERSION = 1
CKPT_MAGIC = b"SEILCKPT1"
ROLES = ("param", "ema", "adam_m", "adam_v")
_ROLE_ATTR = {"param": "params", "ema": "ema", "adam_m": "adam_m", "adam_v": "adam_v"}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class DemoFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class ReplayMismatchError(ValueError):
    def __init__(self, demo_id: str):
        super().__init__(f"demo {demo_id} does not replay to its recorded observations")
        self.demo_id = demo_id


class CheckpointError(ValueError):
    """Base class for checkpoint read failures."""


class BadMagicError(CheckpointError):
    pass


class BadFormatError(CheckpointError):
    """Truncated or structurally invalid file."""


class ShapeMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# demonstrations


def _state_to_json(s: sim.SimState) -> dict:
    return {
        "ee_pos": [float(v) for v in s.ee_pos],
        "grip_closed": bool(s.grip_closed),
        "held_block": s.held_block,
        "block_pos": [[float(v) for v in p] for p in s.block_pos],
        "step_count": int(s.step_count),
    }


def _state_from_json(d: dict) -> sim.SimState:
    return sim.SimState(
        ee_pos=tuple(float(v) for v in d["ee_pos"]),
        grip_closed=bool(d["grip_closed"]),
        held_block=None if d["held_block"] is None else int(d["held_block"]),
        block_pos=tuple(tuple(float(v) for v in p) for p in d["block_pos"]),
        step_count=int(d["step_count"]),
    )


def encode_demo(t: sim.Trajectory) -> dict:
    return {
        "demo_id": t.demo_id,
        "task_id": int(t.task_id),
        "source": t.source,
        "round": int(t.round),
        "rollout_idx": int(t.rollout_idx),
        "env_seed": int(t.env_seed),
        "env_augmented": bool(t.env_augmented),
        "init_state": _state_to_json(t.init_state),
        "observations": np.asarray(t.observations, dtype=np.float32).tolist(),
        "actions": np.asarray(t.actions, dtype=np.float32).tolist(),
        "first_frame": np.asarray(t.first_frame, dtype=np.float32).tolist(),
        "success": bool(t.success),
    }


def decode_demo(d: dict) -> sim.Trajectory:
    obs = np.asarray(d["observations"], dtype=np.float32).reshape(-1, sim.OBS_DIM)
    acts = np.asarray(d["actions"], dtype=np.float32).reshape(-1, sim.ACT_DIM)
    if len(obs) != len(acts):
        raise ValueError(f"{len(obs)} observations but {len(acts)} actions")
    frame = np.asarray(d["first_frame"], dtype=np.float32)
    if frame.shape != (sim.RASTER, sim.RASTER, 3):
        raise ValueError(f"first_frame has shape {frame.shape}")
    t = sim.Trajectory(
        task_id=int(d["task_id"]),
        env_seed=int(d["env_seed"]),
        init_state=_state_from_json(d["init_state"]),
        observations=obs,
        actions=acts,
        first_frame=frame,
        success=bool(d["success"]),
        source=str(d["source"]),
        round=int(d["round"]),
        env_augmented=bool(d["env_augmented"]),
        rollout_idx=int(d["rollout_idx"]),
    )
    if t.demo_id != d["demo_id"]:
        raise ValueError(f"demo_id {d['demo_id']!r} does not match its fields ({t.demo_id!r})")
    return t


def write_demos(path, demos: Sequence[sim.Trajectory]) -> None:
    seen = set()
    for t in demos:
        if t.demo_id in seen:
            raise ValueError(f"duplicate demo_id {t.demo_id}")
        seen.add(t.demo_id)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"format": DEMO_FORMAT, "version": DEMO_VERSION}) + "\n")
        for t in demos:
            f.write(json.dumps(encode_demo(t), separators=(",", ":")) + "\n")


def read_demos(path, verify: bool = False) -> list[sim.Trajectory]:
    """Parse a demo file; with ``verify`` every demo is replayed through the simulator."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DemoFormatError(path, 1, "empty file")
    try:
        tag = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DemoFormatError(path, 1, f"bad tag line: {e}") from None
    if not isinstance(tag, dict) or tag.get("format") != DEMO_FORMAT:
        raise DemoFormatError(path, 1, "not a demo file")
    if tag.get("version") != DEMO_VERSION:
        raise DemoFormatError(path, 1, f"unsupported version {tag.get('version')!r}")
    demos, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            t = decode_demo(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DemoFormatError(path, lineno, f"malformed record: {e}") from None
        if t.demo_id in seen:
            raise DemoFormatError(path, lineno, f"duplicate demo_id {t.demo_id}")
        seen.add(t.demo_id)
        if verify and not sim.replay_check(t):
            raise ReplayMismatchError(t.demo_id)
        demos.append(t)
    return demos


# ---------------------------------------------------------------------------
# checkpoints


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _tensors(ps: ParamSet):
    ps.check_consistent()
    for role in ROLES:
        d = getattr(ps, _ROLE_ATTR[role])
        if d is None:
            continue
        for name, arr in d.items():
            yield name, role, arr


def encode_checkpoint(ps: ParamSet) -> bytes:
    entries, chunks = [], []
    for name, role, arr in _tensors(ps):
        entries.append({"name": name, "shape": list(arr.shape), "role": role})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps({"adam_t": int(ps.adam_t), "tensors": entries}, separators=(",", ":")).encode()
    payload = b"".join(chunks)
    return CKPT_MAGIC + struct.pack("<Q", len(header)) + header + payload + struct.pack("<Q", fnv1a64(payload))


def decode_checkpoint(data: bytes, expected_shapes: Optional[dict] = None) -> ParamSet:
    """Inverse of :func:`encode_checkpoint`.

    ``expected_shapes`` (name -> shape) rejects checkpoints for a different
    architecture.
    """
    if not data.startswith(CKPT_MAGIC):
        raise BadMagicError("not a SEILCKPT1 checkpoint")
    pos = len(CKPT_MAGIC)
    if len(data) < pos + 8:
        raise BadFormatError("truncated before header length")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + hlen:
        raise BadFormatError("truncated header")
    try:
        header = json.loads(data[pos:pos + hlen].decode())
        entries = header["tensors"]
        adam_t = int(header["adam_t"])
        specs = [(e["name"], tuple(int(s) for s in e["shape"]), e["role"]) for e in entries]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise BadFormatError(f"bad header: {e}") from None
    pos += hlen
    sizes = [int(np.prod(shape, dtype=np.int64)) * 4 for _, shape, _ in specs]
    need = sum(sizes)
    if len(data) != pos + need + 8:
        raise BadFormatError(f"payload is {len(data) - pos - 8} bytes, header describes {need}")
    payload = data[pos:pos + need]
    (stored,) = struct.unpack_from("<Q", data, pos + need)
    if fnv1a64(payload) != stored:
        raise ChecksumError("payload checksum mismatch")
    dicts: dict[str, dict] = {}
    off = 0
    for (name, shape, role), size in zip(specs, sizes):
        if role not in ROLES:
            raise BadFormatError(f"unknown role {role!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(np.float32)
        dicts.setdefault(role, {})[name] = arr
        off += size
    if "param" not in dicts:
        raise BadFormatError("no param tensors")
    ps = ParamSet(dicts["param"], dicts.get("ema"), dicts.get("adam_m"), dicts.get("adam_v"), adam_t)
    try:
        ps.check_consistent()
    except ValueError as e:
        raise ShapeMismatchError(str(e)) from None
    if expected_shapes is not None:
        got = {k: v.shape for k, v in ps.params.items()}
        want = {k: tuple(v) for k, v in expected_shapes.items()}
        if got != want:
            diff = sorted(k for k in set(got) | set(want) if got.get(k) != want.get(k))
            raise ShapeMismatchError(f"tensor shapes differ from the expected architecture: {diff}")
    return ps


def write_checkpoint(path, ps: ParamSet) -> None:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(ps))


def read_checkpoint(path, expected_shapes: Optional[dict] = None) -> ParamSet:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), expected_shapes)


# ---------------------------------------------------------------------------
# CSV outputs

REPORT_COLUMNS = ("round", "model", "task_id", "sr", "pool_size", "selected_this_round", "converged")
SCORED_COLUMNS = ("demo_id", "task_id", "source", "round", "confidence", "selected", "scheme")


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_rows(report) -> list[tuple]:
    rows = []
    for rr in report.rounds:
        for model, sr in (("base", rr.base), ("ema", rr.ema)):
            tail = (rr.pool_size, rr.selected, int(rr.converged))
            per_task = sr.per_task
            for tid, v in enumerate(per_task):
                rows.append((rr.round, model, tid, float(v)) + tail)
            mean = sr.mean
            if per_task and abs(mean - float(np.mean(per_task))) > 1e-9:
                raise ValueError(f"round {rr.round} {model}: mean row disagrees with task rows")
            rows.append((rr.round, model, "mean", float(mean)) + tail)
    return rows


def write_report(path, report) -> None:
    text = _csv_text(REPORT_COLUMNS, ([_fmt(v) for v in r] for r in report_rows(report)))
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def write_scored(path, scored, scheme: str) -> None:
    """``scored`` holds ``(round, ScoredDemo, selected)`` triples in selection-log order."""
    rows = []
    for rnd, s, chosen in scored:
        d = s.demo
        rows.append((d.demo_id, d.task_id, d.source, rnd, repr(float(s.confidence)), int(chosen), scheme))
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(_csv_text(SCORED_COLUMNS, rows))


def write_table(path, rows: Sequence[dict]) -> None:
    """Ablation rows; columns are the union of keys in first-seen order."""
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    body = ([_fmt(r.get(c)) for c in cols] for r in rows)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(_csv_text(cols, body))


def write_config(path, config: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return d


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
