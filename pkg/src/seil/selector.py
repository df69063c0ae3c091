"""Trajectory selector: a task classifier over (first frame, action sequence).

The frame goes through a dense image encoder once; each action goes through
a dense action encoder; the two embeddings are concatenated at every step
and fed to a two-layer LSTM whose final hidden state is classified.  The
softmax probability of a demo's own task is its confidence, and the
selection schemes rank recorded demos by it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import microsim as sim
from .nn import (
    ParamSet,
    adam_step,
    cross_entropy,
    dense_layers,
    init_params,
    loss_and_grads,
    lstm_backward,
    lstm_forward,
    lstm_layers,
    mlp_backward,
    mlp_forward,
    softmax,
)
from .rng import SplitMix64

log = logging.getLogger(__name__)

SCHEMES = ("uniform", "descending", "ascending", "mixed")
# The first frame is a sparse 0/1 raster; at full scale the image branch
# memorizes frame patterns of the few-shot set before the action branch
# is learned.  Scaling it down keeps the two embeddings comparable.
FRAME_SCALE = 0.1


@dataclass(frozen=True)
class SelectorSpec:
    img_dim: int = sim.RASTER * sim.RASTER * 3
    img_hidden: int = 128
    act_dim: int = sim.ACT_DIM
    act_hidden: int = 64
    hidden: int = 256
    n_layers: int = 2
    n_classes: int = sim.N_TASKS
    sequence_only: bool = False
    epochs: int = 80
    lr: float = 1e-3
    batch_size: int = 16

    @property
    def fusion_width(self) -> int:
        return self.img_hidden + self.act_hidden

    def layers(self):
        return (
            dense_layers("img", (self.img_dim, self.img_hidden))
            + dense_layers("act", (self.act_dim, self.act_hidden))
            + lstm_layers("lstm", self.fusion_width, self.hidden, self.n_layers)
            + dense_layers("head", (self.hidden, self.n_classes))
        )

    def forward(self, params, x):
        """``x = (frames (B, ...), actions (B, T, 3), lengths)`` -> logits (B, n_classes)."""
        frames, actions, lengths = x
        B, T, _ = actions.shape
        fx, img_cache = mlp_forward(params, frames.reshape(B, -1), "img", "relu")
        if self.sequence_only:
            fx = np.zeros_like(fx)
        fa, act_cache = mlp_forward(params, actions, "act", "relu")
        fused = np.concatenate([np.broadcast_to(fx[:, None, :], (B, T, fx.shape[1])), fa], axis=2)
        H, lstm_cache = lstm_forward(params, fused, lengths, "lstm")
        logits, head_cache = mlp_forward(params, H, "head")
        return logits, (img_cache, act_cache, lstm_cache, head_cache)

    def backward(self, params, cache, dlogits):
        img_cache, act_cache, lstm_cache, head_cache = cache
        grads, dH = mlp_backward(params, head_cache, dlogits)
        g, dfused = lstm_backward(params, lstm_cache, dH)
        grads.update(g)
        ni = self.img_hidden
        g, _ = mlp_backward(params, act_cache, dfused[:, :, ni:])
        grads.update(g)
        if self.sequence_only:
            p = params.params if isinstance(params, ParamSet) else params
            grads.update({k: np.zeros_like(p[k]) for k in ("img.0.W", "img.0.b")})
        else:
            g, _ = mlp_backward(params, img_cache, dfused[:, :, :ni].sum(axis=1))
            grads.update(g)
        return grads


def pad_batch(demos: Sequence[sim.Trajectory]):
    lengths = np.array([len(d.actions) for d in demos])
    if lengths.min() < 1:
        raise ValueError("empty action sequence")
    T = int(lengths.max())
    acts = np.zeros((len(demos), T, sim.ACT_DIM), dtype=np.float32)
    for i, d in enumerate(demos):
        acts[i, : len(d.actions)] = d.actions
    frames = FRAME_SCALE * np.stack([d.first_frame for d in demos]).astype(np.float32)
    return frames, acts, lengths


def selector_logits(params, first_frame: np.ndarray, actions: np.ndarray, spec: SelectorSpec = SelectorSpec()) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.float32)
    if len(actions) == 0:
        raise ValueError("empty action sequence")
    x = (FRAME_SCALE * first_frame[None].astype(np.float32), actions[None], np.array([len(actions)]))
    return spec.forward(params, x)[0][0]


def train_selector(
    demos: Sequence[sim.Trajectory],
    seed: int,
    spec: SelectorSpec = SelectorSpec(),
    init_seed: Optional[int] = None,
) -> ParamSet:
    """Cross-entropy task classification, ``spec.epochs`` epochs of Adam.

    Returns the trained weights (no optimizer state): the selector is frozen
    from here on.
    """
    counts = np.bincount([d.task_id for d in demos], minlength=spec.n_classes)
    missing = [t for t in range(spec.n_classes) if counts[t] == 0]
    if missing:
        raise ValueError(f"selector training set has no demos for tasks {missing}")
    ps = init_params(spec.layers(), seed if init_seed is None else init_seed)
    ps.init_adam()
    rng = SplitMix64(seed ^ 0x5E1EC7)
    labels = np.array([d.task_id for d in demos])
    n = len(demos)
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            batch = ([demos[i] for i in idx], labels[idx])
            loss, grads = loss_and_grads(spec, ps.params, (pad_batch(batch[0]), batch[1]), "cross_entropy", (epoch, start))
            adam_step(ps, grads, spec.lr)
            total += loss * len(idx)
        log.debug("selector epoch %d loss %.4f", epoch, total / n)
    return ParamSet(ps.params)


def predict_proba(params, demos: Sequence[sim.Trajectory], spec: SelectorSpec = SelectorSpec(), batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(demos), batch_size):
        chunk = demos[start:start + batch_size]
        logits, _ = spec.forward(params, pad_batch(chunk))
        out.append(softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, spec.n_classes))


def selector_loss(params, demos, spec: SelectorSpec = SelectorSpec()) -> float:
    logits, _ = spec.forward(params, pad_batch(demos))
    return cross_entropy(logits, np.array([d.task_id for d in demos]))[0]


def accuracy(params, demos, spec: SelectorSpec = SelectorSpec()) -> float:
    probs = predict_proba(params, demos, spec)
    return float(np.mean(probs.argmax(axis=1) == np.array([d.task_id for d in demos])))


@dataclass
class ScoredDemo:
    demo: sim.Trajectory
    confidence: float
    predicted: int = -1

    @property
    def key(self) -> tuple:
        return self.demo.order_key


def score_confidence(params, demo: sim.Trajectory, spec: SelectorSpec = SelectorSpec()) -> ScoredDemo:
    return score_pool(params, [demo], spec)[0]


def score_pool(params, demos: Sequence[sim.Trajectory], spec: SelectorSpec = SelectorSpec()) -> list[ScoredDemo]:
    probs = predict_proba(params, demos, spec)
    return [ScoredDemo(d, float(p[d.task_id]), int(p.argmax())) for d, p in zip(demos, probs)]


def select(scored: Sequence[ScoredDemo], k: int, scheme: str, rng: Optional[SplitMix64] = None) -> list[ScoredDemo]:
    """Pick ``k`` demos from one task's scored pool.

    Ties in confidence are broken by the demo ordering key, ascending.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if k < 0:
        raise ValueError("k must be >= 0")
    pool = sorted(scored, key=lambda s: s.key)
    if k >= len(pool):
        return pool
    if k == 0:
        return []
    asc = sorted(pool, key=lambda s: (s.confidence, s.key))
    desc = sorted(pool, key=lambda s: (-s.confidence, s.key))
    if scheme == "ascending":
        return asc[:k]
    if scheme == "descending":
        return desc[:k]
    if scheme == "mixed":
        top = desc[: math.ceil(k / 2)]
        taken = {id(s) for s in top}
        rest = [s for s in asc if id(s) not in taken][: k - len(top)]
        return top + rest
    if rng is None:
        raise ValueError("uniform selection needs an rng")
    return [pool[i] for i in rng.permutation(len(pool))[:k]]
