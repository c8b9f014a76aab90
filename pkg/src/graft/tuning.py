"""Dual-stage instruction tuning of the projector with hash-checked freezing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .evaluation import evaluate_by_task
from .model import build_sequence, precompute_structure
from .projector_lm import PROJ, init_projector, instruction_loss

STAGE_EPOCHS = {1: 3, 2: 2}
# groups that must stay frozen in each stage
REQUIRED_FROZEN = {1: {"lm", "graph_encoder", "text_encoder"}, 2: {"lm", "graph_encoder"}}
DEFAULT_FROZEN = ("lm", "graph_encoder", "text_encoder", "grounding")


class TuningError(ValueError):
    pass


@dataclass
class TuneConfig:
    stage: int = 1
    epochs: int | None = None  # None: 3 for stage 1, 2 for stage 2
    lr: float = 2e-3
    warmup_ratio: float = 0.03
    batch_size: int = 2
    seed: int = 0
    freeze: tuple = DEFAULT_FROZEN
    holdout: float = 0.1
    heads: int = 4
    skip_stage1: bool = False
    max_eval: int | None = None
    corpus: str | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise TuningError(f"stage must be 1 or 2, got {self.stage}")
        missing = REQUIRED_FROZEN[self.stage] - set(self.freeze)
        if missing:
            raise TuningError(f"stage {self.stage} must freeze {sorted(missing)}")
        if "projector" in self.freeze:
            raise TuningError("the projector is the trained component and cannot be frozen")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise TuningError("warmup_ratio must lie in [0, 1]")
        if self.skip_stage1 and self.stage != 2:
            raise TuningError("skip_stage1 applies to stage 2 only")

    @property
    def num_epochs(self) -> int:
        return STAGE_EPOCHS[self.stage] if self.epochs is None else self.epochs


def lr_schedule(step: int, total: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup from 0 to ``base_lr`` over ``warmup_ratio * total`` steps, then constant."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = warmup_ratio * total
    if warm <= 0 or step >= warm:
        return base_lr
    return base_lr * step / warm


def split_holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the last ``fraction`` (at least one sample when n > 1) is held out."""
    order = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    if n > 1:
        k = min(max(k, 1), n - 1)
    else:
        k = 0
    return np.sort(order[: n - k]), np.sort(order[n - k :])


def heldout_loss(params: nx.ParamStore, vocab, g, samples, structures, heads: int = 4, batch_size: int = 16) -> float:
    """Mean per-sample instruction loss."""
    if not samples:
        return float("nan")
    total = 0.0
    for a in range(0, len(samples), batch_size):
        for s, h in zip(samples[a : a + batch_size], structures[a : a + batch_size]):
            total += instruction_loss(params, [build_sequence(params, vocab, g, s, structure=h)], heads).item()
    return total / len(samples)


def _frozen_hashes(params: nx.ParamStore) -> dict[str, str]:
    hashes = params.hashes()
    return {n: hashes[n] for n in params.frozen}


def _train(cfg: TuneConfig, params: nx.ParamStore, vocab, g, corpus, log=None) -> tuple[nx.ParamStore, dict]:
    params.freeze_groups(cfg.freeze)
    trainable = params.trainable()
    if not trainable:
        raise TuningError("nothing to train")
    before = _frozen_hashes(params)
    train_idx, held_idx = split_holdout(len(corpus), cfg.holdout, cfg.seed)
    train = [corpus[i] for i in train_idx]
    held = [corpus[i] for i in held_idx]
    # frozen encoders: structural embeddings are constants, computed once
    structures = precompute_structure(params, vocab, g, corpus)
    train_h = [structures[i] for i in train_idx]
    held_h = [structures[i] for i in held_idx]
    rng = np.random.default_rng(cfg.seed + 1)
    steps_per_epoch = -(-len(train) // cfg.batch_size) if train else 0
    total = steps_per_epoch * cfg.num_epochs
    state = nx.AdamState()
    leaves = [t for _, t in trainable]
    curve = []
    start = time.time()
    step = 0
    for epoch in range(cfg.num_epochs):
        order = rng.permutation(len(train))
        for a in range(0, len(train), cfg.batch_size):
            idx = order[a : a + cfg.batch_size]
            seqs = [build_sequence(params, vocab, g, train[i], structure=train_h[i]) for i in idx]
            loss = instruction_loss(params, seqs, cfg.heads)
            params.zero_grad()
            nx.backward(loss, wrt=leaves)
            nx.adam_step(params, nx.collect_grads(params), state, lr_schedule(step + 1, total, cfg.lr, cfg.warmup_ratio))
            curve.append(loss.item())
            step += 1
            if log is not None and step % 50 == 0:
                log(f"stage {cfg.stage} step {step}/{total} loss {np.mean(curve[-50:]):.4f} ({time.time() - start:.0f}s)")
    after = _frozen_hashes(params)
    changed = sorted(n for n in before if before[n] != after[n])
    if changed:
        raise TuningError(f"freezing contract violated for {changed}")
    train_seconds = time.time() - start
    eval_set = held if cfg.max_eval is None else held[: cfg.max_eval]
    eval_h = held_h if cfg.max_eval is None else held_h[: cfg.max_eval]
    reports = evaluate_by_task(params, vocab, g, eval_set, heads=cfg.heads, structures=eval_h, config={"stage": cfg.stage, "seed": cfg.seed}) if eval_set else {}
    report = {
        "stage": cfg.stage,
        "epochs": cfg.num_epochs,
        "steps": total,
        "n_train": len(train),
        "n_heldout": len(held),
        "loss_curve": curve,
        "heldout_loss": heldout_loss(params, vocab, g, held, held_h, cfg.heads),
        "heldout": {t: r.to_json() for t, r in reports.items()},
        "trainable_parameters": params.num_parameters(trainable_only=True),
        "frozen_hashes": after,
        "train_seconds": train_seconds,
    }
    return params, report


def tune_stage1(cfg: TuneConfig, params: nx.ParamStore, vocab, g, corpus, log=None) -> tuple[nx.ParamStore, dict]:
    """Graph-matching tuning of the projector; everything else is frozen and hash-checked."""
    if cfg.stage != 1:
        raise TuningError("tune_stage1 needs a stage-1 config")
    if any(s.task != "graph_matching" for s in corpus):
        raise TuningError("stage 1 corpus must contain graph_matching samples only")
    if f"{PROJ}.weight" not in params:
        raise TuningError("no projector in parameters")
    return _train(cfg, params, vocab, g, corpus, log)


def tune_stage2(cfg: TuneConfig, params: nx.ParamStore, vocab, g, corpus, log=None) -> tuple[nx.ParamStore, dict]:
    """Task-specific tuning starting from the stage-1 projector.

    With ``cfg.skip_stage1`` the projector is freshly initialized (seeded)
    and any existing one is discarded.
    """
    if cfg.stage != 2:
        raise TuningError("tune_stage2 needs a stage-2 config")
    if any(s.task == "graph_matching" for s in corpus):
        raise TuningError("stage 2 corpus must not contain graph_matching samples")
    if cfg.skip_stage1:
        params = fresh_projector(params, cfg.seed)
    elif f"{PROJ}.weight" not in params:
        raise TuningError("stage 2 needs the stage-1 projector (or skip_stage1)")
    return _train(cfg, params, vocab, g, corpus, log)


def fresh_projector(params: nx.ParamStore, seed: int) -> nx.ParamStore:
    """Copy of ``params`` whose projector is replaced by a new seeded one."""
    out = nx.ParamStore((n, t) for n, t in params if not n.startswith(PROJ + "."))
    out.frozen = {n for n in params.frozen if not n.startswith(PROJ + ".")}
    d_graph = params["graph_encoder.w0"].shape[1]
    d_lm = params["lm.token_embeddings"].shape[1]
    out.merge(init_projector(d_graph, d_lm, np.random.default_rng(seed)))
    return out
