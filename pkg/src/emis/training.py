"""Batch-softmax loss, optimizer, schedule, and the training loop.

The loss treats each query's own target as the positive class among
all targets in the minibatch and applies a learnable temperature to
the score matrix before the softmax. Optimization is AdamW with
decoupled weight decay (the temperature is exempt from decay and
clamped positive). Everything is deterministic given the config seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, value_of
from .errors import (ConfigError, EmptySplit, LengthMismatch, NonFiniteGradient,
                     ShapeMismatch)
from .head import (Flavor, HeadDims, HeadParams, GAMMA_MIN, copy_params,
                   gradients_of, init_params, lift_params, pairwise_scores,
                   param_blocks, params_from_blocks)

Array = np.ndarray


@dataclass
class TrainConfig:
    """Optimization hyperparameters."""

    batch_size: int = 32
    epochs: int = 50
    lr0: float = 5e-4
    lr_decay: float = 0.5
    decay_every: int = 10
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    flavor: Flavor = Flavor.ARTEMIS
    keep_partial_batch: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2: the loss needs in-batch negatives")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if isinstance(self.flavor, str):
            self.flavor = Flavor.parse(self.flavor)


@dataclass
class EpochLog:
    """One completed epoch: mean loss, lr, per-split metrics, wall time."""

    epoch: int
    loss: float
    lr: float
    metrics: dict[str, dict[str, float]]
    seconds: float

    def to_json_line(self) -> str:
        return json.dumps({"epoch": self.epoch, "loss": self.loss, "lr": self.lr,
                           "metrics": self.metrics, "seconds": self.seconds},
                          sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "EpochLog":
        obj = json.loads(line)
        return cls(epoch=obj["epoch"], loss=obj["loss"], lr=obj["lr"],
                   metrics=obj["metrics"], seconds=obj["seconds"])


def bbc_loss_from_scores(scores, gamma):
    """Mean softmax cross-entropy over in-batch targets.

    ``scores`` is the square batch score matrix (queries x targets,
    matching index = positive). Accepts tape Vars or plain arrays.
    """
    square = value_of(scores)
    if square.ndim != 2 or square.shape[0] != square.shape[1]:
        raise ShapeMismatch(f"batch score matrix must be square, got {square.shape}")
    b = square.shape[0]
    if b < 2:
        raise ShapeMismatch("loss needs at least 2 triplets for in-batch negatives")
    z = gamma * scores
    per_row = ad.logsumexp_rows(z) - ad.diag_part(z)
    return per_row.sum() * (1.0 / b)


def bbc_loss(r_rows: Array, m_rows: Array, t_rows: Array,
             params: HeadParams, flavor: Flavor) -> tuple[float, HeadParams]:
    """Loss and gradients w.r.t. every parameter block (zeros when unused)."""
    tape = Tape()
    live = lift_params(params, tape)
    scores = pairwise_scores(r_rows, m_rows, t_rows, live, flavor)
    loss = bbc_loss_from_scores(scores, live.gamma)
    tape.backward(loss)
    return float(loss.value), gradients_of(live, tape)


@dataclass
class AdamWState:
    """First/second moment estimates per parameter block."""

    step: int
    m: dict[str, Array]
    v: dict[str, Array]

    @classmethod
    def fresh(cls, params: HeadParams) -> "AdamWState":
        zeros = {name: np.zeros_like(np.asarray(value_of(v), dtype=np.float64))
                 for name, v in param_blocks(params)}
        return cls(step=0,
                   m={k: z.copy() for k, z in zeros.items()},
                   v={k: z.copy() for k, z in zeros.items()})


def adamw_step(params: HeadParams, grads: HeadParams, state: AdamWState,
               lr: float, config: TrainConfig) -> tuple[HeadParams, AdamWState]:
    """One decoupled-weight-decay Adam update; returns fresh params/state.

    The temperature block is excluded from decay and clamped to stay
    >= 1e-3 so the loss softmax can never collapse or flip sign.
    """
    step = state.step + 1
    bias1 = 1.0 - config.beta1 ** step
    bias2 = 1.0 - config.beta2 ** step
    new_blocks: dict[str, object] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    for (name, payload), (_, grad) in zip(param_blocks(params), param_blocks(grads)):
        w = np.asarray(value_of(payload), dtype=np.float64)
        g = np.asarray(value_of(grad), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name} is not finite")
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * (g * g)
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + config.eps)
        if name == "gamma":
            w_new = np.maximum(w - update, GAMMA_MIN)
            new_blocks[name] = np.float64(w_new)
        else:
            w_new = w - update - lr * config.weight_decay * w
            new_blocks[name] = w_new
        new_m[name], new_v[name] = m, v
    return (params_from_blocks(new_blocks, params.dims),
            AdamWState(step=step, m=new_m, v=new_v))


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """Step decay: lr0 * lr_decay^(epoch // decay_every)."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return config.lr0 * config.lr_decay ** (epoch // config.decay_every)


def select_checkpoint(series_a: Sequence[float],
                      series_b: Sequence[float]) -> tuple[int, int]:
    """Cross-validate two monitored splits against each other.

    Returns (epoch_to_report_b, epoch_to_report_a): each split is
    reported at the other split's best epoch. Ties resolve to the
    earlier epoch.
    """
    if len(series_a) == 0 or len(series_b) == 0:
        raise LengthMismatch("selection series must be nonempty")
    if len(series_a) != len(series_b):
        raise LengthMismatch(f"series lengths differ: {len(series_a)} vs {len(series_b)}")
    return _argmax_earliest(series_a), _argmax_earliest(series_b)


def _argmax_earliest(series: Sequence[float]) -> int:
    best, best_idx = None, 0
    for i, v in enumerate(series):
        if best is None or v > best:
            best, best_idx = v, i
    return best_idx


@dataclass
class TrainResult:
    """Final parameters, the epoch log, and best-checkpoint snapshots."""

    params: HeadParams
    logs: list[EpochLog]
    best: dict[str, tuple[int, HeadParams]] = field(default_factory=dict)

    def metric_series(self, split: str, metric: str) -> list[float]:
        return [log.metrics[split][metric] for log in self.logs]


def train(triplets, corpus, config: TrainConfig,
          dims: HeadDims | None = None,
          monitor: Sequence[str] = ("val",),
          selection_metric: str = "r_at_10",
          recall_ks: Sequence[int] = (1, 5, 10, 50),
          exclude_ref: bool = False) -> TrainResult:
    """Run the full loop: shuffled minibatches, per-epoch evaluation.

    ``triplets`` is a TripletSet and ``corpus`` a Corpus of banks (see
    data module). Splits listed in ``monitor`` that actually exist are
    evaluated after every epoch and tracked for best checkpoints.
    """
    from .data import Corpus  # deferred: avoids import cycle at module load
    from .evaluation import evaluate, queries_from_triplets

    if not isinstance(corpus, Corpus):
        raise ConfigError("corpus must be a data.Corpus")
    train_records = triplets.split("train")
    if not train_records:
        raise EmptySplit("no train records")

    r_all = corpus.refs.rows64([rec.ref for rec in train_records])
    m_all = corpus.mods.rows64([rec.mod for rec in train_records])
    t_all = corpus.targets.rows64([rec.tgt for rec in train_records])

    if dims is None:
        dims = HeadDims(h_t=corpus.mods.dim, h_i=corpus.targets.dim,
                        h_hidden=corpus.targets.dim)
    params = init_params(dims, seed=config.seed)
    state = AdamWState.fresh(params)
    rng = np.random.default_rng(config.seed)

    monitored = [s for s in monitor if triplets.split(s)]
    split_queries = {s: queries_from_triplets(triplets, s, exclude_ref=exclude_ref)
                     for s in monitored}

    n = len(train_records)
    logs: list[EpochLog] = []
    best: dict[str, tuple[int, float, HeadParams]] = {}
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = lr_at_epoch(epoch, config)
        order = rng.permutation(n)
        losses: list[float] = []
        for lo in range(0, n, config.batch_size):
            batch = order[lo:lo + config.batch_size]
            if len(batch) < config.batch_size and not config.keep_partial_batch:
                continue
            if len(batch) < 2:
                continue
            loss, grads = bbc_loss(r_all[batch], m_all[batch], t_all[batch],
                                   params, config.flavor)
            params, state = adamw_step(params, grads, state, lr, config)
            losses.append(loss)
        if not losses:
            raise EmptySplit(f"train split yields no usable minibatch of size >= 2 "
                             f"(n={n}, batch_size={config.batch_size})")

        metrics: dict[str, dict[str, float]] = {}
        for split in monitored:
            report = evaluate(split_queries[split], corpus, params, config.flavor,
                              recall_ks=recall_ks)
            metrics[split] = report.metrics
            value = report.metrics.get(selection_metric)
            if value is None:
                raise ConfigError(f"selection metric {selection_metric!r} not in "
                                  f"evaluation output {sorted(report.metrics)}")
            if split not in best or value > best[split][1]:
                best[split] = (epoch, value, copy_params(params))
        logs.append(EpochLog(epoch=epoch, loss=float(np.mean(losses)), lr=lr,
                             metrics=metrics,
                             seconds=time.perf_counter() - started))
    return TrainResult(params=params, logs=logs,
                       best={s: (e, p) for s, (e, _, p) in best.items()})


def write_epoch_logs(logs: Sequence[EpochLog], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for log in logs:
            fh.write(log.to_json_line() + "\n")


def read_epoch_logs(path) -> list[EpochLog]:
    with open(path, encoding="utf-8") as fh:
        return [EpochLog.from_json_line(line) for line in fh if line.strip()]
