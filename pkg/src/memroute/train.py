"""Training loop, evaluation, transfer protocol and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from ._kernels import EPISODIC, EXECUTED, SHADOW
from .model import (GROUPS, Batch, BufferBank, ForwardResult, MemoryModel, ModelConfig,
                    cosine_lr, temperature_at)
from .tasks import QUERY, SrcdConfig, SrcdSequence, SrcdStream, generate_copy_task

METRIC_COLUMNS = ("step", "task_loss", "dyn_mse", "retrieval_acc", "cons_loss", "mean_q",
                  "attention_fraction", "shadow_fraction", "hist_ct", "hist_episodic",
                  "hist_semantic", "temperature", "lr")
ROUTING_COLUMNS = ("step", "pattern_id", "repetition", "pi_episodic", "episodic_action")
CHECKPOINT_FORMAT = "memroute-checkpoint-1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MetricsRow:
    """Window means over the ``log_every`` steps ending at ``step``."""

    step: int
    task_loss: float
    dyn_mse: float
    retrieval_acc: float
    cons_loss: float
    mean_q: float
    attention_fraction: float
    shadow_fraction: float
    hist_ct: float
    hist_episodic: float
    hist_semantic: float
    temperature: float
    lr: float

    def values(self) -> tuple:
        return dataclasses.astuple(self)


def metrics_csv(rows: Sequence[MetricsRow], config_hash: str = "") -> str:
    lines = [f"# config_hash={config_hash}", ",".join(METRIC_COLUMNS)]
    for r in rows:
        vals = r.values()
        lines.append(",".join([str(vals[0])] + [repr(float(v)) for v in vals[1:]]))
    return "\n".join(lines) + "\n"


def read_metrics_csv(path) -> tuple[list[MetricsRow], str]:
    text = Path(path).read_text().splitlines()
    h = text[0].split("=", 1)[1] if text and text[0].startswith("# config_hash=") else ""
    body = [ln for ln in text if ln and not ln.startswith("#")]
    if tuple(body[0].split(",")) != METRIC_COLUMNS:
        raise ValueError(f"unexpected metrics header: {body[0]}")
    rows = []
    for ln in body[1:]:
        parts = ln.split(",")
        rows.append(MetricsRow(int(parts[0]), *map(float, parts[1:])))
    return rows, h


@dataclass
class RoutingLog:
    step: np.ndarray
    pattern_id: np.ndarray
    repetition: np.ndarray
    pi_episodic: np.ndarray
    episodic_action: np.ndarray

    @classmethod
    def concat(cls, parts: list["RoutingLog"]) -> "RoutingLog":
        if not parts:
            z = np.zeros(0)
            return cls(z.astype(np.int64), z.astype(np.int64), z.astype(np.int64), z,
                       z.astype(np.int64))
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts])
                     for f in dataclasses.fields(cls)))

    def __len__(self) -> int:
        return len(self.step)

    def to_csv(self, config_hash: str = "") -> str:
        lines = [f"# config_hash={config_hash}", ",".join(ROUTING_COLUMNS)]
        for i in range(len(self)):
            lines.append(f"{int(self.step[i])},{int(self.pattern_id[i])},"
                         f"{int(self.repetition[i])},{float(self.pi_episodic[i])!r},"
                         f"{int(self.episodic_action[i])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def read_csv(cls, path) -> "RoutingLog":
        rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
        if tuple(rows[0].split(",")) != ROUTING_COLUMNS:
            raise ValueError(f"unexpected routing-log header: {rows[0]}")
        data = np.array([[float(x) for x in ln.split(",")] for ln in rows[1:]]).reshape(-1, 5)
        return cls(data[:, 0].astype(np.int64), data[:, 1].astype(np.int64),
                   data[:, 2].astype(np.int64), data[:, 3], data[:, 4].astype(np.int64))


@dataclass
class TrainResult:
    model: MemoryModel
    metrics: list[MetricsRow]
    routing: RoutingLog

    def consolidation_ratio(self) -> float:
        return consolidation_ratio([r.attention_fraction for r in self.metrics])


def consolidation_ratio(attention: Sequence[float], edge: float = 0.05) -> float:
    """Mean attention over the last ``edge`` share of the log over the first share."""
    a = np.asarray(attention, dtype=np.float64)
    m = max(1, int(round(edge * len(a))))
    first = a[:m].mean()
    return float(a[-m:].mean() / first) if first > 0 else math.inf


# ---------------------------------------------------------------- step statistics


def _step_stats(res: ForwardResult, batch: Batch) -> dict:
    N = batch.role.size
    qmask = batch.role.reshape(N) == QUERY
    correct = 0
    if qmask.any():
        pred = np.argmax(res.value_logits, axis=1)
        correct = int((pred == batch.target.reshape(N)[qmask] - 1).sum())
    return {"task": float(res.task_loss.item()), "dyn": float(res.dyn_mse.item()),
            "correct": correct, "queries": int(qmask.sum()),
            "cons": float(res.l_cons.item()) if res.l_cons is not None else 0.0,
            "q": float(np.mean([lo.q.mean() for lo in res.layers])),
            "attn": res.attention_fraction(), "shadow": res.shadow_ops / res.token_slots,
            "hist": res.routing_histogram()}


def _routing_rows(res: ForwardResult, batch: Batch, step: int) -> RoutingLog:
    N = batch.role.size
    sel = np.flatnonzero((batch.role.reshape(N) == QUERY) & (batch.pattern.reshape(N) > 0))
    pi2 = np.mean([lo.pi.data[sel, EPISODIC] for lo in res.layers], axis=0)
    act = np.zeros(len(sel), dtype=np.int64)
    for lo in res.layers:
        act += (lo.stats.executed.reshape(N)[sel] == EXECUTED)
    return RoutingLog(np.full(len(sel), step, dtype=np.int64), batch.pattern.reshape(N)[sel],
                      batch.repetition.reshape(N)[sel], pi2, act)


# ---------------------------------------------------------------- training loop


def fit(model: MemoryModel, batches: Iterator[list[SrcdSequence]], steps: int,
        trainable: Iterable[str] | None = None,
        callbacks: Sequence[Callable[[MetricsRow], None]] = (),
        rng_tag: int = 0x7A1, record_routing: bool = True) -> tuple[list[MetricsRow], RoutingLog]:
    """Run ``steps`` optimiser steps; returns the metrics rows and the routing log."""
    cfg = model.config
    named = model.named_parameters()
    names = list(named) if trainable is None else [n for n in named if n in set(trainable)]
    frozen = set(named) - set(names)
    for n in frozen:
        named[n].requires_grad = False
    params = [named[n] for n in names]
    sem_scale = 1.0 if cfg.has("fast-consolidation") else cfg.consolidation_lr_scale
    scales = [sem_scale if model.group_of(n) == "semantic" else 1.0 for n in names]
    opt = ad.AdamW(params, cfg.lr, weight_decay=cfg.weight_decay, lr_scales=scales)
    rng = np.random.default_rng([cfg.seed, rng_tag])
    rows: list[MetricsRow] = []
    routing: list[RoutingLog] = []
    window: list[dict] = []
    try:
        for step in range(steps):
            if step % cfg.buffer_reset_steps == 0:
                model.reset_buffers()
            batch = Batch.from_sequences(next(batches))
            temp = temperature_at(step, cfg.temp_start, cfg.temp_end, cfg.anneal_steps)
            lr = cosine_lr(step, steps, cfg.lr, cfg.lr_floor)
            with ad.Tape():
                res = model.forward(batch, "train", temp, rng)
                if not math.isfinite(res.task_loss.item()):
                    raise TrainingDiverged(f"non-finite task loss at step {step}")
                if params:
                    for p in params:
                        p.grad = None
                    if res.loss.requires_grad:
                        ad.backward(res.loss)
                    opt.step(lr)
            stats = _step_stats(res, batch)
            stats.update(temp=temp, lr=lr)
            window.append(stats)
            if record_routing:
                routing.append(_routing_rows(res, batch, step))
            if (step + 1) % cfg.log_every == 0 or step == steps - 1:
                row = _window_row(step + 1, window)
                rows.append(row)
                window = []
                for cb in callbacks:
                    cb(row)
    finally:
        for n in frozen:
            named[n].requires_grad = True
    return rows, RoutingLog.concat(routing)


def _window_row(step: int, window: list[dict]) -> MetricsRow:
    mean = lambda k: float(np.mean([w[k] for w in window]))
    queries = sum(w["queries"] for w in window)
    acc = sum(w["correct"] for w in window) / queries if queries else 0.0
    hist = np.mean([w["hist"] for w in window], axis=0)
    return MetricsRow(step, mean("task"), mean("dyn"), acc, mean("cons"), mean("q"),
                      mean("attn"), mean("shadow"), float(hist[0]), float(hist[1]),
                      float(hist[2]), window[-1]["temp"], window[-1]["lr"])


def srcd_batches(config: SrcdConfig, batch: int, start: int = 0) -> Iterator[list[SrcdSequence]]:
    stream = SrcdStream(config, start)
    while True:
        yield stream.take(batch)


def cycle_batches(seqs: Sequence[SrcdSequence], batch: int) -> Iterator[list[SrcdSequence]]:
    i = 0
    while True:
        yield [seqs[(i + j) % len(seqs)] for j in range(batch)]
        i += batch


def train(model_config: ModelConfig, srcd_config: SrcdConfig,
          callbacks: Sequence[Callable[[MetricsRow], None]] = ()) -> TrainResult:
    """Train a fresh model on the SRCD stream; deterministic per seed."""
    model = MemoryModel(model_config, srcd_config.key_vocab, srcd_config.value_vocab)
    rows, routing = fit(model, srcd_batches(srcd_config, model_config.batch),
                        model_config.steps, callbacks=callbacks)
    return TrainResult(model, rows, routing)


# ---------------------------------------------------------------- evaluation


def evaluate(model: MemoryModel, sequences: Sequence[SrcdSequence]) -> dict:
    """Eval-mode metrics over ``sequences``, batched over the buffer lanes.

    Buffers are emptied on the same schedule as in training (every
    ``buffer_reset_steps`` batches, counting from the first), so evaluation
    always starts from empty buffers. The model's own buffers are left
    untouched.
    """
    saved = model.snapshot_buffers()
    lanes = model.config.batch
    every = model.config.buffer_reset_steps
    tot = {"dyn_sse": 0.0, "dyn_n": 0, "correct": 0, "queries": 0, "attn": 0, "slots": 0,
           "q": 0.0, "hist": np.zeros(3), "rec_ok": 0, "rec_n": 0, "query_attn": 0}
    try:
        with ad.no_tape():
            for i in range(0, len(sequences), lanes):
                if (i // lanes) % every == 0:
                    model.reset_buffers()
                chunk = list(sequences[i:i + lanes])
                batch = Batch.from_sequences(chunk)
                res = model.forward(batch, "eval")
                B, n = batch.shape
                tot["dyn_sse"] += float(((res.dyn_pred[:, :-1] - batch.v[:, 1:]) ** 2).sum())
                tot["dyn_n"] += B * (n - 1)
                qmask = batch.role.reshape(-1) == QUERY
                if qmask.any():
                    pred = np.argmax(res.value_logits, axis=1)
                    ok = pred == batch.target.reshape(-1)[qmask] - 1
                    rec = batch.pattern.reshape(-1)[qmask] > 0
                    tot["correct"] += int(ok.sum())
                    tot["queries"] += int(qmask.sum())
                    tot["rec_ok"] += int(ok[rec].sum())
                    tot["rec_n"] += int(rec.sum())
                    for lo in res.layers:
                        tot["query_attn"] += int(
                            (lo.stats.executed.reshape(-1)[qmask] == EXECUTED).sum())
                tot["attn"] += res.attention_ops
                tot["slots"] += res.token_slots
                tot["q"] += float(sum(lo.q.sum() for lo in res.layers))
                for lo in res.layers:
                    tot["hist"] += np.bincount(lo.stats.actions.reshape(-1), minlength=3)
    finally:
        model.restore_buffers(saved)
    slots = max(tot["slots"], 1)
    return {"dynamics_mse": tot["dyn_sse"] / max(tot["dyn_n"], 1),
            "retrieval_accuracy": tot["correct"] / tot["queries"] if tot["queries"] else 0.0,
            "attention_fraction": tot["attn"] / slots,
            "mean_q": tot["q"] / slots,
            "routing_histogram": (tot["hist"] / slots).tolist(),
            "queries": tot["queries"],
            "recurring_accuracy": tot["rec_ok"] / tot["rec_n"] if tot["rec_n"] else 0.0,
            "novel_accuracy": ((tot["correct"] - tot["rec_ok"]) / (tot["queries"] - tot["rec_n"])
                               if tot["queries"] > tot["rec_n"] else 0.0),
            "query_attention": tot["query_attn"] / max(tot["queries"], 1) / len(model.layers)}


def eval_sequences(config: SrcdConfig, count: int) -> list[SrcdSequence]:
    """Held-out SRCD sequences: same pattern dictionary, disjoint stream indices."""
    return SrcdStream(config, start=1 << 40).take(count)


# ---------------------------------------------------------------- transfer


@dataclass(frozen=True)
class CopyTaskConfig:
    seq_len: int = 256
    vocab: int = 128
    copy_count: int = 12
    value_vocab: int = 64
    train_sequences: int = 512
    eval_sequences: int = 64
    seed: int = 0

    def generate(self) -> tuple[list[SrcdSequence], list[SrcdSequence]]:
        seqs = generate_copy_task(self.seq_len, self.vocab, self.copy_count, self.seed,
                                  self.train_sequences + self.eval_sequences, self.value_vocab)
        return seqs[:self.train_sequences], seqs[self.train_sequences:]


def transfer_eval(model: MemoryModel, train_seqs: Sequence[SrcdSequence],
                  eval_seqs: Sequence[SrcdSequence], freeze: Iterable[str],
                  steps: int) -> dict:
    """Retrain the non-frozen groups of a copy of ``model`` on a new task.

    ``freeze`` may name any of the parameter groups (``all`` freezes every
    group including the task head). Returns the eval metrics plus the
    training-time attention fraction over the last 5% of steps.
    """
    freeze = set(freeze)
    if "all" in freeze:
        freeze = set(GROUPS)
    unknown = freeze - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter group(s): {', '.join(sorted(unknown))}")
    m = copy.deepcopy(model)
    m.config = dataclasses.replace(model.config, steps=steps,
                                   anneal_steps=max(1, min(model.config.anneal_steps,
                                                           (3 * steps) // 4)))
    trainable = [n for n in m.named_parameters() if m.group_of(n) not in freeze]
    m.reset_buffers()
    rows, _ = fit(m, cycle_batches(train_seqs, m.config.batch), steps if trainable else 0,
                  trainable, rng_tag=0x7F, record_routing=False)
    out = evaluate(m, eval_seqs)
    if rows:
        out["train_attention_fraction"] = float(
            np.mean([r.attention_fraction for r in rows[-max(1, len(rows) // 20):]]))
    out["model"] = m
    return out


def transfer_comparison(pretrained: MemoryModel, task: CopyTaskConfig, steps: int,
                        freeze: Iterable[str] = ("semantic", "router")) -> dict:
    """Pretrained-and-frozen versus from-scratch on the copy task, same seed and schedule."""
    train_seqs, eval_seqs = task.generate()
    pre = transfer_eval(pretrained, train_seqs, eval_seqs, freeze, steps)
    scratch_model = MemoryModel(pretrained.config, pretrained.key_vocab, pretrained.value_vocab)
    scratch = transfer_eval(scratch_model, train_seqs, eval_seqs, (), steps)
    pre.pop("model")
    scratch.pop("model")
    return {"pretrained": pre, "scratch": scratch}


# ---------------------------------------------------------------- checkpoints


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".f64"


def save_checkpoint(model: MemoryModel, directory, step: int = 0,
                    extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float64 blob per array."""
    directory = Path(directory)
    blobs = directory / "arrays"
    blobs.mkdir(parents=True, exist_ok=True)
    entries = []

    def put(name: str, arr: np.ndarray) -> dict:
        data = np.ascontiguousarray(arr, dtype="<f8")
        raw = data.tobytes()
        (blobs / _blob_name(name)).write_bytes(raw)
        return {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                "file": f"arrays/{_blob_name(name)}", "sha256": hashlib.sha256(raw).hexdigest()}

    for name, t in model.named_parameters().items():
        entries.append(put(name, t.data))
    buffers = []
    for i, bank in enumerate(model.banks):
        buffers.append([put(f"buffer{i}.{k}", a) for k, a in bank.arrays().items()])
    manifest = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(),
                "config_hash": model.config.config_hash(), "key_vocab": model.key_vocab,
                "value_vocab": model.value_vocab, "step": step, "parameters": entries,
                "buffers": buffers, "extra": extra or {}}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _read_blob(root: Path, entry: dict) -> np.ndarray:
    raw = (root / entry["file"]).read_bytes()
    if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
        raise ValueError(f"checksum mismatch for {entry['name']}")
    arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"])
    return arr.astype(entry["dtype"])


def load_checkpoint(path) -> tuple[MemoryModel, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint manifest: {path}")
    root = path.parent
    model = MemoryModel(ModelConfig.from_dict(manifest["config"]), manifest["key_vocab"],
                        manifest["value_vocab"])
    named = model.named_parameters()
    for entry in manifest["parameters"]:
        t = named[entry["name"]]
        arr = _read_blob(root, entry)
        if arr.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {entry['name']}")
        t.data[...] = arr
    for bank, entries in zip(model.banks, manifest["buffers"]):
        arrays = bank.arrays()
        for entry in entries:
            arrays[entry["name"].split(".", 1)[1]][...] = _read_blob(root, entry)
    return model, manifest
