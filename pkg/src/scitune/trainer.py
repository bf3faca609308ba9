"""Two-stage training: concept alignment (adapter only) and task tuning
(adapter + decoder), with byte-stable checkpoints and CSV loss logs.

Runs are pure functions of (corpus, config, seed): per-epoch shuffles are
derived from (seed, epoch), batch losses are reduced in record order, and
checkpoints serialize tensors in declared order, so identical inputs give
byte-identical checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ModelConfig, ModelParams, encode_image, forward_loss, init_model
from .template import InstructionRecord, render, template_constants_hash
from .tokenizer import TokenSequence, Vocab, encode, vocab_hash

STAGE_ALIGN = "align"
STAGE_TASK = "task"

_MAGIC = b"SCITUNE1"


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 1
    batch_size: int = 8
    lr: float = 2e-3
    max_len: int = 256
    seed: int = 0
    clip: float | None = None
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.stage not in (STAGE_ALIGN, STAGE_TASK):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "max_len": self.max_len,
            "seed": self.seed,
            "clip": self.clip,
            "optimizer": self.optimizer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    """Parameter blocks plus the identity of everything they depend on."""

    params: ModelParams
    train_config: TrainConfig
    vocab_hash: str
    template_hash: str
    step: int = 0
    final_loss: float | None = None
    loss_log: list[tuple[int, str, float]] = field(default_factory=list)


def params_hash(tensors: list[T.Tensor]) -> str:
    digest = hashlib.sha256()
    for t in tensors:
        digest.update(T.tensor_to_bytes(t))
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# record preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedRecord:
    """An encoded instruction record with cached frozen-encoder features."""

    record: InstructionRecord
    seq: TokenSequence
    features: T.Tensor | None


def prepare_records(
    records: list[InstructionRecord],
    vocab: Vocab,
    params: ModelParams,
    max_len: int,
) -> list[PreparedRecord]:
    """Render, tokenize, and pre-encode images once (the encoder is frozen)."""
    prepared = []
    for rec in records:
        context, target = render(rec)
        seq = encode(vocab, context, target, params.config.k_visual, max_len)
        feats = None
        if rec.image is not None:
            feats = encode_image(params.encoder, rec.image)
            feats = T.Tensor(feats.data)  # detach: constant under frozen encoder
        prepared.append(PreparedRecord(record=rec, seq=seq, features=feats))
    return prepared


def corpus_mean_loss(params: ModelParams, prepared: list[PreparedRecord]) -> float:
    """Mean of per-record masked mean losses over a prepared corpus."""
    total = 0.0
    for p in prepared:
        total += float(forward_loss(params, p.seq, features=p.features).data)
    return total / len(prepared)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _run_stage(
    params: ModelParams,
    records: list[InstructionRecord],
    vocab: Vocab,
    cfg: TrainConfig,
    start_step: int = 0,
    stop_after_steps: int | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    if not records:
        raise ValueError("training corpus is empty")
    params.set_stage(cfg.stage)
    prepared = prepare_records(records, vocab, params, cfg.max_len)
    n = len(prepared)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    end_step = total_steps if stop_after_steps is None else min(
        total_steps, stop_after_steps
    )

    adam = T.Adam(cfg.lr) if cfg.optimizer == "adam" else None
    tensors = params.all_tensors()
    log_rows: list[tuple[int, str, float]] = []
    last_loss: float | None = None

    for step in range(start_step, end_step):
        epoch, pos = divmod(step, steps_per_epoch)
        perm = _epoch_permutation(cfg.seed, epoch, n)
        batch = perm[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]

        loss: T.Tensor | None = None
        try:
            for idx in batch:
                rec = prepared[int(idx)]
                li = forward_loss(params, rec.seq, features=rec.features)
                loss = li if loss is None else T.add(loss, li)
            assert loss is not None
            loss = T.scale(loss, 1.0 / len(batch))
            loss_val = float(loss.data)
            loss.backward()
            if adam is not None:
                adam.step(tensors, clip=cfg.clip)
            else:
                T.sgd_step(tensors, cfg.lr, clip=cfg.clip)
        except T.NonFiniteError as exc:
            raise T.NonFiniteError(f"aborted at step {step}: {exc}") from None
        log_rows.append((step, cfg.stage, loss_val))
        last_loss = loss_val

    if log_path is not None:
        write_loss_log(log_rows, log_path)
    return Checkpoint(
        params=params,
        train_config=cfg,
        vocab_hash=vocab_hash(vocab),
        template_hash=template_constants_hash(),
        step=end_step,
        final_loss=last_loss,
        loss_log=log_rows,
    )


def write_loss_log(
    rows: list[tuple[int, str, float]],
    path: str | Path,
    header_comment: str | None = None,
) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("step,stage,loss\n")
        for step, stage, loss in rows:
            fh.write(f"{step},{stage},{loss!r}\n")


def train_align(
    params: ModelParams,
    records: list[InstructionRecord],
    vocab: Vocab,
    cfg: TrainConfig,
    start_step: int = 0,
    stop_after_steps: int | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Stage 1: update the adapter only; encoder and decoder stay bit-identical."""
    if cfg.stage != STAGE_ALIGN:
        raise ValueError(f"train_align requires stage {STAGE_ALIGN!r}")
    return _run_stage(params, records, vocab, cfg, start_step, stop_after_steps,
                      log_path)


def train_task(
    ckpt: Checkpoint,
    records: list[InstructionRecord],
    vocab: Vocab,
    cfg: TrainConfig,
    start_step: int = 0,
    stop_after_steps: int | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Stage 2: update adapter + decoder, starting from an alignment checkpoint.

    Rejects checkpoints whose vocab or template constants differ from the
    current ones.
    """
    if cfg.stage != STAGE_TASK:
        raise ValueError(f"train_task requires stage {STAGE_TASK!r}")
    if ckpt.vocab_hash != vocab_hash(vocab):
        raise ValueError("checkpoint incompatible: vocab hash mismatch")
    if ckpt.template_hash != template_constants_hash():
        raise ValueError("checkpoint incompatible: template hash mismatch")
    return _run_stage(ckpt.params, records, vocab, cfg, start_step,
                      stop_after_steps, log_path)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Magic, JSON header (configs + hashes), then tensor snapshots in order."""
    header = {
        "model_config": ckpt.params.config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "vocab_hash": ckpt.vocab_hash,
        "template_hash": ckpt.template_hash,
        "step": ckpt.step,
        "final_loss": ckpt.final_loss,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for t in ckpt.params.all_tensors():
        blob += T.tensor_to_bytes(t)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"corrupt checkpoint at offset 0: bad magic {buf[:8]!r}")
    offset = len(_MAGIC)
    try:
        (header_len,) = struct.unpack_from("<Q", buf, offset)
    except struct.error:
        raise ValueError(f"corrupt checkpoint at offset {offset}: truncated header")
    offset += 8
    try:
        header = json.loads(buf[offset : offset + header_len])
    except json.JSONDecodeError:
        raise ValueError(f"corrupt checkpoint at offset {offset}: bad JSON header")
    offset += header_len

    config = ModelConfig.from_dict(header["model_config"])
    params = init_model(config, seed=0)
    for t in params.all_tensors():
        arr, offset = T.tensor_from_bytes(buf, offset)
        if arr.shape != t.data.shape:
            raise ValueError(
                f"corrupt checkpoint at offset {offset}: tensor shape {arr.shape} "
                f"!= expected {t.data.shape}"
            )
        t.data = arr
    if offset != len(buf):
        raise ValueError(
            f"corrupt checkpoint: {len(buf) - offset} trailing bytes at {offset}"
        )
    cfg = TrainConfig.from_dict(header["train_config"])
    params.set_stage(cfg.stage)
    return Checkpoint(
        params=params,
        train_config=cfg,
        vocab_hash=header["vocab_hash"],
        template_hash=header["template_hash"],
        step=header["step"],
        final_loss=header["final_loss"],
    )
