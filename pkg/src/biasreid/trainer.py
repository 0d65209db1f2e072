"""Trains one branch end to end: P*K batching, signed combined loss, Adam
with linear rate decay, checkpointing, and per-epoch diagnostics.

A branch is a single encoder; both loss terms act directly on its embedding
space (no separate discriminator heads, the three roles share one set of
weights). Reduce and enhance branches differ only in the sign applied to the
bias term, so they can be trained independently and concatenated later.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import as_bool, as_float, as_int, as_str, check_keys
from .dataset import Batch, Dataset, PKSampler
from .errors import BatchCompositionError, CheckpointError, ConfigError, TrainingError
from .losses import MODES, CombinedLoss, combined_loss
from .numerics import (
    AdamState,
    EncoderParams,
    Schedule,
    adam_step,
    backprop,
    encode,
    init_encoder,
    schedule_rate,
)

CHECKPOINT_FORMAT_VERSION = 1
_STREAM_INIT = 0
_STREAM_EPOCH = 1
_MAX_BATCH_RETRIES = 10

BRANCH_CONFIG_KEYS = {
    "mode": "reduce | enhance",
    "bias_channel": "name of the audited bias channel",
    "lambda_dr": "identity-loss weight (default 1.0)",
    "lambda_db": "bias-loss weight, unsigned; default 0.01 reduce, 0.05/0.01 enhance",
    "margin_id": "identity triplet margin (default 0.3)",
    "margin_bias": "bias triplet margin (default 0.3)",
    "p": "identities per batch (default 16)",
    "k": "instances per identity (default 4)",
    "epochs": "training epochs (default 60)",
    "rate": "base learning rate (default 0.0003)",
    "seed": "master seed for init and batch sampling",
    "hidden": "comma-separated hidden widths (default 64,64)",
    "d_emb": "embedding dimension (default 64)",
    "bias_hinge": "on keeps the [.]_+ clamp on the bias term (default on)",
}


@dataclass(frozen=True)
class BranchConfig:
    mode: str = "reduce"
    bias_channel: str = "pose"
    lam_dr: float = 1.0
    lam_db: float | None = None  # None -> mode/channel default
    margin_id: float = 0.3
    margin_bias: float = 0.3
    p: int = 16
    k: int = 4
    epochs: int = 60
    rate: float = 0.0003
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    d_emb: int = 64
    bias_hinge: bool = True

    def resolved_lam_db(self) -> float:
        if self.lam_db is not None:
            return self.lam_db
        if self.mode == "reduce":
            return 0.01
        return 0.05 if self.bias_channel == "pose" else 0.01

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam_dr < 0 or self.resolved_lam_db() < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.p < 2 or self.k < 2:
            raise ConfigError("need p >= 2 and k >= 2")
        if self.epochs < 0 or self.rate < 0:
            raise ConfigError("epochs and rate must be >= 0")
        if self.d_emb < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("encoder widths must be >= 1")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "bias_channel": self.bias_channel,
            "lambda_dr": self.lam_dr,
            "lambda_db": self.resolved_lam_db(),
            "margin_id": self.margin_id,
            "margin_bias": self.margin_bias,
            "p": self.p,
            "k": self.k,
            "epochs": self.epochs,
            "rate": self.rate,
            "seed": self.seed,
            "hidden": ",".join(str(h) for h in self.hidden),
            "d_emb": self.d_emb,
            "bias_hinge": "on" if self.bias_hinge else "off",
        }


def branch_config_from_dict(values: dict[str, str], **overrides) -> BranchConfig:
    """Build a BranchConfig from raw key=value strings; unknown keys rejected."""
    check_keys(values, BRANCH_CONFIG_KEYS, what="branch config")
    hidden_raw = as_str(values, "hidden", "64,64")
    try:
        hidden = tuple(int(h) for h in hidden_raw.split(",") if h.strip())
    except ValueError:
        raise ConfigError(f"hidden: expected comma-separated ints, got {hidden_raw!r}") from None
    lam_db = as_float(values, "lambda_db") if "lambda_db" in values else None
    if lam_db is not None and lam_db < 0:
        raise ConfigError("lambda_db is stored unsigned; use mode=reduce for the minus sign")
    cfg = BranchConfig(
        mode=as_str(values, "mode", "reduce"),
        bias_channel=as_str(values, "bias_channel", "pose"),
        lam_dr=as_float(values, "lambda_dr", 1.0),
        lam_db=lam_db,
        margin_id=as_float(values, "margin_id", 0.3),
        margin_bias=as_float(values, "margin_bias", 0.3),
        p=as_int(values, "p", 16),
        k=as_int(values, "k", 4),
        epochs=as_int(values, "epochs", 60),
        rate=as_float(values, "rate", 0.0003),
        seed=as_int(values, "seed", 0),
        hidden=hidden,
        d_emb=as_int(values, "d_emb", 64),
        bias_hinge=as_bool(values, "bias_hinge", True),
    )
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


@dataclass
class EpochStats:
    epoch: int
    loss_dr: float
    loss_db: float
    active_frac_dr: float
    active_frac_db: float
    rate: float
    skipped: int


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,loss_dr,loss_db,active_frac_dr,active_frac_db,rate,skipped"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.loss_dr:.17g},{e.loss_db:.17g},"
                f"{e.active_frac_dr:.17g},{e.active_frac_db:.17g},{e.rate:.17g},{e.skipped}"
            )
        return "\n".join(lines) + "\n"


class Trainer:
    """Owns one branch's parameters and optimizer state (single writer).

    The batch sampler is re-seeded per epoch from (seed, epoch), which makes
    epoch boundaries clean resume points: a checkpoint needs only parameters,
    optimizer state, and the epoch counter to continue bit-exactly.
    """

    def __init__(
        self,
        ds: Dataset,
        cfg: BranchConfig,
        params: EncoderParams | None = None,
        adam: AdamState | None = None,
        start_epoch: int = 0,
    ):
        cfg.validate()
        if cfg.bias_channel not in ds.channels:
            raise ConfigError(
                f"bias channel {cfg.bias_channel!r} not in dataset channels {sorted(ds.channels)}"
            )
        self.ds = ds
        self.cfg = cfg
        self.epoch = start_epoch
        self.log = TrainLog()
        n_train = len(ds.indices("train"))
        if n_train == 0:
            raise ConfigError("dataset has no train split")
        self.batches_per_epoch = -(-n_train // (cfg.p * cfg.k))
        self.schedule = Schedule(cfg.rate, cfg.epochs) if cfg.epochs > 0 else None
        if params is None:
            init_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _STREAM_INIT)))
            params = init_encoder(ds.d_in, cfg.hidden, cfg.d_emb, init_rng)
        if params.d_in != ds.d_in:
            raise ConfigError(f"encoder d_in {params.d_in} != dataset d_in {ds.d_in}")
        self.params = params
        self.adam = adam if adam is not None else AdamState.fresh(params)
        train_labels = ds.channel_labels(cfg.bias_channel, ds.indices("train"))
        self._bias_diverse = len(np.unique(train_labels)) >= 2

    def sampler_for_epoch(self, epoch: int) -> PKSampler:
        rng = np.random.default_rng(np.random.SeedSequence((self.cfg.seed, _STREAM_EPOCH, epoch)))
        return PKSampler(self.ds, self.cfg.p, self.cfg.k, rng)

    def draw_batch(self, sampler: PKSampler) -> tuple[Batch, np.ndarray]:
        """Draw until the batch can support the bias loss (bounded retries)."""
        for _ in range(_MAX_BATCH_RETRIES):
            batch = sampler.draw()
            labels = batch.bias_labels[self.cfg.bias_channel]
            if not self._bias_diverse or len(np.unique(labels)) >= 2:
                return batch, labels
        raise BatchCompositionError(
            f"no batch with >= 2 {self.cfg.bias_channel!r} classes after "
            f"{_MAX_BATCH_RETRIES} draws"
        )

    def batch_loss(self, batch: Batch, labels: np.ndarray) -> tuple[CombinedLoss, object]:
        emb, tape = encode(self.params, self.ds.features(batch.indices))
        out = combined_loss(
            emb,
            batch.ids,
            labels,
            self.cfg.mode,
            self.cfg.lam_dr,
            self.cfg.resolved_lam_db(),
            self.cfg.margin_id,
            self.cfg.margin_bias,
            bias_hinge=self.cfg.bias_hinge,
        )
        return out, tape

    def run_epochs(self, n: int) -> None:
        for _ in range(n):
            if self.epoch >= self.cfg.epochs:
                break
            self._one_epoch()

    def run(self) -> None:
        self.run_epochs(self.cfg.epochs - self.epoch)

    def _one_epoch(self) -> None:
        cfg = self.cfg
        rate = schedule_rate(self.schedule, self.epoch)
        sampler = self.sampler_for_epoch(self.epoch)
        sum_dr = sum_db = sum_af_dr = sum_af_db = 0.0
        skipped = 0
        for b in range(self.batches_per_epoch):
            batch, labels = self.draw_batch(sampler)
            out, tape = self.batch_loss(batch, labels)
            if not np.isfinite(out.value):
                raise TrainingError(f"non-finite loss at epoch {self.epoch}, batch {b}")
            n = len(batch.indices)
            sum_dr += out.reid.value / n
            sum_db += out.bias.value / n
            sum_af_dr += out.reid.selection.active_fraction
            sum_af_db += out.bias.selection.active_fraction
            skipped += out.bias.n_skipped
            if not out.grads.any():
                continue  # nothing to update, keep optimizer state untouched
            grads = backprop(tape, out.grads)
            self.params, self.adam = adam_step(self.params, grads, self.adam, rate)
        nb = self.batches_per_epoch
        self.log.epochs.append(
            EpochStats(
                self.epoch, sum_dr / nb, sum_db / nb, sum_af_dr / nb, sum_af_db / nb, rate, skipped
            )
        )
        self.epoch += 1


def train_branch(ds: Dataset, cfg: BranchConfig) -> tuple[EncoderParams, TrainLog]:
    """Train to cfg.epochs from fresh initialization; deterministic in seed."""
    trainer = Trainer(ds, cfg)
    trainer.run()
    return trainer.params, trainer.log


# ----------------------------------------------------------------------------
# Checkpoints: an .npz payload (zip of little-endian .npy arrays, including a
# JSON header entry) followed by sha256(payload) and an 8-byte magic trailer,
# so any corrupted byte is detected before state is reconstructed.
# ----------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"BRCKPT01"


def checkpoint_save(
    path, params: EncoderParams, state: AdamState, cfg: BranchConfig, epoch: int
) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "toolkit_version": __version__,
        "epoch": epoch,
        "hidden_slope": params.hidden_slope,
        "n_layers": len(params.weights),
        "adam": {
            "step": state.step,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
        },
        "config": cfg.to_dict(),
    }
    arrays = {"meta_json": np.array(json.dumps(meta, sort_keys=True))}
    for i in range(len(params.weights)):
        arrays[f"w{i}"] = params.weights[i]
        arrays[f"b{i}"] = params.biases[i]
        arrays[f"adam_mw{i}"] = state.m_w[i]
        arrays[f"adam_mb{i}"] = state.m_b[i]
        arrays[f"adam_vw{i}"] = state.v_w[i]
        arrays[f"adam_vb{i}"] = state.v_b[i]
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest + _CHECKPOINT_MAGIC)


def checkpoint_load(path) -> tuple[EncoderParams, AdamState, BranchConfig, int]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    trailer = len(_CHECKPOINT_MAGIC) + 32
    if len(blob) < trailer or not blob.endswith(_CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad trailer)")
    payload, digest = blob[:-trailer], blob[-trailer:-len(_CHECKPOINT_MAGIC)]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    try:
        with np.load(io.BytesIO(payload), allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc
    if "meta_json" not in arrays:
        raise CheckpointError(f"{path}: missing meta_json entry")
    meta = json.loads(str(arrays["meta_json"]))
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {meta.get('format_version')} != "
            f"{CHECKPOINT_FORMAT_VERSION}"
        )
    n_layers = meta["n_layers"]
    try:
        weights = [arrays[f"w{i}"] for i in range(n_layers)]
        biases = [arrays[f"b{i}"] for i in range(n_layers)]
        state = AdamState(
            m_w=[arrays[f"adam_mw{i}"] for i in range(n_layers)],
            m_b=[arrays[f"adam_mb{i}"] for i in range(n_layers)],
            v_w=[arrays[f"adam_vw{i}"] for i in range(n_layers)],
            v_b=[arrays[f"adam_vb{i}"] for i in range(n_layers)],
            step=int(meta["adam"]["step"]),
            beta1=float(meta["adam"]["beta1"]),
            beta2=float(meta["adam"]["beta2"]),
            eps=float(meta["adam"]["eps"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    params = EncoderParams(weights, biases, float(meta["hidden_slope"]))
    cfg = branch_config_from_dict({k: str(v) for k, v in meta["config"].items()})
    return params, state, cfg, int(meta["epoch"])


def resume_trainer(path, ds: Dataset) -> Trainer:
    params, state, cfg, epoch = checkpoint_load(path)
    return Trainer(ds, cfg, params=params, adam=state, start_epoch=epoch)
