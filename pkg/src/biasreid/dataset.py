"""Annotated samples, a controllable synthetic generator, CSV IO, and sampling.

Every sample carries an identity, a protocol camera, and one label per
declared bias channel. The synthetic generator mixes a per-identity latent
with per-bias-class latents so that bias visibly contaminates feature-space
neighbourhoods, which is exactly what the training branches then suppress or
amplify.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BatchCompositionError, ConfigError, DataError, EvaluationError, ParseError

SPLITS = ("train", "query", "gallery")
CAMERA_CHANNEL = "cam"


@dataclass
class Sample:
    """One annotated record."""

    features: np.ndarray
    id: int
    camera: int
    bias_labels: dict[str, str]
    split: str = "train"


@dataclass
class Dataset:
    """Ordered samples plus per-channel class declarations."""

    samples: list[Sample]
    channels: dict[str, list[str]]
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.samples:
            d = len(self.samples[0].features)
            for i, s in enumerate(self.samples):
                if len(s.features) != d:
                    raise DataError(f"sample {i}: feature length {len(s.features)} != {d}")
                if s.split not in SPLITS:
                    raise DataError(f"sample {i}: unknown split {s.split!r}")
                missing = set(self.channels) - set(s.bias_labels)
                if missing:
                    raise DataError(f"sample {i}: missing channel label(s) {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def d_in(self) -> int:
        if not self.samples:
            raise DataError("empty dataset has no feature dimension")
        return len(self.samples[0].features)

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self.samples))
        return np.array([i for i, s in enumerate(self.samples) if s.split == split], dtype=int)

    def features(self, idx=None) -> np.ndarray:
        idx = self.indices() if idx is None else np.asarray(idx, dtype=int)
        if len(idx) == 0:
            d = len(self.samples[0].features) if self.samples else 0
            return np.zeros((0, d))
        return np.stack([self.samples[i].features for i in idx])

    def ids(self, idx=None) -> np.ndarray:
        idx = self.indices() if idx is None else idx
        return np.array([self.samples[i].id for i in idx], dtype=int)

    def cameras(self, idx=None) -> np.ndarray:
        idx = self.indices() if idx is None else idx
        return np.array([self.samples[i].camera for i in idx], dtype=int)

    def channel_labels(self, channel: str, idx=None) -> np.ndarray:
        if channel not in self.channels:
            raise ConfigError(f"unknown bias channel {channel!r}; have {sorted(self.channels)}")
        idx = self.indices() if idx is None else idx
        return np.array([self.samples[i].bias_labels[channel] for i in idx], dtype=object)

    def train_identities(self) -> np.ndarray:
        return np.unique(self.ids(self.indices("train")))


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    n_classes: int
    d_latent: int
    gain: float


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic latent-factor generator. Defaults are config,
    not ground truth."""

    n_ids: int = 100
    samples_per_id: int = 8
    d_id: int = 16
    d_in: int = 32
    sigma: float = 0.1
    channels: tuple[ChannelSpec, ...] = (
        ChannelSpec("pose", 3, 8, 1.0),
        ChannelSpec("cam", 2, 8, 1.0),
    )
    mix_seed: int = 0
    feature_scale: float = 1.0

    def validate(self) -> None:
        if self.n_ids < 2 or self.samples_per_id < 2:
            raise ConfigError("need n_ids >= 2 and samples_per_id >= 2")
        if self.d_in < 1 or self.d_id < 1:
            raise ConfigError("latent/feature dims must be >= 1")
        if self.sigma < 0 or self.feature_scale <= 0:
            raise ConfigError("sigma must be >= 0 and feature_scale > 0")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate channel names")
        if CAMERA_CHANNEL not in names:
            raise ConfigError(f"generator requires a {CAMERA_CHANNEL!r} channel (protocol camera)")
        for c in self.channels:
            if c.n_classes < 2:
                raise ConfigError(f"channel {c.name!r}: class count must be >= 2")
            if c.d_latent < 1 or c.gain < 0:
                raise ConfigError(f"channel {c.name!r}: bad latent dim or gain")


def generate_synthetic(cfg: GeneratorConfig, seed: int) -> Dataset:
    """Features = A u_id + sum_c gain_c B_c v_{c,class} + sigma * noise.

    Mixing matrices come from `cfg.mix_seed`; identity/class latents, class
    assignments, and noise come from `seed`. Pure function of (cfg, seed).
    """
    cfg.validate()
    mix_rng = np.random.default_rng(cfg.mix_seed)
    mix_id = mix_rng.normal(size=(cfg.d_in, cfg.d_id)) / np.sqrt(cfg.d_id)
    mix_ch = {
        c.name: mix_rng.normal(size=(cfg.d_in, c.d_latent)) / np.sqrt(c.d_latent)
        for c in cfg.channels
    }

    rng = np.random.default_rng(seed)
    n = cfg.n_ids * cfg.samples_per_id
    id_latents = rng.normal(size=(cfg.n_ids, cfg.d_id))
    class_latents = {c.name: rng.normal(size=(c.n_classes, c.d_latent)) for c in cfg.channels}
    class_of = {c.name: rng.integers(0, c.n_classes, size=n) for c in cfg.channels}
    noise = rng.normal(size=(n, cfg.d_in))

    samples = []
    for row in range(n):
        ident = row // cfg.samples_per_id
        x = mix_id @ id_latents[ident]
        labels: dict[str, str] = {}
        for c in cfg.channels:
            k = int(class_of[c.name][row])
            x = x + c.gain * (mix_ch[c.name] @ class_latents[c.name][k])
            labels[c.name] = str(k)
        x = cfg.feature_scale * (x + cfg.sigma * noise[row])
        samples.append(Sample(x, ident, int(labels[CAMERA_CHANNEL]), labels, "train"))

    channels = {c.name: [str(k) for k in range(c.n_classes)] for c in cfg.channels}
    meta = {"seed": seed, "generator": generator_config_dict(cfg)}
    return Dataset(samples, channels, name="synthetic", meta=meta)


def generator_config_dict(cfg: GeneratorConfig) -> dict:
    chans = ",".join(f"{c.name}:{c.n_classes}:{c.d_latent}:{c.gain:g}" for c in cfg.channels)
    return {
        "n_ids": cfg.n_ids,
        "samples_per_id": cfg.samples_per_id,
        "d_id": cfg.d_id,
        "d_in": cfg.d_in,
        "sigma": cfg.sigma,
        "channels": chans,
        "mix_seed": cfg.mix_seed,
        "feature_scale": cfg.feature_scale,
    }


def parse_channel_spec(raw: str) -> tuple[ChannelSpec, ...]:
    """Parse 'pose:3:8:1.0,cam:2:8:1.0' (name:classes:latent_dim:gain)."""
    specs = []
    for part in raw.split(","):
        bits = part.strip().split(":")
        if len(bits) != 4:
            raise ConfigError(f"channel spec {part!r}: expected name:classes:dim:gain")
        try:
            specs.append(ChannelSpec(bits[0], int(bits[1]), int(bits[2]), float(bits[3])))
        except ValueError:
            raise ConfigError(f"channel spec {part!r}: non-numeric field") from None
    return tuple(specs)


# ----------------------------------------------------------------------------
# CSV format: id,camera,split,<channel...>,f0..f{d-1}
# ----------------------------------------------------------------------------

_FEATURE_COL = re.compile(r"^([ef])(\d+)$")


def save_dataset(ds: Dataset, path, feature_prefix: str = "f") -> None:
    Path(path).write_text(dataset_to_csv(ds, feature_prefix))


def dataset_to_csv(ds: Dataset, feature_prefix: str = "f") -> str:
    chan_names = list(ds.channels)
    d = len(ds.samples[0].features) if ds.samples else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["id", "camera", "split", *chan_names, *(f"{feature_prefix}{j}" for j in range(d))]
    )
    for s in ds.samples:
        feats = [f"{v:.17g}" for v in s.features]
        writer.writerow([s.id, s.camera, s.split, *(s.bias_labels[c] for c in chan_names), *feats])
    return buf.getvalue()


def load_dataset(path) -> Dataset:
    """Parse the dataset CSV; errors name the offending row and column."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: empty file, expected a header row")
    header = rows[0]
    if header[:3] != ["id", "camera", "split"]:
        raise ParseError(f"{path}: header must start with id,camera,split, got {header[:3]}")

    chan_names: list[str] = []
    feat_start = None
    for j, col in enumerate(header[3:], start=3):
        if _FEATURE_COL.match(col):
            feat_start = j
            break
        chan_names.append(col)
    if feat_start is None:
        feat_start = len(header)
    prefix = None
    for k, col in enumerate(header[feat_start:]):
        m = _FEATURE_COL.match(col)
        if not m or (prefix is not None and m.group(1) != prefix) or int(m.group(2)) != k:
            raise ParseError(f"{path}: feature columns must be {prefix or 'f'}0..{prefix or 'f'}N in order, got {col!r}")
        prefix = m.group(1)
    d = len(header) - feat_start

    samples = []
    observed: dict[str, set[str]] = {c: set() for c in chan_names}
    for rownum, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {rownum}: {len(row)} fields, header has {len(header)}")
        try:
            ident = int(row[0])
        except ValueError:
            raise ParseError(f"{path}: row {rownum}, column id: not an integer: {row[0]!r}") from None
        try:
            camera = int(row[1])
        except ValueError:
            raise ParseError(f"{path}: row {rownum}, column camera: not an integer: {row[1]!r}") from None
        split = row[2]
        if split not in SPLITS:
            raise ParseError(f"{path}: row {rownum}, column split: unknown tag {split!r}")
        labels = dict(zip(chan_names, row[3:feat_start]))
        for c, v in labels.items():
            observed[c].add(v)
        feats = np.empty(d)
        for k in range(d):
            try:
                feats[k] = float(row[feat_start + k])
            except ValueError:
                raise ParseError(
                    f"{path}: row {rownum}, column {header[feat_start + k]}: "
                    f"not a number: {row[feat_start + k]!r}"
                ) from None
        if not np.isfinite(feats).all():
            raise ParseError(f"{path}: row {rownum}: non-finite feature value")
        samples.append(Sample(feats, ident, camera, labels, split))

    channels = {c: sorted(observed[c]) for c in chan_names}
    return Dataset(samples, channels, name=Path(path).stem)


# ----------------------------------------------------------------------------
# P identities x K instances batching
# ----------------------------------------------------------------------------


@dataclass
class Batch:
    """P*K sample indices with aligned labels."""

    indices: np.ndarray
    ids: np.ndarray
    cameras: np.ndarray
    bias_labels: dict[str, np.ndarray]
    p: int
    k: int


class PKSampler:
    """Draws P-identity / K-instance batches, cycling through all train
    identities before any identity repeats (epoch semantics)."""

    def __init__(self, ds: Dataset, p: int, k: int, rng: np.random.Generator):
        if p < 2 or k < 2:
            raise ConfigError("need P >= 2 and K >= 2 for triplet batches")
        train_idx = ds.indices("train")
        self.by_id: dict[int, np.ndarray] = {}
        for i in train_idx:
            self.by_id.setdefault(ds.samples[i].id, []).append(i)
        self.by_id = {ident: np.array(v, dtype=int) for ident, v in self.by_id.items()}
        self.identities = np.array(sorted(self.by_id), dtype=int)
        if len(self.identities) < p:
            raise ConfigError(f"only {len(self.identities)} train identities, need P={p}")
        self.ds = ds
        self.p = p
        self.k = k
        self.rng = rng
        self._queue: list[int] = []

    def draw(self) -> Batch:
        if len(self._queue) < self.p:
            pending = set(self._queue)
            fresh = [i for i in self.rng.permutation(self.identities) if i not in pending]
            self._queue.extend(int(i) for i in fresh)
        chosen, self._queue = self._queue[: self.p], self._queue[self.p :]

        picks = []
        for ident in chosen:
            pool = self.by_id[ident]
            replace = len(pool) < self.k
            picks.extend(self.rng.choice(pool, size=self.k, replace=replace))
        idx = np.array(picks, dtype=int)
        return Batch(
            indices=idx,
            ids=self.ds.ids(idx),
            cameras=self.ds.cameras(idx),
            bias_labels={c: self.ds.channel_labels(c, idx) for c in self.ds.channels},
            p=self.p,
            k=self.k,
        )


def pk_sample(ds: Dataset, p: int, k: int, rng: np.random.Generator) -> Batch:
    """One-shot draw; use PKSampler directly when epoch cycling matters."""
    return PKSampler(ds, p, k, rng).draw()


# ----------------------------------------------------------------------------
# Query/gallery protocol split
# ----------------------------------------------------------------------------


def split_query_gallery(ds: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Hold out a fraction of identities and tag their samples query/gallery.

    Per held-out (identity, camera) group: one random query if the group has
    >= 2 samples, everything else gallery. Queries without a cross-camera
    gallery positive are demoted to gallery and counted in meta.
    """
    if not 0 <= fraction <= 1:
        raise ConfigError(f"fraction must be in [0, 1], got {fraction}")
    idents = np.unique(ds.ids())
    n_eval = int(round(fraction * len(idents)))
    held_out = set(int(i) for i in rng.choice(idents, size=n_eval, replace=False))

    new_samples = [
        Sample(s.features.copy(), s.id, s.camera, dict(s.bias_labels), s.split)
        for s in ds.samples
    ]
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(new_samples):
        if s.id in held_out:
            s.split = "gallery"
            groups.setdefault((s.id, s.camera), []).append(i)
        else:
            s.split = "train"

    for key in sorted(groups):
        members = groups[key]
        if len(members) >= 2:
            q = members[int(rng.integers(0, len(members)))]
            new_samples[q].split = "query"

    dropped = 0
    gallery_keys = {
        (s.id, s.camera) for s in new_samples if s.split == "gallery"
    }
    for s in new_samples:
        if s.split != "query":
            continue
        has_cross = any(ident == s.id and cam != s.camera for ident, cam in gallery_keys)
        if not has_cross:
            s.split = "gallery"
            dropped += 1

    if not any(s.split == "query" for s in new_samples):
        raise EvaluationError("no valid queries after split (fraction too small or single-camera ids)")

    meta = dict(ds.meta)
    meta["dropped_queries"] = dropped
    meta["eval_fraction"] = fraction
    return Dataset(new_samples, dict(ds.channels), name=ds.name, meta=meta)
