"""Adam training loop, checkpoints and the per-epoch training log."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import losses
from .data import TARGET_SPACING, AugmentConfig, PatchPair, augment, preprocess_pair, sample_patch
from .io import LabelVolume, ManifestEntry, Volume, read_mvol
from .metrics import dsc
from .model import Model, ModelConfig, dpcnet_forward, param_shapes
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DPCK1\n"
LOG_COLUMNS = ("epoch", "iter", "train_loss", "val_loss", "val_dsc_liver", "val_dsc_tumor")
LIVER, TUMOR = 1, 2


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf during training."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 2
    iterations_per_epoch: int = 25
    patch_size: Tuple[int, int, int] = (128, 128, 128)
    seed: int = 0
    foreground_fraction: float = 1.0 / 3.0
    augment: bool = True
    val_patches: int = 4

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)  # type: ignore[assignment]
        self.validate()

    def validate(self) -> None:
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        for name in ("epochs", "batch_size", "iterations_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.val_patches < 0:
            raise ValueError("val_patches must be >= 0")
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            raise ValueError(f"patch_size must be three positive ints, got {self.patch_size}")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise ValueError("foreground_fraction must be in [0, 1]")


# Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``.

    Every gradient is checked before anything is modified, so a non-finite
    gradient leaves parameters and moments untouched.
    """
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        m = state.m.setdefault(k, np.zeros_like(p.data))
        v = state.v.setdefault(k, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# Checkpoints ------------------------------------------------------------------


@dataclass
class TrainState:
    adam: AdamState
    epoch: int = 0  # completed epochs
    iteration: int = 0  # completed iterations
    # Free-form JSON metadata carried through checkpoints (e.g. inference settings).
    extra: dict = field(default_factory=dict)


def save_checkpoint(model: Model, state: TrainState, path) -> None:
    """``DPCK1\\n`` + u32 JSON length + JSON metadata + little-endian f32 arrays."""
    entries, blobs, offset = [], [], 0
    groups = (("param", model.state_arrays()), ("adam_m", state.adam.m), ("adam_v", state.adam.v))
    for kind, arrays in groups:
        for name in model.params:
            if kind != "param" and name not in arrays:
                continue
            a = np.ascontiguousarray(arrays[name], dtype="<f4")
            entries.append({"kind": kind, "name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    meta = {
        "config": model.config.to_dict(),
        "tensors": entries,
        "payload_bytes": offset,
        "adam": {"t": state.adam.t, "beta1": state.adam.beta1, "beta2": state.adam.beta2, "eps": state.adam.eps},
        "epoch": state.epoch,
        "iteration": state.iteration,
        "extra": state.extra,
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> Tuple[Model, TrainState]:
    """Restore a model and optimizer state; ``config`` (if given) must match every shape."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    if len(buf) < pos + 4:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    try:
        meta = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    pos += hlen
    if len(buf) - pos != meta.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(buf) - pos} bytes, metadata declares {meta.get('payload_bytes')}")
    stored_cfg = ModelConfig(**meta["config"])
    cfg = config or stored_cfg
    expected = param_shapes(cfg)
    arrays: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in meta["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) * 4
        if e["offset"] + n > len(buf) - pos:
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the payload")
        if e["name"] not in expected:
            raise CheckpointError(f"checkpoint parameter {e['name']} does not exist in the model config")
        if shape != tuple(expected[e["name"]]):
            raise CheckpointError(f"shape mismatch for {e['name']}: checkpoint {shape}, config {tuple(expected[e['name']])}")
        a = np.frombuffer(buf, dtype="<f4", count=n // 4, offset=pos + e["offset"]).reshape(shape)
        arrays[e["kind"]][e["name"]] = a.astype(np.float32)
    missing = [k for k in expected if k not in arrays["param"]]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]}")
    params = {k: Tensor(arrays["param"][k], requires_grad=True, name=k) for k in expected}
    a = meta["adam"]
    adam = AdamState(arrays["adam_m"], arrays["adam_v"], a["t"], a["beta1"], a["beta2"], a["eps"])
    return Model(cfg, params), TrainState(adam, meta["epoch"], meta["iteration"], meta.get("extra", {}))


# Training loop ----------------------------------------------------------------


@dataclass
class Case:
    volume: Volume
    labels: LabelVolume
    name: str = ""


def load_cases(entries: Sequence[ManifestEntry], target=TARGET_SPACING) -> Dict[str, List[Case]]:
    """Read and preprocess every manifest entry, grouped by split."""
    out: Dict[str, List[Case]] = {}
    for e in entries:
        v, l = read_mvol(e.image), read_mvol(e.label)
        if not isinstance(v, Volume) or not isinstance(l, LabelVolume):
            raise ValueError(f"{e.image} / {e.label}: expected an image and a label volume")
        pv, pl = preprocess_pair(v, l, target)
        out.setdefault(e.split, []).append(Case(pv, pl, Path(e.image).stem))
    return out


def sample_batch(rng: np.random.Generator, cases: Sequence[Case], cfg: TrainConfig, num_classes: int) -> List[PatchPair]:
    aug = AugmentConfig() if cfg.augment else None
    batch = []
    for _ in range(cfg.batch_size):
        c = cases[int(rng.integers(len(cases)))]
        p = sample_patch(rng, c.volume, c.labels, cfg.patch_size, cfg.foreground_fraction, num_classes)
        if aug is not None:
            p = augment(rng, p, aug)
        batch.append(p)
    return batch


def _as_input(p: PatchPair, model: Model) -> Tensor:
    return Tensor(p.image.astype(next(iter(model.params.values())).dtype))


def batch_loss_and_grads(model: Model, batch: Sequence[PatchPair]) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean total loss over the batch and its gradient per parameter name."""
    cfg = model.config
    names = list(model.params)
    params = [model.params[k] for k in names]
    total = 0.0
    grads = [np.zeros_like(p.data) for p in params]
    for p in batch:
        targets = losses.make_targets(p.label, cfg.levels, cfg.num_classes, params[0].dtype)
        loss = losses.total_loss(dpcnet_forward(model, _as_input(p, model)).heads(), targets)
        for acc, g in zip(grads, backward(loss, params)):
            acc += g
        total += loss.item()
    n = len(batch)
    return total / n, {k: g / n for k, g in zip(names, grads)}


def evaluate_patches(model: Model, batch: Sequence[PatchPair]) -> Dict[str, float]:
    """Mean loss and pooled liver/tumor DSC of argmax predictions over whole patches."""
    cfg = model.config
    loss_sum = 0.0
    preds, gts = [], []
    with no_grad():
        for p in batch:
            out = dpcnet_forward(model, _as_input(p, model))
            targets = losses.make_targets(p.label, cfg.levels, cfg.num_classes, out.final_probs.dtype)
            loss_sum += losses.total_loss(out.heads(), targets).item()
            preds.append(np.argmax(out.final_probs.data, axis=0))
            gts.append(p.label)
    pred, gt = np.stack(preds), np.stack(gts)
    return {
        "loss": loss_sum / len(batch),
        "dsc_liver": dsc(pred == LIVER, gt == LIVER),
        "dsc_tumor": dsc(pred == TUMOR, gt == TUMOR),
    }


@dataclass
class EpochRecord:
    epoch: int
    iteration: int
    train_loss: float
    val_loss: Optional[float] = None
    val_dsc_liver: Optional[float] = None
    val_dsc_tumor: Optional[float] = None
    iteration_losses: List[float] = field(default_factory=list)


def _fmt(v) -> str:
    return "NA" if v is None else repr(float(v))


def append_log(path, rec: EpochRecord) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOG_COLUMNS)
        w.writerow([rec.epoch, rec.iteration, _fmt(rec.train_loss), _fmt(rec.val_loss), _fmt(rec.val_dsc_liver), _fmt(rec.val_dsc_tumor)])


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


VAL_STREAM = 2**31 - 1


def train(
    model: Model,
    cases: Mapping[str, Sequence[Case]],
    cfg: TrainConfig,
    out_dir=None,
    state: Optional[TrainState] = None,
    epochs: Optional[int] = None,
) -> Tuple[TrainState, List[EpochRecord]]:
    """Run (or resume) training until ``cfg.epochs`` epochs are complete.

    The patch batch of global iteration ``k`` is drawn from an rng seeded by
    ``(cfg.seed, k)``, so a run resumed from a checkpoint replays exactly the
    batches an uninterrupted run would see. ``epochs`` stops early after that
    many epochs in this call. With ``out_dir`` a checkpoint is written after
    each epoch (``epoch_NNNN.dpck`` and ``last.dpck``) and a row is appended
    to ``train_log.csv``.
    """
    train_cases = list(cases.get("train", []))
    if not train_cases:
        raise ValueError("manifest has no training entries")
    val_cases = list(cases.get("val", []))
    state = state or TrainState(AdamState.zeros_like(model.params))
    val_batch: List[PatchPair] = []
    if val_cases and cfg.val_patches:
        vrng = np.random.default_rng([cfg.seed, VAL_STREAM])
        for _ in range(cfg.val_patches):
            c = val_cases[int(vrng.integers(len(val_cases)))]
            val_batch.append(sample_patch(vrng, c.volume, c.labels, cfg.patch_size, cfg.foreground_fraction, model.config.num_classes))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    records = []
    last = cfg.epochs if epochs is None else min(cfg.epochs, state.epoch + epochs)
    while state.epoch < last:
        it_losses = []
        for _ in range(cfg.iterations_per_epoch):
            k = state.iteration
            batch = sample_batch(iteration_rng(cfg.seed, k), train_cases, cfg, model.config.num_classes)
            try:
                loss, grads = batch_loss_and_grads(model, batch)
            except FloatingPointError as exc:
                raise NonFiniteError(f"iteration {k}: {exc}") from None
            if not math.isfinite(loss):
                raise NonFiniteError(f"iteration {k}: non-finite loss {loss}")
            try:
                adam_step(model.params, grads, state.adam, cfg.learning_rate)
            except NonFiniteError as exc:
                raise NonFiniteError(f"iteration {k}: {exc}") from None
            it_losses.append(loss)
            state.iteration += 1
        state.epoch += 1
        rec = EpochRecord(state.epoch, state.iteration, float(np.mean(it_losses)), iteration_losses=it_losses)
        if val_batch:
            ev = evaluate_patches(model, val_batch)
            rec.val_loss, rec.val_dsc_liver, rec.val_dsc_tumor = ev["loss"], ev["dsc_liver"], ev["dsc_tumor"]
        log.info("epoch %d iter %d train_loss %.5f val_loss %s", rec.epoch, rec.iteration, rec.train_loss, _fmt(rec.val_loss))
        records.append(rec)
        if out_dir is not None:
            save_checkpoint(model, state, Path(out_dir) / f"epoch_{state.epoch:04d}.dpck")
            save_checkpoint(model, state, Path(out_dir) / "last.dpck")
            append_log(Path(out_dir) / "train_log.csv", rec)
    return state, records


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["patch_size"] = list(cfg.patch_size)
    return d
