"""DPC-Net: pyramid feature encoder plus spatial/semantic correlation attention."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .tensor import Tensor

ORDERS = ("spacor_first", "semcor_first")
MIN_HIDDEN = 4
GROUPS = ("pfe", "spacor", "semcor", "heads")


@dataclass
class ModelConfig:
    levels: int = 5
    base_channels: int = 32
    max_channels: int = 320
    num_classes: int = 3
    in_channels: int = 1
    attention_order: str = "spacor_first"
    # False builds the PFE-only ablation: no SpaCor/SemCor modules or heads.
    attention: bool = True
    # Hidden width of an attention sub-network: channels // reduction, floored
    # at MIN_HIDDEN (never above the level's channel count).
    spa_reduction: int = 4
    sem_reduction: int = 16
    kernel: int = 3
    leaky_slope: float = ops.LEAKY_SLOPE

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1 or self.max_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.attention_order not in ORDERS:
            raise ValueError(f"attention_order must be one of {ORDERS}, got {self.attention_order!r}")
        if self.spa_reduction < 1 or self.sem_reduction < 1:
            raise ValueError("reductions must be >= 1")
        if self.kernel != 3:
            raise ValueError("only 3x3x3 convolution kernels are supported")

    def channels(self, i: int) -> int:
        return min(self.base_channels * 2**i, self.max_channels)

    @property
    def ladder(self) -> List[int]:
        return [self.channels(i) for i in range(self.levels)]

    def spa_hidden(self, i: int) -> int:
        c = self.channels(i)
        return min(c, max(MIN_HIDDEN, c // self.spa_reduction))

    def sem_hidden(self, i: int) -> int:
        c = self.channels(i)
        return min(c, max(MIN_HIDDEN, c // self.sem_reduction))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PyramidFeatures:
    F: List[Tensor]
    F_spa: Dict[int, Tensor] = field(default_factory=dict)
    F_sem: Dict[int, Tensor] = field(default_factory=dict)


@dataclass
class ForwardOutput:
    pfe_logits: Dict[int, Tensor]
    spa_logits: Dict[int, Tensor]
    sem_logits: Dict[int, Tensor]
    final_logits: Tensor
    final_probs: Tensor
    features: PyramidFeatures

    def heads(self) -> Dict[str, Dict[int, Tensor]]:
        return {"pfe": self.pfe_logits, "spa": self.spa_logits, "sem": self.sem_logits}


class Model:
    """Named parameter store plus the forward pass."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()})

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def __call__(self, patch: Tensor) -> ForwardOutput:
        return dpcnet_forward(self, patch)


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Every parameter name and shape, in construction order."""
    k = cfg.kernel
    L = cfg.levels
    ch = cfg.ladder
    shapes: Dict[str, tuple] = {}

    def block(prefix, cin, cout):
        shapes[f"{prefix}.weight"] = (cout, cin, k, k, k)
        shapes[f"{prefix}.gamma"] = (cout,)
        shapes[f"{prefix}.beta"] = (cout,)

    cin = cfg.in_channels
    for i in range(L):
        block(f"pfe.enc{i}.block0", cin, ch[i])
        block(f"pfe.enc{i}.block1", ch[i], ch[i])
        if i < L - 1:
            shapes[f"pfe.down{i}.weight"] = (ch[i + 1], ch[i], 2, 2, 2)
            cin = ch[i + 1]
    for i in range(L - 2, -1, -1):
        shapes[f"pfe.up{i}.weight"] = (ch[i + 1], ch[i], 2, 2, 2)
        block(f"pfe.dec{i}.block0", 2 * ch[i], ch[i])
        block(f"pfe.dec{i}.block1", ch[i], ch[i])

    if cfg.attention:
        for i in range(1, L):
            h = cfg.spa_hidden(i)
            for j, (a, b) in enumerate([(1, h), (h, h), (h, 1)]):
                shapes[f"spacor.{i}.conv{j}.weight"] = (b, a, k, k, k)
                shapes[f"spacor.{i}.conv{j}.bias"] = (b,)
            shapes[f"spacor.{i}.proj.weight"] = (ch[i], ch[i], 1, 1, 1)
            shapes[f"spacor.{i}.proj.bias"] = (ch[i],)
        for i in range(0, L - 1):
            h = cfg.sem_hidden(i)
            widths = [2 * (ch[i] + ch[i + 1]), h, h, ch[i]]
            for j in range(3):
                shapes[f"semcor.{i}.fc{j}.weight"] = (widths[j + 1], widths[j])
                shapes[f"semcor.{i}.fc{j}.bias"] = (widths[j + 1],)
            shapes[f"semcor.{i}.proj.weight"] = (ch[i], ch[i], 1, 1, 1)
            shapes[f"semcor.{i}.proj.bias"] = (ch[i],)

    families = [("pfe", range(L))]
    if cfg.attention:
        families += [("spa", range(1, L)), ("sem", range(L - 1))]
    for fam, levels in families:
        for i in levels:
            shapes[f"heads.{fam}.{i}.weight"] = (cfg.num_classes, ch[i], 1, 1, 1)
            shapes[f"heads.{fam}.{i}.bias"] = (cfg.num_classes,)
    return shapes


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Allocate and initialise every parameter deterministically from ``seed``.

    Weights are drawn from N(0, 2 / ((1 + slope^2) * fan_in)); norm scales are 1,
    norm shifts and biases are 0.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    gain = 2.0 / (1.0 + config.leaky_slope**2)
    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            if name.startswith("pfe.up"):
                fan_in = shape[0] * int(np.prod(shape[2:]))
            else:
                fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return Model(config, params)


def _conv_block(model: Model, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    y = ops.conv3d(x, p[f"{prefix}.weight"], padding=1)
    y = ops.instance_norm(y, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])
    return ops.leaky_relu(y, model.config.leaky_slope)


def pfe_forward(model: Model, patch: Tensor) -> List[Tensor]:
    """Pyramid features F_0..F_{L-1} (finest first) from a (C_in, D, H, W) patch."""
    cfg = model.config
    L = cfg.levels
    p = model.params
    if patch.ndim != 4 or patch.shape[0] != cfg.in_channels:
        raise ValueError(f"patch must be ({cfg.in_channels}, D, H, W), got {patch.shape}")
    div = 2 ** (L - 1)
    if any(n % div for n in patch.shape[1:]):
        raise ValueError(f"spatial extents {patch.shape[1:]} must be divisible by {div}")

    skips = []
    x = patch
    for i in range(L):
        x = _conv_block(model, f"pfe.enc{i}.block0", x)
        x = _conv_block(model, f"pfe.enc{i}.block1", x)
        if i < L - 1:
            skips.append(x)
            x = ops.conv3d(x, p[f"pfe.down{i}.weight"], stride=2)
    feats: List[Optional[Tensor]] = [None] * L
    feats[L - 1] = x
    for i in range(L - 2, -1, -1):
        up = ops.conv3d_transpose(x, p[f"pfe.up{i}.weight"])
        x = ops.concat([up, skips[i]], axis=0)
        x = _conv_block(model, f"pfe.dec{i}.block0", x)
        x = _conv_block(model, f"pfe.dec{i}.block1", x)
        feats[i] = x
    return feats  # type: ignore[return-value]


def spatial_attention_logits(model: Model, F_i: Tensor, F_fine: Tensor, i: int) -> Tensor:
    """Attention-map logits (1, D_fine, H_fine, W_fine) for level ``i``."""
    p = model.params
    slope = model.config.leaky_slope
    up = ops.resample2x(F_i, "up_nearest")
    x = ops.concat([up, F_fine], axis=0)
    avg, mx = ops.squeeze_channel(x)
    t = ops.add(avg, mx)
    for j in range(3):
        t = ops.conv3d(t, p[f"spacor.{i}.conv{j}.weight"], p[f"spacor.{i}.conv{j}.bias"], padding=1)
        if j < 2:
            t = ops.leaky_relu(t, slope)
    return t


def spacor_forward(model: Model, F_i: Tensor, F_fine: Tensor, i: int) -> Tensor:
    """Recalibrate level ``i`` voxel-wise with a map regressed from the finer level."""
    if F_fine.ndim != 4 or F_i.ndim != 4 or tuple(2 * n for n in F_i.shape[1:]) != F_fine.shape[1:]:
        raise ValueError(f"spacor level {i}: {F_i.shape} is not half the resolution of {F_fine.shape}")
    p = model.params
    logits = spatial_attention_logits(model, F_i, F_fine, i)
    # The 1x1x1 projection commutes with nearest upsampling, so run it coarse.
    proj = ops.conv3d(F_i, p[f"spacor.{i}.proj.weight"], p[f"spacor.{i}.proj.bias"])
    fine = ops.mul_broadcast(ops.resample2x(proj, "up_nearest"), ops.sigmoid(logits))
    return ops.resample2x(fine, "down_avg")


def semantic_attention_logits(model: Model, F_in_i: Tensor, F_in_coarse: Tensor, i: int) -> Tensor:
    """Attention-vector logits (C_i,) for level ``i``."""
    p = model.params
    cfg = model.config
    if F_in_i.shape[0] != cfg.channels(i) or F_in_coarse.shape[0] != cfg.channels(i + 1):
        raise ValueError(
            f"semcor level {i}: expected {cfg.channels(i)}/{cfg.channels(i + 1)} channels, "
            f"got {F_in_i.shape[0]}/{F_in_coarse.shape[0]}"
        )
    a_i, m_i = ops.squeeze_spatial(F_in_i)
    a_c, m_c = ops.squeeze_spatial(F_in_coarse)
    t = ops.concat([a_i, m_i, a_c, m_c], axis=0)
    for j in range(3):
        t = ops.linear(t, p[f"semcor.{i}.fc{j}.weight"], p[f"semcor.{i}.fc{j}.bias"])
        if j < 2:
            t = ops.leaky_relu(t, cfg.leaky_slope)
    return t


def semcor_forward(model: Model, F_in_i: Tensor, F_in_coarse: Tensor, i: int) -> Tensor:
    """Recalibrate level ``i`` channel-wise with a vector regressed from both levels."""
    p = model.params
    logits = semantic_attention_logits(model, F_in_i, F_in_coarse, i)
    gate = ops.reshape(ops.sigmoid(logits), (F_in_i.shape[0], 1, 1, 1))
    proj = ops.conv3d(F_in_i, p[f"semcor.{i}.proj.weight"], p[f"semcor.{i}.proj.bias"])
    return ops.mul_broadcast(proj, gate)


def _head(model: Model, family: str, i: int, x: Tensor) -> Tensor:
    p = model.params
    return ops.conv3d(x, p[f"heads.{family}.{i}.weight"], p[f"heads.{family}.{i}.bias"])


def dpcnet_forward(model: Model, patch: Tensor) -> ForwardOutput:
    cfg = model.config
    L = cfg.levels
    F = pfe_forward(model, patch)
    feats = PyramidFeatures(F=F)
    pfe_logits = {i: _head(model, "pfe", i, F[i]) for i in range(L)}
    spa_logits: Dict[int, Tensor] = {}
    sem_logits: Dict[int, Tensor] = {}

    if cfg.attention:
        if cfg.attention_order == "spacor_first":
            spa = {0: F[0]}
            for i in range(1, L):
                spa[i] = spacor_forward(model, F[i], F[i - 1], i)
            sem = {i: semcor_forward(model, spa[i], spa[i + 1], i) for i in range(L - 1)}
        else:
            sem = {L - 1: F[L - 1]}
            for i in range(L - 1):
                sem[i] = semcor_forward(model, F[i], F[i + 1], i)
            spa = {i: spacor_forward(model, sem[i], sem[i - 1], i) for i in range(1, L)}
        feats.F_spa = {i: spa[i] for i in range(1, L)}
        feats.F_sem = {i: sem[i] for i in range(L - 1)}
        spa_logits = {i: _head(model, "spa", i, feats.F_spa[i]) for i in range(1, L)}
        sem_logits = {i: _head(model, "sem", i, feats.F_sem[i]) for i in range(L - 1)}
        final = sem_logits[0]
    else:
        final = pfe_logits[0]

    return ForwardOutput(
        pfe_logits=pfe_logits,
        spa_logits=spa_logits,
        sem_logits=sem_logits,
        final_logits=final,
        final_probs=ops.softmax_channel(final),
        features=feats,
    )


def count_params(model: Model) -> Dict[str, int]:
    counts = {g: 0 for g in GROUPS}
    for name, t in model.params.items():
        counts[name.split(".", 1)[0]] += int(t.data.size)
    counts["total"] = sum(counts[g] for g in GROUPS)
    return counts
