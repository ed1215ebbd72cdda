"""Student U-Net over a single flat parameter vector, plus its checkpoint format.

The network is written functionally: :func:`layer_shapes` fixes the order
in which weights sit in the flat vector, and :func:`apply_unet` slices
that vector on every call. Keeping the parameters flat makes the
optimizer, checkpoints and gradient checks operate on one array.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AquaError, BadConfig, BadMagic, ParamCountMismatch, ShapeMismatch, TruncatedFile, UnsupportedVersion
from .raster import Raster, WaterMask

CKPT_MAGIC = b"DAQW"
CKPT_VERSION = 1

# Keeps logistic outputs strictly inside (0, 1) in float32.
PROB_EPS = 1e-7


@dataclass(frozen=True)
class UNetConfig:
    input_channels: int = 1
    depth: int = 4
    base_channels: int = 16
    kernel: int = 3
    tile_size: int = 64

    def __post_init__(self):
        if self.input_channels < 1 or self.base_channels < 1:
            raise BadConfig("channel counts must be positive")
        if self.depth < 0:
            raise BadConfig("depth must be >= 0")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise BadConfig("kernel must be a positive odd integer")
        if self.tile_size % (2**self.depth):
            raise BadConfig(f"tile size {self.tile_size} is not divisible by 2**{self.depth}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth + 1)]


def layer_shapes(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) for every tensor, in flat-vector order."""
    k = config.kernel
    ch = config.channels
    shapes = []
    c_in = config.input_channels
    for i, c in enumerate(ch):
        shapes += [
            (f"enc{i}.conv1.weight", (c, c_in, k, k)),
            (f"enc{i}.conv1.bias", (c,)),
            (f"enc{i}.conv2.weight", (c, c, k, k)),
            (f"enc{i}.conv2.bias", (c,)),
        ]
        c_in = c
    for i in reversed(range(config.depth)):
        c = ch[i]
        shapes += [
            (f"dec{i}.up.weight", (ch[i + 1], c, 2, 2)),
            (f"dec{i}.up.bias", (c,)),
            (f"dec{i}.conv1.weight", (c, 2 * c, k, k)),
            (f"dec{i}.conv1.bias", (c,)),
            (f"dec{i}.conv2.weight", (c, c, k, k)),
            (f"dec{i}.conv2.bias", (c,)),
        ]
    shapes += [("final.weight", (1, ch[0], 1, 1)), ("final.bias", (1,))]
    return shapes


def param_count(config: UNetConfig) -> int:
    return sum(math.prod(s) for _, s in layer_shapes(config))


def _fan_in(name: str, shape) -> int:
    if name.endswith(".up.weight"):
        # stride-2 2x2 transposed conv: each output pixel sees one tap per input channel
        return shape[0]
    return math.prod(shape[1:])


@dataclass(eq=False)
class ModelCheckpoint:
    config: UNetConfig
    parameters: np.ndarray
    seed: int = 0
    trained_epochs: int = 0
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        self.parameters = np.ascontiguousarray(self.parameters, dtype=np.float32).ravel()
        expected = param_count(self.config)
        if self.parameters.size != expected:
            raise ParamCountMismatch(f"{self.parameters.size} parameters, config needs {expected}")
        if not np.isfinite(self.parameters).all():
            raise AquaError("non-finite model parameter")

    def named(self) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in layer_shapes(self.config):
            n = math.prod(shape)
            out[name] = self.parameters[off : off + n].reshape(shape)
            off += n
        return out


def init_model(config: UNetConfig = UNetConfig(), seed: int = 0) -> ModelCheckpoint:
    """Fan-in scaled uniform weights (He bound for rectified layers), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in layer_shapes(config):
        if name.endswith("bias"):
            chunks.append(np.zeros(shape).ravel())
            continue
        gain = 3.0 if name.startswith("final") else 6.0
        bound = math.sqrt(gain / _fan_in(name, shape))
        chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
    return ModelCheckpoint(config, np.concatenate(chunks).astype(np.float32), seed)


def apply_unet(w: torch.Tensor, x: torch.Tensor, config: UNetConfig) -> torch.Tensor:
    """Logits for a batch ``x`` of shape (n, c, h, w) given flat parameters ``w``."""
    params, off = {}, 0
    for name, shape in layer_shapes(config):
        n = math.prod(shape)
        params[name] = w[off : off + n].view(shape)
        off += n
    pad = config.kernel // 2

    def double_conv(h, prefix):
        h = F.relu(F.conv2d(h, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], padding=pad))
        return F.relu(F.conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], padding=pad))

    skips = []
    h = x
    for i in range(config.depth + 1):
        h = double_conv(h, f"enc{i}")
        if i < config.depth:
            skips.append(h)
            h = F.max_pool2d(h, 2)
    for i in reversed(range(config.depth)):
        h = F.conv_transpose2d(h, params[f"dec{i}.up.weight"], params[f"dec{i}.up.bias"], stride=2)
        h = double_conv(torch.cat([skips[i], h], dim=1), f"dec{i}")
    return F.conv2d(h, params["final.weight"], params["final.bias"])


def probabilities(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


def check_input(x: np.ndarray, config: UNetConfig) -> None:
    if x.ndim != 4 or x.shape[1] != config.input_channels:
        raise ShapeMismatch(f"expected (n, {config.input_channels}, h, w), got {x.shape}")
    step = 2**config.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeMismatch(f"spatial size {x.shape[2:]} not divisible by {step}")


def predict_array(model: ModelCheckpoint, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Water probabilities for a stack of normalized tiles, shape (n, 1, h, w)."""
    x = np.array(x, dtype=np.float32)  # writable copy for torch.from_numpy
    check_input(x, model.config)
    w = torch.from_numpy(model.parameters.copy())
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(probabilities(apply_unet(w, torch.from_numpy(x[i : i + batch_size]), model.config)).numpy())
    return np.concatenate(out) if out else np.zeros((0, 1) + x.shape[2:], np.float32)


def forward(model: ModelCheckpoint, sar_tile: Raster) -> Raster:
    """Water probability map for one normalized single-band SAR tile."""
    if sar_tile.bands != 1:
        raise ShapeMismatch(f"student expects 1 band, got {sar_tile.bands}")
    prob = predict_array(model, sar_tile.data[None])[0]
    return Raster(prob, sar_tile.valid, sar_tile.pixel_size_m, ("water_probability",))


def binarize(prob: Raster | np.ndarray, cut: float = 0.5) -> WaterMask:
    values = prob.data[0] if isinstance(prob, Raster) else np.asarray(prob)
    return WaterMask(values > cut)


# ---------------------------------------------------------------- checkpoints


def config_hash(config: UNetConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:16]


def encode_checkpoint(model: ModelCheckpoint) -> bytes:
    header = {
        "config": asdict(model.config),
        "config_hash": config_hash(model.config),
        "n_params": int(model.parameters.size),
        "seed": model.seed,
        "trained_epochs": model.trained_epochs,
        "loss_history": [float(v) for v in model.loss_history],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    return (
        CKPT_MAGIC
        + struct.pack("<BI", CKPT_VERSION, len(blob))
        + blob
        + model.parameters.astype("<f4").tobytes()
    )


def decode_checkpoint(buf: bytes, expected: UNetConfig | None = None) -> ModelCheckpoint:
    if len(buf) < 9:
        raise TruncatedFile("checkpoint shorter than its header")
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"expected {CKPT_MAGIC!r}, found {buf[:4]!r}")
    version, n = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}")
    if len(buf) < 9 + n:
        raise TruncatedFile("checkpoint config block is truncated")
    try:
        header = json.loads(buf[9 : 9 + n])
        config = UNetConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise AquaError(f"unreadable checkpoint header: {exc}") from exc
    n_params = int(header["n_params"])
    payload = buf[9 + n :]
    if len(payload) < 4 * n_params:
        raise TruncatedFile(f"{len(payload) // 4} of {n_params} parameters present")
    if len(payload) > 4 * n_params:
        raise AquaError("trailing bytes after checkpoint parameters")
    if header.get("config_hash") != config_hash(config) or n_params != param_count(config):
        raise ParamCountMismatch(f"{n_params} stored parameters do not fit the stored config")
    if expected is not None and param_count(expected) != n_params:
        raise ParamCountMismatch(f"checkpoint has {n_params} parameters, expected {param_count(expected)}")
    params = np.frombuffer(payload, "<f4").astype(np.float32)
    return ModelCheckpoint(config, params, header["seed"], header["trained_epochs"], header["loss_history"])


def save_checkpoint(model: ModelCheckpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))


def load_checkpoint(path, expected: UNetConfig | None = None) -> ModelCheckpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected)
