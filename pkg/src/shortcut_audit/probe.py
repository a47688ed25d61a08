"""Probe classifiers with a two-logit softmax head and hand-written backprop.

Two variants share one flat parameter vector layout:

* ``patch_cnn``: [3x3 conv (pad 1) -> ReLU -> 2x2 max-pool] per width, adaptive
  average pool to ``pooled_grid`` x ``pooled_grid``, FC -> ReLU -> FC(2).
* ``linear``: flatten -> affine(2).

Activations are kept NHWC internally and conv kernels are stored as
(kh, kw, in, out) so each convolution is a single GEMM over im2col columns.
Class index 0 is "absent", 1 is "present".
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ImageTensor
from .errors import ConfigError, ShapeMismatch
from .sampling import SeededRng

PARAMS_FORMAT_VERSION = 1
VARIANTS = ("patch_cnn", "linear")


@dataclass(frozen=True)
class ProbeConfig:
    variant: str = "patch_cnn"
    input_channels: int = 3
    conv_widths: tuple[int, ...] = (16, 32)
    fc_width: int = 64
    pooled_grid: int = 5
    # only the linear variant depends on the spatial input size
    input_size: tuple[int, int] = (20, 20)

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown probe variant {self.variant!r}")
        if self.input_channels != 3:
            raise ConfigError("probe input_channels must be 3")
        if self.variant == "patch_cnn":
            if not self.conv_widths or min(self.conv_widths) < 1:
                raise ConfigError("patch_cnn needs at least one positive conv width")
            if self.pooled_grid < 1 or self.fc_width < 1:
                raise ConfigError("pooled_grid and fc_width must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        return cls(**{**d, "conv_widths": tuple(d.get("conv_widths", (16, 32))),
                      "input_size": tuple(d.get("input_size", (20, 20)))})


def layer_shapes(config: ProbeConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every tensor, in vector order."""
    if config.variant == "linear":
        d = config.input_channels * config.input_size[0] * config.input_size[1]
        return [("linear.weight", (d, 2), d), ("linear.bias", (2,), d)]
    out = []
    c_in = config.input_channels
    for i, f in enumerate(config.conv_widths):
        out.append((f"conv{i}.weight", (3, 3, c_in, f), 9 * c_in))
        out.append((f"conv{i}.bias", (f,), 9 * c_in))
        c_in = f
    flat = config.pooled_grid * config.pooled_grid * c_in
    out.append(("fc1.weight", (flat, config.fc_width), flat))
    out.append(("fc1.bias", (config.fc_width,), flat))
    out.append(("fc2.weight", (config.fc_width, 2), config.fc_width))
    out.append(("fc2.bias", (2,), config.fc_width))
    return out


@dataclass
class ProbeParameters:
    config: ProbeConfig
    vector: np.ndarray
    layers: dict[str, tuple[int, tuple[int, ...]]]
    seed: int | None = None
    # fixed per-channel input standardization, set from training data
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        total = sum(int(np.prod(shape)) for _, shape in self.layers.values())
        if self.vector.ndim != 1 or self.vector.size != total:
            raise ShapeMismatch(f"parameter vector has {self.vector.size} entries, layers need {total}")

    def __len__(self) -> int:
        return self.vector.size

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.layers[name]
        return self.vector[offset : offset + int(np.prod(shape))].reshape(shape)

    def with_vector(self, vector: np.ndarray) -> "ProbeParameters":
        return ProbeParameters(self.config, vector, self.layers, self.seed, self.input_mean, self.input_std)

    def astype(self, dtype) -> "ProbeParameters":
        return self.with_vector(self.vector.astype(dtype))

    def copy(self) -> "ProbeParameters":
        return self.with_vector(self.vector.copy())


def _layer_table(config: ProbeConfig) -> dict[str, tuple[int, tuple[int, ...]]]:
    table, offset = {}, 0
    for name, shape, _ in layer_shapes(config):
        table[name] = (offset, shape)
        offset += int(np.prod(shape))
    return table


def zero_params(config: ProbeConfig, dtype=np.float32) -> ProbeParameters:
    table = _layer_table(config)
    n = sum(int(np.prod(s)) for _, s in table.values())
    return ProbeParameters(config, np.zeros(n, dtype=dtype), table)


def init_params(config: ProbeConfig, rng: SeededRng, dtype=np.float32) -> ProbeParameters:
    """Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero."""
    params = zero_params(config, np.float64)
    for name, shape, fan_in in layer_shapes(config):
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / fan_in)
            offset, _ = params.layers[name]
            n = int(np.prod(shape))
            params.vector[offset : offset + n] = (2.0 * rng.uniform(n) - 1.0) * bound
    params.seed = rng.seed
    return params.astype(dtype)


def as_batch_array(batch, dtype) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        arr = np.stack([b.data if isinstance(b, ImageTensor) else np.asarray(b) for b in batch])
    if arr.ndim != 4:
        raise ShapeMismatch(f"batch must be (N, C, H, W), got shape {arr.shape}")
    return arr.astype(dtype, copy=False)


def _adaptive_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    mat = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, dy : dy + h, dx : dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, h, w, c = shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        dxp[:, dy : dy + h, dx : dx + w, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :]


def _maxpool(a: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    h2, w2 = a.shape[1] // 2, a.shape[2] // 2
    quads = [a[:, dy : 2 * h2 : 2, dx : 2 * w2 : 2, :] for dy in (0, 1) for dx in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # gradient goes to the first maximal element of each window
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        sel = (q == out) & ~taken
        taken |= sel
        masks.append(sel)
    return out, masks


def _maxpool_backward(dout: np.ndarray, masks: list[np.ndarray], in_shape) -> np.ndarray:
    da = np.zeros(in_shape, dtype=dout.dtype)
    h2, w2 = dout.shape[1], dout.shape[2]
    for (dy, dx), sel in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
        da[:, dy : 2 * h2 : 2, dx : 2 * w2 : 2, :] = dout * sel
    return da


def _check_input(params: ProbeParameters, x: np.ndarray) -> None:
    cfg = params.config
    if x.shape[1] != cfg.input_channels:
        raise ShapeMismatch(f"probe expects {cfg.input_channels} channels, got {x.shape[1]}")
    h, w = x.shape[2], x.shape[3]
    if cfg.variant == "linear":
        if (h, w) != cfg.input_size:
            raise ShapeMismatch(f"linear probe was built for {cfg.input_size}, got {(h, w)}")
        return
    for _ in cfg.conv_widths:
        h, w = h // 2, w // 2
    if min(h, w) < cfg.pooled_grid:
        raise ShapeMismatch(
            f"input {x.shape[2]}x{x.shape[3]} shrinks to {h}x{w} before pooling, below pooled_grid {cfg.pooled_grid}"
        )


def _forward(params: ProbeParameters, x: np.ndarray, cache: dict | None):
    cfg = params.config
    _check_input(params, x)
    n = x.shape[0]
    dtype = params.vector.dtype
    x = (x - params.input_mean.astype(dtype)[None, :, None, None]) / params.input_std.astype(dtype)[None, :, None, None]
    if cfg.variant == "linear":
        flat = x.reshape(n, -1)
        if cache is not None:
            cache["flat"] = flat
        return flat @ params.view("linear.weight") + params.view("linear.bias")

    a = x.transpose(0, 2, 3, 1)
    convs = []
    for i, f in enumerate(cfg.conv_widths):
        cols = _im2col(a)
        w = params.view(f"conv{i}.weight").reshape(-1, f)
        z = (cols @ w + params.view(f"conv{i}.bias")).reshape(a.shape[:3] + (f,))
        r = np.maximum(z, 0)
        pooled, masks = _maxpool(r)
        convs.append((a.shape, cols, z, masks))
        a = pooled
    g = cfg.pooled_grid
    ph = _adaptive_matrix(a.shape[1], g, a.dtype)
    pw = _adaptive_matrix(a.shape[2], g, a.dtype)
    if a.shape[1:3] == (g, g):
        q = a
    else:
        q = np.einsum("ih,nhwf,jw->nijf", ph, a, pw, optimize=True)
    flat = q.reshape(n, -1)
    hid_pre = flat @ params.view("fc1.weight") + params.view("fc1.bias")
    hid = np.maximum(hid_pre, 0)
    logits = hid @ params.view("fc2.weight") + params.view("fc2.bias")
    if cache is not None:
        cache.update(convs=convs, pooled_shape=a.shape, ph=ph, pw=pw, flat=flat, hid_pre=hid_pre, hid=hid)
    return logits


def _backward(params: ProbeParameters, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    cfg = params.config
    grad = np.zeros_like(params.vector)

    def put(name, value):
        offset, shape = params.layers[name]
        grad[offset : offset + value.size] = value.reshape(-1)

    if cfg.variant == "linear":
        put("linear.weight", cache["flat"].T @ dlogits)
        put("linear.bias", dlogits.sum(0))
        return grad

    put("fc2.weight", cache["hid"].T @ dlogits)
    put("fc2.bias", dlogits.sum(0))
    dhid = (dlogits @ params.view("fc2.weight").T) * (cache["hid_pre"] > 0)
    put("fc1.weight", cache["flat"].T @ dhid)
    put("fc1.bias", dhid.sum(0))
    dflat = dhid @ params.view("fc1.weight").T
    pooled_shape = cache["pooled_shape"]
    g = cfg.pooled_grid
    dq = dflat.reshape((pooled_shape[0], g, g, pooled_shape[3]))
    if pooled_shape[1:3] == (g, g):
        da = dq
    else:
        da = np.einsum("ih,nijf,jw->nhwf", cache["ph"], dq, cache["pw"], optimize=True)
    for i in reversed(range(len(cfg.conv_widths))):
        in_shape, cols, z, masks = cache["convs"][i]
        dr = _maxpool_backward(da, masks, z.shape)
        dz = (dr * (z > 0)).reshape(-1, z.shape[-1])
        put(f"conv{i}.weight", cols.T @ dz)
        put(f"conv{i}.bias", dz.sum(0))
        if i > 0:
            w = params.view(f"conv{i}.weight").reshape(-1, z.shape[-1])
            da = _col2im(dz @ w.T, in_shape)
    return grad


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ProbeOutput:
    logits: np.ndarray
    probabilities: np.ndarray


def forward(params: ProbeParameters, batch, chunk: int = 256) -> ProbeOutput:
    x = as_batch_array(batch, params.vector.dtype)
    if x.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    logits = np.concatenate([_forward(params, x[s : s + chunk], None) for s in range(0, x.shape[0], chunk)])
    return ProbeOutput(logits, softmax(logits))


def loss_and_grad(params: ProbeParameters, batch, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    x = as_batch_array(batch, params.vector.dtype)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0 or y.shape != (x.shape[0],):
        raise ShapeMismatch(f"batch of {x.shape[0]} images with {y.size} labels")
    cache: dict = {}
    logits = _forward(params, x, cache)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    n = x.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(lse - logits[rows, y]))
    dlogits = softmax(logits)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    return loss, _backward(params, cache, dlogits.astype(params.vector.dtype))


def predict(params: ProbeParameters, batch) -> np.ndarray:
    """Argmax class per sample; exact ties go to class 0 (absent)."""
    p = forward(params, batch).probabilities
    return (p[:, 1] > p[:, 0]).astype(np.int64)


def save_params(params: ProbeParameters, path: str | Path) -> None:
    """Little-endian flat vector at ``path`` plus ``<path>.json`` shape table."""
    path = Path(path)
    dtype = np.dtype(params.vector.dtype).newbyteorder("<")
    path.write_bytes(params.vector.astype(dtype).tobytes())
    sidecar = {
        "format_version": PARAMS_FORMAT_VERSION,
        "dtype": dtype.str,
        "config": params.config.to_dict(),
        "seed": params.seed,
        "input_mean": [float(v) for v in params.input_mean],
        "input_std": [float(v) for v in params.input_std],
        "layers": [{"name": k, "offset": o, "shape": list(s)} for k, (o, s) in params.layers.items()],
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> ProbeParameters:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    if meta.get("format_version") != PARAMS_FORMAT_VERSION:
        raise ConfigError(f"unsupported parameter file version {meta.get('format_version')}")
    vector = np.frombuffer(path.read_bytes(), dtype=np.dtype(meta["dtype"])).astype(np.dtype(meta["dtype"]).newbyteorder("="))
    layers = {d["name"]: (d["offset"], tuple(d["shape"])) for d in meta["layers"]}
    return ProbeParameters(
        ProbeConfig.from_dict(meta["config"]), vector, layers, meta.get("seed"),
        np.asarray(meta.get("input_mean", [0.0] * 3), dtype=np.float64),
        np.asarray(meta.get("input_std", [1.0] * 3), dtype=np.float64),
    )
