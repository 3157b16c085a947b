"""Segmentation and registration streams as small 3D U-Nets.

Both streams share one encoder/decoder layout (mirror-symmetric, skip
connections concatenated at every scale).  They differ only in their output
stage: the segmentation stream ends in one sub-branch per structure, each a
conv unit followed by a 1x1x1 convolution and a sigmoid; the registration
stream ends in a single 3x3x3 convolution with three kernels giving the
displacement in target voxels.

Parameters live in flat ``{name: ndarray}`` dicts so the optimizer and the
checkpoint format can treat them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from .volume import atomic_write_bytes, atomic_write_text


@dataclass(frozen=True)
class NetConfig:
    kind: str  # "seg" or "reg"
    in_channels: int
    n_outputs: int
    depth: int = 2
    base_width: int = 8
    convs_per_level: int = 1
    branch_width: int = 4

    def __post_init__(self):
        if self.kind not in ("seg", "reg"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.kind == "reg" and self.n_outputs != 3:
            raise ValueError("registration stream must output exactly three channels")
        if min(self.in_channels, self.n_outputs, self.depth + 1, self.base_width,
               self.convs_per_level, self.branch_width) < 1:
            raise ValueError(f"invalid network config {self}")

    def width(self, level):
        return self.base_width * 2**level


def _unit_specs(cfg: NetConfig):
    """Ordered (prefix, c_in, c_out) for every 3x3x3 conv unit in the body."""
    specs = []
    c = cfg.in_channels
    for level in range(cfg.depth):
        for j in range(cfg.convs_per_level):
            specs.append((f"enc{level}.conv{j}", c, cfg.width(level)))
            c = cfg.width(level)
    for j in range(cfg.convs_per_level):
        specs.append((f"bottleneck.conv{j}", c, cfg.width(cfg.depth)))
        c = cfg.width(cfg.depth)
    for level in reversed(range(cfg.depth)):
        c = c + cfg.width(level)
        for j in range(cfg.convs_per_level):
            specs.append((f"dec{level}.conv{j}", c, cfg.width(level)))
            c = cfg.width(level)
    return specs


def param_shapes(cfg: NetConfig) -> dict[str, tuple]:
    shapes = {}
    for prefix, c_in, c_out in _unit_specs(cfg):
        shapes[f"{prefix}.kernel"] = (3, 3, 3, c_in, c_out)
        shapes[f"{prefix}.bias"] = (c_out,)
        shapes[f"{prefix}.scale"] = (c_out,)
        shapes[f"{prefix}.shift"] = (c_out,)
    top = cfg.width(0)
    if cfg.kind == "seg":
        for k in range(cfg.n_outputs):
            shapes[f"branch{k}.conv.kernel"] = (3, 3, 3, top, cfg.branch_width)
            shapes[f"branch{k}.conv.bias"] = (cfg.branch_width,)
            shapes[f"branch{k}.conv.scale"] = (cfg.branch_width,)
            shapes[f"branch{k}.conv.shift"] = (cfg.branch_width,)
            shapes[f"branch{k}.head.kernel"] = (1, 1, 1, cfg.branch_width, 1)
            shapes[f"branch{k}.head.bias"] = (1,)
    else:
        shapes["head.kernel"] = (3, 3, 3, top, 3)
        shapes["head.bias"] = (3,)
    return shapes


def init_params(cfg: NetConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero biases, unit norm scale, zero norm shift."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".kernel"):
            params[name] = layers.glorot_uniform(shape, rng, dtype)
        elif name.endswith(".scale"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def _unit_forward(params, prefix, x):
    y, conv_cache = layers.conv3_forward(x, params[f"{prefix}.kernel"], params[f"{prefix}.bias"])
    n, norm_cache = layers.instance_norm_forward(y, params[f"{prefix}.scale"], params[f"{prefix}.shift"])
    return layers.leaky_relu(n), (conv_cache, norm_cache, n)


def _unit_backward(cache, prefix, dout, grads):
    conv_cache, norm_cache, n = cache
    dn = layers.leaky_relu_backward(n, dout)
    dy, grads[f"{prefix}.scale"], grads[f"{prefix}.shift"] = layers.instance_norm_backward(norm_cache, dn)
    dx, grads[f"{prefix}.kernel"], grads[f"{prefix}.bias"] = layers.conv3_backward(conv_cache, dy)
    return dx


class UNet:
    """Fixed-graph encoder/decoder with explicit forward and backward passes."""

    def __init__(self, config: NetConfig):
        self.config = config

    def check_input(self, x):
        cfg = self.config
        if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
            raise ValueError(f"{cfg.kind} stream expects (X, Y, Z, {cfg.in_channels}) input, got {x.shape}")
        step = 2**cfg.depth
        if any(d % step for d in x.shape[:3]):
            raise ValueError(f"spatial dims {x.shape[:3]} must be divisible by {step}")

    def forward(self, params, x):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        cfg = self.config
        self.check_input(x)
        x = x.astype(params[next(iter(params))].dtype, copy=False)
        cache = {"input_shape": x.shape}
        skips = []
        h = x
        for level in range(cfg.depth):
            for j in range(cfg.convs_per_level):
                h, cache[f"enc{level}.conv{j}"] = _unit_forward(params, f"enc{level}.conv{j}", h)
            skips.append(h)
            h, cache[f"pool{level}"] = layers.maxpool2_forward(h)
        for j in range(cfg.convs_per_level):
            h, cache[f"bottleneck.conv{j}"] = _unit_forward(params, f"bottleneck.conv{j}", h)
        for level in reversed(range(cfg.depth)):
            up = layers.upsample2(h)
            cache[f"concat{level}"] = up.shape[-1]
            h = np.concatenate([up, skips[level]], axis=-1)
            for j in range(cfg.convs_per_level):
                h, cache[f"dec{level}.conv{j}"] = _unit_forward(params, f"dec{level}.conv{j}", h)
        if cfg.kind == "seg":
            outs = []
            for k in range(cfg.n_outputs):
                b, cache[f"branch{k}.conv"] = _unit_forward(params, f"branch{k}.conv", h)
                z, cache[f"branch{k}.head"] = layers.conv3_forward(
                    b, params[f"branch{k}.head.kernel"], params[f"branch{k}.head.bias"]
                )
                outs.append(layers.sigmoid(z))
            out = np.concatenate(outs, axis=-1)
            cache["sigmoid"] = out
        else:
            out, cache["head"] = layers.conv3_forward(h, params["head.kernel"], params["head.bias"])
        return out, cache

    def backward(self, params, cache, dout):
        """Parameter gradients of ``sum(dout * output)`` for the cached forward pass."""
        cfg = self.config
        grads = {}
        if cfg.kind == "seg":
            s = cache["sigmoid"]
            if dout.shape != s.shape:
                raise ValueError(f"upstream gradient {dout.shape} does not match output {s.shape}")
            dz = dout * s * (1 - s)
            dh = 0
            for k in range(cfg.n_outputs):
                db, grads[f"branch{k}.head.kernel"], grads[f"branch{k}.head.bias"] = layers.conv3_backward(
                    cache[f"branch{k}.head"], dz[..., k : k + 1]
                )
                dh = dh + _unit_backward(cache[f"branch{k}.conv"], f"branch{k}.conv", db, grads)
        else:
            dh, grads["head.kernel"], grads["head.bias"] = layers.conv3_backward(cache["head"], dout)
        dskips = {}
        for level in range(cfg.depth):
            for j in reversed(range(cfg.convs_per_level)):
                dh = _unit_backward(cache[f"dec{level}.conv{j}"], f"dec{level}.conv{j}", dh, grads)
            n_up = cache[f"concat{level}"]
            dskips[level] = dh[..., n_up:]
            dh = layers.upsample2_backward(dh[..., :n_up])
        for j in reversed(range(cfg.convs_per_level)):
            dh = _unit_backward(cache[f"bottleneck.conv{j}"], f"bottleneck.conv{j}", dh, grads)
        for level in reversed(range(cfg.depth)):
            dh = layers.maxpool2_backward(cache[f"pool{level}"], dh) + dskips[level]
            for j in reversed(range(cfg.convs_per_level)):
                dh = _unit_backward(cache[f"enc{level}.conv{j}"], f"enc{level}.conv{j}", dh, grads)
        return {name: grads[name].astype(params[name].dtype, copy=False) for name in params}

    def bottleneck_shape(self, input_dims):
        step = 2**self.config.depth
        return tuple(d // step for d in input_dims) + (self.config.width(self.config.depth),)


def seg_config(in_channels=6, n_structures=3, **kw) -> NetConfig:
    return NetConfig("seg", in_channels, n_structures, **kw)


def reg_config(**kw) -> NetConfig:
    return NetConfig("reg", 2, 3, **kw)


def seg_forward(theta, image, config: NetConfig):
    return UNet(config).forward(theta, image)[0]


def reg_input(target_img, source_aligned):
    if target_img.shape != source_aligned.shape or target_img.shape[-1] != 1:
        raise ValueError(
            f"registration inputs must be matching single-channel volumes, got "
            f"{target_img.shape} and {source_aligned.shape}"
        )
    return np.concatenate([target_img, source_aligned], axis=-1)


def reg_forward(psi, target_img, source_aligned, config: NetConfig):
    return UNet(config).forward(psi, reg_input(target_img, source_aligned))[0]


@dataclass
class NetworkParams:
    seg_cfg: NetConfig
    reg_cfg: NetConfig
    theta: dict = field(default_factory=dict)
    psi: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, seg_cfg, reg_cfg, seed, dtype=np.float32):
        # streams draw from independent child seeds so seg-only and joint share theta
        seq = np.random.SeedSequence(seed)
        s_seed, r_seed = (int(c.generate_state(1)[0]) for c in seq.spawn(2))
        return cls(seg_cfg, reg_cfg, init_params(seg_cfg, s_seed, dtype), init_params(reg_cfg, r_seed, dtype))

    def copy(self):
        return NetworkParams(
            self.seg_cfg,
            self.reg_cfg,
            {k: v.copy() for k, v in self.theta.items()},
            {k: v.copy() for k, v in self.psi.items()},
        )


def save_checkpoint(net: NetworkParams, path, epoch=None, seed=None, extra=None):
    """Write ``<path>.json`` manifest and ``<path>.raw`` little-endian payload."""
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    entries = []
    chunks = []
    offset = 0
    for stream, params in (("theta", net.theta), ("psi", net.psi)):
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name])
            dt = arr.dtype.newbyteorder("<")
            raw = arr.astype(dt).tobytes()
            entries.append({
                "stream": stream,
                "name": name,
                "shape": list(arr.shape),
                "dtype": dt.str,
                "offset": offset,
                "nbytes": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "seg_config": asdict(net.seg_cfg),
        "reg_config": asdict(net.reg_cfg),
        "epoch": epoch,
        "seed": seed,
        "layers": entries,
    }
    if extra:
        manifest.update(extra)
    atomic_write_bytes(path.with_suffix(".raw"), b"".join(chunks))
    atomic_write_text(path.with_suffix(".json"), json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    if not path.with_suffix(".json").exists():
        raise FileNotFoundError(f"missing checkpoint {path}.json")
    with open(path.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    payload = path.with_suffix(".raw").read_bytes()
    net = NetworkParams(NetConfig(**manifest["seg_config"]), NetConfig(**manifest["reg_config"]))
    for e in manifest["layers"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        getattr(net, e["stream"])[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return net, manifest
