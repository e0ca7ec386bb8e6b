"""Segmentation model contract, a small 3D UNet, paired initialisation and
checkpoint files."""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, GeometryError, IntegrityError

CKPT_MAGIC = b"TRCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_width: int = 8
    depth: int = 4
    norm: str = "group"
    num_classes: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_width < 1 or self.in_channels < 1:
            raise ConfigError("base_width and in_channels must be >= 1")
        if self.num_classes != 2:
            raise ConfigError("only binary segmentation (2 classes) is supported")
        if self.norm not in ("group", "instance", "batch", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")

    @property
    def multiple(self) -> int:
        return 2 ** (self.depth - 1)


def _norm(kind, channels):
    if kind == "group":
        return nn.GroupNorm(math.gcd(channels, 8), channels)
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    return nn.Identity()


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, norm):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1),
            _norm(norm, cout),
            nn.ReLU(inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1),
            _norm(norm, cout),
            nn.ReLU(inplace=True),
        )


class UNet3D(nn.Module):
    """Encoder-decoder with skip concatenation; returns 2-class logits."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.encoders.append(ConvBlock(cin, w, cfg.norm))
            cin = w
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.ups.append(nn.ConvTranspose3d(w * 2, w, 2, stride=2))
            self.decoders.append(ConvBlock(w * 2, w, cfg.norm))
        self.head = nn.Conv3d(widths[0], cfg.num_classes, 1)

    def forward(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = F.max_pool3d(x, 2)
            x = enc(x)
            skips.append(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class ProbModel(nn.Module):
    """Wraps a logit network so calling it yields per-voxel softmax fields.

    Any module mapping ``(N, 1, H, W, C)`` to ``(N, 2, H, W, C)`` logits can
    stand in for the UNet.
    """

    def __init__(self, net: nn.Module, multiple: int = 1):
        super().__init__()
        self.net = net
        self.multiple = multiple

    def forward(self, x):
        check_divisible(x.shape[-3:], self.multiple)
        return torch.softmax(self.net(x), dim=1)


def check_divisible(spatial, multiple):
    for axis, s in enumerate(spatial):
        if s % multiple:
            raise GeometryError(
                f"crop size {int(s)} on axis {axis} must be a multiple of {multiple}"
            )


def build_model(cfg: NetConfig) -> ProbModel:
    return ProbModel(UNet3D(cfg), cfg.multiple)


@dataclass
class ModelPair:
    model1: ProbModel
    model2: ProbModel
    cfg: NetConfig
    seeds: tuple

    def __iter__(self):
        return iter((self.model1, self.model2))

    def train(self):
        self.model1.train()
        self.model2.train()

    def eval(self):
        self.model1.eval()
        self.model2.eval()


def _seeded_model(cfg, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build_model(cfg)


def init_pair(cfg: NetConfig, seed1: int, seed2: int) -> ModelPair:
    if seed1 == seed2:
        raise ConfigError("the two models need different initialisation seeds")
    return ModelPair(_seeded_model(cfg, seed1), _seeded_model(cfg, seed2), cfg, (seed1, seed2))


def forward(model: nn.Module, crop) -> torch.Tensor:
    """Run ``model`` on one crop ``(H, W, C)`` or a batch ``(N, 1, H, W, C)``.

    An unbatched crop returns an unbatched ``(2, H, W, C)`` field.
    """
    x = torch.as_tensor(crop, dtype=torch.float32)
    single = x.dim() == 3
    if single:
        x = x[None, None]
    out = model(x)
    return out[0] if single else out


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def parameter_distance(m1: nn.Module, m2: nn.Module) -> float:
    total = 0.0
    for p, q in zip(m1.parameters(), m2.parameters()):
        total += float(((p.detach().double() - q.detach().double()) ** 2).sum())
    return math.sqrt(total)


# -- checkpoint container ---------------------------------------------------
#
# Layout: magic "TRCK", u32 version, u32 manifest length, manifest JSON,
# then the section blobs back to back. The manifest lists each section's
# name, byte length and sha256.


def _torch_bytes(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _torch_obj(blob: bytes):
    return torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False)


def write_container(path, sections: dict) -> None:
    manifest = []
    for name, blob in sections.items():
        manifest.append({"name": name, "nbytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})
    head = json.dumps({"version": CKPT_VERSION, "sections": manifest}).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(head)))
        f.write(head)
        for blob in sections.values():
            f.write(blob)
    os.replace(tmp, path)


def read_container(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise IntegrityError("bad magic", section="header")
    if len(data) < 12:
        raise IntegrityError("truncated header", section="header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise IntegrityError(f"unsupported version {version}", section="header")
    try:
        manifest = json.loads(data[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"unreadable manifest ({e})", section="manifest") from None
    pos = 12 + hlen
    out = {}
    for entry in manifest["sections"]:
        name, n = entry["name"], entry["nbytes"]
        blob = data[pos:pos + n]
        if len(blob) != n:
            raise IntegrityError(f"truncated: expected {n} bytes, found {len(blob)}", section=name)
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise IntegrityError("checksum mismatch", section=name)
        out[name] = blob
        pos += n
    if pos != len(data):
        raise IntegrityError(f"{len(data) - pos} trailing bytes", section="footer")
    return out


def checkpoint_save(pair: ModelPair, optimizer_state: dict, step: int, path, extra: Optional[dict] = None,
                    rng_state: Optional[dict] = None, config: Optional[dict] = None) -> None:
    from . import __version__

    meta = {"step": int(step), "net": asdict(pair.cfg), "seeds": list(pair.seeds), "tool_version": __version__}
    meta.update(extra or {})
    sections = {
        "meta": json.dumps(meta).encode(),
        "config": json.dumps(config or {}).encode(),
        "model1": _torch_bytes(pair.model1.state_dict()),
        "model2": _torch_bytes(pair.model2.state_dict()),
        "optimizer": _torch_bytes(optimizer_state),
        "rng": json.dumps(rng_state or {}).encode(),
    }
    write_container(path, sections)


def checkpoint_load(path):
    """Return ``(pair, optimizer_state, step, info)``; ``info`` holds meta, config and rng state."""
    sections = read_container(path)
    for name in ("meta", "config", "model1", "model2", "optimizer", "rng"):
        if name not in sections:
            raise IntegrityError("missing", section=name)
    meta = json.loads(sections["meta"])
    cfg = NetConfig(**meta["net"])
    seeds = tuple(meta["seeds"])
    pair = ModelPair(build_model(cfg), build_model(cfg), cfg, seeds)
    for name, model in (("model1", pair.model1), ("model2", pair.model2)):
        try:
            model.load_state_dict(_torch_obj(sections[name]))
        except Exception as e:  # noqa: BLE001 - surfaced with the section name
            raise IntegrityError(str(e), section=name) from None
    optimizer_state = _torch_obj(sections["optimizer"])
    info = {
        "meta": meta,
        "config": json.loads(sections["config"]),
        "rng": json.loads(sections["rng"]),
    }
    return pair, optimizer_state, int(meta["step"]), info
