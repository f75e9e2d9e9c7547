"""Network topologies built on the diffcore operator set.

* :class:`Backbone` - U-Net segmenter returning the per-pixel class softmax
  and the bottleneck feature map.
* :class:`ShapeAutoencoder` - label-map autoencoder used as a frozen shape
  prior; its encoder half doubles as the code extractor for ACNN.
* :class:`PositionHead` - regresses normalized slice depth from the
  bottleneck.
* :class:`Discriminator` - scores a label/probability map as gold standard.

Parameters live in ordinary ``nn.Module`` stores; :func:`init_params` gives a
seeded He-normal initialization and :func:`save_checkpoint` /
:func:`load_checkpoint` a bit-exact on-disk format.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .errors import FormatError, ShapeError


@dataclass(frozen=True)
class BackboneSpec:
    levels: int = 4
    base_channels: int = 16
    in_channels: int = 1
    out_classes: int = 4

    def channels(self) -> list[int]:
        return [self.base_channels * 2**k for k in range(self.levels + 1)]


@dataclass(frozen=True)
class SRSpec:
    levels: int = 3
    base_channels: int = 16
    code_channels: int = 32
    n_classes: int = 4

    def channels(self) -> list[int]:
        return [self.base_channels * 2**k for k in range(self.levels)]


@dataclass(frozen=True)
class SCHeadSpec:
    in_channels: int = 256
    hidden: int = 32


@dataclass(frozen=True)
class DiscrSpec:
    levels: int = 3
    base_channels: int = 8
    hidden: int = 32
    n_classes: int = 4


class Conv(nn.Module):
    def __init__(self, c_in, c_out, k=3, act=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.act = act

    def forward(self, x):
        y = dc.conv2d(x, self.weight, self.bias)
        return dc.relu(y) if self.act else y


class Dense(nn.Module):
    def __init__(self, n_in, n_out, act=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_out, n_in))
        self.bias = nn.Parameter(torch.zeros(n_out))
        self.act = act

    def forward(self, x):
        y = dc.dense(x, self.weight, self.bias)
        return dc.relu(y) if self.act else y


def _double(c_in, c_out):
    return nn.Sequential(Conv(c_in, c_out), Conv(c_out, c_out))


class Backbone(nn.Module):
    """U-Net with max-pool downsampling, nearest upsampling and concat skips."""

    def __init__(self, spec: BackboneSpec = BackboneSpec()):
        super().__init__()
        self.spec = spec
        ch = spec.channels()
        L = spec.levels
        self.encoders = nn.ModuleList(
            _double(spec.in_channels if k == 0 else ch[k - 1], ch[k]) for k in range(L)
        )
        self.bottleneck = _double(ch[L - 1], ch[L])
        # decoders[j] handles level L-1-j
        self.decoders = nn.ModuleList(_double(ch[k + 1] + ch[k], ch[k]) for k in reversed(range(L)))
        self.head = Conv(ch[0], spec.out_classes, k=1, act=False)

    def forward(self, image):
        """``image`` (N, 1, H, W) -> (probabilities (N, 4, H, W), bottleneck)."""
        logits, bottleneck = self.forward_logits(image)
        probs = dc.softmax_channels(logits)
        return dc.check_finite(probs, "backbone output"), bottleneck

    def forward_logits(self, image):
        """Like :meth:`forward` but returns the pre-softmax class scores."""
        div = 2**self.spec.levels
        if image.dim() != 4 or image.shape[2] % div or image.shape[3] % div:
            raise ShapeError(
                f"backbone input {tuple(image.shape)} needs H, W divisible by {div}"
            )
        skips = []
        x = image
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = dc.maxpool2d(x)
        bottleneck = self.bottleneck(x)
        x = bottleneck
        for dec in self.decoders:
            x = dec(dc.concat_channels([dc.upsample2x(x), skips.pop()]))
        return dc.check_finite(self.head(x), "backbone logits"), bottleneck


class ShapeAutoencoder(nn.Module):
    """Label-map autoencoder; reconstructions are channel softmax fields."""

    def __init__(self, spec: SRSpec = SRSpec()):
        super().__init__()
        self.spec = spec
        ch = spec.channels()
        self.enc = nn.ModuleList(
            Conv(spec.n_classes if k == 0 else ch[k - 1], ch[k]) for k in range(spec.levels)
        )
        self.code = Conv(ch[-1], spec.code_channels, act=False)
        dec_in = [spec.code_channels] + ch[::-1][:-1]
        self.dec = nn.ModuleList(Conv(c_in, c_out) for c_in, c_out in zip(dec_in, ch[::-1]))
        self.head = Conv(ch[0], spec.n_classes, k=1, act=False)

    def encode(self, labelmap):
        div = 2**self.spec.levels
        if labelmap.dim() != 4 or labelmap.shape[1] != self.spec.n_classes:
            raise ShapeError(f"autoencoder expects (N, {self.spec.n_classes}, H, W), got {tuple(labelmap.shape)}")
        if labelmap.shape[2] % div or labelmap.shape[3] % div:
            raise ShapeError(f"autoencoder input needs H, W divisible by {div}")
        x = labelmap
        for conv in self.enc:
            x = dc.maxpool2d(conv(x))
        return self.code(x)

    def decode(self, code):
        x = code
        for conv in self.dec:
            x = conv(dc.upsample2x(x))
        return dc.softmax_channels(self.head(x))

    def forward(self, labelmap):
        return dc.check_finite(self.decode(self.encode(labelmap)), "autoencoder output")


def acnn_encode(sr: ShapeAutoencoder, labelmap):
    """Flattened code vectors (N, D) from the autoencoder's encoder half."""
    return sr.encode(labelmap).flatten(1)


class PositionHead(nn.Module):
    def __init__(self, spec: SCHeadSpec = SCHeadSpec()):
        super().__init__()
        self.spec = spec
        self.hidden = Dense(spec.in_channels, spec.hidden)
        self.out = Dense(spec.hidden, 1, act=False)

    def forward(self, bottleneck):
        """Predicted normalized slice position in (0, 1), shape (N,)."""
        z = self.out(self.hidden(dc.global_avg_pool(bottleneck)))
        return dc.check_finite(dc.sigmoid(z).reshape(-1), "position head output")


class Discriminator(nn.Module):
    """Conv/max-pool encoder -> pooled features -> probability of being real."""

    def __init__(self, spec: DiscrSpec = DiscrSpec()):
        super().__init__()
        self.spec = spec
        ch = [spec.base_channels * 2**k for k in range(spec.levels)]
        self.convs = nn.ModuleList(
            Conv(spec.n_classes if k == 0 else ch[k - 1], ch[k]) for k in range(spec.levels)
        )
        self.hidden = Dense(ch[-1], spec.hidden)
        self.out = Dense(spec.hidden, 1, act=False)

    def forward(self, labelmap):
        x = labelmap
        for conv in self.convs:
            x = dc.maxpool2d(conv(x))
        z = self.out(self.hidden(dc.global_avg_pool(x)))
        return dc.check_finite(dc.sigmoid(z).reshape(-1), "discriminator output")


NETWORKS = {
    "backbone": (Backbone, BackboneSpec),
    "shape_autoencoder": (ShapeAutoencoder, SRSpec),
    "position_head": (PositionHead, SCHeadSpec),
    "discriminator": (Discriminator, DiscrSpec),
}
_NAME_OF = {cls: name for name, (cls, _) in NETWORKS.items()}


def build(name: str, spec=None, seed: int = 0) -> nn.Module:
    cls, spec_cls = NETWORKS[name]
    net = cls(spec if spec is not None else spec_cls())
    init_params(net, seed)
    return net


def init_params(net: nn.Module, seed: int) -> nn.Module:
    """He-normal (fan-in) weights, zero biases; deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in sorted(net.named_parameters()):
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = math.prod(p.shape[1:])
                std = math.sqrt(2.0 / fan_in)
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


def freeze(net: nn.Module) -> nn.Module:
    for p in net.parameters():
        p.requires_grad_(False)
    return net


# --- flat parameter views (used by gradient checks) ---------------------------


def flat_params(net: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for _, p in net.named_parameters()])


def unflatten(net: nn.Module, vector: torch.Tensor) -> dict[str, torch.Tensor]:
    out, i = {}, 0
    for name, p in net.named_parameters():
        n = p.numel()
        out[name] = vector[i : i + n].reshape(p.shape)
        i += n
    return out


def call_with(net: nn.Module, vector: torch.Tensor, *args):
    return torch.func.functional_call(net, unflatten(net, vector), args)


# --- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = "srscn-params 1"


def save_checkpoint(net: nn.Module, path) -> None:
    name = _NAME_OF[type(net)]
    state = net.state_dict()
    lines = [_CKPT_MAGIC, f"network={name}", "spec=" + json.dumps(asdict(net.spec), sort_keys=True)]
    blobs, offset = [], 0
    for key, t in state.items():
        blob = t.detach().cpu().numpy().astype("<f4").tobytes()
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"param={key} {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(b"".join(blobs))


def load_checkpoint(path) -> nn.Module:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise FormatError(f"{path}: checkpoint header not terminated")
    lines = raw[:cut].decode("ascii", errors="replace").split("\n")
    payload = raw[cut + len(marker) :]
    if lines[0] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not an srscn checkpoint")
    fields, params = {}, []
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed header line {line!r}")
        if key == "param":
            params.append(value.split(" "))
        else:
            fields[key] = value
    try:
        cls, spec_cls = NETWORKS[fields["network"]]
        net = cls(spec_cls(**json.loads(fields["spec"])))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad network description: {exc}") from exc
    state = net.state_dict()
    loaded = {}
    for key, shape, offset, nbytes in params:
        dims = tuple(int(s) for s in shape.split(",") if s)
        offset, nbytes = int(offset), int(nbytes)
        if key not in state or tuple(state[key].shape) != dims:
            raise FormatError(f"{path}: unexpected parameter {key} {dims}")
        if nbytes != 4 * math.prod(dims) or offset + nbytes > len(payload):
            raise FormatError(f"{path}: byte count mismatch for {key}")
        arr = np.frombuffer(payload, dtype="<f4", count=math.prod(dims), offset=offset)
        loaded[key] = torch.from_numpy(arr.reshape(dims).copy())
    if set(loaded) != set(state):
        raise FormatError(f"{path}: missing parameters {sorted(set(state) - set(loaded))}")
    net.load_state_dict(loaded)
    return net
