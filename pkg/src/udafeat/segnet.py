"""Tiny convolutional encoder-decoder segmentation network.

Encoder: four 3x3 conv layers (stride 1, padding 1) with ReLU after every
layer and 2x2 max-pools after the first two, giving a feature grid at 1/4
of the input resolution with non-negative activations. Decoder: a 1x1 conv
classifier head followed by nearest 4x upsampling back to input resolution.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"UDAF"
CHECKPOINT_VERSION = 1
DOWNSAMPLE_FACTOR = 4


@dataclass
class SegNetConfig:
    num_classes: int = 5
    feature_channels: int = 32
    height: int = 64
    width: int = 64
    hidden: list = field(default_factory=lambda: [24, 48, 64])
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_channels < self.num_classes:
            raise ValueError("feature_channels must be >= num_classes")
        if self.height % DOWNSAMPLE_FACTOR or self.width % DOWNSAMPLE_FACTOR:
            raise ValueError(f"input size must be a multiple of {DOWNSAMPLE_FACTOR}")
        if len(self.hidden) != 3:
            raise ValueError("hidden must list widths for the 3 inner conv layers")


def _param_spec(cfg):
    """Fixed (name, shape) order for all kernels and biases."""
    widths = [3] + list(cfg.hidden) + [cfg.feature_channels]
    spec = []
    for i in range(4):
        spec.append((f"enc{i}_w", (widths[i + 1], widths[i], 3, 3)))
        spec.append((f"enc{i}_b", (widths[i + 1],)))
    spec.append(("head_w", (cfg.num_classes, cfg.feature_channels, 1, 1)))
    spec.append(("head_b", (cfg.num_classes,)))
    return spec


def init_params(cfg):
    """Kaiming-style scaled uniform initialization, deterministic in cfg.seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5e9]))
    params = {}
    for name, shape in _param_spec(cfg):
        if name.endswith("_b"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                                  requires_grad=True)
    return params


class SegNet:
    def __init__(self, cfg, params=None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params

    def param_list(self):
        return [self.params[name] for name, _ in _param_spec(self.cfg)]

    def encode(self, x):
        """Image tensor [3,H,W] -> non-negative feature tensor [D,H/4,W/4]."""
        if x.shape != (3, self.cfg.height, self.cfg.width):
            raise ValueError(f"expected input shape (3,{self.cfg.height},"
                             f"{self.cfg.width}), got {x.shape}")
        p = self.params
        h = T.add_channel_bias(T.conv2d(x, p["enc0_w"], 1, 1), p["enc0_b"]).relu()
        h = T.maxpool2x2(h)
        h = T.add_channel_bias(T.conv2d(h, p["enc1_w"], 1, 1), p["enc1_b"]).relu()
        h = T.maxpool2x2(h)
        h = T.add_channel_bias(T.conv2d(h, p["enc2_w"], 1, 1), p["enc2_b"]).relu()
        h = T.add_channel_bias(T.conv2d(h, p["enc3_w"], 1, 1), p["enc3_b"]).relu()
        return h

    def decode(self, feats):
        """Feature tensor [D,h,w] -> per-pixel class logits [|C|,H,W]."""
        d = self.cfg.feature_channels
        if feats.shape != (d, self.cfg.height // DOWNSAMPLE_FACTOR,
                           self.cfg.width // DOWNSAMPLE_FACTOR):
            raise ValueError(f"unexpected feature shape {feats.shape}")
        p = self.params
        logits = T.add_channel_bias(T.conv2d(feats, p["head_w"], 1, 0),
                                    p["head_b"])
        return T.upsample_nearest(logits, DOWNSAMPLE_FACTOR)

    def forward(self, x):
        feats = self.encode(x)
        return feats, self.decode(feats)

    def predict(self, image):
        """Argmax class map [H,W] for a plain image array, ties to lowest index."""
        _, logits = self.forward(Tensor(image))
        return logits.data.argmax(axis=0)

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in self.params.items()}
        return SegNet(self.cfg, params)


# -- checkpoint container ----------------------------------------------------

def save_checkpoint(path, net):
    values = np.concatenate([t.data.ravel() for t in net.param_list()])
    cfg_json = json.dumps(asdict(net.cfg)).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", values.size))
        f.write(values.astype("<f8").tobytes())
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        count, = struct.unpack("<Q", f.read(8))
        values = np.frombuffer(f.read(count * 8), dtype="<f8").astype(np.float64)
        cfg_len, = struct.unpack("<I", f.read(4))
        cfg = SegNetConfig(**json.loads(f.read(cfg_len).decode("utf-8")))
    net = SegNet(cfg)
    offset = 0
    for name, shape in _param_spec(cfg):
        n = int(np.prod(shape))
        net.params[name] = Tensor(values[offset:offset + n].reshape(shape),
                                  requires_grad=True)
        offset += n
    if offset != count:
        raise ValueError("checkpoint parameter count does not match config")
    return net
