"""Grid-structured multi-scale dehazing network with attention fusion.

The model has three stages: a trainable pre-processing block that expands
the hazy RGB image into 16 feature maps, a rows-by-cols grid backbone in
which each row works at one spatial scale (channels double as resolution
halves) and columns exchange features through strided and transposed
convolutions, and a post-processing block mirroring the pre-processing.
Wherever a vertical exchange meets a horizontal stream the two features
are fused by a spatial-channel attention block.

Ablation variants reduce the same builder: an encoder-decoder path, a
minimal-exchange multi-scale net, attention-less fusion, attention with
only one of its two gates, a post-processing-free head, and two
alternative input banks (raw RGB plus zero maps, or the hand-crafted
16-channel bank from haze_model.derive_inputs).
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError
from . import haze_model

VARIANTS = (
    "full",
    "ednet",
    "msnet",
    "no_scab",
    "no_cab",
    "no_sab",
    "no_post",
    "original_inputs",
    "derived_inputs",
)

OUTPUT_HEADS = ("direct", "indirect")


@dataclass
class GridConfig:
    """Architectural hyperparameters for the grid network."""

    rows: int = 3
    cols: int = 6
    scale_channels: tuple = (16, 32, 64)
    rdbs_per_row: int = 5
    rdb_convs: int = 5
    growth_rate: int = 16
    cab_reduction: int = 16
    sab_kernel: int = 7
    variant: str = "full"
    output_head: str = "direct"
    t_min: float = haze_model.DEFAULT_T_MIN

    def __post_init__(self):
        self.scale_channels = tuple(int(c) for c in self.scale_channels)
        self.validate()

    def validate(self):
        if self.rows != len(self.scale_channels):
            raise ConfigError(
                f"rows ({self.rows}) must equal len(scale_channels) ({len(self.scale_channels)})"
            )
        if self.cols < 2 or self.cols % 2 != 0:
            raise ConfigError(f"cols must be a positive even integer, got {self.cols}")
        for a, b in zip(self.scale_channels, self.scale_channels[1:]):
            if b != 2 * a:
                raise ConfigError(f"scale channels must double per row, got {self.scale_channels}")
        if self.rdbs_per_row != self.cols - 1:
            raise ConfigError(
                f"rdbs_per_row ({self.rdbs_per_row}) must equal cols - 1 ({self.cols - 1})"
            )
        if self.rdb_convs < 2:
            raise ConfigError("rdb_convs must be >= 2 (dense convs plus the 1x1 fusion)")
        if self.growth_rate < 1:
            raise ConfigError("growth_rate must be >= 1")
        if self.cab_reduction < 1:
            raise ConfigError("cab_reduction must be >= 1")
        if self.sab_kernel % 2 == 0 or self.sab_kernel < 1:
            raise ConfigError(f"sab_kernel must be odd, got {self.sab_kernel}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise ConfigError(f"unknown output head {self.output_head!r}")
        if self.variant == "derived_inputs" and self.scale_channels[0] != 16:
            raise ConfigError("derived_inputs variant needs scale_channels[0] == 16")
        if not (0 < self.t_min < 1):
            raise ConfigError(f"t_min must lie in (0, 1), got {self.t_min}")

    def to_dict(self):
        d = asdict(self)
        d["scale_channels"] = list(self.scale_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if k == "scale_channels" else v for k, v in d.items()})

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class FeatureTap:
    """A fused feature captured at grid junction (row, col) on the top scale."""

    position: tuple
    tensor: torch.Tensor


class ResidualDenseBlock(nn.Module):
    """Densely connected 3x3 convolutions with a 1x1 fusion and residual add.

    With n_convs = 5 there are four ReLU-activated dense convolutions, each
    emitting growth channels and consuming the input plus all prior
    outputs; the unactivated 1x1 maps the concatenation back to the block
    width. All-zero parameters make the block an exact identity.
    """

    def __init__(self, channels, growth, n_convs=5):
        super().__init__()
        self.dense = nn.ModuleList()
        width = channels
        for _ in range(n_convs - 1):
            self.dense.append(nn.Conv2d(width, growth, 3, padding=1))
            width += growth
        self.fuse = nn.Conv2d(width, channels, 1)

    def forward(self, x):
        feats = [x]
        for conv in self.dense:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return x + self.fuse(torch.cat(feats, dim=1))


class DownsampleBlock(nn.Module):
    """Halve the spatial size and double the channels with one strided conv."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise InputError(f"spatial size must be even to downsample, got {tuple(x.shape[-2:])}")
        return F.relu(self.conv(x))


class UpsampleBlock(nn.Module):
    """Double the spatial size and halve the channels with one transposed conv."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.ConvTranspose2d(channels, channels // 2, 4, stride=2, padding=1)

    def forward(self, x):
        return F.relu(self.conv(x))


class ChannelAttention(nn.Module):
    """Per-channel gates from spatially pooled statistics.

    Average and max pooling over all spatial positions give two channel
    vectors; a shared two-layer perceptron maps each, the results are
    summed and squashed by a sigmoid into (0, 1) gains.
    """

    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 2)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x):
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        z = self.fc2(F.relu(self.fc1(avg))) + self.fc2(F.relu(self.fc1(mx)))
        return torch.sigmoid(z)[:, :, None, None]

    def forward(self, x):
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    """Per-position gates from channel-pooled statistics through one conv."""

    def __init__(self, kernel=7):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"spatial attention kernel must be odd, got {kernel}")
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def gate(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))

    def forward(self, x):
        return x * self.gate(x)


class AttentionFusion(nn.Module):
    """Fuse a horizontal and a vertical stream.

    mode "scab": spatial attention over the sum of two channel-attended
    streams; "cab_only" drops the spatial gate, "sab_only" drops both
    channel gates, and "sum" is a parameter-free addition.
    """

    def __init__(self, channels, mode="scab", reduction=16, kernel=7):
        super().__init__()
        self.mode = mode
        if mode in ("scab", "cab_only"):
            self.cab_h = ChannelAttention(channels, reduction)
            self.cab_v = ChannelAttention(channels, reduction)
        if mode in ("scab", "sab_only"):
            self.sab = SpatialAttention(kernel)

    def forward(self, f_h, f_v):
        if f_h.shape != f_v.shape:
            raise InputError(f"fusion inputs differ in shape: {f_h.shape} vs {f_v.shape}")
        if self.mode == "sum":
            return f_h + f_v
        if self.mode == "cab_only":
            return self.cab_h(f_h) + self.cab_v(f_v)
        if self.mode == "sab_only":
            return self.sab(f_h + f_v)
        return self.sab(self.cab_h(f_h) + self.cab_v(f_v))


def _fusion_mode(variant):
    return {
        "no_scab": "sum",
        "no_cab": "sab_only",
        "no_sab": "cab_only",
    }.get(variant, "scab")


class Preprocess(nn.Module):
    """3x3 conv (unactivated) then one residual dense block: RGB -> learned inputs."""

    def __init__(self, channels, growth, n_convs):
        super().__init__()
        self.conv = nn.Conv2d(3, channels, 3, padding=1)
        self.rdb = ResidualDenseBlock(channels, growth, n_convs)

    def forward(self, x):
        return self.rdb(self.conv(x))


class Postprocess(nn.Module):
    """Mirror of the pre-processing: residual dense block then output conv."""

    def __init__(self, channels, growth, n_convs, out_channels, keep_rdb=True):
        super().__init__()
        self.rdb = ResidualDenseBlock(channels, growth, n_convs) if keep_rdb else None
        self.conv = nn.Conv2d(channels, out_channels, 3, padding=1)

    def forward(self, x):
        if self.rdb is not None:
            x = self.rdb(x)
        return self.conv(x)


class AttentionGridNet(nn.Module):
    """The full dehazing network; build via network.build for seeded init."""

    def __init__(self, config: GridConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.scale_channels
        g = config.growth_rate
        nk = config.rdb_convs
        rows, cols = config.rows, config.cols
        mid = cols // 2
        variant = config.variant

        if variant == "ednet":
            self.down_cols = [0]
            self.up_cols = [cols - 1]
            rdb_rows = [rows - 1]
        elif variant == "msnet":
            self.down_cols = [0]
            self.up_cols = [cols - 1]
            rdb_rows = list(range(rows))
        else:
            self.down_cols = list(range(mid))
            self.up_cols = list(range(mid, cols))
            rdb_rows = list(range(rows))
        self.rdb_rows = rdb_rows

        out_channels = 3 if config.output_head == "direct" else 2
        if variant in ("original_inputs", "derived_inputs"):
            self.preprocess = None
        else:
            self.preprocess = Preprocess(c[0], g, nk)
        self.postprocess = Postprocess(c[0], g, nk, out_channels, keep_rdb=variant != "no_post")

        self.rdbs = nn.ModuleDict()
        for i in rdb_rows:
            for j in range(1, cols):
                self.rdbs[f"r{i}c{j}"] = ResidualDenseBlock(c[i], g, nk)

        self.downs = nn.ModuleDict()
        for j in self.down_cols:
            for i in range(1, rows):
                if variant == "ednet" and j != 0:
                    continue
                self.downs[f"r{i}c{j}"] = DownsampleBlock(c[i - 1])

        self.ups = nn.ModuleDict()
        for j in self.up_cols:
            for i in range(rows - 1):
                self.ups[f"r{i}c{j}"] = UpsampleBlock(c[i + 1])

        mode = _fusion_mode(variant)
        self.fuse = nn.ModuleDict()
        if variant != "ednet":
            for j in self.down_cols:
                if j == 0:
                    continue  # no horizontal stream arrives at column 0 below row 0
                for i in range(1, rows):
                    self.fuse[f"r{i}c{j}"] = AttentionFusion(
                        c[i], mode, config.cab_reduction, config.sab_kernel
                    )
            for j in self.up_cols:
                for i in range(rows - 1):
                    self.fuse[f"r{i}c{j}"] = AttentionFusion(
                        c[i], mode, config.cab_reduction, config.sab_kernel
                    )

    # -- input handling ----------------------------------------------------

    def _entry_features(self, x):
        c0 = self.config.scale_channels[0]
        variant = self.config.variant
        if variant == "original_inputs":
            if x.shape[1] != 3:
                raise InputError(f"expected 3-channel input, got {x.shape[1]}")
            zeros = x.new_zeros(x.shape[0], c0 - 3, x.shape[2], x.shape[3])
            return torch.cat([x, zeros], dim=1)
        if variant == "derived_inputs":
            if x.shape[1] != 16:
                raise InputError(
                    "derived_inputs variant expects the 16-channel bank from "
                    f"haze_model.derive_inputs, got {x.shape[1]} channels"
                )
            return x
        if x.shape[1] != 3:
            raise InputError(f"expected 3-channel input, got {x.shape[1]}")
        return self.preprocess(x)

    def learned_inputs(self, x):
        """The 16-channel feature bank entering the grid for input x."""
        return self._entry_features(x)

    def _rgb_of(self, x):
        # channels 0-2 carry the hazy RGB in every input convention
        return x[:, :3]

    # -- grid evaluation ----------------------------------------------------

    def _run_grid(self, x0):
        rows, cols = self.config.rows, self.config.cols
        mid = cols // 2
        down_cols = set(self.down_cols)
        up_cols = set(self.up_cols)
        taps = []
        X = {(0, 0): x0}
        for i in range(1, rows):
            X[(i, 0)] = self.downs[f"r{i}c0"](X[(i - 1, 0)])
        for j in range(1, mid):
            X[(0, j)] = self.rdbs[f"r0c{j}"](X[(0, j - 1)])
            for i in range(1, rows):
                h = self.rdbs[f"r{i}c{j}"](X[(i, j - 1)])
                if j in down_cols:
                    v = self.downs[f"r{i}c{j}"](X[(i - 1, j)])
                    X[(i, j)] = self.fuse[f"r{i}c{j}"](h, v)
                else:
                    X[(i, j)] = h
        for j in range(mid, cols):
            X[(rows - 1, j)] = self.rdbs[f"r{rows - 1}c{j}"](X[(rows - 1, j - 1)])
            for i in range(rows - 2, -1, -1):
                h = self.rdbs[f"r{i}c{j}"](X[(i, j - 1)])
                if j in up_cols:
                    v = self.ups[f"r{i}c{j}"](X[(i + 1, j)])
                    X[(i, j)] = self.fuse[f"r{i}c{j}"](h, v)
                    if i == 0:
                        taps.append(FeatureTap((0, j), X[(0, j)]))
                else:
                    X[(i, j)] = h
        return X[(0, cols - 1)], taps

    def _run_encoder_decoder(self, x0):
        rows, cols = self.config.rows, self.config.cols
        x = x0
        for i in range(1, rows):
            x = self.downs[f"r{i}c0"](x)
        for j in range(1, cols):
            x = self.rdbs[f"r{rows - 1}c{j}"](x)
        for i in range(rows - 2, -1, -1):
            x = self.ups[f"r{i}c{cols - 1}"](x)
        return x, []

    def _head(self, x_rgb, raw):
        if self.config.output_head == "direct":
            return raw
        t_map = torch.sigmoid(raw[:, 0:1])
        airlight = raw[:, 1:2].mean(dim=(2, 3), keepdim=True)
        return self._invert(x_rgb, t_map, airlight)

    def _invert(self, x_rgb, t_map, airlight):
        tp = torch.clamp(t_map, min=self.config.t_min)
        return (x_rgb - airlight * (1.0 - tp)) / tp

    def forward(self, x, want_taps=False):
        """Unclamped restoration of x; optionally the top-scale fused taps.

        x is (B, 3, H, W) with H, W divisible by 4 (16 channels for the
        derived_inputs variant). Use infer() for clamped, arbitrary-size
        evaluation.
        """
        factor = 2 ** (self.config.rows - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise InputError(
                f"H and W must be multiples of {factor} in forward(); "
                "use infer() for arbitrary sizes"
            )
        x0 = self._entry_features(x)
        if self.config.variant == "ednet":
            feats, taps = self._run_encoder_decoder(x0)
        else:
            feats, taps = self._run_grid(x0)
        out = self._head(self._rgb_of(x), self.postprocess(feats))
        if want_taps:
            return out, taps
        return out

    def forward_indirect(self, x):
        """Transmission map, airlight, and the resulting restored image."""
        if self.config.output_head != "indirect":
            raise ConfigError("forward_indirect requires output_head='indirect'")
        x0 = self._entry_features(x)
        if self.config.variant == "ednet":
            feats, _ = self._run_encoder_decoder(x0)
        else:
            feats, _ = self._run_grid(x0)
        raw = self.postprocess(feats)
        t_map = torch.sigmoid(raw[:, 0:1])
        airlight = raw[:, 1:2].mean(dim=(2, 3), keepdim=True)
        dehazed = self._invert(self._rgb_of(x), t_map, airlight)
        return t_map, airlight, dehazed

    @torch.no_grad()
    def infer(self, img):
        """Clamped inference on a numpy image of arbitrary size.

        Accepts (3, H, W) or (B, 3, H, W) in [0, 1]; reflect-pads H and W
        up to the required multiple and crops the output back.
        """
        arr = np.asarray(img, dtype=np.float32)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
        if self.config.variant == "derived_inputs" and arr.shape[1] == 3:
            arr = haze_model.derive_inputs(arr).astype(np.float32)
        x = torch.from_numpy(arr)
        factor = 2 ** (self.config.rows - 1)
        h, w = x.shape[-2:]
        ph = (-h) % factor
        pw = (-w) % factor
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        out = self.forward(x)
        out = torch.clamp(out[..., :h, :w], 0.0, 1.0)
        result = out.numpy()
        return result[0] if squeeze else result


@dataclass
class ParameterStore:
    """Named view over a model's trainable tensors plus the config fingerprint."""

    params: "OrderedDict[str, torch.Tensor]"
    fingerprint: str

    def param_count(self):
        return sum(int(t.numel()) for t in self.params.values())

    def to_arrays(self):
        return OrderedDict(
            (name, t.detach().cpu().numpy().copy()) for name, t in self.params.items()
        )

    def load_arrays(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter name mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        with torch.no_grad():
            for name, t in self.params.items():
                arr = np.asarray(arrays[name])
                if tuple(arr.shape) != tuple(t.shape):
                    raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {tuple(t.shape)}")
                t.copy_(torch.from_numpy(arr).to(t.dtype))

    def byte_hash(self):
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def param_count(store):
    """Total number of trainable scalars in the store."""
    return store.param_count()


def _init_parameters(model, seed):
    """Fan-in-scaled uniform weights, zero biases, drawn from one seeded stream."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                w = module.weight
                in_ch = w.shape[1] if isinstance(module, nn.Conv2d) else w.shape[0]
                fan_in = in_ch * w.shape[2] * w.shape[3]
                bound = 1.0 / np.sqrt(fan_in)
                vals = rng.uniform(-bound, bound, size=tuple(w.shape))
                w.copy_(torch.from_numpy(vals).to(w.dtype))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.Linear):
                w = module.weight
                bound = 1.0 / np.sqrt(w.shape[1])
                vals = rng.uniform(-bound, bound, size=tuple(w.shape))
                w.copy_(torch.from_numpy(vals).to(w.dtype))
                if module.bias is not None:
                    module.bias.zero_()


def build(config, seed=0, dtype=torch.float32):
    """Construct the model with deterministic seeded initialization.

    Returns (model, store); the store references the live parameter
    tensors, so mutating one mutates the other.
    """
    model = AttentionGridNet(config).to(dtype)
    _init_parameters(model, seed)
    model.train(False)
    store = ParameterStore(
        params=OrderedDict(model.named_parameters()),
        fingerprint=config.fingerprint(),
    )
    return model, store
