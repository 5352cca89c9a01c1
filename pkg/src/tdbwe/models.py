"""Generator and discriminator architectures plus the checkpoint container."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .pqmf import PQMF


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    enc_channels: int = 128
    enc_kernel: int = 16
    enc_stride: int = 8
    sep_stacks: int = 1
    sep_layers_per_stack: int = 8
    sep_in_channels: int = 128
    # 512 keeps the default network at ~1.58 M parameters; see README
    sep_hidden_channels: int = 512
    sep_kernel: int = 3
    dilation_growth: int = 2
    dec_out_channels: int = 1
    # add the input to the decoded output; the decoder starts at zero so the
    # untrained network is the identity map
    input_skip: bool = False

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "input_skip":
                if not isinstance(value, bool):
                    raise ValueError(f"GeneratorConfig.input_skip must be a bool, got {value!r}")
                continue
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"GeneratorConfig.{name} must be a positive integer, got {value!r}")
        if self.enc_stride > self.enc_kernel:
            raise ValueError("enc_stride must not exceed enc_kernel")
        if self.sep_kernel % 2 == 0:
            raise ValueError("sep_kernel must be odd for symmetric padding")
        if self.dec_out_channels != 1:
            raise ValueError("only single-channel output is supported")

    @property
    def dilations(self) -> list[int]:
        return [self.dilation_growth ** i
                for _ in range(self.sep_stacks) for i in range(self.sep_layers_per_stack)]

    @property
    def receptive_field_frames(self) -> int:
        """Encoder frames seen by one mask value (plus the overlapping encoder frame)."""
        return (self.sep_kernel - 1) * sum(self.dilations) + 2

    @property
    def receptive_field_samples(self) -> int:
        """Width of the output region a single input sample can influence."""
        return (self.receptive_field_frames - 1) * self.enc_stride + self.enc_kernel


class ChannelNorm(torch.nn.Module):
    """Layer norm over channels, applied independently at every frame."""

    def __init__(self, channels, eps=1e-8):
        super().__init__()
        self.norm = torch.nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class _SeparatorBlock(torch.nn.Module):
    def __init__(self, channels, hidden, kernel, dilation, residual=True):
        super().__init__()
        self.conv_in = torch.nn.Conv1d(channels, hidden, 1)
        self.act1 = torch.nn.PReLU()
        self.norm1 = ChannelNorm(hidden)
        self.dconv = torch.nn.Conv1d(hidden, hidden, kernel, dilation=dilation,
                                     padding=dilation * (kernel - 1) // 2, groups=hidden)
        self.act2 = torch.nn.PReLU()
        self.norm2 = ChannelNorm(hidden)
        # the final block feeds only the skip sum
        self.res_out = torch.nn.Conv1d(hidden, channels, 1) if residual else None
        self.skip_out = torch.nn.Conv1d(hidden, channels, 1)

    def forward(self, x):
        h = self.norm1(self.act1(self.conv_in(x)))
        h = self.norm2(self.act2(self.dconv(h)))
        res = x + self.res_out(h) if self.res_out is not None else None
        return res, self.skip_out(h)


class ConvTasNet(torch.nn.Module):
    """Encoder / mask-estimating separator / decoder waveform mapper.

    Input and output are (B, T) or (B, 1, T); the output always has the
    input's shape.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        c = config or GeneratorConfig()
        self.config = c
        self.encoder = torch.nn.Conv1d(1, c.enc_channels, c.enc_kernel, stride=c.enc_stride, bias=False)
        self.input_norm = ChannelNorm(c.enc_channels)
        self.bottleneck = torch.nn.Conv1d(c.enc_channels, c.sep_in_channels, 1)
        self.blocks = torch.nn.ModuleList(
            _SeparatorBlock(c.sep_in_channels, c.sep_hidden_channels, c.sep_kernel, d,
                            residual=i < len(c.dilations) - 1)
            for i, d in enumerate(c.dilations)
        )
        self.mask_out = torch.nn.Sequential(
            torch.nn.PReLU(), torch.nn.Conv1d(c.sep_in_channels, c.enc_channels, 1))
        self.decoder = torch.nn.ConvTranspose1d(c.enc_channels, 1, c.enc_kernel,
                                                stride=c.enc_stride, bias=False)
        if c.input_skip:
            torch.nn.init.zeros_(self.decoder.weight)

    def _pad(self, x):
        k, s = self.config.enc_kernel, self.config.enc_stride
        length = x.shape[-1]
        rest = (-(length + 2 * s - k)) % s
        return F.pad(x, (s, s + rest)), s

    def forward(self, x):
        shape = x.shape
        if x.dim() == 2:
            x = x.unsqueeze(1)
        length = x.shape[-1]
        if length < self.config.enc_kernel:
            raise ValueError(f"input length {length} shorter than encoder kernel")
        xp, left = self._pad(x)
        enc = self.encoder(xp)
        h = self.bottleneck(self.input_norm(enc))
        skip = 0
        for block in self.blocks:
            h, s = block(h)
            skip = skip + s
        mask = torch.sigmoid(self.mask_out(skip))
        y = self.decoder(enc * mask)[..., left:left + length]
        if self.config.input_skip:
            y = y + x
        return y.reshape(shape)


def build_generator(config: GeneratorConfig | None = None) -> ConvTasNet:
    return ConvTasNet(config)


def forward_generator(net: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Run the generator and raise :class:`FloatingPointError` on non-finite output."""
    y = net(x)
    if not torch.isfinite(y).all():
        raise FloatingPointError("generator produced non-finite values")
    return y


def count_parameters(net: torch.nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# Discriminators
#
# Every discriminator returns a list with one ``(score, features)`` pair per
# sub-discriminator, where ``features`` are the hidden activations ordered
# from shallow to deep (used by feature matching).
# ---------------------------------------------------------------------------


DISCRIMINATOR_KINDS = ("pwg", "melgan", "melgan_ms", "hifigan_mp", "hifigan_ms",
                       "hifigan_msmp", "stylemelgan")

MELGAN_CHANNELS = (16, 64, 256, 1024, 1024, 1024, 1)
MELGAN_KERNELS = (15, 41, 41, 41, 41, 5, 3)
HIFIGAN_MP_CHANNELS = (4, 16, 64, 256, 1024, 1)
HIFIGAN_MS_CHANNELS = (16, 16, 32, 64, 128, 256, 512, 1)
HIFIGAN_MS_KERNELS = (15, 41, 41, 41, 41, 41, 5, 3)
HIFIGAN_MS_STRIDES = (1, 2, 2, 4, 4, 1, 1, 1)


@dataclass(frozen=True)
class DiscriminatorConfig:
    kind: str = "pwg"
    periods: tuple[int, ...] = (2, 3, 5, 7)
    pwg_layers: int = 10
    pwg_channels: int = 80
    melgan_scale: int = 4
    melgan_subdiscriminators: int = 3
    stylemelgan_bands: int = 4
    stylemelgan_channels: tuple[int, ...] = (16, 64, 256, 512, 512, 512, 1)

    def __post_init__(self):
        if self.kind not in DISCRIMINATOR_KINDS:
            raise ValueError(f"unknown discriminator kind {self.kind!r}; "
                             f"expected one of {DISCRIMINATOR_KINDS}")
        object.__setattr__(self, "periods", tuple(self.periods))
        object.__setattr__(self, "stylemelgan_channels", tuple(self.stylemelgan_channels))


def _as_batch(x):
    if x.dim() == 1:
        x = x.unsqueeze(0)
    if x.dim() == 2:
        x = x.unsqueeze(1)
    return x


class PWGDiscriminator(torch.nn.Module):
    """Stack of dilated 1-D convolutions; dilation grows linearly 1..8 over layers 2-9."""

    def __init__(self, layers=10, channels=80, kernel_size=3, negative_slope=0.2):
        super().__init__()
        self.convs = torch.nn.ModuleList()
        in_ch = 1
        for i in range(layers - 1):
            dilation = 1 if i == 0 else i
            self.convs.append(torch.nn.Conv1d(in_ch, channels, kernel_size, dilation=dilation,
                                              padding=(kernel_size - 1) // 2 * dilation))
            in_ch = channels
        self.last = torch.nn.Conv1d(in_ch, 1, kernel_size, padding=(kernel_size - 1) // 2)
        self.negative_slope = negative_slope

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.negative_slope)
            feats.append(x)
        return self.last(x), feats


class MelGANDiscriminator(torch.nn.Module):
    """MelGAN block: wide first conv, grouped strided convs, then two narrow convs."""

    def __init__(self, channels=MELGAN_CHANNELS, kernels=MELGAN_KERNELS, stride=4,
                 negative_slope=0.2, in_channels=1):
        super().__init__()
        assert len(channels) == len(kernels) == 7
        self.convs = torch.nn.ModuleList()
        self.convs.append(torch.nn.Conv1d(in_channels, channels[0], kernels[0],
                                          padding=kernels[0] // 2, padding_mode="reflect"))
        for i in range(1, 5):
            cin, cout = channels[i - 1], channels[i]
            self.convs.append(torch.nn.Conv1d(cin, cout, kernels[i], stride=stride,
                                              padding=kernels[i] // 2, groups=max(cin // 4, 1)))
        self.convs.append(torch.nn.Conv1d(channels[4], channels[5], kernels[5], padding=kernels[5] // 2))
        self.last = torch.nn.Conv1d(channels[5], channels[6], kernels[6], padding=kernels[6] // 2)
        self.negative_slope = negative_slope

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.negative_slope)
            feats.append(x)
        return self.last(x), feats


class HiFiGANPeriodDiscriminator(torch.nn.Module):
    """Folds the waveform into (T / period, period) and applies (k, 1) 2-D convolutions."""

    def __init__(self, period, channels=HIFIGAN_MP_CHANNELS, kernel_size=5, stride=3,
                 negative_slope=0.1):
        super().__init__()
        self.period = period
        self.convs = torch.nn.ModuleList()
        in_ch = 1
        for ch in channels[:-1]:
            self.convs.append(torch.nn.Conv2d(in_ch, ch, (kernel_size, 1), (stride, 1),
                                              padding=(kernel_size // 2, 0)))
            in_ch = ch
        self.last = torch.nn.Conv2d(in_ch, channels[-1], (kernel_size, 1), (stride, 1),
                                    padding=(kernel_size // 2, 0))
        self.negative_slope = negative_slope

    def fold(self, x):
        b, c, t = x.shape
        pad = (-t) % self.period
        if pad:
            x = F.pad(x, (0, pad))
        return x.view(b, c, (t + pad) // self.period, self.period)

    def forward(self, x):
        x = self.fold(x)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.negative_slope)
            feats.append(x)
        return torch.flatten(self.last(x), 2), feats


class HiFiGANScaleDiscriminator(torch.nn.Module):
    def __init__(self, channels=HIFIGAN_MS_CHANNELS, kernels=HIFIGAN_MS_KERNELS,
                 strides=HIFIGAN_MS_STRIDES, negative_slope=0.1):
        super().__init__()
        self.convs = torch.nn.ModuleList()
        in_ch = 1
        for ch, k, s in zip(channels[:-1], kernels[:-1], strides[:-1]):
            groups = 4 if k == 41 and in_ch % 4 == 0 and ch % 4 == 0 else 1
            self.convs.append(torch.nn.Conv1d(in_ch, ch, k, s, padding=k // 2, groups=groups))
            in_ch = ch
        self.last = torch.nn.Conv1d(in_ch, channels[-1], kernels[-1], strides[-1],
                                    padding=kernels[-1] // 2)
        self.negative_slope = negative_slope

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.negative_slope)
            feats.append(x)
        return self.last(x), feats


class _Resampled(torch.nn.Module):
    """Apply a fixed pre-processing step before a sub-discriminator."""

    def __init__(self, pre, inner):
        super().__init__()
        self.pre = pre
        self.inner = inner

    def forward(self, x):
        return self.inner(self.pre(x))


class _Subband(torch.nn.Module):
    def __init__(self, index):
        super().__init__()
        self.index = index

    def forward(self, bands):
        return bands[:, self.index:self.index + 1]


class Discriminator(torch.nn.Module):
    """Container of sub-discriminators sharing one input."""

    def __init__(self, config: DiscriminatorConfig, subs, frontend=None):
        super().__init__()
        self.config = config
        self.subs = torch.nn.ModuleList(subs)
        self.frontend = frontend

    def forward(self, x):
        x = _as_batch(x)
        if self.frontend is not None:
            x = self.frontend(x)
        return [sub(x) for sub in self.subs]


def build_discriminator(config: DiscriminatorConfig | None = None) -> Discriminator:
    c = config or DiscriminatorConfig()
    if c.kind == "pwg":
        return Discriminator(c, [PWGDiscriminator(c.pwg_layers, c.pwg_channels)])
    if c.kind == "melgan":
        return Discriminator(c, [MelGANDiscriminator()])
    if c.kind == "melgan_ms":
        subs = [_Resampled(torch.nn.AvgPool1d(c.melgan_scale, c.melgan_scale), MelGANDiscriminator())
                for _ in range(c.melgan_subdiscriminators)]
        return Discriminator(c, subs)
    if c.kind == "hifigan_mp":
        return Discriminator(c, _period_subs(c))
    if c.kind == "hifigan_ms":
        return Discriminator(c, _scale_subs())
    if c.kind == "hifigan_msmp":
        return Discriminator(c, _scale_subs() + _period_subs(c))
    # stylemelgan: one reduced-width MelGAN discriminator per PQMF subband
    subs = [_Resampled(_Subband(i), MelGANDiscriminator(channels=c.stylemelgan_channels))
            for i in range(c.stylemelgan_bands)]
    return Discriminator(c, subs, frontend=PQMF(c.stylemelgan_bands))


def _period_subs(c):
    return [HiFiGANPeriodDiscriminator(p) for p in c.periods]


def _scale_subs():
    pools = [torch.nn.Identity(),
             torch.nn.AvgPool1d(4, 2, padding=2),
             torch.nn.Sequential(torch.nn.AvgPool1d(4, 2, padding=2), torch.nn.AvgPool1d(4, 2, padding=2))]
    return [_Resampled(p, HiFiGANScaleDiscriminator()) for p in pools]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()


def network_config(net: torch.nn.Module) -> dict:
    c = net.config
    kind = "generator" if isinstance(c, GeneratorConfig) else "discriminator"
    return {"type": kind, **asdict(c)}


def network_from_config(config: dict) -> torch.nn.Module:
    config = dict(config)
    kind = config.pop("type")
    if kind == "generator":
        return build_generator(GeneratorConfig(**config))
    if kind == "discriminator":
        return build_discriminator(DiscriminatorConfig(**config))
    raise ValueError(f"unknown network type {kind!r}")


@dataclass
class Checkpoint:
    networks: dict[str, torch.nn.Module]
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, networks: dict[str, torch.nn.Module], extra: dict | None = None):
    """Store configs, a hash of each config and the parameter tensors."""
    payload = {"networks": {}, "extra": extra or {}}
    for name, net in networks.items():
        cfg = network_config(net)
        payload["networks"][name] = {"config": cfg, "config_hash": config_hash(cfg),
                                     "state": net.state_dict()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    nets = {}
    for name, entry in payload["networks"].items():
        if config_hash(entry["config"]) != entry["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch for network {name!r}")
        net = network_from_config(entry["config"])
        net.load_state_dict(entry["state"])
        net.eval()
        nets[name] = net
    return Checkpoint(nets, payload.get("extra", {}))
