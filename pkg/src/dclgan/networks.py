"""Generators, PatchGAN discriminators, projection heads and light networks."""

from __future__ import annotations

from collections import OrderedDict

import torch
import torch.nn as nn

from .config import DEFAULT_NCE_LAYERS, AblationFlags, NetConfig
from .errors import ConfigError
from .features import FeatureLayer, FeatureStack


class BlurDownsample(nn.Module):
    """3x3 binomial low-pass filter followed by stride-2 subsampling."""

    def __init__(self, channels: int):
        super().__init__()
        a = torch.tensor([1.0, 2.0, 1.0])
        filt = (a[:, None] * a[None, :]) / 16.0
        self.register_buffer("filt", filt[None, None].repeat(channels, 1, 1, 1))
        self.pad = nn.ReflectionPad2d(1)
        self.channels = channels

    def forward(self, x):
        return nn.functional.conv2d(self.pad(x), self.filt, stride=2, groups=self.channels)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x):
        return x + self.block(x)


class DownBlock(nn.Module):
    """Stride-2 downsampling. The conv output (before norm) is a feature tap.

    With ``antialias`` the conv runs at stride 1 and a blur-pool halves the
    resolution afterwards; otherwise the conv itself has stride 2.
    """

    def __init__(self, cin: int, cout: int, antialias: bool):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=1 if antialias else 2, padding=1, bias=False)
        self.norm = nn.InstanceNorm2d(cout, affine=True)
        self.act = nn.ReLU(True)
        self.pool = BlurDownsample(cout) if antialias else nn.Identity()

    def forward(self, x):
        tap = self.conv(x)
        return self.pool(self.act(self.norm(tap))), tap


class Encoder(nn.Module):
    """Generator front half: stem, two downsampling blocks, residual blocks 1..5."""

    def __init__(self, width: int = 64, n_blocks: int = 5, antialias: bool = True):
        super().__init__()
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, width, 7, bias=False),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(True),
        )
        self.down1 = DownBlock(width, width * 2, antialias)
        self.down2 = DownBlock(width * 2, width * 4, antialias)
        self.blocks = nn.ModuleList(ResnetBlock(width * 4) for _ in range(n_blocks))
        self.channels = {"rgb": 3, "down1": width * 2, "down2": width * 4}
        self.channels.update({f"res{i + 1}": width * 4 for i in range(n_blocks)})

    def forward(self, x, layers=(), stop_early: bool = False):
        """Return ``(hidden, taps)``; ``taps`` maps each requested layer name to its activation.

        With ``stop_early`` the pass ends at the deepest requested tap and
        ``hidden`` is ``None``.
        """
        wanted = set(layers)
        unknown = wanted - set(self.channels)
        if unknown:
            raise KeyError(f"unknown feature taps {sorted(unknown)}")
        taps = {}
        if "rgb" in wanted:
            taps["rgb"] = x
        h = self.stem(x)
        h, t = self.down1(h)
        if "down1" in wanted:
            taps["down1"] = t
        h, t = self.down2(h)
        if "down2" in wanted:
            taps["down2"] = t
        for i, block in enumerate(self.blocks):
            if stop_early and len(taps) == len(wanted):
                return None, taps
            h = block(h)
            name = f"res{i + 1}"
            if name in wanted:
                taps[name] = h
        return (None if stop_early else h), taps


class Decoder(nn.Module):
    """Remaining residual blocks, two transposed-conv upsampling blocks, 7x7 output conv + tanh."""

    def __init__(self, width: int = 64, n_blocks: int = 4):
        super().__init__()
        dim = width * 4
        layers: list[nn.Module] = [ResnetBlock(dim) for _ in range(n_blocks)]
        for cin, cout in ((dim, dim // 2), (dim // 2, dim // 4)):
            layers += [
                nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1, bias=False),
                nn.InstanceNorm2d(cout, affine=True),
                nn.ReLU(True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(width, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, h):
        return self.model(h)


class Generator(nn.Module):
    def __init__(self, encoder: Encoder, decoder: Decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, x, layers=()):
        """Translate ``x``. With ``layers`` also return the encoder taps."""
        s = x.shape[-1]
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2] != s or s % 4:
            raise ValueError(f"generator expects (B, 3, s, s) with s divisible by 4, got {tuple(x.shape)}")
        h, taps = self.encoder(x, layers)
        out = self.decoder(h)
        return (out, taps) if layers else out


def build_generator(cfg: NetConfig, encoder: Encoder | None = None) -> Generator:
    enc = encoder or Encoder(cfg.base_width, 5, cfg.antialias)
    return Generator(enc, Decoder(cfg.base_width, cfg.n_residual_blocks - 5))


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: five 4x4 conv stages, raw scores (no sigmoid)."""

    def __init__(self, width: int = 64):
        super().__init__()
        seq: list[nn.Module] = [nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        chans = [width, width * 2, width * 4, width * 8]
        for i, stride in enumerate((2, 2, 1)):
            seq += [
                nn.Conv2d(chans[i], chans[i + 1], 4, stride, 1, bias=False),
                nn.InstanceNorm2d(chans[i + 1], affine=True),
                nn.LeakyReLU(0.2, True),
            ]
        seq.append(nn.Conv2d(chans[-1], 1, 4, 1, 1))
        self.model = nn.Sequential(*seq)

    def forward(self, x):
        return self.model(x)


class ProjectionHeads(nn.Module):
    """One two-layer MLP per feature tap, mapping ``C_l`` channels to ``out_dim``."""

    def __init__(self, channels: dict[str, int], out_dim: int = 256, hidden: int = 256):
        super().__init__()
        self.heads = nn.ModuleDict(
            {
                name: nn.Sequential(nn.Linear(c, hidden), nn.ReLU(True), nn.Linear(hidden, out_dim))
                for name, c in channels.items()
            }
        )
        self.out_dim = out_dim

    def forward(self, name: str, feats: torch.Tensor) -> torch.Tensor:
        return self.heads[name](feats)


class LightNetwork(nn.Module):
    """Pools a set of projected patch features into one small vector.

    1x1 conv over patches -> ReLU -> mean over patches -> linear -> ReLU -> linear.
    The pooling makes the output independent of patch order.
    """

    def __init__(self, in_dim: int = 256, out_dim: int = 64):
        super().__init__()
        self.in_dim = in_dim
        self.conv = nn.Conv1d(in_dim, out_dim, 1)
        self.mlp = nn.Sequential(nn.Linear(out_dim, out_dim), nn.ReLU(True), nn.Linear(out_dim, out_dim))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        # feats: (B, P, in_dim) or (P, in_dim)
        squeeze = feats.dim() == 2
        if squeeze:
            feats = feats[None]
        if feats.shape[-1] != self.in_dim:
            raise ValueError(f"light network expects {self.in_dim}-dim features, got {feats.shape[-1]}")
        h = torch.relu(self.conv(feats.transpose(1, 2))).mean(dim=2)
        out = self.mlp(h)
        return out[0] if squeeze else out


def light_forward(net: LightNetwork, stack: FeatureStack | torch.Tensor) -> torch.Tensor:
    """Apply a light network to a feature stack (all layers' patches pooled together)."""
    if isinstance(stack, FeatureStack):
        stack = torch.cat([l.features for l in stack], dim=1)
    return net(stack)


def init_weights(net: nn.Module, gain: float = 1.0) -> nn.Module:
    """Xavier-normal weights (scaled by ``gain``), zero biases, identity affine norms."""
    for m in net.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_normal_(m.weight, gain=gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return net


def sample_features(
    taps: dict[str, torch.Tensor],
    heads: ProjectionHeads,
    layers,
    num_patches: int,
    locations: list[torch.Tensor] | None = None,
    generator: torch.Generator | None = None,
) -> FeatureStack:
    """Sample locations of each tap (without replacement) and project them.

    Passing ``locations`` (one index tensor per layer) reuses a previous draw,
    which is how a query stack is aligned with its key stack.
    """
    stack = FeatureStack()
    for i, name in enumerate(layers):
        feat = taps[name]
        b, c, h, w = feat.shape
        flat = feat.flatten(2).transpose(1, 2)  # (B, HW, C)
        if locations is not None:
            idx = torch.as_tensor(locations[i], dtype=torch.long)
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= h * w):
                raise IndexError(f"layer {name}: locations out of range for {h}x{w}")
        else:
            idx = torch.randperm(h * w, generator=generator)[: min(num_patches, h * w)]
        proj = heads(name, flat[:, idx.to(flat.device)])
        stack.layers.append(FeatureLayer(name, proj, idx, (h, w)))
    return stack


def encoder_features(
    enc: Encoder,
    heads: ProjectionHeads,
    img: torch.Tensor,
    layer_ids=DEFAULT_NCE_LAYERS,
    num_patches: int = 256,
    locations: list[torch.Tensor] | None = None,
    generator: torch.Generator | None = None,
) -> FeatureStack:
    _, taps = enc(img, layer_ids, stop_early=True)
    return sample_features(taps, heads, layer_ids, num_patches, locations, generator)


class NetBundle(nn.Module):
    """All trainable networks of one run.

    Absent networks (``F``/``D_X`` in single-direction mode, the light
    networks outside SimDCL) are ``None``.
    """

    NAMES = ("G", "F", "D_X", "D_Y", "H_X", "H_Y", "H_xr", "H_xf", "H_yr", "H_yf")

    def __init__(self, mode: str, flags: AblationFlags, cfg: NetConfig, layers):
        super().__init__()
        self.mode = mode
        self.flags = flags
        self.layers = tuple(layers)
        for n in self.NAMES:
            setattr(self, n, None)

    def networks(self) -> "OrderedDict[str, nn.Module]":
        return OrderedDict((n, getattr(self, n)) for n in self.NAMES if getattr(self, n) is not None)

    def generator_side(self) -> list[nn.Parameter]:
        nets = [m for n, m in self.networks().items() if not n.startswith("D_")]
        return _unique_params(nets)

    def discriminator_side(self) -> list[nn.Parameter]:
        return _unique_params([m for n, m in self.networks().items() if n.startswith("D_")])

    def embedding_X(self):
        return self.G.encoder, self.H_X

    def embedding_Y(self):
        # without F the Y-domain embedding reuses G's encoder with its own heads
        enc = self.F.encoder if self.F is not None else self.G.encoder
        return enc, self.H_Y


def _unique_params(modules) -> list[nn.Parameter]:
    seen, out = set(), []
    for m in modules:
        for p in m.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def build_netbundle(
    mode: str = "DCL",
    flags: AblationFlags | None = None,
    cfg: NetConfig | None = None,
    layers=None,
) -> NetBundle:
    """Construct and xavier-initialise every network the mode and flags call for.

    Initialisation draws from the global torch RNG; seed it first for
    reproducible weights.
    """
    flags = flags or AblationFlags()
    cfg = cfg or NetConfig()
    flags.validate(mode)
    if layers is None:
        layers = (("rgb",) if flags.include_rgb_layer else ()) + DEFAULT_NCE_LAYERS
    layers = tuple(layers)
    if flags.include_rgb_layer and "rgb" not in layers:
        raise ConfigError("include_rgb_layer requires 'rgb' among the feature layers")

    b = NetBundle(mode, flags, cfg, layers)
    b.G = build_generator(cfg)
    b.D_Y = PatchDiscriminator(cfg.base_width)
    channels = {n: b.G.encoder.channels[n] for n in layers}
    b.H_X = ProjectionHeads(channels, cfg.proj_dim)
    if flags.single_direction:
        b.H_Y = ProjectionHeads(channels, cfg.proj_dim)
    else:
        if flags.shared_embedding:
            b.F = build_generator(cfg, encoder=b.G.encoder)
            b.H_Y = b.H_X
        else:
            b.F = build_generator(cfg)
            b.H_Y = ProjectionHeads(channels, cfg.proj_dim)
        b.D_X = PatchDiscriminator(cfg.base_width)
    if mode == "SimDCL":
        for n in ("H_xr", "H_xf", "H_yr", "H_yf"):
            setattr(b, n, LightNetwork(cfg.proj_dim, cfg.light_dim))
    for net in b.networks().values():
        init_weights(net, cfg.init_gain)
    return b
