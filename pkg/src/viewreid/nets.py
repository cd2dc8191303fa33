"""The four trainable maps: identity encoder, structure encoder, decoder,
multi-scale patch discriminator.

Compact CPU-friendly architectures; channel widths and the embedding size are
configurable so gradient tests can run on miniature instances of the same
topology.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class ShapeConfig:
    image_h: int = 64
    image_w: int = 32
    structure_channels: int = 3
    embed_dim: int = 64     # dimension of the contrast vector f
    id_width: int = 16      # identity encoder base width (doubles per stage)
    str_width: int = 16     # structure encoder base width
    dec_width: int = 16     # decoder base width
    disc_width: int = 16    # discriminator base width
    part_count: int = 4     # vertical parts in the identity feature map

    def __post_init__(self):
        if self.image_h % 16 or self.image_w % 16:
            raise ValueError("image size must be divisible by 16")
        if (self.image_h // 16) % self.part_count:
            raise ValueError("part_count must divide the pooled height")

    @property
    def id_feat_channels(self):
        return 8 * self.id_width

    @property
    def str_feat_channels(self):
        return 2 * self.str_width


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        return F.relu(x + h)


class IdentityEncoder(nn.Module):
    """Image -> (unit-norm contrast vector, part-pooled feature map)."""

    def __init__(self, cfg):
        super().__init__()
        w = cfg.id_width
        chans = [3, w, 2 * w, 4 * w, 8 * w]
        self.blocks = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, 2, 1) for i in range(4)
        )
        self.res = ResBlock(8 * w)
        self.embed = nn.Linear(8 * w, cfg.embed_dim)
        self.part_count = cfg.part_count

    def forward(self, x):
        h = x
        for conv in self.blocks:
            h = F.relu(conv(h))
        h = self.res(h)
        pooled = h.mean(dim=(2, 3))
        v = self.embed(pooled)
        f = v / v.norm(dim=1, keepdim=True).clamp_min(1e-12)
        f_id = F.adaptive_avg_pool2d(h, (self.part_count, 1))
        return f, f_id


class StructureEncoder(nn.Module):
    """Structure map -> spatial structure features."""

    def __init__(self, cfg):
        super().__init__()
        w = cfg.str_width
        self.convs = nn.ModuleList([
            nn.Conv2d(cfg.structure_channels, w, 3, 1, 1),
            nn.Conv2d(w, 2 * w, 3, 2, 1),
            nn.Conv2d(2 * w, 2 * w, 3, 2, 1),
            nn.Conv2d(2 * w, 2 * w, 3, 1, 1),
        ])
        self.res = nn.ModuleList(ResBlock(2 * w) for _ in range(4))

    def forward(self, s):
        h = s
        for conv in self.convs:
            h = F.relu(conv(h))
        for block in self.res:
            h = block(h)
        return h


def _adain(h, gamma, beta, eps=1e-5):
    mu = h.mean(dim=(2, 3), keepdim=True)
    var = h.var(dim=(2, 3), keepdim=True, unbiased=False)
    hn = (h - mu) / torch.sqrt(var + eps)
    return hn * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]


class AdainResBlock(nn.Module):
    """Residual block whose two normalization layers take external scale/bias."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x, g1, b1, g2, b2):
        h = F.relu(_adain(self.conv1(x), g1, b1))
        h = _adain(self.conv2(h), g2, b2)
        return x + h


class Decoder(nn.Module):
    """(identity feature map, structure features) -> image in [0,1].

    The identity feature map is flattened and linearly mapped to the
    scale/bias parameters of every adaptive-norm layer.
    """

    N_BLOCKS = 4

    def __init__(self, cfg):
        super().__init__()
        c = cfg.str_feat_channels
        w = cfg.dec_width
        self.blocks = nn.ModuleList(AdainResBlock(c) for _ in range(self.N_BLOCKS))
        self.style = nn.Linear(cfg.id_feat_channels * cfg.part_count,
                               self.N_BLOCKS * 4 * c)
        self.up1 = nn.Conv2d(c, w, 3, 1, 1)
        self.up2 = nn.Conv2d(w, max(4, w // 2), 3, 1, 1)
        self.out = nn.Conv2d(max(4, w // 2), 3, 3, 1, 1)
        self._c = c

    def forward(self, f_id, f_str):
        params = self.style(f_id.flatten(1))
        chunks = params.split(self._c, dim=1)
        h = f_str
        for i, block in enumerate(self.blocks):
            g1, b1, g2, b2 = chunks[4 * i: 4 * i + 4]
            h = block(h, g1, b1, g2, b2)
        h = F.relu(self.up1(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = F.relu(self.up2(F.interpolate(h, scale_factor=2, mode="nearest")))
        return torch.sigmoid(self.out(h))


class PatchDiscriminator(nn.Module):
    """Three patch-score branches over successively downsampled inputs."""

    N_SCALES = 3

    def __init__(self, cfg):
        super().__init__()
        w = cfg.disc_width
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(3, w, 4, 2, 1), nn.LeakyReLU(0.2),
                nn.Conv2d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2),
                nn.Conv2d(2 * w, 1, 3, 1, 1),
            )
            for _ in range(self.N_SCALES)
        )

    def forward(self, x):
        maps = []
        cur = x
        for branch in self.branches:
            maps.append(branch(cur))
            cur = F.avg_pool2d(cur, 3, 2, 1, count_include_pad=False)
        return maps


@dataclass
class NetworkBundle:
    id_enc: IdentityEncoder
    str_enc: StructureEncoder
    decoder: Decoder
    disc: PatchDiscriminator
    shapes: ShapeConfig = field(default_factory=ShapeConfig)

    def modules(self):
        return {"id_enc": self.id_enc, "str_enc": self.str_enc,
                "decoder": self.decoder, "disc": self.disc}

    def state_arrays(self):
        out = {}
        for prefix, mod in self.modules().items():
            for name, p in mod.state_dict().items():
                out[f"{prefix}.{name}"] = p.detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays):
        """Load named parameter arrays; unknown or missing names are errors."""
        expected = set(self.state_arrays())
        given = set(arrays)
        if given - expected:
            raise ValueError(f"unknown parameter names: {sorted(given - expected)[:4]}")
        if expected - given:
            raise ValueError(f"missing parameter names: {sorted(expected - given)[:4]}")
        for prefix, mod in self.modules().items():
            sd = {
                name: torch.as_tensor(arrays[f"{prefix}.{name}"])
                for name in mod.state_dict()
            }
            mod.load_state_dict(sd)

    def to_double(self):
        for mod in self.modules().values():
            mod.double()
        return self

    def train_mode(self, flag=True):
        for mod in self.modules().values():
            mod.train(flag)
        return self


def _init_module(module, gen):
    """Fan-in scaled Gaussian weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0 / np.sqrt(fan_in), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def init_networks(seed, shapes=None):
    shapes = shapes or ShapeConfig()
    gen = torch.Generator().manual_seed(int(seed))
    bundle = NetworkBundle(
        id_enc=IdentityEncoder(shapes),
        str_enc=StructureEncoder(shapes),
        decoder=Decoder(shapes),
        disc=PatchDiscriminator(shapes),
        shapes=shapes,
    )
    for mod in bundle.modules().values():
        _init_module(mod, gen)
    return bundle


def _as_batch(x, channels, h, w, name, ref_param):
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    t = t.to(ref_param.dtype)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1:] != (channels, h, w):
        raise ValueError(f"{name}: expected (*, {channels}, {h}, {w}), got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name}: non-finite values")
    return t


def encode_identity(bundle, image):
    """Image -> (f, f_id). f has unit norm (up to a safe floor at zero input)."""
    cfg = bundle.shapes
    ref = next(bundle.id_enc.parameters())
    x = _as_batch(image, 3, cfg.image_h, cfg.image_w, "image", ref)
    return bundle.id_enc(x)


def encode_structure(bundle, structure):
    cfg = bundle.shapes
    ref = next(bundle.str_enc.parameters())
    s = _as_batch(structure, cfg.structure_channels, cfg.image_h, cfg.image_w,
                  "structure", ref)
    return bundle.str_enc(s)


def decode(bundle, f_id, f_str):
    cfg = bundle.shapes
    if f_id.dim() == 3:
        f_id = f_id.unsqueeze(0)
    if f_str.dim() == 3:
        f_str = f_str.unsqueeze(0)
    if f_id.shape[1:] != (cfg.id_feat_channels, cfg.part_count, 1):
        raise ValueError(f"f_id: bad shape {tuple(f_id.shape)}")
    if f_str.shape[1:] != (cfg.str_feat_channels, cfg.image_h // 4, cfg.image_w // 4):
        raise ValueError(f"f_str: bad shape {tuple(f_str.shape)}")
    return bundle.decoder(f_id, f_str)


def discriminate(bundle, image):
    """Image -> list of raw patch score maps, one per scale."""
    cfg = bundle.shapes
    ref = next(bundle.disc.parameters())
    x = _as_batch(image, 3, cfg.image_h, cfg.image_w, "image", ref)
    return bundle.disc(x)
