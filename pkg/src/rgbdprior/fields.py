"""Density and view-dependent color fields.

A dense multiresolution grid of learned features is trilinearly interpolated,
concatenated across levels and decoded by a small MLP into a density and a
geometry feature vector. Color is decoded from that feature plus a spherical
harmonic encoding of the view direction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = "rfield-v1"
MAX_DENSITY = 1e4
DIRECTION_TOL = 1e-6

_CORNERS = torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass(frozen=True)
class EncodingConfig:
    n_levels: int = 8
    base_resolution: int = 16
    growth: float = 1.5
    n_features: int = 2
    hidden_width: int = 64
    n_hidden: int = 2
    geo_features: int = 15
    sh_degree: int = 4

    @property
    def resolutions(self) -> list[int]:
        return [int(math.floor(self.base_resolution * self.growth ** level)) for level in range(self.n_levels)]


class GridEncoding(nn.Module):
    """Multiresolution dense feature grid over the unit cube.

    Level ``l`` has ``R_l`` cells per axis and ``(R_l + 1)**3`` feature
    vertices. All levels live in one flat table; ``offsets[l]`` is the first
    row of level ``l``.
    """

    def __init__(self, config: EncodingConfig, dtype=torch.float32):
        super().__init__()
        self.resolutions = config.resolutions
        offsets = [0]
        for r in self.resolutions:
            offsets.append(offsets[-1] + (r + 1) ** 3)
        self.offsets = offsets
        self.n_features = config.n_features
        self.table = nn.Parameter(torch.empty(offsets[-1], config.n_features, dtype=dtype).uniform_(-1e-4, 1e-4))

    @property
    def out_dim(self) -> int:
        return len(self.resolutions) * self.n_features

    def stencil(self, u: torch.Tensor, level: int):
        """Flat table rows and trilinear weights of the 8 vertices around ``u``."""
        r = self.resolutions[level]
        p = u * r
        i0 = p.detach().floor().clamp(0, r - 1).long()
        frac = p - i0.to(p.dtype)
        corners = _CORNERS.to(u.device)
        idx = i0[..., None, :] + corners
        rows = self.offsets[level] + (idx[..., 0] * (r + 1) + idx[..., 1]) * (r + 1) + idx[..., 2]
        w = torch.where(corners.bool(), frac[..., None, :], 1.0 - frac[..., None, :]).prod(-1)
        return rows, w

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        feats = []
        for level in range(len(self.resolutions)):
            rows, w = self.stencil(u, level)
            feats.append((w[..., None] * self.table[rows]).sum(-2))
        return torch.cat(feats, -1)


_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
          -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_encode(d: torch.Tensor, degree: int = 4) -> torch.Tensor:
    """Real spherical harmonics of a unit direction, ``degree**2`` outputs (degree <= 4)."""
    if not 1 <= degree <= 4:
        raise ValueError("sh degree must be in [1, 4]")
    x, y, z = d.unbind(-1)
    out = [torch.full_like(x, _SH_C0)]
    if degree > 1:
        out += [-_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [_SH_C2[0] * x * y, _SH_C2[1] * y * z, _SH_C2[2] * (2 * zz - xx - yy),
                _SH_C2[3] * x * z, _SH_C2[4] * (xx - yy)]
    if degree > 3:
        out += [_SH_C3[0] * y * (3 * xx - yy), _SH_C3[1] * x * y * z, _SH_C3[2] * y * (4 * zz - xx - yy),
                _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), _SH_C3[4] * x * (4 * zz - xx - yy),
                _SH_C3[5] * z * (xx - yy), _SH_C3[6] * x * (xx - 3 * yy)]
    return torch.stack(out, -1)


def _mlp(n_in: int, width: int, n_hidden: int, n_out: int, dtype) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(n_hidden):
        layers += [nn.Linear(n_in if i == 0 else width, width, dtype=dtype), nn.ReLU()]
    layers.append(nn.Linear(width if n_hidden else n_in, n_out, dtype=dtype))
    return nn.Sequential(*layers)


class RadianceField(nn.Module):
    """Density ``sigma(x) >= 0`` and color ``c(x, d) in [0, 1]^3`` inside an axis-aligned box.

    Outside ``bounds`` the density is zero and the color equals ``background``.
    """

    def __init__(self, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), config: EncodingConfig | None = None,
                 background=(1.0, 1.0, 1.0), init_density: float = 0.1, dtype=torch.float32):
        super().__init__()
        self.config = config or EncodingConfig()
        lo, hi = (torch.as_tensor(b, dtype=dtype) for b in bounds)
        if not torch.all(hi > lo):
            raise ValueError("bounds must satisfy lo < hi on every axis")
        self.register_buffer("lo", lo)
        self.register_buffer("hi", hi)
        self.register_buffer("background", torch.as_tensor(background, dtype=dtype))
        self.init_density = float(init_density)
        cfg = self.config
        self.encoding = GridEncoding(cfg, dtype=dtype)
        self.density_net = _mlp(self.encoding.out_dim, cfg.hidden_width, cfg.n_hidden, 1 + cfg.geo_features, dtype)
        self.color_net = _mlp(cfg.geo_features + cfg.sh_degree ** 2, cfg.hidden_width, cfg.n_hidden, 3, dtype)
        last = self.density_net[-1]
        with torch.no_grad():
            last.weight[0].zero_()
            last.bias[0] = math.log(init_density)

    @property
    def bounds(self):
        return self.lo, self.hi

    def grid_parameters(self):
        return [self.encoding.table]

    def network_parameters(self):
        return list(self.density_net.parameters()) + list(self.color_net.parameters())

    def normalize(self, x: torch.Tensor):
        u = (x - self.lo) / (self.hi - self.lo)
        inside = ((u >= 0) & (u <= 1)).all(-1)
        return u.clamp(0.0, 1.0), inside

    def _density_and_features(self, x):
        u, inside = self.normalize(x)
        h = self.density_net(self.encoding(u))
        raw = h[..., 0].clamp(max=math.log(MAX_DENSITY))
        sigma = torch.where(inside, torch.exp(raw), torch.zeros_like(raw))
        return sigma, h[..., 1:], inside

    def forward(self, x: torch.Tensor, d: torch.Tensor):
        """Unchecked joint query used on the rendering hot path; returns ``(sigma, rgb)``."""
        sigma, geo, inside = self._density_and_features(x)
        d = d.expand_as(x)
        rgb = torch.sigmoid(self.color_net(torch.cat([geo, sh_encode(d, self.config.sh_degree)], -1)))
        rgb = torch.where(inside[..., None], rgb, self.background.expand_as(rgb))
        return sigma, rgb

    def query_density(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.lo.dtype)
        if not torch.isfinite(x).all():
            raise ValueError("query_density: non-finite coordinates")
        return self._density_and_features(x)[0]

    def query_color(self, x: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.lo.dtype)
        d = torch.as_tensor(d, dtype=self.lo.dtype)
        if not (torch.isfinite(x).all() and torch.isfinite(d).all()):
            raise ValueError("query_color: non-finite input")
        if (d.norm(dim=-1) - 1.0).abs().max() > DIRECTION_TOL:
            raise ValueError("query_color: view direction must be unit length")
        return self.forward(x, d)[1]

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "encoding_config": asdict(self.config),
            "bounds": [self.lo.tolist(), self.hi.tolist()],
            "background": self.background.tolist(),
            "init_density": self.init_density,
            "dtype": str(self.lo.dtype).replace("torch.", ""),
        }
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "RadianceField":
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
            field = cls(bounds=meta["bounds"], config=EncodingConfig(**meta["encoding_config"]),
                        background=meta["background"], init_density=meta["init_density"],
                        dtype=getattr(torch, meta["dtype"]))
            field.load_state_dict({k: torch.from_numpy(archive[k]) for k in archive.files if k != "__meta__"})
        return field
