"""Rationality model stack: base feature extractor plus supervised, similarity and domain heads.

Two base extractors are provided. ``sopa`` encodes each composite raster on its
own; ``fopa`` encodes the background once into a feature grid and the
foreground once per scale bin, then fuses the two at each placement's cell.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .scene import Scene, background_raster, box_contained, rasterize_many
from .streams import torch_seed

SOPA_STYLE = "sopa"
FOPA_STYLE = "fopa"
STYLES = (SOPA_STYLE, FOPA_STYLE)
GROUPS = ("theta_opa", "theta_sup", "theta_sim", "theta_dom")
LOGIT_CLAMP = 30.0
CHECKPOINT_FORMAT = "placement-ssl/checkpoint"


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = float(coeff)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.coeff * grad_output, None


def grad_reverse(x: torch.Tensor, coeff: float) -> torch.Tensor:
    """Identity on the forward pass; scales the incoming gradient by ``-coeff``."""
    return _GradReverse.apply(x, coeff)


def _conv(cin, cout, stride):
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


def soft_max_pool(h: torch.Tensor, temperature: float) -> torch.Tensor:
    """Log-mean-exp over the spatial axes: a smooth stand-in for the max."""
    flat = h.flatten(2) / temperature
    return temperature * (torch.logsumexp(flat, dim=2) - math.log(flat.shape[2]))


class SopaEncoder(nn.Module):
    """Three convolutions over the composite, pooled by both mean and a soft max.

    The max-like pool keeps local evidence (a single unsupported cell under the
    object) that averaging would wash out; the mean pool keeps extent. A hard
    max would put kinks in the loss wherever two cells tie.
    """

    temperature = 0.05

    def __init__(self, in_channels: int, channels: tuple[int, int], feature_dim: int):
        super().__init__()
        c1, c2 = channels
        self.net = nn.Sequential(
            _conv(in_channels, c1, 1), nn.SiLU(),
            _conv(c1, c2, 2), nn.SiLU(),
            _conv(c2, feature_dim, 2), nn.SiLU(),
        )
        self.proj = nn.Linear(2 * feature_dim, feature_dim)
        self.act = nn.SiLU()

    def forward(self, composites):
        h = self.net(composites)
        return self.act(self.proj(torch.cat([h.mean(dim=(2, 3)), soft_max_pool(h, self.temperature)], dim=1)))


class FopaEncoder(nn.Module):
    """Two-level encoder-decoder over the background, a per-scale foreground MLP and a fusion layer."""

    def __init__(self, bg_channels: int, fg_channels: int, channels: tuple[int, int], feature_dim: int):
        super().__init__()
        c1, c2 = channels
        self.enc1 = _conv(bg_channels, c1, 1)
        self.enc2 = _conv(c1, c2, 2)
        self.enc3 = _conv(c2, c2, 2)
        self.dec = _conv(2 * c2, feature_dim, 1)
        self.fg = nn.Sequential(nn.Linear(fg_channels + 1, c2), nn.SiLU(), nn.Linear(c2, feature_dim))
        self.fuse = nn.Linear(2 * feature_dim, feature_dim)
        self.act = nn.SiLU()

    def background_grid(self, bg):
        e1 = self.act(self.enc1(bg))
        e2 = self.act(self.enc2(e1))
        e3 = self.act(self.enc3(e2))
        up = nn.functional.interpolate(e3, scale_factor=2, mode="nearest")
        return self.act(self.dec(torch.cat([up, e2], dim=1)))

    def foreground_vectors(self, fg_summary, scale_codes):
        """``fg_summary``: (B, C'), ``scale_codes``: (S,) -> (B, S, d)."""
        b, s = fg_summary.shape[0], scale_codes.shape[0]
        x = torch.cat([fg_summary[:, None, :].expand(b, s, -1), scale_codes[None, :, None].expand(b, s, 1)], 2)
        return self.fg(x)

    def combine(self, bg_cells, fg_vecs):
        return self.act(self.fuse(torch.cat([bg_cells, fg_vecs], dim=-1)))


def _head(d_in, hidden):
    return nn.Sequential(nn.Linear(d_in, hidden), nn.SiLU(), nn.Linear(hidden, 1))


class ModelStack(nn.Module):
    """Parameter groups ``theta_opa`` (extractor), ``theta_sup``, ``theta_sim`` and ``theta_dom``."""

    def __init__(self, style: str = SOPA_STYLE, feature_dim: int = 32, n_kinds: int = 3,
                 resolution: int = 32, channels: tuple[int, int] = (8, 16), sup_hidden: int = 32,
                 sim_hidden: int = 64, dom_hidden: int = 32, n_scale_bins: int = 3,
                 sampling_range: tuple[float, float] = (0.08, 0.4), seed: int = 0,
                 dtype: str = "float32"):
        super().__init__()
        if style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {style!r}")
        if resolution % 4:
            raise ValueError("resolution must be a multiple of 4")
        self.config = dict(style=style, feature_dim=feature_dim, n_kinds=n_kinds, resolution=resolution,
                           channels=list(channels), sup_hidden=sup_hidden, sim_hidden=sim_hidden,
                           dom_hidden=dom_hidden, n_scale_bins=n_scale_bins,
                           sampling_range=list(sampling_range), seed=seed, dtype=dtype)
        self.style = style
        self.feature_dim = feature_dim
        self.resolution = resolution
        self.grid = resolution // 2
        self.n_kinds = n_kinds
        lo, hi = sampling_range
        self.scale_edges = np.exp(np.linspace(math.log(lo), math.log(hi), n_scale_bins + 1))
        self.pretrained = False
        self.pass_token = 0

        bg_ch = n_kinds + 2
        fg_ch = n_kinds + 3
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(torch_seed(seed, "init"))
            if style == SOPA_STYLE:
                self.theta_opa = SopaEncoder(bg_ch + fg_ch, tuple(channels), feature_dim)
            else:
                self.theta_opa = FopaEncoder(bg_ch, fg_ch, tuple(channels), feature_dim)
            self.theta_sup = _head(feature_dim, sup_hidden)
            sim = _head(2 * feature_dim, sim_hidden)
            self.theta_sim = sim
            self.theta_dom = _head(sim_hidden, dom_hidden)
        self.to(getattr(torch, dtype))

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def group_parameters(self, group: str):
        return list(getattr(self, group).parameters())

    def new_pass(self) -> int:
        self.pass_token += 1
        return self.pass_token

    # -- scale bins -------------------------------------------------------
    @property
    def scale_centers(self) -> np.ndarray:
        e = self.scale_edges
        return np.sqrt(e[:-1] * e[1:])

    def scale_bin(self, widths) -> np.ndarray:
        idx = np.searchsorted(self.scale_edges, np.asarray(widths, dtype=np.float64), side="right") - 1
        return np.clip(idx, 0, len(self.scale_edges) - 2)

    def scale_codes(self) -> torch.Tensor:
        lo, hi = self.scale_edges[0], self.scale_edges[-1]
        codes = (np.log(self.scale_centers) - math.log(lo)) / (math.log(hi) - math.log(lo))
        return torch.as_tensor(codes, dtype=self.dtype)

    def cell_of(self, boxes) -> tuple[np.ndarray, np.ndarray]:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        x, y = b[:, 0], b[:, 1]
        if np.any((x < 0) | (x > 1) | (y < 0) | (y > 1)):
            raise ValueError("placement center falls outside the feature grid")
        g = self.grid
        return np.minimum((y * g).astype(np.int64), g - 1), np.minimum((x * g).astype(np.int64), g - 1)


def _tensor(a, stack) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(a), dtype=stack.dtype)


def _fg_summary(scene: Scene) -> np.ndarray:
    return scene.foreground.fg_raster.mean(axis=(1, 2))


def extract_features(stack: ModelStack, scene: Scene, placements) -> torch.Tensor:
    """Rationality features ``(K, d)`` for the placements of one scene."""
    boxes = np.asarray(placements, dtype=np.float64).reshape(-1, 4)
    return encode_groups(stack, [(scene, boxes)])


def encode_groups(stack: ModelStack, groups) -> torch.Tensor:
    """Features for ``[(scene, boxes), ...]`` concatenated in order: ``(sum K, d)``."""
    groups = [(s, np.asarray(b, dtype=np.float64).reshape(-1, 4)) for s, b in groups]
    groups = [(s, b) for s, b in groups if len(b)]
    if not groups:
        return torch.zeros((0, stack.feature_dim), dtype=stack.dtype)
    if stack.style == SOPA_STYLE:
        composites = np.concatenate([rasterize_many(s, b, stack.resolution) for s, b in groups], axis=0)
        return stack.theta_opa(_tensor(composites, stack))
    enc = stack.theta_opa
    for _, b in groups:
        if not np.all(box_contained(b)):
            raise ValueError("placement outside the image")
    bg = np.stack([background_raster(s.region_map, len(s.palette), stack.resolution) for s, _ in groups])
    grids = enc.background_grid(_tensor(bg, stack))  # (G, d, g, g)
    fg = enc.foreground_vectors(_tensor(np.stack([_fg_summary(s) for s, _ in groups]), stack),
                                stack.scale_codes())  # (G, S, d)
    gi, rows, cols, bins = [], [], [], []
    for i, (_, b) in enumerate(groups):
        r, c = stack.cell_of(b)
        gi.append(np.full(len(b), i))
        rows.append(r)
        cols.append(c)
        bins.append(stack.scale_bin(b[:, 2]))
    gi, rows, cols, bins = (torch.as_tensor(np.concatenate(v)) for v in (gi, rows, cols, bins))
    bg_cells = grids.permute(0, 2, 3, 1)[gi, rows, cols]
    return enc.combine(bg_cells, fg[gi, bins])


def _sigmoid(logits):
    return torch.sigmoid(logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


def predict_rationality(stack: ModelStack, f: torch.Tensor) -> torch.Tensor:
    return _sigmoid(stack.theta_sup(f)).squeeze(-1)


def predict_similarity(stack: ModelStack, f_i: torch.Tensor, f_j: torch.Tensor):
    """Similarity feature (penultimate activation) and score for ordered feature pairs."""
    if f_i.shape[-1] != stack.feature_dim or f_j.shape[-1] != stack.feature_dim:
        raise ValueError(f"expected features of width {stack.feature_dim}, got {f_i.shape[-1]} and {f_j.shape[-1]}")
    first, last = stack.theta_sim[0], stack.theta_sim[2]
    hidden = nn.functional.silu(first(torch.cat([f_i, f_j], dim=-1)))
    return hidden, _sigmoid(last(hidden)).squeeze(-1)


def predict_domain(stack: ModelStack, sim_feature: torch.Tensor, coeff: float) -> torch.Tensor:
    """Probability that a similarity feature comes from the labeled pool (label 1)."""
    return _sigmoid(stack.theta_dom(grad_reverse(sim_feature, coeff))).squeeze(-1)


@torch.no_grad()
def predict_record_scores(stack: ModelStack, records, chunk: int = 16) -> list[np.ndarray]:
    """Rationality scores per record, as float64 arrays."""
    out = []
    for start in range(0, len(records), chunk):
        part = records[start:start + chunk]
        p = predict_rationality(stack, encode_groups(stack, [(r.scene, r.placements) for r in part]))
        p = p.double().numpy()
        offsets = np.cumsum([0] + [r.K for r in part])
        out.extend(p[a:b] for a, b in zip(offsets[:-1], offsets[1:]))
    return out


@dataclass
class Heatmap:
    scores: np.ndarray  # (S, g, g); invalid cells hold 0
    valid: np.ndarray  # (S, g, g) bool
    widths: np.ndarray  # (S,)
    aspect: float

    def placement(self, s: int, r: int, c: int) -> np.ndarray:
        g = self.scores.shape[1]
        w = float(self.widths[s])
        return np.array([(c + 0.5) / g, (r + 0.5) / g, w, self.aspect * w])


def heatmap_boxes(grid: int, widths, aspect: float) -> np.ndarray:
    """Boxes centered on every cell for every width: ``(S, g, g, 4)``."""
    centers = (np.arange(grid) + 0.5) / grid
    widths = np.asarray(widths, dtype=np.float64)
    s = len(widths)
    boxes = np.empty((s, grid, grid, 4))
    boxes[..., 0] = centers[None, None, :]
    boxes[..., 1] = centers[None, :, None]
    boxes[..., 2] = widths[:, None, None]
    boxes[..., 3] = aspect * widths[:, None, None]
    return boxes


@torch.no_grad()
def heatmap(stack: ModelStack, scene: Scene, scale_bins=None) -> Heatmap:
    """Scores of the placement centered on each feature-grid cell, per scale.

    ``scale_bins`` are box widths (default: the stack's bin centers). Cells
    whose box leaves the image are marked invalid and scored 0.
    """
    widths = stack.scale_centers if scale_bins is None else np.asarray(scale_bins, dtype=np.float64)
    if widths.size == 0:
        raise ValueError("scale_bins must not be empty")
    g = stack.grid
    aspect = scene.foreground.aspect
    boxes = heatmap_boxes(g, widths, aspect)
    valid = box_contained(boxes.reshape(-1, 4)).reshape(len(widths), g, g)
    scores = np.zeros((len(widths), g, g))
    if stack.style == FOPA_STYLE:
        enc = stack.theta_opa
        bg = background_raster(scene.region_map, len(scene.palette), stack.resolution)
        grid = enc.background_grid(_tensor(bg[None], stack))[0].permute(1, 2, 0)  # g, g, d
        fg = enc.foreground_vectors(_tensor(_fg_summary(scene)[None], stack), stack.scale_codes())[0]
        bins = stack.scale_bin(widths)
        for s, b in enumerate(bins):
            f = enc.combine(grid, fg[b].expand(g, g, -1))
            scores[s] = predict_rationality(stack, f).double().numpy()
        scores[~valid] = 0.0
    else:
        flat = boxes.reshape(-1, 4)
        idx = np.flatnonzero(valid.reshape(-1))
        vals = np.zeros(len(flat))
        for start in range(0, len(idx), 512):
            part = idx[start:start + 512]
            vals[part] = predict_rationality(stack, extract_features(stack, scene, flat[part])).double().numpy()
        scores = vals.reshape(len(widths), g, g)
    return Heatmap(scores, valid, widths, aspect)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _flat_group(stack, group):
    params = dict(getattr(stack, group).named_parameters())
    names = sorted(params)
    flat = np.concatenate([params[n].detach().double().numpy().ravel() for n in names])
    return flat, [(n, list(params[n].shape)) for n in names]


def save_checkpoint(path, stack: ModelStack, optimizer=None, meta: dict | None = None,
                    arrays: dict | None = None) -> None:
    """Write an ``.npz`` holding flat parameters per group, optimizer moments and metadata."""
    payload, layout = {}, {}
    for group in GROUPS:
        payload[group], layout[group] = _flat_group(stack, group)
    optim_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        optim_meta = {"param_groups": sd["param_groups"], "state_keys": {}}
        for pid, st in sd["state"].items():
            keys = []
            for k, v in st.items():
                payload[f"optim/{pid}/{k}"] = v.detach().double().numpy() if torch.is_tensor(v) else np.asarray(v)
                keys.append(k)
            optim_meta["state_keys"][str(pid)] = keys
    for k, v in (arrays or {}).items():
        payload[f"extra/{k}"] = np.asarray(v)
    header = {
        "format": CHECKPOINT_FORMAT,
        "model": stack.config,
        "layout": layout,
        "pretrained": stack.pretrained,
        "optimizer": optim_meta,
        "meta": meta or {},
    }
    payload["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Returns ``(stack, header, extra_arrays, optimizer_state_dict_or_None)``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a model checkpoint")
        cfg = dict(header["model"])
        stack = ModelStack(**{**cfg, "channels": tuple(cfg["channels"]),
                              "sampling_range": tuple(cfg["sampling_range"])})
        with torch.no_grad():
            for group in GROUPS:
                flat = z[group]
                params = dict(getattr(stack, group).named_parameters())
                offset = 0
                for name, shape in header["layout"][group]:
                    n = int(np.prod(shape))
                    params[name].copy_(torch.as_tensor(flat[offset:offset + n].reshape(shape)))
                    offset += n
        stack.pretrained = bool(header.get("pretrained", False))
        optim_state = None
        om = header.get("optimizer")
        if om is not None:
            state = {}
            for pid, keys in om["state_keys"].items():
                state[int(pid)] = {k: torch.as_tensor(z[f"optim/{pid}/{k}"], dtype=stack.dtype
                                                      if k != "step" else torch.float32) for k in keys}
            optim_state = {"state": state, "param_groups": om["param_groups"]}
        extra = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    return stack, header, extra, optim_state
