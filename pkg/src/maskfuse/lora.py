"""Low-rank adapter arithmetic, spatially masked delta application, and the
attachment-point ablation probe.

A LoraLayer is the usual down/up pair applied row-wise to token matrices with
the alpha/r scaling convention. A LoraSet groups the layers of one subject
adapter, keyed by (attachment point, block index) where the points are the
Q/K/V projections and the feed-forward sublayer of each block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, UnknownAttachmentError
from .tensorio import SeededRng, load_tensor, save_tensor

ATTACHMENT_POINTS = ("Q", "K", "V", "FF")

__all__ = [
    "ATTACHMENT_POINTS",
    "LoraLayer",
    "LoraSet",
    "lora_delta",
    "apply_subject_mask",
    "fuse_masked_deltas",
    "layer_ablation_l2",
    "random_lora_set",
    "zero_lora_set",
    "save_lora_set",
    "load_lora_set",
]


@dataclass(frozen=True)
class LoraLayer:
    """down: (r, d_in), up: (d_out, r); delta(x) = (alpha/r) * (x down^T) up^T."""

    down: np.ndarray
    up: np.ndarray
    alpha: float

    def __post_init__(self):
        down = np.asarray(self.down, dtype=np.float32)
        up = np.asarray(self.up, dtype=np.float32)
        if down.ndim != 2 or up.ndim != 2 or down.shape[0] != up.shape[1]:
            raise ShapeError(f"incompatible adapter shapes down={down.shape} up={up.shape}")
        if down.shape[0] < 1:
            raise ValueError("adapter rank must be >= 1")
        object.__setattr__(self, "down", down)
        object.__setattr__(self, "up", up)

    @property
    def rank(self) -> int:
        return self.down.shape[0]


def lora_delta(x: np.ndarray, layer: LoraLayer) -> np.ndarray:
    """Adapter output for token matrix x: (alpha/r) * (x down^T) up^T."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != layer.down.shape[1]:
        raise ShapeError(f"tokens {x.shape} do not match adapter d_in={layer.down.shape[1]}")
    scale = layer.alpha / layer.rank
    return scale * ((x @ layer.down.T) @ layer.up.T)


def apply_subject_mask(delta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero token rows where mask is 0, keep them where mask is 1."""
    delta = np.asarray(delta)
    m = np.asarray(mask).ravel()
    if delta.ndim != 2 or m.shape[0] != delta.shape[0]:
        raise ShapeError(f"mask length {m.shape[0]} vs {delta.shape[0]} token rows")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("subject mask must be binary")
    return delta * m[:, None].astype(delta.dtype)


def fuse_masked_deltas(deltas_and_masks: Sequence[tuple[np.ndarray, np.ndarray | None]]) -> np.ndarray:
    """Sum of per-subject deltas, each gated by its mask (None = all-ones)."""
    if len(deltas_and_masks) == 0:
        raise ValueError("nothing to fuse")
    shape = np.asarray(deltas_and_masks[0][0]).shape
    out = np.zeros(shape, dtype=np.float32)
    for delta, mask in deltas_and_masks:
        d = np.asarray(delta, dtype=np.float32)
        if d.shape != shape:
            raise ShapeError(f"delta shape {d.shape} != {shape}")
        out += d if mask is None else apply_subject_mask(d, mask)
    return out


@dataclass
class LoraSet:
    """One subject adapter: layers keyed by (point, block), with per-point toggles."""

    lora_id: str
    layers: dict[tuple[str, int], LoraLayer] = field(default_factory=dict)
    enabled: dict[str, bool] = field(default_factory=lambda: {p: True for p in ATTACHMENT_POINTS})

    def __post_init__(self):
        for point, block in self.layers:
            if point not in ATTACHMENT_POINTS:
                raise UnknownAttachmentError(f"unknown attachment point {point!r}")
            if block < 0:
                raise ValueError(f"negative block index {block}")
        for p in ATTACHMENT_POINTS:
            self.enabled.setdefault(p, True)

    def layer_at(self, point: str, block: int) -> LoraLayer | None:
        """The layer at (point, block) or None when absent/toggled off."""
        if point not in ATTACHMENT_POINTS:
            raise UnknownAttachmentError(f"unknown attachment point {point!r}")
        if not self.enabled.get(point, True):
            return None
        return self.layers.get((point, block))

    def with_points_disabled(self, points: Iterable[str]) -> "LoraSet":
        points = list(points)
        for p in points:
            if p not in ATTACHMENT_POINTS:
                raise UnknownAttachmentError(f"unknown attachment point {p!r}")
        enabled = dict(self.enabled)
        for p in points:
            enabled[p] = False
        return replace(self, enabled=enabled)

    def attachments(self) -> list[tuple[str, int]]:
        return sorted(self.layers, key=lambda pb: (pb[1], ATTACHMENT_POINTS.index(pb[0])))


def random_lora_set(
    rng: SeededRng,
    lora_id: str,
    d_model: int,
    blocks: Iterable[int],
    points: Sequence[str] = ATTACHMENT_POINTS,
    rank: int = 4,
    alpha: float | None = None,
    scale: float = 0.05,
) -> LoraSet:
    """Seeded adapter with uniform down/up weights; `scale` keeps deltas small
    relative to the base model, as real adapters are."""
    alpha = float(rank if alpha is None else alpha)
    layers = {}
    bound = 1.0 / np.sqrt(d_model)
    for block in blocks:
        for point in points:
            if point not in ATTACHMENT_POINTS:
                raise UnknownAttachmentError(f"unknown attachment point {point!r}")
            down = rng.uniform((rank, d_model), -bound, bound).astype(np.float32)
            up = rng.uniform((d_model, rank), -scale, scale).astype(np.float32)
            layers[(point, block)] = LoraLayer(down, up, alpha)
    return LoraSet(lora_id, layers)


def zero_lora_set(base: LoraSet) -> LoraSet:
    """Copy of `base` with all up matrices zeroed (identity adapter)."""
    layers = {
        key: LoraLayer(layer.down, np.zeros_like(layer.up), layer.alpha)
        for key, layer in base.layers.items()
    }
    return LoraSet(base.lora_id, layers, dict(base.enabled))


def save_lora_set(ls: LoraSet, directory) -> None:
    """Directory layout: manifest.txt plus <point><block>_{down,up}.tensor files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ranks = {layer.rank for layer in ls.layers.values()}
    alphas = {layer.alpha for layer in ls.layers.values()}
    if len(ranks) > 1 or len(alphas) > 1:
        raise ValueError("manifest format requires one rank/alpha per adapter set")
    att = ls.attachments()
    lines = [
        f"id = {ls.lora_id}",
        f"rank = {next(iter(ranks)) if ranks else 1}",
        f"alpha = {next(iter(alphas)) if alphas else 1.0}",
        "attachments = " + ",".join(f"{p}:{b}" for p, b in att),
    ]
    (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for point, block in att:
        layer = ls.layers[(point, block)]
        save_tensor(layer.down, d / f"{point}{block}_down.tensor")
        save_tensor(layer.up, d / f"{point}{block}_up.tensor")


def load_lora_set(directory) -> LoraSet:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"missing adapter manifest: {manifest}")
    fields: dict[str, str] = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        lora_id = fields["id"]
        alpha = float(fields["alpha"])
        att_text = fields["attachments"]
    except KeyError as e:
        raise ValueError(f"{manifest}: missing manifest key {e}") from None
    layers = {}
    if att_text:
        for item in att_text.split(","):
            point, _, block_s = item.strip().partition(":")
            block = int(block_s)
            down = load_tensor(d / f"{point}{block}_down.tensor")
            up = load_tensor(d / f"{point}{block}_up.tensor")
            layers[(point, block)] = LoraLayer(down, up, alpha)
    return LoraSet(lora_id, layers)


def layer_ablation_l2(
    model,
    lora_set: LoraSet,
    toggle_off: Iterable[str],
    latent: np.ndarray | None = None,
    prompt: np.ndarray | None = None,
    rng_seed: int = 0,
) -> float:
    """L2 distance between the forward pass with the full adapter and with the
    given attachment points disabled.

    `model` is any object exposing cfg (n_text, d_model, image-token count via
    cfg.n_img) and forward(prompt, latent, subjects) -> (text_out, image_out, ...).
    With no toggles the two passes are identical and the result is exactly 0.
    """
    toggles = list(toggle_off)
    for p in toggles:
        if p not in ATTACHMENT_POINTS:
            raise UnknownAttachmentError(f"unknown attachment point {p!r}")
    if latent is None or prompt is None:
        rng = SeededRng(rng_seed)
        if prompt is None:
            prompt = rng.derive("ablation-prompt").uniform(
                (model.cfg.n_text, model.cfg.d_model), -1.0, 1.0
            ).astype(np.float32)
        if latent is None:
            latent = rng.derive("ablation-latent").uniform(
                (model.cfg.n_img, model.cfg.d_model), -1.0, 1.0
            ).astype(np.float32)
    t_full, i_full, _ = model.forward(prompt, latent, [(lora_set, None)])
    ablated = lora_set.with_points_disabled(toggles)
    t_off, i_off, _ = model.forward(prompt, latent, [(ablated, None)])
    diff2 = np.sum((t_full - t_off).astype(np.float64) ** 2) + np.sum(
        (i_full - i_off).astype(np.float64) ** 2
    )
    return float(np.sqrt(diff2))
