"""Deterministic toy double-stream transformer and the two-stage masking
pipeline built on top of it.

Each block has separate text/image Q/K/V projections feeding one joint
attention over the concatenated token sequence, plus a per-stream
feed-forward sublayer; subject adapters can attach to any of Q/K/V/FF.
A fixed affine update (latent <- latent - block_output / n_steps) stands in
for the denoising scheduler, keeping the whole loop a pure function of
(seed, config, inputs).

Stage 1 derives subject masks from the attention captured at one
(step, block); stage 2 gates every adapter's image-token deltas with those
masks for the remaining steps. The diagnostics quantify why that works:
per-token conflict cosine between adapter outputs, the locality of image
self-attention, the first-order insensitivity of attention weights to Q/K
perturbations, and the masked-equivalence error comparing full versus
mask-gated adapter inference inside the masked region.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import lora
from .attnmap import (
    AttentionMap,
    GridShape,
    SinkFilterConfig,
    SubjectTokenSpan,
    compute_cross_attention,
    self_attention_enhance,
    suppress_attention_sink,
    top_fraction_indices,
    validate_spans,
    word_attention_map,
)
from .errors import ShapeError
from .lora import LoraSet
from .superpixel import (
    SlicParams,
    SubjectMaskSet,
    SuperpixelLabeling,
    decode_predicted_sample,
    downsample_mask,
    slic_segment,
    upsample_map,
    vote_superpixels,
)
from .tensorio import PixelGrid, SeededRng, save_tensor, write_pgm

__all__ = [
    "ToyModelConfig",
    "ToyModel",
    "BlockTrace",
    "StepResult",
    "StepRecord",
    "GenerationTrace",
    "MaskDerivation",
    "SubjectSpec",
    "ZeroMaskWarning",
    "build_toy_model",
    "forward_step",
    "derive_subject_masks",
    "run_pipeline",
    "conflict_cosine_map",
    "locality_ratio",
    "attention_perturbation_norm",
    "masked_equivalence_error",
    "lora_block_output_delta",
]

SubjectPair = tuple[LoraSet, "np.ndarray | None"]


class ZeroMaskWarning(UserWarning):
    """A subject won zero superpixels; its mask is all-zero."""


@dataclass(frozen=True)
class ToyModelConfig:
    n_blocks: int = 4
    d_model: int = 32
    n_heads: int = 2
    n_text: int = 8
    grid_h: int = 8
    grid_w: int = 8
    n_steps: int = 12
    mask_step: int = 3
    mask_block: int = 2
    mask_text_tokens: bool = False  # gate text-token deltas too (off: spatial masks only)

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if not 0 <= self.mask_block < self.n_blocks:
            raise ValueError(f"mask_block {self.mask_block} outside [0, {self.n_blocks})")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0 <= self.mask_step < self.n_steps:
            raise ValueError(f"mask_step {self.mask_step} outside [0, {self.n_steps})")
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_text < 1 or self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("n_text and grid dims must be >= 1")

    @property
    def n_img(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def intervene_after(self) -> int:
        return self.mask_step

    @property
    def grid(self) -> GridShape:
        return GridShape(self.grid_h, self.grid_w)


@dataclass
class BlockWeights:
    q_text: np.ndarray
    k_text: np.ndarray
    v_text: np.ndarray
    q_img: np.ndarray
    k_img: np.ndarray
    v_img: np.ndarray
    ff1_text: np.ndarray
    ff2_text: np.ndarray
    ff1_img: np.ndarray
    ff2_img: np.ndarray


@dataclass
class BlockTrace:
    """Per-block capture: joint per-head Q/K/V, derived attention maps, output h."""

    q: np.ndarray  # (n_heads, N, d_head), text rows first
    k: np.ndarray
    v: np.ndarray
    a_cross: AttentionMap  # text -> image, head-averaged
    a_self: AttentionMap  # image -> image, head-averaged
    hidden: np.ndarray  # (N, d_model) block output


@dataclass(frozen=True)
class SubjectSpec:
    """One subject: its adapter plus the prompt positions that activate it."""

    lora_id: str
    token_indices: tuple[int, ...]
    lora_set: LoraSet

    @property
    def span(self) -> SubjectTokenSpan:
        return SubjectTokenSpan(self.lora_id, self.token_indices)


class ToyModel:
    """Weights are immutable after build; forward passes share nothing mutable."""

    def __init__(self, cfg: ToyModelConfig, seed: int, blocks: list[BlockWeights]):
        self.cfg = cfg
        self.seed = seed
        self.blocks = blocks

    def default_prompt(self) -> np.ndarray:
        rng = SeededRng(self.seed).derive("prompt")
        return rng.uniform((self.cfg.n_text, self.cfg.d_model), -1.0, 1.0).astype(np.float32)

    def seeded_latent(self) -> np.ndarray:
        rng = SeededRng(self.seed).derive("latent")
        return rng.uniform((self.cfg.n_img, self.cfg.d_model), -1.0, 1.0).astype(np.float32)

    def _heads(self, x: np.ndarray) -> np.ndarray:
        n, d = x.shape
        dh = d // self.cfg.n_heads
        return x.reshape(n, self.cfg.n_heads, dh).transpose(1, 0, 2)

    def _adapter_deltas(self, h_text, h_img, point, block, subjects):
        """Fused adapter contributions at one attachment point.

        Image-token deltas are gated per subject mask; text-token deltas pass
        through unmasked unless cfg.mask_text_tokens is set, in which case a
        masked subject's text delta is dropped entirely.
        """
        d_t = np.zeros_like(h_text)
        pairs_img = []
        for lora_set, mask in subjects:
            layer = lora_set.layer_at(point, block)
            if layer is None:
                continue
            pairs_img.append((lora.lora_delta(h_img, layer), mask))
            if mask is None or not self.cfg.mask_text_tokens:
                d_t = d_t + lora.lora_delta(h_text, layer)
        d_i = lora.fuse_masked_deltas(pairs_img) if pairs_img else np.zeros_like(h_img)
        return d_t, d_i

    def _fused_projection(self, h_text, h_img, w_text, w_img, point, block, subjects):
        d_t, d_i = self._adapter_deltas(h_text, h_img, point, block, subjects)
        return h_text @ w_text + d_t, h_img @ w_img + d_i

    def forward(
        self,
        prompt: np.ndarray,
        latent: np.ndarray,
        subjects: Sequence[SubjectPair] = (),
        capture: Sequence[int] = (),
    ) -> tuple[np.ndarray, np.ndarray, dict[int, BlockTrace]]:
        """One pass through all blocks; returns (text_out, image_out, traces)."""
        cfg = self.cfg
        h_t = np.asarray(prompt, dtype=np.float32)
        h_i = np.asarray(latent, dtype=np.float32)
        if h_t.shape != (cfg.n_text, cfg.d_model):
            raise ShapeError(f"prompt shape {h_t.shape} != {(cfg.n_text, cfg.d_model)}")
        if h_i.shape != (cfg.n_img, cfg.d_model):
            raise ShapeError(f"latent shape {h_i.shape} != {(cfg.n_img, cfg.d_model)}")
        capture = set(int(b) for b in capture)
        unknown = capture - set(range(cfg.n_blocks))
        if unknown:
            raise ShapeError(f"capture indices {sorted(unknown)} outside [0, {cfg.n_blocks})")
        for lora_set, _ in subjects:
            for point, block in lora_set.layers:
                if block >= cfg.n_blocks:
                    raise ShapeError(
                        f"adapter {lora_set.lora_id!r} attaches {point} at block {block}, "
                        f"model has {cfg.n_blocks} blocks"
                    )
        dh = cfg.d_model // cfg.n_heads
        traces: dict[int, BlockTrace] = {}

        for b, blk in enumerate(self.blocks):
            q_t, q_i = self._fused_projection(h_t, h_i, blk.q_text, blk.q_img, "Q", b, subjects)
            k_t, k_i = self._fused_projection(h_t, h_i, blk.k_text, blk.k_img, "K", b, subjects)
            v_t, v_i = self._fused_projection(h_t, h_i, blk.v_text, blk.v_img, "V", b, subjects)

            q = self._heads(np.concatenate([q_t, q_i], axis=0))
            k = self._heads(np.concatenate([k_t, k_i], axis=0))
            v = self._heads(np.concatenate([v_t, v_i], axis=0))

            scores = (q.astype(np.float64) @ k.astype(np.float64).transpose(0, 2, 1)) / np.sqrt(dh)
            scores -= scores.max(axis=2, keepdims=True)
            e = np.exp(scores)
            probs = e / e.sum(axis=2, keepdims=True)
            attn = (probs @ v.astype(np.float64)).transpose(1, 0, 2).reshape(-1, cfg.d_model)
            attn = attn.astype(np.float32)

            h_t = h_t + attn[: cfg.n_text]
            h_i = h_i + attn[cfg.n_text:]

            ff_t = np.tanh(h_t @ blk.ff1_text) @ blk.ff2_text
            ff_i = np.tanh(h_i @ blk.ff1_img) @ blk.ff2_img
            d_t, d_i = self._adapter_deltas(h_t, h_i, "FF", b, subjects)
            h_t = h_t + ff_t + d_t
            h_i = h_i + ff_i + d_i

            if b in capture:
                traces[b] = BlockTrace(
                    q=q.astype(np.float32),
                    k=k.astype(np.float32),
                    v=v.astype(np.float32),
                    a_cross=compute_cross_attention(q[:, : cfg.n_text], k[:, cfg.n_text:]),
                    a_self=compute_cross_attention(q[:, cfg.n_text:], k[:, cfg.n_text:]),
                    hidden=np.concatenate([h_t, h_i], axis=0),
                )
        return h_t, h_i, traces


def build_toy_model(cfg: ToyModelConfig, seed: int) -> ToyModel:
    """Seeded weights, uniform in +-1/sqrt(d_model); same seed, same bits."""
    rng = SeededRng(seed).derive("toy-model")
    d = cfg.d_model
    ff = 2 * d
    s = 1.0 / np.sqrt(d)

    def w(shape):
        return rng.uniform(shape, -s, s).astype(np.float32)

    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(
            BlockWeights(
                q_text=w((d, d)), k_text=w((d, d)), v_text=w((d, d)),
                q_img=w((d, d)), k_img=w((d, d)), v_img=w((d, d)),
                ff1_text=w((d, ff)), ff2_text=w((ff, d)),
                ff1_img=w((d, ff)), ff2_img=w((ff, d)),
            )
        )
    return ToyModel(cfg, seed, blocks)


@dataclass
class StepResult:
    next_latent: np.ndarray
    x0_tokens: np.ndarray
    traces: dict[int, BlockTrace]


def forward_step(
    model: ToyModel,
    latent: np.ndarray,
    subjects: Sequence[SubjectPair] = (),
    capture: Sequence[int] = (),
    prompt: np.ndarray | None = None,
) -> StepResult:
    """One scheduler step: latent <- latent - image_output / n_steps.

    The predicted clean sample is the full-strength estimate
    x0 = latent - image_output.
    """
    prompt = model.default_prompt() if prompt is None else prompt
    _, img_out, traces = model.forward(prompt, latent, subjects, capture)
    gamma = 1.0 / model.cfg.n_steps
    latent = np.asarray(latent, dtype=np.float32)
    return StepResult(
        next_latent=latent - np.float32(gamma) * img_out,
        x0_tokens=latent - img_out,
        traces=traces,
    )


@dataclass
class MaskDerivation:
    """Everything stage 1 produced at the capture (step, block)."""

    step: int
    block: int
    a_cross: AttentionMap
    a_self: AttentionMap
    a_filtered: AttentionMap
    word_maps: dict[str, np.ndarray]  # per subject, length N_img
    enhanced_maps: dict[str, np.ndarray]  # per subject, length N_img
    pixel_maps: dict[str, np.ndarray]  # per subject, x0 resolution
    x0_image: PixelGrid
    labeling: SuperpixelLabeling
    mask_set: SubjectMaskSet  # pixel resolution
    token_masks: dict[str, np.ndarray]  # per subject, (grid_h, grid_w) binary


def derive_subject_masks(
    a_cross: AttentionMap,
    a_self: AttentionMap,
    x0_image: PixelGrid,
    spans: Sequence[SubjectTokenSpan],
    grid: GridShape,
    sink_cfg: SinkFilterConfig | None = None,
    slic_params: SlicParams | None = None,
    salient_fraction: float = 0.01,
    step: int = 0,
    block: int = 0,
) -> MaskDerivation:
    """Stage 1: sink-filtered word maps -> self-attention enhancement ->
    superpixel voting on the predicted sample -> binary mask partition."""
    if len(spans) == 0:
        raise ValueError("need at least one subject span")
    validate_spans(spans)
    if a_self.rows != grid.n_img or a_self.cols != grid.n_img:
        raise ShapeError(f"self map {a_self.rows}x{a_self.cols} vs grid n_img {grid.n_img}")
    a_filtered = suppress_attention_sink(a_cross, grid, sink_cfg)
    ids = [s.lora_id for s in spans]
    word_maps, enhanced, pixel_maps = {}, {}, {}
    for span in spans:
        m = word_attention_map(a_filtered, span)
        salient = top_fraction_indices(m, salient_fraction)
        e = self_attention_enhance(a_self, salient)
        word_maps[span.lora_id] = m
        enhanced[span.lora_id] = e
        pixel_maps[span.lora_id] = upsample_map(
            e.reshape(grid.grid_h, grid.grid_w), x0_image.height, x0_image.width
        )
    labeling = slic_segment(x0_image, slic_params)
    mask_set = vote_superpixels([pixel_maps[i] for i in ids], labeling, ids)
    token_masks = {
        i: downsample_mask(mask_set.mask_for(i), grid.grid_h, grid.grid_w) for i in ids
    }
    return MaskDerivation(
        step=step,
        block=block,
        a_cross=a_cross,
        a_self=a_self,
        a_filtered=a_filtered,
        word_maps=word_maps,
        enhanced_maps=enhanced,
        pixel_maps=pixel_maps,
        x0_image=x0_image,
        labeling=labeling,
        mask_set=mask_set,
        token_masks=token_masks,
    )


@dataclass
class StepRecord:
    latent: np.ndarray  # latent after this step's update
    x0: PixelGrid
    mask_set: SubjectMaskSet | None  # present exactly from mask_step onward


@dataclass
class GenerationTrace:
    cfg: ToyModelConfig
    records: list[StepRecord]
    final_latent: np.ndarray
    derivation: MaskDerivation | None
    init_latent: np.ndarray
    prompt: np.ndarray

    @property
    def latent_before_mask_step(self) -> np.ndarray:
        """Latent that entered the mask-derivation step."""
        t = self.cfg.mask_step
        return self.init_latent if t == 0 else self.records[t - 1].latent

    def dump(self, directory) -> None:
        """Write per-step latents and predicted samples, masks, and a manifest."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        lines = [
            f"n_steps = {self.cfg.n_steps}",
            f"mask_step = {self.cfg.mask_step}",
            f"mask_block = {self.cfg.mask_block}",
        ]
        subjects = list(self.derivation.mask_set.lora_ids) if self.derivation else []
        lines.append("subjects = " + ",".join(subjects))
        for t, rec in enumerate(self.records):
            save_tensor(rec.latent, out / f"step_{t:02d}_latent.tensor")
            gray = rec.x0.values.mean(axis=2, dtype=np.float64)
            write_pgm(PixelGrid(gray.astype(np.float32)), out / f"step_{t:02d}_x0.pgm")
            lines.append(f"step.{t:02d}.masked = {'true' if rec.mask_set is not None else 'false'}")
        if self.derivation is not None:
            save_tensor(
                self.derivation.labeling.labels.astype(np.float32), out / "labeling.tensor"
            )
            for i, lora_id in enumerate(self.derivation.mask_set.lora_ids):
                mask = self.derivation.mask_set.masks[i].astype(np.float32)
                write_pgm(PixelGrid(mask), out / f"mask_{lora_id}.pgm")
        (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_pipeline(
    model: ToyModel,
    prompt_embedding: np.ndarray | None,
    subjects: Sequence[SubjectSpec],
    sink_cfg: SinkFilterConfig | None = None,
    slic_params: SlicParams | None = None,
    init_latent: np.ndarray | None = None,
) -> GenerationTrace:
    """Both stages end to end.

    Steps before mask_step run with all-ones masks; at mask_step a capture
    pass derives the masks, which gate every adapter's image deltas from that
    step on. A subject that won zero superpixels keeps an all-zero mask and
    only triggers a warning.
    """
    cfg = model.cfg
    validate_spans([s.span for s in subjects], cfg.n_text)
    prompt = model.default_prompt() if prompt_embedding is None else np.asarray(
        prompt_embedding, dtype=np.float32
    )
    latent = model.seeded_latent() if init_latent is None else np.asarray(
        init_latent, dtype=np.float32
    )
    init = latent.copy()
    derivation: MaskDerivation | None = None
    token_masks: list[np.ndarray] | None = None
    records: list[StepRecord] = []

    for t in range(cfg.n_steps):
        if t == cfg.mask_step and subjects:
            cap = forward_step(
                model, latent, [(s.lora_set, None) for s in subjects],
                capture=(cfg.mask_block,), prompt=prompt,
            )
            trace = cap.traces[cfg.mask_block]
            x0_img = decode_predicted_sample(cap.x0_tokens, cfg.grid_h, cfg.grid_w)
            derivation = derive_subject_masks(
                trace.a_cross, trace.a_self, x0_img, [s.span for s in subjects],
                cfg.grid, sink_cfg, slic_params, step=t, block=cfg.mask_block,
            )
            token_masks = []
            for s in subjects:
                tm = derivation.token_masks[s.lora_id].ravel()
                if tm.sum() == 0:
                    warnings.warn(
                        f"subject {s.lora_id!r} won zero superpixels; its mask is empty",
                        ZeroMaskWarning,
                        stacklevel=2,
                    )
                token_masks.append(tm)
        if token_masks is not None and t >= cfg.mask_step:
            pairs = [(s.lora_set, token_masks[i]) for i, s in enumerate(subjects)]
        else:
            pairs = [(s.lora_set, None) for s in subjects]
        step = forward_step(model, latent, pairs, prompt=prompt)
        latent = step.next_latent
        records.append(
            StepRecord(
                latent=latent,
                x0=decode_predicted_sample(step.x0_tokens, cfg.grid_h, cfg.grid_w),
                mask_set=derivation.mask_set if derivation is not None else None,
            )
        )
    return GenerationTrace(
        cfg=cfg,
        records=records,
        final_latent=latent,
        derivation=derivation,
        init_latent=init,
        prompt=prompt,
    )


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def conflict_cosine_map(delta_a: np.ndarray, delta_b: np.ndarray) -> np.ndarray:
    """Per-token cosine between two adapters' output deltas, in [-1, 1].

    Tokens where either delta has norm < 1e-12 read 0.
    """
    a = np.asarray(delta_a, dtype=np.float64)
    b = np.asarray(delta_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"delta shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= 1e-12) & (nb >= 1e-12)
    out = np.zeros(a.shape[0])
    out[ok] = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return np.clip(out, -1.0, 1.0)


def locality_ratio(a_self: AttentionMap, mask: np.ndarray) -> float:
    """In-region attention mass over total mass emitted by in-region tokens."""
    m = np.asarray(mask).ravel()
    if m.shape[0] != a_self.rows:
        raise ShapeError(f"mask length {m.shape[0]} vs {a_self.rows} tokens")
    inside = np.flatnonzero(m == 1)
    if inside.size == 0:
        raise ValueError("mask selects no tokens")
    w = a_self.weights.astype(np.float64)
    total = w[inside].sum()
    return float(w[np.ix_(inside, inside)].sum() / total)


def attention_perturbation_norm(
    q: np.ndarray, k: np.ndarray, dq: np.ndarray, dk: np.ndarray, eps: float
) -> float:
    """Frobenius distance between softmax maps before/after perturbing Q, K."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    dq = np.asarray(dq, dtype=np.float64)
    dk = np.asarray(dk, dtype=np.float64)
    if q.shape != dq.shape or k.shape != dk.shape or q.shape[1] != k.shape[1]:
        raise ShapeError(
            f"incompatible shapes q={q.shape} dq={dq.shape} k={k.shape} dk={dk.shape}"
        )

    def softmax_map(qm, km):
        s = qm @ km.T / np.sqrt(qm.shape[1])
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    base = softmax_map(q, k)
    pert = softmax_map(q + eps * dq, k + eps * dk)
    return float(np.linalg.norm(pert - base))


def masked_equivalence_error(
    model: ToyModel,
    lora_set: LoraSet,
    mask: np.ndarray,
    latent: np.ndarray,
    prompt: np.ndarray | None = None,
) -> float:
    """Relative in-region error between full-adapter and mask-gated inference.

    ||M o (f(h + dh) - f(h + M o dh))||_F / max(||M o f(h + dh)||_F, 1e-12)
    over one forward pass, measured on the image-stream output.
    """
    prompt = model.default_prompt() if prompt is None else prompt
    m = np.asarray(mask).ravel()
    _, full, _ = model.forward(prompt, latent, [(lora_set, None)])
    _, gated, _ = model.forward(prompt, latent, [(lora_set, m)])
    if m.shape[0] != full.shape[0]:
        raise ShapeError(f"mask length {m.shape[0]} vs {full.shape[0]} image tokens")
    sel = m[:, None].astype(np.float64)
    num = np.linalg.norm(sel * (full.astype(np.float64) - gated.astype(np.float64)))
    den = max(np.linalg.norm(sel * full.astype(np.float64)), 1e-12)
    return float(num / den)


def lora_block_output_delta(
    model: ToyModel,
    latent: np.ndarray,
    lora_set: LoraSet,
    block: int,
    prompt: np.ndarray | None = None,
) -> np.ndarray:
    """Adapter-attributable change of the image-token hidden states at a block
    output: forward with the adapter minus the base forward."""
    prompt = model.default_prompt() if prompt is None else prompt
    _, _, base = model.forward(prompt, latent, [], capture=(block,))
    _, _, with_l = model.forward(prompt, latent, [(lora_set, None)], capture=(block,))
    n_text = model.cfg.n_text
    return with_l[block].hidden[n_text:] - base[block].hidden[n_text:]
