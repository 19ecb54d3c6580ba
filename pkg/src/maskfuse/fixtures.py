"""Engineered test scenarios with controllable attention structure.

Both builders exploit the same trick: for a seeded model, pick the direction
u that maximizes u^T (Wq Wk^T) u over the image-stream projections of the
probe block. Image tokens placed at +c*u and -c*u then attend within their
own group with a logit advantage that grows with c, which gives direct
control over self-attention locality; aligning text tokens with
+-(Wq_text Wk_img^T u) makes each subject's prompt tokens attend to one
group's half of the grid. Fixture configs use a single attention head so the
head-averaged maps match the engineered bilinear form exactly.

These are used by the test suite, the CLI round-trip tests, and the demo
scripts, so they live in the library rather than under tests/.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lora import LoraSet, random_lora_set
from .superpixel import SlicParams
from .tensorio import SeededRng
from .toydit import (
    SubjectSpec,
    ToyModel,
    ToyModelConfig,
    build_toy_model,
    locality_ratio,
    masked_equivalence_error,
)

__all__ = [
    "TwoSubjectFixture",
    "LocalityInstance",
    "two_subject_half_grid",
    "locality_instance",
    "locality_error_sweep",
]


def _positive_quadratic_direction(mat: np.ndarray) -> np.ndarray:
    """Unit u maximizing u^T mat u (leading eigenvector of the symmetric part)."""
    sym = 0.5 * (mat + mat.T).astype(np.float64)
    vals, vecs = np.linalg.eigh(sym)
    if vals[-1] <= 0:
        raise ValueError("projection product has no positive-definite direction")
    return vecs[:, -1]


def _half_signs(grid_h: int, grid_w: int) -> np.ndarray:
    """+1 on the left half of the grid, -1 on the right, flattened row-major."""
    cols = np.arange(grid_w) < grid_w // 2
    return np.where(np.tile(cols, (grid_h, 1)), 1.0, -1.0).ravel()


@dataclass
class TwoSubjectFixture:
    model: ToyModel
    prompt: np.ndarray
    latent: np.ndarray
    subjects: list[SubjectSpec]
    left_mask: np.ndarray  # (grid_h, grid_w) binary, subject 0's target half
    right_mask: np.ndarray
    slic_params: SlicParams  # region size aligned to the half boundary


def two_subject_half_grid(
    seed: int,
    grid_h: int = 8,
    grid_w: int = 8,
    n_text: int = 8,
    cross_gap: float = 8.0,
    self_gap: float = 8.0,
) -> TwoSubjectFixture:
    """Two subjects whose activation tokens attend to disjoint half-grids.

    Subject 'alpha' owns the left half, 'beta' the right. Masks are derived at
    step 0 / block 0 so the engineered latent reaches the capture unchanged.
    `cross_gap` sets the text-to-own-half logit advantage, `self_gap` the
    within-half one, so cross-attention decisiveness and self-attention
    locality can be dialed independently. Adapters attach to V and FF only,
    leaving the engineered Q/K structure intact during the capture pass.
    """
    cfg = ToyModelConfig(
        n_blocks=1, d_model=32, n_heads=1, n_text=n_text,
        grid_h=grid_h, grid_w=grid_w, n_steps=12, mask_step=0, mask_block=0,
    )
    model = build_toy_model(cfg, seed)
    blk = model.blocks[0]
    dh = cfg.d_model // cfg.n_heads

    if self_gap <= 0:
        raise ValueError("self_gap must be > 0")
    u = _positive_quadratic_direction(blk.q_img @ blk.k_img.T)
    lam = float(u @ (blk.q_img @ blk.k_img.T).astype(np.float64) @ u)
    # latent rows keep one norm across self_gap values so adapter deltas stay
    # comparable; the signal fraction sin(theta) alone sets the locality gap
    gap_ref = max(8.0, self_gap)
    radius = np.sqrt(gap_ref * np.sqrt(dh) / (2.0 * lam))
    sin_t = np.sqrt(self_gap / gap_ref)
    signal = radius * sin_t  # within-vs-across gap = 2 signal^2 lam / sqrt(dh)

    b_cross = (blk.q_text @ blk.k_img.T).astype(np.float64)
    w_dir = b_cross @ u
    w_norm = float(np.linalg.norm(w_dir))
    if w_norm < 1e-12:
        raise ValueError("cross projection annihilates the engineered direction")
    w = w_dir / w_norm
    # text->half logit gap 2 a signal |B u| / sqrt(dh) == cross_gap
    a = cross_gap * np.sqrt(dh) / (2.0 * signal * w_norm)

    rng = SeededRng(seed).derive("two-subject-fixture")
    signs = _half_signs(grid_h, grid_w)
    eta = rng.normal((cfg.n_img, cfg.d_model))
    eta /= np.linalg.norm(eta, axis=1, keepdims=True)
    mix = sin_t * signs[:, None] * u[None, :] + np.sqrt(1.0 - sin_t**2) * eta
    mix = radius * mix / np.linalg.norm(mix, axis=1, keepdims=True)
    latent = mix.astype(np.float32)

    span_a = (1, 2)
    span_b = (n_text - 3, n_text - 2)
    prompt = (0.05 * rng.normal((n_text, cfg.d_model))).astype(np.float32)
    for i in span_a:
        prompt[i] = (a * w).astype(np.float32)
    for i in span_b:
        prompt[i] = (-a * w).astype(np.float32)

    spec_a = SubjectSpec(
        "alpha", span_a,
        random_lora_set(rng.derive("lora-alpha"), "alpha", cfg.d_model,
                        range(cfg.n_blocks), points=("V", "FF")),
    )
    spec_b = SubjectSpec(
        "beta", span_b,
        random_lora_set(rng.derive("lora-beta"), "beta", cfg.d_model,
                        range(cfg.n_blocks), points=("V", "FF")),
    )
    left = (signs.reshape(grid_h, grid_w) > 0).astype(np.uint8)
    # 2x2 superpixels: region boundaries align with the half split
    slic_params = SlicParams(n_segments=max(1, (grid_h * grid_w) // 4))
    return TwoSubjectFixture(
        model=model,
        prompt=prompt,
        latent=latent,
        subjects=[spec_a, spec_b],
        left_mask=left,
        right_mask=(1 - left).astype(np.uint8),
        slic_params=slic_params,
    )


@dataclass
class LocalityInstance:
    model: ToyModel
    prompt: np.ndarray
    latent: np.ndarray
    mask: np.ndarray  # token-level binary, left half
    lora_set: LoraSet
    locality: float  # realized ratio, calibrated to the requested target
    equivalence_error: float


def locality_instance(
    seed: int,
    target: float,
    lora_scale: float = 0.2,
    max_logit: float = 8.0,
) -> LocalityInstance:
    """Single-block model whose image self-attention locality over the
    left-half mask is calibrated to the requested target ratio.

    Every latent row keeps the same norm; only the mixing angle between the
    half-sign signal direction and a noise bed varies, so adapter deltas and
    output scales stay comparable across localities. The noise rows of the
    right half mirror the left half, which pins the zero-signal baseline to
    locality 0.5 exactly.
    """
    cfg = ToyModelConfig(
        n_blocks=1, d_model=32, n_heads=1, n_text=4,
        grid_h=8, grid_w=8, n_steps=12, mask_step=0, mask_block=0,
    )
    if cfg.grid_w % 2 != 0:
        raise ValueError("fixture needs an even grid width")
    model = build_toy_model(cfg, seed)
    c_mat = (model.blocks[0].q_img @ model.blocks[0].k_img.T).astype(np.float64)
    u = _positive_quadratic_direction(c_mat)
    lam = float(u @ c_mat @ u)
    dh = cfg.d_model // cfg.n_heads
    radius = np.sqrt(max_logit * np.sqrt(dh) / lam)

    rng = SeededRng(seed).derive("locality-fixture")
    half = rng.normal((cfg.grid_h, cfg.grid_w // 2, cfg.d_model))
    eta = np.concatenate([half, half], axis=1).reshape(cfg.n_img, cfg.d_model)
    eta /= np.linalg.norm(eta, axis=1, keepdims=True)
    signs = _half_signs(cfg.grid_h, cfg.grid_w)
    prompt = (0.1 * model.default_prompt()).astype(np.float32)
    mask = (signs > 0).astype(np.uint8)

    def latent_at(theta: float) -> np.ndarray:
        mix = np.sin(theta) * signs[:, None] * u[None, :] + np.cos(theta) * eta
        mix = radius * mix / np.linalg.norm(mix, axis=1, keepdims=True)
        return mix.astype(np.float32)

    def ratio_at(theta: float) -> float:
        _, _, tr = model.forward(prompt, latent_at(theta), [], capture=(0,))
        return locality_ratio(tr[0].a_self, mask)

    lo, hi = 0.0, np.pi / 2
    if ratio_at(hi) < target:
        raise ValueError(f"cannot reach locality {target} for seed {seed}")
    if ratio_at(lo) >= target - 1e-9:
        theta_star = lo
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if ratio_at(mid) < target:
                lo = mid
            else:
                hi = mid
        theta_star = hi
    latent = latent_at(theta_star)
    realized = ratio_at(theta_star)
    lora_set = random_lora_set(
        rng.derive("lora"), "probe", cfg.d_model, range(cfg.n_blocks),
        points=("V", "FF"), scale=lora_scale,
    )
    err = masked_equivalence_error(model, lora_set, mask.ravel(), latent, prompt)
    return LocalityInstance(
        model=model, prompt=prompt, latent=latent, mask=mask,
        lora_set=lora_set, locality=realized, equivalence_error=err,
    )


def locality_error_sweep(
    seed: int, targets: tuple[float, ...] = (0.5, 0.9, 0.99)
) -> list[LocalityInstance]:
    """One calibrated instance per target locality, same seed throughout."""
    return [locality_instance(seed, t) for t in targets]
