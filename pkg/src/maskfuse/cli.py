"""Command-line front end.

Subcommands:
    derive-mask   stage 1 only, from attention tensor files
    run-toy       full two-stage pipeline on the toy model, dumps a trace
    diagnose      conflict cosine map + locality / equivalence readouts
    ablate        L2 effect of disabling adapter attachment points

Exit codes: 0 ok, 2 usage or bad input, 3 shape mismatch, 4 numerically
degenerate state. All outputs land under --out (or the config's output_dir);
summaries go to stdout as key=value tokens.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .attnmap import AttentionMap, SubjectTokenSpan, compute_cross_attention
from .config import RunConfig, parse_config
from .errors import (
    ConfigError,
    DegenerateRowError,
    ShapeError,
    TensorFormatError,
    UnknownAttachmentError,
    UnknownSubjectError,
)
from .lora import layer_ablation_l2, load_lora_set, random_lora_set
from .tensorio import PixelGrid, SeededRng, load_tensor, save_tensor, write_pgm
from .toydit import (
    SubjectSpec,
    build_toy_model,
    conflict_cosine_map,
    derive_subject_masks,
    locality_ratio,
    lora_block_output_delta,
    masked_equivalence_error,
    run_pipeline,
)

USAGE_EXIT = 2
SHAPE_EXIT = 3
DEGENERATE_EXIT = 4


def _load_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def _require_tensor(path: str | None, flag: str) -> np.ndarray:
    if path is None:
        raise ConfigError(f"--{flag} is required")
    return load_tensor(path)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out if args.out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_run(cfg: RunConfig, seed: int):
    """Model, prompt, subject specs, and initial latent for a toy run."""
    model = build_toy_model(cfg.model, seed)
    prompt = load_tensor(cfg.prompt_embedding) if cfg.prompt_embedding else None
    init_latent = load_tensor(cfg.init_latent) if cfg.init_latent else None
    subjects = []
    for s in cfg.subjects:
        if s.lora_path is not None:
            lora_set = load_lora_set(s.lora_path)
        else:
            lora_set = random_lora_set(
                SeededRng(seed).derive(f"subject-{s.lora_id}"),
                s.lora_id, cfg.model.d_model, range(cfg.model.n_blocks),
            )
        subjects.append(SubjectSpec(s.lora_id, s.tokens, lora_set))
    return model, prompt, subjects, init_latent


def _fmt(x: float) -> str:
    return repr(float(x))


def _subject_summary(model, trace, subjects) -> list[str]:
    parts = []
    deriv = trace.derivation
    for s in subjects:
        pixel_mask = deriv.mask_set.mask_for(s.lora_id)
        token_mask = deriv.token_masks[s.lora_id].ravel()
        parts.append(f"mask_area.{s.lora_id}={_fmt(pixel_mask.mean())}")
        loc = (
            locality_ratio(deriv.a_self, token_mask)
            if token_mask.sum() > 0 else float("nan")
        )
        parts.append(f"locality.{s.lora_id}={_fmt(loc)}")
        err = masked_equivalence_error(
            model, s.lora_set, token_mask, trace.latent_before_mask_step, trace.prompt
        )
        parts.append(f"eqerr.{s.lora_id}={_fmt(err)}")
    return parts


def cmd_derive_mask(args) -> int:
    cfg = _load_config(args)
    if not cfg.subjects:
        raise ConfigError("derive-mask needs at least one subject.<id>.tokens entry")
    spans = [SubjectTokenSpan(s.lora_id, s.tokens) for s in cfg.subjects]
    if args.across is not None:
        a_cross = AttentionMap(_require_tensor(args.across, "across"))
    else:
        if args.qtext is None or args.kimg is None:
            raise ConfigError("provide either --across or both --qtext and --kimg")
        a_cross = compute_cross_attention(
            _require_tensor(args.qtext, "qtext"), _require_tensor(args.kimg, "kimg")
        )
    a_self = AttentionMap(_require_tensor(args.aself, "aself"))
    x0 = PixelGrid(_require_tensor(args.x0, "x0"))
    derivation = derive_subject_masks(
        a_cross, a_self, x0, spans, cfg.model.grid, cfg.sink, cfg.slic
    )
    out = _out_dir(args, cfg)
    for lora_id in derivation.mask_set.lora_ids:
        mask = derivation.mask_set.mask_for(lora_id).astype(np.float32)
        write_pgm(PixelGrid(mask), out / f"mask_{lora_id}.pgm")
    save_tensor(derivation.labeling.labels.astype(np.float32), out / "labeling.tensor")
    parts = [f"subjects={len(spans)}", f"regions={derivation.labeling.n_regions}"]
    for lora_id in derivation.mask_set.lora_ids:
        parts.append(f"mask_area.{lora_id}={_fmt(derivation.mask_set.mask_for(lora_id).mean())}")
    print(" ".join(parts))
    return 0


def cmd_run_toy(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    model, prompt, subjects, init_latent = _build_run(cfg, seed)
    trace = run_pipeline(model, prompt, subjects, cfg.sink, cfg.slic, init_latent)
    trace.dump(_out_dir(args, cfg))
    parts = [f"steps={cfg.model.n_steps}", f"subjects={len(subjects)}"]
    if trace.derivation is not None:
        parts += _subject_summary(model, trace, subjects)
    print(" ".join(parts))
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    model, prompt, subjects, init_latent = _build_run(cfg, seed)
    by_id = {s.lora_id: s for s in subjects}
    if args.subjects is not None:
        ids = [p for p in args.subjects.split(",") if p]
    else:
        ids = [s.lora_id for s in subjects[:2]]
    for sid in ids:
        if sid not in by_id:
            raise UnknownSubjectError(f"unknown subject id {sid!r}")
    if len(ids) != 2:
        raise ConfigError(f"diagnose needs exactly two subject ids, got {len(ids)}")
    trace = run_pipeline(model, prompt, subjects, cfg.sink, cfg.slic, init_latent)
    latent0 = trace.latent_before_mask_step
    deltas = [
        lora_block_output_delta(model, latent0, by_id[sid].lora_set,
                                cfg.model.mask_block, trace.prompt)
        for sid in ids
    ]
    cos = conflict_cosine_map(deltas[0], deltas[1])
    heat = ((cos + 1.0) / 2.0).reshape(cfg.model.grid_h, cfg.model.grid_w)
    out = _out_dir(args, cfg)
    write_pgm(PixelGrid(heat.astype(np.float32)), out / "cosine_map.pgm")
    print(f"cosine.mean={_fmt(cos.mean())}")
    print(f"cosine.min={_fmt(cos.min())}")
    print(f"cosine.max={_fmt(cos.max())}")
    for line in _subject_summary(model, trace, [by_id[sid] for sid in ids]):
        print(line)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    model = build_toy_model(cfg.model, seed)
    if args.lora is not None:
        lora_set = load_lora_set(args.lora)
    elif cfg.subjects and cfg.subjects[0].lora_path is not None:
        lora_set = load_lora_set(cfg.subjects[0].lora_path)
    else:
        lora_id = cfg.subjects[0].lora_id if cfg.subjects else "lora0"
        lora_set = random_lora_set(
            SeededRng(seed).derive(f"subject-{lora_id}"),
            lora_id, cfg.model.d_model, range(cfg.model.n_blocks),
        )
    toggles = [p for p in (args.toggles or "").split(",") if p] if args.toggles is not None \
        else ["Q", "K", "V", "FF"]
    for point in toggles:
        val = layer_ablation_l2(model, lora_set, [point], rng_seed=seed)
        print(f"l2.{point}={_fmt(val)}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskfuse",
        description="Subject-mask derivation from attention maps and masked adapter fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    p = sub.add_parser("derive-mask", help="derive subject masks from tensor files")
    common(p)
    p.add_argument("--qtext", help="text queries tensor (N_text x D)")
    p.add_argument("--kimg", help="image keys tensor (N_img x D)")
    p.add_argument("--across", help="precomputed cross-attention map tensor")
    p.add_argument("--aself", help="image self-attention map tensor (required)")
    p.add_argument("--x0", help="predicted sample image tensor (required)")

    p = sub.add_parser("run-toy", help="run the full two-stage toy pipeline")
    common(p)

    p = sub.add_parser("diagnose", help="conflict cosine map and per-subject readouts")
    common(p)
    p.add_argument("--subjects", help="two subject ids, comma separated")

    p = sub.add_parser("ablate", help="L2 effect of disabling attachment points")
    common(p)
    p.add_argument("--lora", help="adapter directory (default: first subject)")
    p.add_argument("--toggles", help="comma-separated points to toggle (default Q,K,V,FF)")
    return parser


_HANDLERS = {
    "derive-mask": cmd_derive_mask,
    "run-toy": cmd_run_toy,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except DegenerateRowError as e:
        print(f"error: {e}", file=sys.stderr)
        return DEGENERATE_EXIT
    except ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return SHAPE_EXIT
    except (
        ConfigError,
        TensorFormatError,
        UnknownSubjectError,
        UnknownAttachmentError,
        FileNotFoundError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
