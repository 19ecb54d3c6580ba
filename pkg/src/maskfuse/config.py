"""Key-value run configuration: `key = value` lines, `#` comments.

Unknown keys are rejected; missing keys take the documented defaults.
serialize_config emits a canonical form that parses back to an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .attnmap import SinkFilterConfig
from .errors import ConfigError
from .superpixel import SlicParams
from .toydit import ToyModelConfig

__all__ = ["RunConfig", "SubjectConfig", "parse_config", "serialize_config"]


@dataclass(frozen=True)
class SubjectConfig:
    lora_id: str
    tokens: tuple[int, ...]
    lora_path: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    sink: SinkFilterConfig = field(default_factory=SinkFilterConfig)
    slic: SlicParams = field(default_factory=SlicParams)
    seed: int = 0
    output_dir: str = "out"
    init_latent: str | None = None
    prompt_embedding: str | None = None
    subjects: tuple[SubjectConfig, ...] = ()


def _parse_bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {value!r}")


_MODEL_KEYS = {f.name: f.type for f in fields(ToyModelConfig)}
_SINK_KEYS = {"sink_p": "p", "border_width": "border_width"}
_SLIC_KEYS = {"n_segments", "compactness", "sigma", "iterations"}
_INT_KEYS = {
    "n_blocks", "d_model", "n_heads", "n_text", "grid_h", "grid_w",
    "n_steps", "mask_step", "mask_block", "border_width", "n_segments",
    "iterations", "seed",
}
_FLOAT_KEYS = {"sink_p", "compactness", "sigma"}
_BOOL_KEYS = {"mask_text_tokens"}
_STR_KEYS = {"output_dir", "init_latent", "prompt_embedding"}


def _convert(key: str, value: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            return _parse_bool(value)
        return value
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from None


def _parse_tokens(value: str) -> tuple[int, ...]:
    try:
        toks = tuple(int(p) for p in value.split(",") if p.strip() != "")
    except ValueError:
        raise ConfigError(f"bad token list {value!r}") from None
    if not toks:
        raise ConfigError(f"empty token list {value!r}")
    return toks


def parse_config(text: str) -> RunConfig:
    scalars: dict[str, object] = {}
    subject_order: list[str] = []
    subject_fields: dict[str, dict[str, object]] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key.startswith("subject."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in ("tokens", "lora") or not parts[1]:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            sid = parts[1]
            if sid not in subject_fields:
                subject_order.append(sid)
                subject_fields[sid] = {}
            if parts[2] in subject_fields[sid]:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            subject_fields[sid][parts[2]] = (
                _parse_tokens(value) if parts[2] == "tokens" else value
            )
            continue
        if key not in _MODEL_KEYS and key not in _SINK_KEYS and key not in _SLIC_KEYS \
                and key not in ("seed", "output_dir", "init_latent", "prompt_embedding"):
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in scalars:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        scalars[key] = _convert(key, value)

    try:
        model = ToyModelConfig(**{k: v for k, v in scalars.items() if k in _MODEL_KEYS})
        sink = SinkFilterConfig(**{
            _SINK_KEYS[k]: v for k, v in scalars.items() if k in _SINK_KEYS
        })
        slic = SlicParams(**{k: v for k, v in scalars.items() if k in _SLIC_KEYS})
    except ValueError as e:
        raise ConfigError(str(e)) from None

    subjects = []
    for sid in subject_order:
        entry = subject_fields[sid]
        if "tokens" not in entry:
            raise ConfigError(f"subject {sid!r} has no token span (subject.{sid}.tokens)")
        subjects.append(SubjectConfig(sid, entry["tokens"], entry.get("lora")))

    return RunConfig(
        model=model,
        sink=sink,
        slic=slic,
        seed=int(scalars.get("seed", 0)),
        output_dir=str(scalars.get("output_dir", "out")),
        init_latent=scalars.get("init_latent"),
        prompt_embedding=scalars.get("prompt_embedding"),
        subjects=tuple(subjects),
    )


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parse_config(serialize_config(c)) == c."""
    m = cfg.model
    lines = [
        f"n_blocks = {m.n_blocks}",
        f"d_model = {m.d_model}",
        f"n_heads = {m.n_heads}",
        f"n_text = {m.n_text}",
        f"grid_h = {m.grid_h}",
        f"grid_w = {m.grid_w}",
        f"n_steps = {m.n_steps}",
        f"mask_step = {m.mask_step}",
        f"mask_block = {m.mask_block}",
        f"mask_text_tokens = {'true' if m.mask_text_tokens else 'false'}",
        f"sink_p = {cfg.sink.p!r}",
        f"border_width = {cfg.sink.border_width}",
    ]
    if cfg.slic.n_segments is not None:
        lines.append(f"n_segments = {cfg.slic.n_segments}")
    lines += [
        f"compactness = {cfg.slic.compactness!r}",
        f"sigma = {cfg.slic.sigma!r}",
        f"iterations = {cfg.slic.iterations}",
        f"seed = {cfg.seed}",
        f"output_dir = {cfg.output_dir}",
    ]
    if cfg.init_latent is not None:
        lines.append(f"init_latent = {cfg.init_latent}")
    if cfg.prompt_embedding is not None:
        lines.append(f"prompt_embedding = {cfg.prompt_embedding}")
    for s in cfg.subjects:
        lines.append(f"subject.{s.lora_id}.tokens = " + ",".join(str(t) for t in s.tokens))
        if s.lora_path is not None:
            lines.append(f"subject.{s.lora_id}.lora = {s.lora_path}")
    return "\n".join(lines) + "\n"
