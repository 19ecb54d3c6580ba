"""Training-free subject masks from transformer attention maps, plus masked
multi-adapter fusion, validated on a deterministic toy double-stream model."""

from .attnmap import (
    AttentionMap,
    GridShape,
    SinkFilterConfig,
    SubjectTokenSpan,
    compute_cross_attention,
    edge_pixel_set,
    self_attention_enhance,
    suppress_attention_sink,
    top_fraction_indices,
    word_attention_map,
)
from .config import RunConfig, SubjectConfig, parse_config, serialize_config
from .lora import (
    LoraLayer,
    LoraSet,
    apply_subject_mask,
    fuse_masked_deltas,
    layer_ablation_l2,
    load_lora_set,
    lora_delta,
    random_lora_set,
    save_lora_set,
)
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
from .tensorio import PixelGrid, SeededRng, load_tensor, save_tensor, write_pgm
from .toydit import (
    GenerationTrace,
    SubjectSpec,
    ToyModel,
    ToyModelConfig,
    attention_perturbation_norm,
    build_toy_model,
    conflict_cosine_map,
    derive_subject_masks,
    forward_step,
    locality_ratio,
    masked_equivalence_error,
    run_pipeline,
)

__version__ = "0.1.0"
