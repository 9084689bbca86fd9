"""labelfuse: merge heterogeneous, possibly sparse spatial label maps into a
homogeneous per-pixel concept tensor, with a pixel-wise label transformer,
baseline mergers, a toy differentiable training harness, and metrics."""

__version__ = "0.1.0"

from .tensor_core import Rng, read_tensor, write_tensor, load_tensor, save_tensor
from .label_model import (
    InstanceMap,
    LabelMap,
    LabelSet,
    SparsityMaskSet,
    apply_masks,
    generate_sparse_masks,
    synth_scene,
    validate_label_set,
)
from .fusion import (
    MergerParams,
    clam_merge,
    count_attention_macs,
    init_merger_params,
    naive_concat,
    tlam_merge,
)

__all__ = [
    "Rng",
    "read_tensor",
    "write_tensor",
    "load_tensor",
    "save_tensor",
    "LabelMap",
    "LabelSet",
    "InstanceMap",
    "SparsityMaskSet",
    "validate_label_set",
    "generate_sparse_masks",
    "apply_masks",
    "synth_scene",
    "MergerParams",
    "init_merger_params",
    "tlam_merge",
    "clam_merge",
    "naive_concat",
    "count_attention_macs",
]
