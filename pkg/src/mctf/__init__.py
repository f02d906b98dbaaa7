"""Token fusion over several matching criteria for DeiT-shaped vision transformers."""
from .consistency import consistency_loss, cross_entropy, sample_r_prime
from .criteria import (
    CriteriaTemperatures,
    TokenState,
    attraction_matrix,
    informativeness_weight,
    similarity_weight,
    size_weight,
)
from .flops import FlopsReport, block_macs, model_macs
from .fusion import FusionPlan, aggregate_attention, delta_pool, mctf_reduce
from .matching import EdgeSelection, bipartite_soft_match, brute_force_match, split_alternating
from .vit import ModelWeights, ViTConfig, block_forward, model_forward, patch_embed, preset

__version__ = "0.1.0"
