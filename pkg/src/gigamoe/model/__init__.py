from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from .config import GATE_MODES, ModelConfig, tiny_config
from .layers import (ABF_SCHEDULE, AttentionWeights, LayerActivationRecord, MLPWeights,
                     RouterOutput, abf_base_for_context, attention_forward, gated_mlp,
                     moe_forward, rope_apply, router_forward, topk_ascending)
from .transformer import (MoETransformer, count_params, generate, init_params,
                          model_forward, parameter_shapes)
