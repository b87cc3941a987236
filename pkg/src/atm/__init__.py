"""Frame-arithmetic temporal blocks on a small numpy autodiff core."""
from .backbones import CnnStem, StemConfig, VitStem, build_baseline, build_model
from .block import (ATM, AtmConfig, DomainTransform, Extractor, TConv, atm_forward,
                    combine_atms, domain_transform, estimate_flops, feature_extract,
                    flops_breakdown, tconv)
from .harness import DatasetConfig, RunReport, TrainConfig, evaluate, train
from .interact import (ContextSpec, InteractionTensor, MulParams, context_indices, op_add,
                       op_div_log, op_mul_local, op_sub, span_and_interact)
from .synth import ClipBatch, SynthClipSpec, gen_clip, gen_dataset, read_clip, write_clip
from .tensor import Tensor, conv2d, elementwise, finite_diff_check, no_grad

__version__ = "0.1.0"
