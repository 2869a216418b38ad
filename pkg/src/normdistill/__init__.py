"""Multi-class unsupervised anomaly detection via cross-modal normality distillation.

A frozen vision encoder is reverse-distilled into a trainable decoder;
learnable class-agnostic text prompts anchor the decoded features to a shared
notion of normality, a tanh control map promotes sensitivity to abnormal
patches, and a gated mixture-of-experts reduces interference between the
patch patterns of different categories. Anomalies surface as per-position
cosine disagreement between promoted encoded and decoded features.
"""

from .blocks import MultiheadSelfAttention, ResidualAttentionBlock, residual_attention_block
from .config import DataConfig, EncoderConfig, RunConfig, TrainConfig, load_config
from .constraint import ConstraintConfig, alignment_loss, constraint_loss, decoded_alignment_loss
from .data import ImageSample, load_dataset
from .encoders import (PatchFeatureMap, PromptSet, TextFeaturePair, ToyTextEncoder,
                       ToyVisionEncoder, encode_image, encode_prompts, init_prompts)
from .errors import (BackendError, BackendUnavailableError, CheckpointCompatibilityError,
                     CheckpointError, ConfigurationError, DatasetIntegrityError,
                     DegenerateInputError, InputError, NormdistillError, PipelineStageError,
                     TrainingDivergenceError, UndefinedMetricError)
from .fnp import ControlMap, PromotedFeature, control_map, distill_loss, promote
from .heatmap import export_heatmap, load_raw_map, save_raw_map
from .metrics import MetricsReport, aupro, auroc, average_precision, evaluate, evaluate_scored
from .moe import (ExpertMLP, FusionProjection, GateAssignment, MoEConfig, Router, fuse,
                  importance_loss, moe_apply, moe_forward, route)
from .pipeline import (Decoder, ForwardOutputs, ModelState, build_state, decode, fit, forward,
                       load_checkpoint, perturb, save_checkpoint, total_loss)
from .scoring import AnomalyResult, anomaly_map, score_dataset
from .synthetic import SynthSpec, generate_synthetic

__version__ = "0.1.0"
