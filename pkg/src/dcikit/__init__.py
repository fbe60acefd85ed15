"""Toy interleaved multi-image transformer pipeline with a switchable
dense channel integration connector, plus its evaluation harness."""

from .autodiff import (GradCheckReport, Tape, Tensor, backward, concat_channels,
                       elementwise, grad_check, layer_norm, matmul, reduce_mean,
                       softmax_cross_entropy)
from .connector import (ConnectorConfig, ParamCountReport, VisionEmbedding,
                        assemble_embedding, connect, connector_param_count,
                        fuse_groups, init_projector_params)
from .data import (Lcg, SampleRecord, SplitSpec, load_manifest, read_pgm,
                   split_per_dataset, split_train_val, synth_generate,
                   verify_sample, write_manifest, write_pgm)
from .decoder import (DecoderConfig, SequencePlan, Vocab,
                      assemble_interleaved_sequence, build_plan, forward_loss,
                      greedy_generate, init_decoder_params)
from .metrics import (MetricReport, ScoredSample, accuracy_score,
                      aggregate_group_average, render_report, rouge_l)
from .training import (AdamState, LossComparison, LossLog, OptimizerConfig,
                       RunConfig, TrainResult, adam_step, compare_loss_curves,
                       default_run_config, evaluate, load_params, save_params,
                       train)
from .vision import (LayerFeatureStack, VisionConfig, encode_all_layers,
                     init_vision_params, patchify)

__version__ = "0.1.0"
