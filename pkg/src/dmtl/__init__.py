"""Deep multi-task learning for heterogeneous attribute estimation.

A shared convolutional trunk feeds one subnetwork head per attribute
category; nominal categories train with softmax cross-entropy, ordinal ones
with summed squared error, jointly under per-category weights and squared-L2
weight penalties.  The package ships its own reverse-mode autodiff tape,
layer presets, label/catalog file formats, deterministic SGD training with
bit-exact checkpoints, the metric suite, and synthetic correlated-attribute
experiments, all behind a single command-line tool.
"""

from .catalog import (AttributeCatalog, AttributeDef, CategorySpec,
                      demographic_catalog, face40_catalog, load_catalog,
                      parse_catalog, save_catalog)
from .data import (Dataset, LabelRecord, SynthAttribute, SyntheticSpec,
                   cooccurrence, load_dataset, parse_labels,
                   serialize_labels, split_subject_exclusive, synth_generate,
                   write_dataset)
from .layers import (BatchNorm, Conv, FullyConnected, MaxPool, ReLU,
                     init_random, preset_head, preset_trunk)
from .metrics import (ComparisonTable, EvalOptions, MetricsReport, accuracy,
                      cross_database_eval, cs_at, epsilon_error, evaluate,
                      mae, mtl_vs_stl_report)
from .model import (DmtlModel, Prediction, build_dmtl, decode, forward,
                    head_gradient_closed_form, loss_nominal, loss_ordinal,
                    objective_dmtl, objective_stl, softmax, stl_bundle)
from .train import (TrainConfig, TrainState, full_scale_config,
                    load_checkpoint, lr_at, save_checkpoint, sgd_step,
                    train_loop)

__version__ = "0.1.0"
