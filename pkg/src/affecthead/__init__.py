"""Multi-task affect head training, calibration and evaluation over
precomputed facial features."""

from .calibrate import (CalibrationProfile, blend, decide, evaluate_lsd,
                        evaluate_mtl, search_au_thresholds, search_blend_weight)
from .featstore import (Dataset, DatasetError, FeatureRecord, LabelSet,
                        TaskView, load_dataset, save_dataset, task_view,
                        validate_dataset)
from .metrics import (ConfusionMatrix, EvalReport, MtlScores, binary_f1_per_au,
                      ccc, confusion, macro_f1, mtl_score, rmse)
from .net import (HeadModel, LayerSpec, OptimizerState, adam_step, backward,
                  forward, init_model, init_optimizer, load_model, sam_step,
                  save_model)
from .training import (ClassWeights, HeadBundle, TrainConfig, bce_loss,
                       ccc_loss, class_weights, composite_mt_loss, train_heads,
                       train_openface_mlp, weighted_ce)

__version__ = "0.1.0"
