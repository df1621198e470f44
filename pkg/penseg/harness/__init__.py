"""
    Training, evaluation, tiled inference, ablation experiments and the
    command-line interface.
"""

from penseg.harness.config import (
    TrainConfig,
    SynthConfig,
    load_config,
    save_config,
)
from penseg.harness.dataset import load_dataset, save_dataset
from penseg.harness.training import (
    TrainedModel,
    TrainHistory,
    TrainingLoggers,
    train,
)
from penseg.harness.evaluation import (
    evaluate,
    evaluate_detections,
    predict,
    prepare_input,
    project_stack,
)
from penseg.harness.tiling import infer_large
from penseg.harness.experiments import (
    VARIANTS,
    compare_variants,
    depth_encoding_correlation,
    variant_config,
)
