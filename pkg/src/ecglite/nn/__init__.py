"""From-scratch 1D-CNN engine (numpy, numba-accelerated kernels)."""
from .layers import (
    batchnorm_backward,
    batchnorm_forward,
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    leaky_relu,
    maxpool1d_backward,
    maxpool1d_forward,
    sigmoid,
    weighted_bce,
)
from .model import (
    ModelConfig,
    ModelParams,
    forward_with_cache,
    init_params,
    model_backward,
    model_forward,
    param_shapes,
    predict,
)
from .train import AdamState, TrainConfig, adam_step, history_csv, save_checkpoint, train_model, write_npz
