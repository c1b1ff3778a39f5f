"""The six-block 1D CNN: configuration, parameters, forward and backward."""
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ShapeError, StateError
from . import layers as L

N_BLOCKS = 6


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 12
    input_length: int = 1000
    conv_filters: tuple = (16, 16, 32, 32, 64, 64)
    conv_kernels: tuple = (7, 7, 5, 5, 3, 3)
    leaky_alpha: float = 0.3
    dense_hidden: int = 32
    pool_size: int = 2
    bn_eps: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        object.__setattr__(self, "conv_kernels", tuple(int(v) for v in self.conv_kernels))
        self.validate()

    def validate(self):
        if len(self.conv_filters) != N_BLOCKS or len(self.conv_kernels) != N_BLOCKS:
            raise ShapeError(f"exactly {N_BLOCKS} convolutional blocks are required")
        if self.in_channels < 1:
            raise ShapeError("in_channels must be >= 1")
        if self.input_length < 2 ** N_BLOCKS:
            raise ShapeError(f"input_length must be >= {2 ** N_BLOCKS}")
        if any(f < 1 for f in self.conv_filters) or self.dense_hidden < 1:
            raise ShapeError("layer widths must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.conv_kernels):
            raise ShapeError("kernel sizes must be odd and positive")
        if self.pool_size != 2:
            raise ShapeError("pool_size is fixed at 2")
        if not (self.bn_eps > 0):
            raise ShapeError("bn_eps must be positive")

    def block_lengths(self):
        """Sequence lengths entering each block, plus the final pooled length."""
        out = [self.input_length]
        for _ in range(N_BLOCKS):
            out.append(out[-1] // 2)
        return out

    @property
    def flatten_width(self):
        return self.block_lengths()[-1] * self.conv_filters[-1]

    def to_dict(self):
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["conv_kernels"] = list(self.conv_kernels)
        return d


def param_shapes(config):
    """Canonical ordered list of (name, shape, trainable)."""
    out = []
    c_in = config.in_channels
    for i, (f, k) in enumerate(zip(config.conv_filters, config.conv_kernels)):
        p = f"block{i}"
        out += [
            (f"{p}.conv.w", (k, c_in, f), True),
            (f"{p}.conv.b", (f,), True),
            (f"{p}.bn.gamma", (f,), True),
            (f"{p}.bn.beta", (f,), True),
            (f"{p}.bn.moving_mean", (f,), False),
            (f"{p}.bn.moving_var", (f,), False),
        ]
        c_in = f
    out += [
        ("dense1.w", (config.flatten_width, config.dense_hidden), True),
        ("dense1.b", (config.dense_hidden,), True),
        ("dense2.w", (config.dense_hidden, 1), True),
        ("dense2.b", (1,), True),
    ]
    return out


@dataclass
class ModelParams:
    tensors: dict = field(default_factory=dict)  # insertion order is canonical

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def names(self):
        return list(self.tensors)

    def trainable(self, config):
        return [n for n, _, t in param_shapes(config) if t]

    def astype(self, dtype):
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def n_trainable(self, config):
        return int(sum(self.tensors[n].size for n in self.trainable(config)))

    def check(self, config):
        expected = param_shapes(config)
        if list(self.tensors) != [n for n, _, _ in expected]:
            raise ShapeError("parameter names/order do not match the configuration")
        for name, shape, _ in expected:
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape} != {shape}")


def _truncated_normal(rng, shape, std):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config, seed=0):
    """He-style truncated-normal fan-in init; BN gamma 1, beta 0, moving var 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, _ in param_shapes(config):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            # 0.8796 is the std of a unit normal truncated at +-2
            tensors[name] = _truncated_normal(rng, shape, np.sqrt(2.0 / fan_in) / 0.87962566103423978)
        elif name.endswith("gamma") or name.endswith("moving_var"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(tensors)


# --- forward / backward ---------------------------------------------------------

def _check_input(config, x):
    if x.ndim != 3 or x.shape[1:] != (config.in_channels, config.input_length):
        raise ShapeError(
            f"input: expected (batch, {config.in_channels}, {config.input_length}), got {x.shape}")


def forward_with_cache(config, params, x, mode="train", momentum=0.99, update_stats=True,
                       bn_step=None):
    """Run the network; returns ``(p, cache)`` where cache feeds :func:`model_backward`.

    ``bn_step`` (1-based) switches the moving-statistics update to its
    bias-corrected form.
    """
    _check_input(config, x)
    alpha = config.leaky_alpha
    h = x
    blocks = []
    for i in range(N_BLOCKS):
        p = f"block{i}"
        try:
            conv = L.conv1d_forward(h, params[f"{p}.conv.w"], params[f"{p}.conv.b"])
        except ShapeError as exc:
            raise ShapeError(f"{p}.conv: {exc}") from None
        bn, bn_cache = L.batchnorm_forward(
            conv, params[f"{p}.bn.gamma"], params[f"{p}.bn.beta"],
            params[f"{p}.bn.moving_mean"], params[f"{p}.bn.moving_var"],
            mode=mode, momentum=momentum, eps=config.bn_eps, update_stats=update_stats,
            step=bn_step)
        act = L.leaky_relu(bn, alpha)
        try:
            pooled, idx = L.maxpool1d_forward(act)
        except ShapeError as exc:
            raise ShapeError(f"{p}.pool: {exc}") from None
        blocks.append((h, bn_cache, bn, idx, act.shape[2]))
        h = pooled
    flat = h.reshape(h.shape[0], -1)
    try:
        z1 = L.dense_forward(flat, params["dense1.w"], params["dense1.b"])
        a1 = L.leaky_relu(z1, alpha)
        z2 = L.dense_forward(a1, params["dense2.w"], params["dense2.b"])
    except ShapeError as exc:
        raise ShapeError(f"dense: {exc}") from None
    prob = L.sigmoid(z2[:, 0])
    cache = {"blocks": blocks, "pooled_shape": h.shape, "flat": flat, "z1": z1, "a1": a1,
             "p": prob, "mode": mode}
    return prob, cache


def model_forward(config, params, x, mode="eval", momentum=0.99, update_stats=True):
    return forward_with_cache(config, params, x, mode, momentum, update_stats)[0]


def model_backward(config, params, cache, labels, weights=None):
    """Gradients of the weighted BCE w.r.t. every trainable parameter."""
    if cache is None or "blocks" not in cache:
        raise StateError("model_backward needs the cache from a train-mode forward pass")
    if cache["mode"] != "train":
        raise StateError("gradients are only defined for train-mode forward passes")
    alpha = config.leaky_alpha
    grads = {}
    dz2 = L.bce_logit_grad(cache["p"], labels, weights)[:, None]
    da1, grads["dense2.w"], grads["dense2.b"] = L.dense_backward(dz2, cache["a1"], params["dense2.w"])
    dz1 = L.leaky_relu_backward(da1, cache["z1"], alpha)
    dflat, grads["dense1.w"], grads["dense1.b"] = L.dense_backward(dz1, cache["flat"], params["dense1.w"])
    dh = dflat.reshape(cache["pooled_shape"])
    for i in reversed(range(N_BLOCKS)):
        p = f"block{i}"
        h_in, bn_cache, bn_out, idx, act_len = cache["blocks"][i]
        dact = L.maxpool1d_backward(dh, idx, act_len)
        dbn = L.leaky_relu_backward(dact, bn_out, alpha)
        dconv, grads[f"{p}.bn.gamma"], grads[f"{p}.bn.beta"] = L.batchnorm_backward(dbn, bn_cache)
        dh, grads[f"{p}.conv.w"], grads[f"{p}.conv.b"] = L.conv1d_backward(
            dconv, h_in, params[f"{p}.conv.w"])
    return {n: grads[n] for n in params.trainable(config)}


def predict(config, params, x, dtype=np.float64):
    """Eval-mode probabilities. ``dtype=np.float32`` runs the deployment path."""
    x = np.asarray(x, dtype=dtype)
    if params[params.names()[0]].dtype != np.dtype(dtype):
        params = params.astype(dtype)
    return model_forward(config, params, x, mode="eval")
