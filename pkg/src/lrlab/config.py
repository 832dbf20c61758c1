"""Experiment configuration: validated fields, a flat key=value file format,
and the model-spec mini-language.

Model specs are comma-separated layer descriptors:

    dense:<out>:<activation>          e.g. dense:16:tanh
    conv:<fh>x<fw>x<filters>:<act>    e.g. conv:3x3x4:relu

Conv layers need a 3-D input; set input_shape (e.g. "4x4x1") to reshape flat
feature rows before the first layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from . import netcore
from .datasets import DATASET_KINDS
from .regularizers import DAMPING_KINDS

REGULARIZERS = ("none", "dlr", "alr", "dropout", "weight_decay", "asr")


class UsageError(ValueError):
    """Invalid configuration or command-line input."""


@dataclass
class ExperimentConfig:
    name: str = "run"
    # dataset
    dataset: str = "noisy-iris-like"
    csv_dir: str = ""
    csv_name: str = ""
    csv_targets: int = 0  # 0 = infer from header
    noise: float = 0.0
    features: int = 4
    classes: int = 3
    targets: int = 1
    train_n: int = 60
    val_n: int = 30
    test_n: int = 120
    input_std: float = 1.0
    teacher_std: float = 1.0
    noise_std: float = 0.1
    spread: float = 0.15
    input_shape: str = ""
    # model and loss
    model: str = "dense:16:tanh,dense:3:softmax"
    loss: str = "cross_entropy"
    # regularization
    regularizer: str = "none"
    dropout_rate: float = 0.1
    weight_decay: float = 1e-3
    asr_gamma: float = 0.0  # 0 = use 1/num_layers
    damping: str = "inv_log"
    lrf_rank: int = 1
    # training loop
    patience: int = 3
    epsilon: float = 1e-6
    step_size: float = 0.05
    batch_size: int = 0  # 0 = full batch
    max_epochs: int = 200
    probe_size: int = 32
    seed: int = -1  # mandatory; -1 means unset

    def validate(self):
        if self.seed < 0:
            raise UsageError("seed is mandatory (nonnegative integer)")
        if self.dataset != "csv" and self.dataset not in DATASET_KINDS:
            raise UsageError(
                f"unknown dataset {self.dataset!r}; choose 'csv' or one of {DATASET_KINDS}"
            )
        if self.dataset == "csv" and not (self.csv_dir and self.csv_name):
            raise UsageError("dataset=csv requires csv_dir and csv_name")
        if self.regularizer not in REGULARIZERS:
            raise UsageError(f"unknown regularizer {self.regularizer!r}; choose from {REGULARIZERS}")
        if self.damping not in DAMPING_KINDS:
            raise UsageError(f"unknown damping {self.damping!r}; choose from {DAMPING_KINDS}")
        if self.loss not in netcore.LOSS_KINDS:
            raise UsageError(f"unknown loss {self.loss!r}; choose from {netcore.LOSS_KINDS}")
        for field_name in ("patience", "max_epochs", "train_n", "val_n", "test_n", "probe_size"):
            if getattr(self, field_name) < 1:
                raise UsageError(f"{field_name} must be >= 1")
        if self.step_size <= 0:
            raise UsageError("step_size must be positive")
        if self.epsilon <= 0:
            raise UsageError("epsilon must be positive")
        if self.batch_size < 0:
            raise UsageError("batch_size must be >= 0 (0 = full batch)")
        if self.lrf_rank < 1:
            raise UsageError("lrf_rank must be >= 1")
        if self.regularizer == "dropout" and not 0.0 < self.dropout_rate < 1.0:
            raise UsageError("dropout_rate must be in (0, 1)")
        if self.input_shape:
            parse_shape(self.input_shape)
        parse_model_spec(self.model)
        return self

    def to_mapping(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def config_from_mapping(mapping):
    """Build a config from string or typed values; unknown keys are errors."""
    kwargs = {}
    for key, raw in mapping.items():
        if key not in _FIELD_TYPES:
            raise UsageError(f"unknown config key {key!r}")
        ftype = _FIELD_TYPES[key]
        try:
            if ftype in ("int", int):
                kwargs[key] = int(raw)
            elif ftype in ("float", float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        except (TypeError, ValueError):
            raise UsageError(f"config key {key}={raw!r} is not a valid {ftype}") from None
    return ExperimentConfig(**kwargs)


def parse_config_file(path):
    """Read a flat key = value file (blank lines and # comments ignored)."""
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping


def write_config_file(path, config):
    with open(path, "w") as fh:
        for line in config_echo_lines(config):
            fh.write(line + "\n")


def config_echo_lines(config):
    return [f"{key} = {_fmt_value(value)}" for key, value in config.to_mapping().items()]


def _fmt_value(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_shape(text):
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad shape {text!r}; expected e.g. 4x4x1") from None
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"bad shape {text!r}; expected three positive dims HxWxC")
    return dims


def parse_model_spec(spec):
    """Parse the model string into a list of layer descriptors."""
    layers = []
    for part in spec.split(","):
        part = part.strip()
        fields = part.split(":")
        if len(fields) != 3:
            raise UsageError(f"bad layer spec {part!r}; expected kind:size:activation")
        kind, size, activation = fields
        if activation not in netcore.ACTIVATION_NAMES:
            raise UsageError(f"unknown activation {activation!r} in {part!r}")
        if kind == "dense":
            try:
                out_dim = int(size)
            except ValueError:
                raise UsageError(f"bad dense size {size!r} in {part!r}") from None
            if out_dim < 1:
                raise UsageError(f"dense size must be >= 1 in {part!r}")
            layers.append(("dense", out_dim, activation))
        elif kind == "conv":
            dims = parse_shape(size)
            if activation == "softmax":
                raise UsageError("softmax is not available on conv layers")
            layers.append(("conv", dims, activation))
        else:
            raise UsageError(f"unknown layer kind {kind!r} in {part!r}")
    if not layers:
        raise UsageError("model spec is empty")
    return layers


def build_network(config, feature_dim, rng):
    """Instantiate the configured model, resolving layer input sizes forward."""
    descriptors = parse_model_spec(config.model)
    shape = parse_shape(config.input_shape) if config.input_shape else None
    if shape is not None and shape[0] * shape[1] * shape[2] != feature_dim:
        raise UsageError(
            f"input_shape {config.input_shape} has {shape[0] * shape[1] * shape[2]} entries "
            f"but the dataset provides {feature_dim} features"
        )
    current = shape if shape is not None else feature_dim
    layers = []
    for kind, size, activation in descriptors:
        if kind == "dense":
            in_dim = current if isinstance(current, int) else current[0] * current[1] * current[2]
            layers.append(netcore.make_dense(in_dim, size, activation, rng))
            current = size
        else:
            if isinstance(current, int):
                raise UsageError("conv layer needs a 3-D input; set input_shape")
            fh, fw, fn = size
            h, w, c = current
            if h < fh or w < fw:
                raise UsageError(f"conv filter {fh}x{fw} larger than input {h}x{w}")
            layers.append(netcore.make_conv(fh, fw, c, fn, activation, rng))
            current = (h - fh + 1, w - fw + 1, fn)
    return netcore.Network(layers)
