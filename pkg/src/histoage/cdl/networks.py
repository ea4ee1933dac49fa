"""
networks.py
Encoder (VGG-style conv blocks + two ReLU fully connected layers) and the predictor MLP.
Parameters are named `encoder.block0.conv1.w` etc.; the names are the
checkpoint keys.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from histoage.autodiff import ops
from histoage.autodiff.tensor import Parameter, Tensor
from histoage.utils.errors import DataError
from histoage.utils.rng import numpy_rng

INPUT_SIZE = 224


@dataclass
class EncoderConfig:
    blocks: tuple = (2, 2, 3)
    widths: tuple = (64, 128, 256)
    kernel: int = 3
    dim: int = 512
    input_size: int = INPUT_SIZE

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.widths = tuple(int(w) for w in self.widths)
        if self.dim <= 0:
            raise DataError(f"encoder output width must be positive, got {self.dim}")
        if len(self.blocks) != len(self.widths):
            raise DataError("encoder blocks and widths differ in length")
        if self.input_size % (2 ** (len(self.blocks) - 1)):
            raise DataError(f"input size {self.input_size} does not survive {len(self.blocks) - 1} 2x2 pools")


@dataclass
class PredictorConfig:
    dim: int = 512
    hidden: int = field(default=0)

    def __post_init__(self):
        if self.hidden <= 0:
            self.hidden = max(1, self.dim // 4)


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def _positive_bias(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    """Uniform on (0, 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return (bound - rng.uniform(0.0, bound, shape)).astype(dtype)


class Encoder:
    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = {}
        channels = 3
        for b, (layers, width) in enumerate(zip(config.blocks, config.widths)):
            for layer in range(layers):
                name = f"encoder.block{b}.conv{layer}"
                k = config.kernel
                rng = numpy_rng(seed, name)
                self.params[f"{name}.w"] = Parameter(_he_normal(rng, (k, k, channels, width), k * k * channels, dtype), f"{name}.w")
                self.params[f"{name}.b"] = Parameter(np.zeros(width, dtype=dtype), f"{name}.b")
                channels = width
        for name, (fan_in, fan_out) in (("encoder.fc0", (channels, config.dim)), ("encoder.fc1", (config.dim, config.dim))):
            rng = numpy_rng(seed, name)
            self.params[f"{name}.w"] = Parameter(_he_normal(rng, (fan_in, fan_out), fan_in, dtype), f"{name}.w")
            self.params[f"{name}.b"] = Parameter(_positive_bias(rng, (fan_out,), fan_in, dtype), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        for b, layers in enumerate(self.config.blocks):
            if b > 0:
                x = ops.max_pool(x)
            for layer in range(layers):
                name = f"encoder.block{b}.conv{layer}"
                x = ops.relu(ops.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], padding="same"))
        x = ops.global_average_pool(x)
        x = ops.relu(ops.fully_connected(x, p["encoder.fc0.w"], p["encoder.fc0.b"]))
        return ops.relu(ops.fully_connected(x, p["encoder.fc1.w"], p["encoder.fc1.b"]))

    def parameters(self) -> dict:
        return self.params


class Predictor:
    def __init__(self, config: PredictorConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        d, h = config.dim, config.hidden
        rng0, rng1 = numpy_rng(seed, "predictor.fc0"), numpy_rng(seed, "predictor.fc1")
        self.params = {
            "predictor.fc0.w": Parameter(_he_normal(rng0, (d, h), d, dtype), "predictor.fc0.w"),
            "predictor.fc0.b": Parameter(_fan_in_uniform(rng0, (h,), d, dtype), "predictor.fc0.b"),
            "predictor.bn.gamma": Parameter(np.ones(h, dtype=dtype), "predictor.bn.gamma"),
            "predictor.bn.beta": Parameter(np.zeros(h, dtype=dtype), "predictor.bn.beta"),
            "predictor.fc1.w": Parameter(_he_normal(rng1, (h, d), h, dtype), "predictor.fc1.w"),
            "predictor.fc1.b": Parameter(_fan_in_uniform(rng1, (d,), h, dtype), "predictor.fc1.b"),
        }
        self.bn = ops.BatchNormState(h, momentum=0.1, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        p = self.params
        h = ops.fully_connected(x, p["predictor.fc0.w"], p["predictor.fc0.b"])
        h = ops.relu(ops.batch_norm(h, p["predictor.bn.gamma"], p["predictor.bn.beta"], self.bn, training))
        return ops.fully_connected(h, p["predictor.fc1.w"], p["predictor.fc1.b"])

    def parameters(self) -> dict:
        return self.params

    def buffers(self) -> dict:
        return {"predictor.bn.running_mean": self.bn.running_mean, "predictor.bn.running_var": self.bn.running_var}


class CDLModel:
    """Encoder + predictor for one scale."""

    def __init__(self, encoder_config: EncoderConfig, scale_tag: str = "S1", seed: int = 0,
                 predictor_config: PredictorConfig | None = None, dtype=np.float32):
        self.scale_tag = scale_tag
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.encoder = Encoder(encoder_config, seed=seed, dtype=dtype)
        self.predictor = Predictor(predictor_config or PredictorConfig(dim=encoder_config.dim), seed=seed, dtype=dtype)
        if self.predictor.config.dim != encoder_config.dim:
            raise DataError(f"predictor width {self.predictor.config.dim} != encoder output {encoder_config.dim}")

    @property
    def dim(self) -> int:
        return self.encoder.config.dim

    def parameters(self) -> dict:
        return {**self.encoder.parameters(), **self.predictor.parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def embed(self, x: Tensor, training: bool = False) -> Tensor:
        return self.predictor(self.encoder(x), training=training)

    # ---------------------- State ----------------------

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.parameters().items()}
        if hasattr(self.predictor, "buffers"):
            state.update(self.predictor.buffers())
        return state

    def load_state_dict(self, state: dict):
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise DataError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in params.items():
            if tuple(state[name].shape) != p.shape:
                raise DataError(f"checkpoint shape for {name} is {tuple(state[name].shape)}, model expects {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype)
        if hasattr(self.predictor, "bn"):
            self.predictor.bn.running_mean = np.array(state["predictor.bn.running_mean"], dtype=self.dtype)
            self.predictor.bn.running_var = np.array(state["predictor.bn.running_var"], dtype=self.dtype)

    def describe(self) -> dict:
        return {
            "scale_tag": self.scale_tag,
            "seed": self.seed,
            "encoder": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.encoder.config).items()},
            "predictor": asdict(self.predictor.config),
        }

    @classmethod
    def from_description(cls, meta: dict, dtype=np.float32) -> "CDLModel":
        return cls(
            EncoderConfig(**meta["encoder"]),
            scale_tag=meta["scale_tag"],
            seed=meta.get("seed", 0),
            predictor_config=PredictorConfig(**meta["predictor"]),
            dtype=dtype,
        )
