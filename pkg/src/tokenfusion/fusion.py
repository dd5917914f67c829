"""Token-fusion projectors bridging a vision encoder to an LLM embedding space.

Three projector families over a stack of encoder feature maps:

* ``stf`` -- the learnable dual-stage path: multi-block channel fusion (MBTF,
  concat over M evenly sampled encoder blocks followed by two pointwise convs)
  feeding spatial fusion (STF, one k x k stride-k conv that merges each
  disjoint k x k token window, then two pointwise alignment convs and a split
  into E tokens per window).
* ``avgpool`` -- parameter-free 2x2 mean pooling of the last block's map,
  followed by a two-layer pointwise MLP.
* ``tokenconcat`` -- lossless 2x2 space-to-depth on the last block's map,
  followed by the same MLP shape.

Every learnable layer is an exact-cover convolution from the tensor engine,
so analytic gradients are available throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError

PROJECTOR_NAMES = ("stf", "avgpool", "tokenconcat")

# Baseline projectors always merge 2x2 windows, independent of the fusion
# kernel; they consume only the last encoder block.
BASELINE_WINDOW = 2


def select_block_indices(encoder_depth: int, num_blocks: int) -> list[int]:
    """Evenly spaced 1-based block indices ending at the last encoder block.

    With depth 24 and 8 blocks this yields [3, 6, 9, 12, 15, 18, 21, 24].
    """
    if num_blocks < 1:
        raise ConfigError(f"block count must be >= 1, got {num_blocks}")
    if num_blocks > encoder_depth:
        raise ConfigError(
            f"cannot sample {num_blocks} blocks from a depth-{encoder_depth} encoder"
        )
    if encoder_depth % num_blocks != 0:
        raise ConfigError(
            f"encoder depth {encoder_depth} is not divisible by block count {num_blocks}"
        )
    step = encoder_depth // num_blocks
    return list(range(step, encoder_depth + 1, step))


@dataclass(frozen=True)
class FusionConfig:
    """All hyperparameters of the projector stack.

    ``mbtf_hidden`` and ``stf_hidden`` may be left as None, in which case they
    derive from the channel widths: 4 * encoder_width for the MBTF hidden
    layer and 4 * kernel^2 * encoder_width for the STF hidden layer (the
    published widths are the kernel=2, encoder_width=1024 instance of both
    rules).
    """

    encoder_depth: int = 24
    num_blocks: int = 8
    height: int = 24
    width: int = 24
    encoder_width: int = 1024
    kernel: int = 2
    fused_tokens: int = 1
    llm_width: int = 4096
    mbtf_hidden: int | None = None
    stf_hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mbtf_hidden is None:
            object.__setattr__(self, "mbtf_hidden", 4 * self.encoder_width)
        if self.stf_hidden is None:
            object.__setattr__(
                self, "stf_hidden", 4 * self.kernel * self.kernel * self.encoder_width
            )
        self.validate()

    @property
    def fused_width(self) -> int:
        """Channel width after the spatial fusion conv: kernel^2 * encoder_width."""
        return self.kernel * self.kernel * self.encoder_width

    def validate(self) -> None:
        k, e = self.kernel, self.fused_tokens
        for name in ("encoder_depth", "num_blocks", "height", "width",
                     "encoder_width", "kernel", "fused_tokens", "llm_width",
                     "mbtf_hidden", "stf_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.num_blocks > self.encoder_depth:
            raise ConfigError(
                f"num_blocks {self.num_blocks} exceeds encoder_depth {self.encoder_depth}"
            )
        if self.encoder_depth % self.num_blocks != 0:
            raise ConfigError(
                f"encoder_depth {self.encoder_depth} is not divisible by "
                f"num_blocks {self.num_blocks}"
            )
        if self.height % k != 0:
            raise ConfigError(f"kernel {k} does not divide height {self.height}")
        if self.width % k != 0:
            raise ConfigError(f"kernel {k} does not divide width {self.width}")
        if e > k * k:
            raise ConfigError(
                f"fused_tokens {e} exceeds the {k * k} tokens in a {k} x {k} window"
            )
        if (k * k * self.encoder_width) % e != 0:
            raise ConfigError(
                f"fused_tokens {e} does not divide the fused channel width "
                f"{k * k * self.encoder_width}"
            )

    def block_indices(self) -> list[int]:
        return select_block_indices(self.encoder_depth, self.num_blocks)


@dataclass
class FeatureStack:
    """M encoder feature maps, each height x width x channels, block-major."""

    maps: np.ndarray  # (M, H, W, C) float32
    block_indices: list[int]

    def __post_init__(self):
        self.maps = np.ascontiguousarray(self.maps, dtype=np.float32)
        if self.maps.ndim != 4:
            raise ShapeMismatchError(
                f"feature stack must be (M, H, W, C), got shape {self.maps.shape}"
            )
        if self.maps.shape[0] != len(self.block_indices):
            raise ShapeMismatchError(
                f"stack holds {self.maps.shape[0]} maps but {len(self.block_indices)} "
                "block indices"
            )

    @property
    def num_maps(self) -> int:
        return self.maps.shape[0]

    def map_tensors(self) -> list[T.Tensor]:
        return [T.Tensor(self.maps[i]) for i in range(self.num_maps)]

    def last_map(self) -> T.Tensor:
        return T.Tensor(self.maps[-1])

    def check_matches(self, config: FusionConfig) -> None:
        m, h, w, c = self.maps.shape
        if m != config.num_blocks:
            raise ShapeMismatchError(
                f"stack has {m} maps, config expects {config.num_blocks}"
            )
        if (h, w) != (config.height, config.width):
            raise ShapeMismatchError(
                f"stack maps are {h} x {w}, config expects "
                f"{config.height} x {config.width}"
            )
        if c != config.encoder_width:
            raise ShapeMismatchError(
                f"stack maps have {c} channels, config expects {config.encoder_width}"
            )


@dataclass
class ConvLayer:
    """One convolution's learnable state: weight (k,k,Cin,Cout) and bias (Cout,)."""

    weight: T.Tensor
    bias: T.Tensor

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]

    def param_count(self) -> int:
        return self.weight.data.size + self.bias.data.size

    def zero_grads(self) -> None:
        self.weight.zero_grad()
        self.bias.zero_grad()


class ModuleParams:
    """Named map from layer id (e.g. ``mbtf.conv1``) to its learnable state."""

    def __init__(self, layers: dict[str, ConvLayer]):
        self.layers = layers

    def __getitem__(self, layer_id: str) -> ConvLayer:
        return self.layers[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.layers

    def items(self) -> Iterator[tuple[str, ConvLayer]]:
        return iter(self.layers.items())

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers.values())

    def zero_grads(self) -> None:
        for layer in self.layers.values():
            layer.zero_grads()

    def sgd_step(self, lr: float) -> None:
        for layer in self.layers.values():
            for t in (layer.weight, layer.bias):
                if t.grad is not None:
                    t.data -= np.float32(lr) * t.grad


def layer_shapes(config: FusionConfig, projector: str = "stf") -> list[tuple[str, int, int, int]]:
    """(layer id, kernel, in channels, out channels) for each learnable layer."""
    c1, c3, k, e = config.encoder_width, config.llm_width, config.kernel, config.fused_tokens
    if projector == "stf":
        return [
            ("mbtf.conv1", 1, config.num_blocks * c1, config.mbtf_hidden),
            ("mbtf.conv2", 1, config.mbtf_hidden, c1),
            ("stf.conv1", k, c1, config.fused_width),
            ("stf.conv2", 1, config.fused_width, config.stf_hidden),
            ("stf.conv3", 1, config.stf_hidden, e * c3),
        ]
    if projector == "avgpool":
        return [
            ("avgpool.conv1", 1, c1, c3),
            ("avgpool.conv2", 1, c3, c3),
        ]
    if projector == "tokenconcat":
        return [
            ("tokenconcat.conv1", 1, BASELINE_WINDOW * BASELINE_WINDOW * c1, c3),
            ("tokenconcat.conv2", 1, c3, c3),
        ]
    raise ConfigError(f"unknown projector {projector!r}; expected one of {PROJECTOR_NAMES}")


def init_params(config: FusionConfig, projector: str = "stf") -> ModuleParams:
    """Deterministically initialise all layers of the requested projector.

    Weights draw from uniform(-b, b) with b = sqrt(1 / fan_in), biases start
    at zero. A single PCG64 generator seeded with ``config.seed`` is consumed
    in fixed layer order, so identical seeds give bit-identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    layers: dict[str, ConvLayer] = {}
    for layer_id, k, cin, cout in layer_shapes(config, projector):
        bound = float(np.sqrt(1.0 / (k * k * cin)))
        w = rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(np.float32)
        layers[layer_id] = ConvLayer(
            weight=T.Tensor(w, requires_grad=True),
            bias=T.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True),
        )
    return ModuleParams(layers)


@dataclass
class TokenSequence:
    """LLM-bound token sequence plus the graph node that produced it."""

    tokens: T.Tensor  # (length, width)
    source: str  # stf | avgpool | tokenconcat | identity

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def data(self) -> np.ndarray:
        return self.tokens.data


Activation = Callable[[T.Tensor], T.Tensor]


def _conv(x: T.Tensor, layer: ConvLayer, act: Activation) -> T.Tensor:
    return act(T.conv2d(x, layer.weight, layer.bias, stride=layer.kernel))


def mbtf_forward(
    stack: FeatureStack,
    params: ModuleParams,
    config: FusionConfig,
    act: Activation = T.gelu,
) -> T.Tensor:
    """Fuse M block maps into one: channel concat, then two pointwise convs.

    Output keeps the input spatial extents and returns to the encoder channel
    width, so the result can stand in anywhere a single block map could.
    """
    stack.check_matches(config)
    fused = T.concat_channels(stack.map_tensors())
    h = _conv(fused, params["mbtf.conv1"], act)
    return _conv(h, params["mbtf.conv2"], act)


def stf_forward(
    fused: T.Tensor,
    params: ModuleParams,
    config: FusionConfig,
    act: Activation = T.gelu,
) -> TokenSequence:
    """Merge each k x k window and align to the LLM width.

    One k x k stride-k conv widens channels to kernel^2 * encoder_width, two
    pointwise convs align to fused_tokens * llm_width, and the result is
    split into fused_tokens tokens per window: (H/k) * (W/k) * fused_tokens
    tokens of width llm_width.
    """
    if fused.shape != (config.height, config.width, config.encoder_width):
        raise ShapeMismatchError(
            f"spatial fusion input has shape {fused.shape}, config expects "
            f"({config.height}, {config.width}, {config.encoder_width})"
        )
    h = _conv(fused, params["stf.conv1"], act)
    h = _conv(h, params["stf.conv2"], act)
    h = _conv(h, params["stf.conv3"], act)
    return TokenSequence(T.reshape_tokens(h, config.fused_tokens), source="stf")


def projector_forward(
    stack: FeatureStack,
    params: ModuleParams,
    config: FusionConfig,
    act: Activation = T.gelu,
) -> TokenSequence:
    """Full learnable path: multi-block fusion followed by spatial fusion."""
    return stf_forward(mbtf_forward(stack, params, config, act), params, config, act)


def _baseline_mlp(
    x: T.Tensor, params: ModuleParams, prefix: str, act: Activation
) -> TokenSequence:
    h = _conv(x, params[f"{prefix}.conv1"], act)
    h = _conv(h, params[f"{prefix}.conv2"], act)
    return TokenSequence(T.reshape_tokens(h, 1), source=prefix)


def avgpool_projector(
    stack: FeatureStack,
    params: ModuleParams,
    config: FusionConfig,
    act: Activation = T.gelu,
) -> TokenSequence:
    """2x2 mean pooling of the last block map, then a two-layer pointwise MLP."""
    stack.check_matches(config)
    pooled = T.avgpool2x2(stack.last_map())
    return _baseline_mlp(pooled, params, "avgpool", act)


def tokenconcat_projector(
    stack: FeatureStack,
    params: ModuleParams,
    config: FusionConfig,
    act: Activation = T.gelu,
) -> TokenSequence:
    """2x2 space-to-depth of the last block map, then a two-layer pointwise MLP."""
    stack.check_matches(config)
    stacked = T.space_to_depth(stack.last_map(), BASELINE_WINDOW)
    return _baseline_mlp(stacked, params, "tokenconcat", act)


PROJECTORS: dict[str, Callable[..., TokenSequence]] = {
    "stf": projector_forward,
    "avgpool": avgpool_projector,
    "tokenconcat": tokenconcat_projector,
}


def run_projector(
    name: str,
    stack: FeatureStack,
    params: ModuleParams,
    config: FusionConfig,
) -> TokenSequence:
    try:
        fn = PROJECTORS[name]
    except KeyError:
        raise ConfigError(
            f"unknown projector {name!r}; expected one of {PROJECTOR_NAMES}"
        ) from None
    return fn(stack, params, config)


def config_from_mapping(values: dict[str, int]) -> FusionConfig:
    """Build a config from a flat mapping, rejecting unknown keys."""
    known = {f.name for f in fields(FusionConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return FusionConfig(**values)


def replace_config(config: FusionConfig, **overrides) -> FusionConfig:
    """Like dataclasses.replace, re-deriving hidden widths when kernel changes."""
    if "kernel" in overrides and "stf_hidden" not in overrides:
        overrides["stf_hidden"] = None
    if "encoder_width" in overrides:
        overrides.setdefault("mbtf_hidden", None)
        overrides.setdefault("stf_hidden", None)
    return replace(config, **overrides)
