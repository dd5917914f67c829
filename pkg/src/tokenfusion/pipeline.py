"""Run orchestration: synthetic features, projector runs, training, timing.

Synthetic feature stacks stand in for a frozen vision encoder. Each block map
is standard-normal noise plus a handful of low-frequency cosine modes, then
standardised, so adjacent positions correlate the way natural-image patch
embeddings do; spatial fusion would be untestable on pure white noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .flops import token_count
from .fusion import (
    FeatureStack,
    FusionConfig,
    TokenSequence,
    config_from_mapping,
    init_params,
    run_projector,
)
from . import fmap
from . import tensor as T


@dataclass
class RunConfig:
    """One CLI invocation's worth of settings."""

    fusion: FusionConfig = field(default_factory=FusionConfig)
    projector: str = "stf"
    input_path: Path | None = None
    synthetic_seed: int | None = None
    out_path: Path | None = None
    fmt: str = "text"
    bench_reps: int = 20
    llm_params: float = 6.7e9

    def __post_init__(self):
        if (self.input_path is None) == (self.synthetic_seed is None):
            raise ConfigError(
                "exactly one of input_path and synthetic_seed must be set"
            )
        if self.fmt not in ("text", "csv"):
            raise ConfigError(f"unknown report format {self.fmt!r}")


def gen_features(seed: int, config: FusionConfig) -> FeatureStack:
    """Deterministic synthetic encoder stack with built-in spatial redundancy.

    Per block: a standard-normal map plus four random 2-D cosine modes with
    per-channel amplitudes, standardised to mean 0 and std 1 over the block.
    Mode frequencies stay low relative to the grid so neighbouring positions
    share structure. Same seed, same bytes.
    """
    h, w, c = config.height, config.width, config.encoder_width
    rng = np.random.default_rng([seed, h, w, c, config.num_blocks])
    fy_max = max(1, h // 8)
    fx_max = max(1, w // 8)
    yy = np.arange(h)[:, None, None]
    xx = np.arange(w)[None, :, None]
    maps = np.empty((config.num_blocks, h, w, c), dtype=np.float32)
    for b in range(config.num_blocks):
        block = rng.standard_normal((h, w, c))
        for _ in range(4):
            while True:
                fy = int(rng.integers(0, fy_max + 1))
                fx = int(rng.integers(0, fx_max + 1))
                if fy or fx:
                    break
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amps = rng.standard_normal(c)
            wave = np.cos(2.0 * np.pi * (fy * yy / h + fx * xx / w) + phase)
            block = block + wave * amps
        block -= block.mean()
        block /= block.std()
        maps[b] = block.astype(np.float32)
    return FeatureStack(maps=maps, block_indices=config.block_indices())


def _load_stack(run: RunConfig) -> FeatureStack:
    if run.input_path is not None:
        stack = fmap.read_feature_file(run.input_path)
        stack.check_matches(run.fusion)
        if not np.all(np.isfinite(stack.maps)):
            raise NumericError(f"{run.input_path}: payload contains non-finite values")
        return stack
    return gen_features(run.synthetic_seed, run.fusion)


@dataclass
class ForwardSummary:
    length: int
    width: int
    minimum: float
    maximum: float
    mean: float
    projector: str

    def render_text(self) -> str:
        return (
            f"projector={self.projector} tokens={self.length} width={self.width} "
            f"min={self.minimum:.6f} max={self.maximum:.6f} mean={self.mean:.6f}"
        )


def run_forward(run: RunConfig) -> tuple[TokenSequence, ForwardSummary]:
    """Load or generate features, project them, optionally write the tokens."""
    stack = _load_stack(run)
    params = init_params(run.fusion, run.projector)
    seq = run_projector(run.projector, stack, params, run.fusion)
    data = seq.data
    if not np.all(np.isfinite(data)):
        raise NumericError("projector output contains non-finite values")
    if run.out_path is not None:
        fmap.write_token_file(run.out_path, data)
    summary = ForwardSummary(
        length=seq.length,
        width=seq.width,
        minimum=float(data.min()),
        maximum=float(data.max()),
        mean=float(data.mean()),
        projector=run.projector,
    )
    return seq, summary


def toy_train(
    run: RunConfig,
    steps: int = 200,
    lr: float = 1e-3,
    batch: int = 4,
) -> list[tuple[int, float]]:
    """Fit the projector to a fixed random linear map of pooled features.

    Full-batch gradient descent: the batch of synthetic stacks and the target
    map are generated once from the run seed and reused every step. Targets
    are the 2x2-pooled last block pushed through a fixed random
    encoder-width -> llm-width matrix, so the projector's token count must
    equal the pooled position count. The objective is the batch mean of each
    example's summed squared error (the same sum-of-squares convention the
    gradient checker probes with). Returns (step, loss) pairs; step 0 records
    the pre-update loss.

    The two-layer baseline projectors comfortably halve this loss within the
    default budget; the five-layer fusion path learns much more slowly from
    its fan-in-uniform init and needs a larger step budget.
    """
    cfg = run.fusion
    if run.synthetic_seed is None:
        raise ConfigError("toy training requires a synthetic seed, not an input file")
    seed = run.synthetic_seed
    pooled_tokens = (cfg.height // 2) * (cfg.width // 2)
    if token_count(cfg) != pooled_tokens:
        raise ConfigError(
            f"toy training targets are built from 2x2 pooling ({pooled_tokens} "
            f"tokens) but the projector emits {token_count(cfg)}; use kernel=2 "
            "with fused_tokens=1 or matching extents"
        )

    stacks = [gen_features(seed + i, cfg) for i in range(batch)]
    rng = np.random.default_rng([seed, 101])
    target_map = (
        rng.standard_normal((cfg.encoder_width, cfg.llm_width)) / np.sqrt(cfg.encoder_width)
    )
    targets = []
    for stack in stacks:
        pooled = T.avgpool2x2(T.Tensor(stack.maps[-1])).data.astype(np.float64)
        flat = pooled.reshape(pooled_tokens, cfg.encoder_width)
        targets.append((flat @ target_map).astype(np.float32))

    params = init_params(cfg, run.projector)
    curve: list[tuple[int, float]] = []
    inv_batch = 1.0 / batch
    for step in range(steps + 1):
        params.zero_grads()
        total = 0.0
        for stack, target in zip(stacks, targets):
            seq = run_projector(run.projector, stack, params, cfg)
            loss = T.squared_error(seq.tokens, target, reduction="sum")
            loss.backward(inv_batch)
            total += loss.data.item()
        mean_loss = total * inv_batch
        if not np.isfinite(mean_loss):
            raise NumericError(f"toy training diverged at step {step}")
        curve.append((step, mean_loss))
        if step < steps:
            params.sgd_step(lr)
    return curve


def render_curve_csv(curve: list[tuple[int, float]]) -> str:
    lines = ["step,loss"]
    lines.extend(f"{step},{loss:.8e}" for step, loss in curve)
    return "\n".join(lines) + "\n"


@dataclass
class BenchResult:
    reps: int
    median_s: float
    p90_s: float
    stdev_s: float
    tokens: int
    tokens_per_s: float

    def render_text(self) -> str:
        return (
            f"reps={self.reps} median={self.median_s * 1e3:.3f}ms "
            f"p90={self.p90_s * 1e3:.3f}ms stdev={self.stdev_s * 1e3:.3f}ms "
            f"tokens={self.tokens} tokens/s={self.tokens_per_s:.1f}"
        )


def bench(run: RunConfig) -> BenchResult:
    """Median and p90 wall time of the projector forward after one warmup."""
    stack = _load_stack(run)
    params = init_params(run.fusion, run.projector)
    seq = run_projector(run.projector, stack, params, run.fusion)  # warmup
    samples = []
    for _ in range(max(1, run.bench_reps)):
        start = time.perf_counter()
        seq = run_projector(run.projector, stack, params, run.fusion)
        samples.append(time.perf_counter() - start)
    arr = np.array(samples)
    median = float(np.median(arr))
    return BenchResult(
        reps=len(samples),
        median_s=median,
        p90_s=float(np.percentile(arr, 90)),
        stdev_s=float(arr.std()),
        tokens=seq.length,
        tokens_per_s=seq.length / median if median > 0 else float("inf"),
    )


def parse_config_file(path: str | Path) -> dict[str, int]:
    """Parse the flat ``key = value`` config format (UTF-8, # comments)."""
    values: dict[str, int] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        try:
            values[key] = int(val)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: value for {key!r} must be an integer, got {val!r}"
            ) from None
    return values


def load_fusion_config(path: str | Path | None, **overrides) -> FusionConfig:
    """Config file plus CLI overrides; hidden widths re-derive when unset."""
    values = parse_config_file(path) if path is not None else {}
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    return config_from_mapping(values)
