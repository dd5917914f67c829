"""Vision-transformer loading, preprocessing, and per-block feature taps.

The production model is the CLIP ViT-L/14 architecture at 336 px input
(24 encoder blocks, 1024-wide tokens, 14 px patches, so a 24 x 24 patch
grid). Weights come from a local checkpoint directory; when none is
available, ``random_init_seed`` builds the same architecture with seeded
random weights so every downstream contract except the feature values
themselves can still be exercised.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from transformers import CLIPImageProcessor, CLIPVisionConfig, CLIPVisionModel
from transformers.image_utils import OPENAI_CLIP_MEAN, OPENAI_CLIP_STD

VIT_L_14_336 = dict(
    hidden_size=1024,
    intermediate_size=4096,
    num_hidden_layers=24,
    num_attention_heads=16,
    image_size=336,
    patch_size=14,
)


class ExporterError(RuntimeError):
    pass


def load_model(
    weights: str | Path | None = None,
    random_init_seed: int | None = None,
    arch: dict | None = None,
) -> CLIPVisionModel:
    """Load pretrained weights from a local path, or build a seeded random model.

    ``arch`` overrides the architecture for the random-init path (used by
    tests to keep things small); the pretrained path always uses whatever the
    checkpoint defines.
    """
    if (weights is None) == (random_init_seed is None):
        raise ExporterError("specify exactly one of a weights path or --random-init")
    if weights is not None:
        path = Path(weights)
        if not path.exists():
            raise ExporterError(
                f"weights path {path} does not exist; pass a local checkpoint "
                "directory or use --random-init"
            )
        model = CLIPVisionModel.from_pretrained(str(path), local_files_only=True)
    else:
        config = CLIPVisionConfig(**(arch or VIT_L_14_336))
        torch.manual_seed(random_init_seed)
        model = CLIPVisionModel(config)
    model.eval()
    return model


def build_processor(image_size: int) -> CLIPImageProcessor:
    return CLIPImageProcessor(
        do_resize=True,
        size={"shortest_edge": image_size},
        resample=Image.Resampling.BICUBIC,
        do_center_crop=True,
        crop_size={"height": image_size, "width": image_size},
        do_rescale=True,
        do_normalize=True,
        image_mean=OPENAI_CLIP_MEAN,
        image_std=OPENAI_CLIP_STD,
    )


def preprocess(image_path: str | Path, image_size: int) -> torch.Tensor:
    try:
        image = Image.open(image_path).convert("RGB")
    except OSError as exc:
        raise ExporterError(f"cannot decode image {image_path}: {exc}") from exc
    processor = build_processor(image_size)
    batch = processor(images=image, return_tensors="pt")
    return batch["pixel_values"]


def tap_features(
    model: CLIPVisionModel,
    pixel_values: torch.Tensor,
    block_indices: list[int],
    penultimate_final: bool = False,
) -> np.ndarray:
    """Per-block patch features, class token dropped, as (M, G, G, C) float32.

    ``hidden_states[l]`` is the raw output of encoder block ``l`` (index 0 is
    the patch embedding), taken before any following layer norm. With
    ``penultimate_final`` the deepest requested block reads one layer lower,
    mirroring the common single-tap convention for the last block.
    """
    depth = model.config.num_hidden_layers
    grid = model.config.image_size // model.config.patch_size
    with torch.no_grad():
        out = model(pixel_values, output_hidden_states=True)
    maps = []
    for index in block_indices:
        tap = index
        if penultimate_final and index == depth:
            tap = depth - 1
        tokens = out.hidden_states[tap][0]  # (1 + G*G, C)
        patches = tokens[1:, :]  # drop the class token
        maps.append(
            patches.reshape(grid, grid, model.config.hidden_size)
            .to(torch.float32)
            .numpy()
        )
    stacked = np.ascontiguousarray(np.stack(maps), dtype=np.float32)
    if not np.all(np.isfinite(stacked)):
        raise ExporterError("model produced non-finite features")
    return stacked
