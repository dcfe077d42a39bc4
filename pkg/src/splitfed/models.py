"""Desk-scale model builders.

Models are organized in named blocks; cut indices in configs refer to
block boundaries and are mapped here onto engine layer indices.
"""

from __future__ import annotations

from .engine import Conv2D, Dense, Flatten, LayeredModel, Relu, SoftmaxOutput


def build_mlp(input_shape: tuple[int, ...], hidden: tuple[int, ...],
              num_classes: int) -> tuple[LayeredModel, list[int]]:
    """MLP with one block per hidden width plus the classifier block.

    Returns the model and the engine-layer index of each block boundary.
    """
    if not hidden:
        raise ValueError("mlp needs at least one hidden block")
    layers = []
    boundaries = []
    in_dim = 1
    for d in input_shape:
        in_dim *= d
    if len(input_shape) > 1:
        layers.append(Flatten())
    prev = in_dim
    for width in hidden:
        layers.append(Dense(prev, width))
        layers.append(Relu())
        boundaries.append(len(layers))
        prev = width
    layers.append(Dense(prev, num_classes))
    layers.append(SoftmaxOutput())
    boundaries.append(len(layers))
    return LayeredModel(layers, input_shape), boundaries


def build_conv(input_shape: tuple[int, int, int], channels: tuple[int, ...],
               dense_width: int, num_classes: int,
               kernel_size: int = 3) -> tuple[LayeredModel, list[int]]:
    """Small conv net: one block per channel count, then a dense block and
    the classifier block."""
    if len(input_shape) != 3:
        raise ValueError(f"conv model needs (channels, h, w) input, got {input_shape}")
    if not channels:
        raise ValueError("conv model needs at least one conv block")
    layers = []
    boundaries = []
    model_probe_shape = input_shape
    prev_c = input_shape[0]
    for c in channels:
        conv = Conv2D(prev_c, c, kernel_size)
        layers.append(conv)
        layers.append(Relu())
        boundaries.append(len(layers))
        model_probe_shape = conv.out_shape(model_probe_shape)
        prev_c = c
    flat = model_probe_shape[0] * model_probe_shape[1] * model_probe_shape[2]
    layers.append(Flatten())
    layers.append(Dense(flat, dense_width))
    layers.append(Relu())
    boundaries.append(len(layers))
    layers.append(Dense(dense_width, num_classes))
    layers.append(SoftmaxOutput())
    boundaries.append(len(layers))
    return LayeredModel(layers, input_shape), boundaries


def engine_cut(boundaries: list[int], block_cut: int) -> int:
    """Engine layer index for a cut after block ``block_cut`` (1-based)."""
    if not 1 <= block_cut <= len(boundaries):
        raise ValueError(f"block cut {block_cut} out of range [1, {len(boundaries)}]")
    return boundaries[block_cut - 1]
