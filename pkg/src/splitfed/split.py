"""Cutting a layered model into a client half and a server half.

The client half holds layers [0, cut); the server half holds [cut, L).
Halves are deep copies, so they train independently until explicitly
re-stitched or synchronized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import LayeredModel, cross_entropy


class CutRangeError(ValueError):
    pass


@dataclass
class SplitModel:
    client_half: LayeredModel
    server_half: LayeredModel
    cut_index: int
    full_length: int


@dataclass
class CutPayloadProfile:
    activation_elems: int        # cut-layer output elements per sample
    label_bytes_per_sample: int  # one int64 label per sample
    client_param_count: int
    server_param_count: int


def split(model: LayeredModel, cut: int) -> SplitModel:
    """Split at ``cut`` engine layers; the source model is untouched."""
    n = len(model)
    if not 1 <= cut <= n - 1:
        raise CutRangeError(
            f"cut must be in [1, {n - 1}] for a {n}-layer model, got {cut} "
            "(the 0 and L limits are protocol modes, not splits)"
        )
    return _split_unchecked(model, cut)


def _split_unchecked(model: LayeredModel, cut: int) -> SplitModel:
    """Split allowing the degenerate cuts 0 and L (empty half = identity)."""
    n = len(model)
    if not 0 <= cut <= n:
        raise CutRangeError(f"cut must be in [0, {n}], got {cut}")
    return SplitModel(
        client_half=model.slice(0, cut),
        server_half=model.slice(cut, n),
        cut_index=cut,
        full_length=n,
    )


def stitch(sm: SplitModel) -> LayeredModel:
    """Recombine the halves into one model (deep copy)."""
    layers = [l.clone() for l in sm.client_half.layers]
    layers += [l.clone() for l in sm.server_half.layers]
    return LayeredModel(layers, sm.client_half.input_shape)


def client_forward(sm: SplitModel, batch: np.ndarray) -> np.ndarray:
    """Run the client half, producing the cut-layer activations."""
    return sm.client_half.forward(batch)


def server_forward_backward(sm: SplitModel, activations: np.ndarray, labels):
    """Run the server half on received activations.

    Returns (loss, server parameter gradients, gradient w.r.t. the
    activations). Pure computation; parameter updates are the caller's job.
    """
    logits = sm.server_half.forward(activations)
    loss, grad_logits = cross_entropy(logits, labels)
    server_grads, grad_acts = sm.server_half.backward(grad_logits)
    return loss, server_grads, grad_acts


def client_backward(sm: SplitModel, grad_activations: np.ndarray) -> list[np.ndarray]:
    """Finish the backward pass through the client half."""
    grads, _ = sm.client_half.backward(grad_activations)
    return grads


def payload_profile(sm: SplitModel) -> CutPayloadProfile:
    return CutPayloadProfile(
        activation_elems=int(np.prod(sm.client_half.output_shape)),
        label_bytes_per_sample=8,
        client_param_count=sm.client_half.param_count,
        server_param_count=sm.server_half.param_count,
    )
