"""Small model builders and the finite-difference checker shared by several test files."""
from __future__ import annotations

import numpy as np

from fed2sim.architecture import LayerDesc, ModelSpec, adapt, instantiate
from fed2sim.nn.model import backward, loss, forward


def tiny_cnn(norm="gn", C=4, shape=(2, 4, 4), widths=(4, 8), fc=8, norm_groups=2) -> ModelSpec:
    layers = (LayerDesc("conv", widths[0], norm=norm), LayerDesc("pool"),
              LayerDesc("conv", widths[1], norm=norm), LayerDesc("flatten"),
              LayerDesc("dense", fc), LayerDesc("dense", C, activation=None))
    return ModelSpec(shape, layers, C, norm_groups=norm_groups)


def mlp(sizes=(3, 5, 4), C=3) -> ModelSpec:
    layers = tuple(LayerDesc("dense", s) for s in sizes[1:]) + (LayerDesc("dense", C, activation=None),)
    return ModelSpec((sizes[0],), layers, C)


def adapted_cnn(D_share=1, G=2, split=False, C=4) -> ModelSpec:
    base = tiny_cnn(C=C)
    base = ModelSpec(base.input_shape, base.layers, C, norm_groups=base.norm_groups, split_transition=split)
    return adapt(base, D_share, G)


def finite_difference_errors(model, x, y, eps=1e-5):
    """Per-parameter relative error between analytic and central-difference gradients.

    The error of one coordinate is ``|a - n| / max(|a|, |n|, 1e-6)``. The floor matters
    only where the true gradient is zero (a bias feeding a normalisation): there the
    central difference is pure round-off, about 1e-11.
    """
    _, cache = forward(model, x)
    grads = backward(model, cache, y)
    errors = {}
    for key, arr, _ in model.parameters():
        a = grads[key]
        num = np.empty_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss(model, x, y)
            flat[i] = old - eps
            lm = loss(model, x, y)
            flat[i] = old
            num.reshape(-1)[i] = (lp - lm) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6)
        errors[key] = float((np.abs(a - num) / denom).max())
    return errors


def random_model(spec, seed):
    """Instantiate and perturb norm affines and biases so no parameter sits at its init value."""
    m = instantiate(spec, seed)
    gen = np.random.default_rng(seed + 1000)
    for _, arr, _ in m.parameters():
        arr += gen.normal(scale=0.1, size=arr.shape)
    return m
