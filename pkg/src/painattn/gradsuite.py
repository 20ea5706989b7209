"""Finite-difference checks over every layer type plus the mini model.

Shared by the ``gradcheck`` command and the test suite.
"""
from __future__ import annotations

import numpy as np

from .autograd import GradCheckReport, grad_check
from .layers import (GELU, BatchNorm1d, Conv1d, Conv1dSpec, Dropout, LayerNorm, Linear,
                     MaxPool1d, ReLU, Sigmoid, Softmax)
from .model import (ClassifierHead, EncoderBlock, EncoderConfig, ModelConfig, MultiHeadAttention,
                    PainAttnNet, SeResBlock, SeResNetConfig)

DEFAULT_SEEDS = (0, 1, 2)


def spaced_values(rng, shape, gap=0.01):
    """Distinct values at least ``gap`` apart, so small steps never flip a max."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def layer_cases(seed: int):
    """(name, layer, input) triples for the primitive layers."""
    rng = np.random.default_rng(seed)
    yield "linear", Linear(4, 3, rng), rng.standard_normal((2, 5, 4))
    yield "conv1d", Conv1d(Conv1dSpec(2, 3, 4, stride=2, left_pad=1, right_pad=2), rng), rng.standard_normal((2, 2, 11))
    yield "conv1d_wide", Conv1d(Conv1dSpec(1, 2, 9, stride=3, left_pad=4, right_pad=4), rng), rng.standard_normal((2, 1, 10))
    yield "conv1d_causal", Conv1d(Conv1dSpec.make_causal(2, 2, 3), rng), rng.standard_normal((2, 2, 8))
    yield "maxpool1d", MaxPool1d(3, 2), spaced_values(rng, (2, 2, 9))
    bn = BatchNorm1d(3)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"][...] = rng.standard_normal(3)
    yield "batchnorm1d", bn, rng.standard_normal((4, 3, 5))
    bn_eval = BatchNorm1d(3).eval()
    bn_eval.buffers["running_var"][...] = rng.uniform(0.5, 2, 3)
    yield "batchnorm1d_eval", bn_eval, rng.standard_normal((2, 3, 4))
    ln = LayerNorm(6)
    ln.params["gain"][...] = rng.uniform(0.5, 1.5, 6)
    yield "layernorm", ln, rng.standard_normal((2, 3, 6))
    yield "gelu", GELU(), rng.standard_normal((3, 7)) * 2
    yield "relu", ReLU(), away_from_zero(rng, (3, 7))
    yield "sigmoid", Sigmoid(), rng.standard_normal((3, 7)) * 3
    yield "softmax", Softmax(), rng.standard_normal((3, 5))
    yield "dropout", Dropout(0.3), rng.standard_normal((3, 8))


def composite_cases(seed: int):
    rng = np.random.default_rng(seed)
    yield "se_block", SeResBlock(SeResNetConfig(16, 4, 2), rng), rng.standard_normal((2, 16, 75))
    yield "attention", MultiHeadAttention(EncoderConfig(heads=2), 3, rng), rng.standard_normal((2, 3, 75))
    yield "encoder_block", EncoderBlock(EncoderConfig(ffn_hidden=15), 4, rng), rng.standard_normal((2, 4, 75))
    yield "classifier_head", ClassifierHead(300, 8, 3, rng), rng.standard_normal((2, 4, 75))


def mini_model_case(seed: int, num_classes: int = 2):
    model = PainAttnNet(ModelConfig.mini(num_classes), seed=seed)
    model.mscn.set_input_grad(True)
    x = np.random.default_rng(seed).standard_normal((2, 1, model.cfg.mscn.input_length))
    return "mini_model", model, x


def run_gradient_suite(seeds=DEFAULT_SEEDS, h: float = 1e-3, tolerance: float = 1e-4,
                       composite_coords: int = 25, model_coords: int = 8,
                       on_report=None) -> list[GradCheckReport]:
    """Check every case at every seed; composites sample ``*_coords`` entries per tensor."""
    reports = []

    def record(rep):
        reports.append(rep)
        if on_report is not None:
            on_report(rep)

    for seed in seeds:
        for name, layer, x in layer_cases(seed):
            record(grad_check(layer, x, h=h, seed=seed, tolerance=tolerance, name=f"{name}[seed={seed}]"))
        for name, layer, x in composite_cases(seed):
            record(grad_check(layer, x, h=h, seed=seed, tolerance=tolerance, max_coords=composite_coords,
                              name=f"{name}[seed={seed}]"))
        name, model, x = mini_model_case(seed)
        record(grad_check(model, x, h=h, seed=seed, tolerance=tolerance, max_coords=model_coords,
                          name=f"{name}[seed={seed}]"))
    return reports
