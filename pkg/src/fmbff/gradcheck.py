"""64-bit finite-difference verification of every backward rule.

Block suites perturb every coordinate of every parameter (shapes are tiny,
at most (1, 4, 6, 6)).  The full-model suite uses one random-direction
probe per parameter tensor so it stays inside a desk-scale time budget.
"""

from __future__ import annotations

import numpy as np

from . import blocks
from .engine import (
    ParamStore,
    Tensor,
    backward,
    dtype_session,
    finite_diff_check,
    mul,
    sum_,
)
from .errors import UsageError
from .model import ModelConfig, build_model, model_forward

BLOCK_NAMES = ("fmcab", "biffm", "vitm", "frm", "model")

BLOCK_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


def _scalarize(out, seed=123):
    """Weighted sum so permutation/routing mistakes can't cancel out."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return sum_(mul(out, w))


def _coordinate_errors(f, named_tensors, h=1e-5):
    return [
        (name, finite_diff_check(lambda _x: f(), t, h=h))
        for name, t in named_tensors
    ]


def _directional_errors(f, named_tensors, h=1e-5, seed=321):
    for _, t in named_tensors:
        t.grad = None
    backward(f())
    grads = {
        name: t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for name, t in named_tensors
    }
    rng = np.random.default_rng(seed)
    errors = []
    for name, t in named_tensors:
        d = rng.standard_normal(t.data.shape)
        norm = np.linalg.norm(d)
        if norm > 0:
            d /= norm
        orig = t.data.copy()
        t.data = orig + h * d
        fp = float(f().data.reshape(()))
        t.data = orig - h * d
        fm = float(f().data.reshape(()))
        t.data = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = float((grads[name] * d).sum())
        errors.append(
            (name, abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-3))
        )
    return errors


def _named(store: ParamStore, x: Tensor):
    return [("input", x)] + list(store.items())


def _jitter(store: ParamStore, seed=11, scale=0.05):
    """Nudge every parameter off its init value.

    Zero-initialized biases otherwise leave pre-activations sitting exactly
    on the relu kink (e.g. under fully dropped-out patches), where finite
    differences disagree with the one-sided analytic subgradient.
    """
    rng = np.random.default_rng(seed)
    for _, t in store.items():
        noise = rng.uniform(-scale, scale, size=t.data.shape)
        t.data = np.asarray(t.data + noise, dtype=t.data.dtype)


def _fmcab_suite():
    store = ParamStore(0)
    params = blocks.FmcabParams.build(store, "b", 4, reduction=4)
    _jitter(store)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 4, 6, 6)))
    f = lambda: _scalarize(blocks.fmcab_forward(x, params, mode="train"))
    return _coordinate_errors(f, _named(store, x))


def _biffm_suite():
    store = ParamStore(0)
    params = blocks.BiffmParams.build(store, "b", 4, 6, width=4, shuffle_groups=4)
    _jitter(store)
    rng = np.random.default_rng(2)
    d = Tensor(rng.standard_normal((1, 4, 6, 6)))
    s = Tensor(rng.standard_normal((1, 6, 3, 3)))
    f = lambda: _scalarize(blocks.biffm_forward(d, s, params))
    return _coordinate_errors(f, [("input_d", d), ("input_s", s)] + list(store.items()))


def _vitm_suite():
    store = ParamStore(0)
    params = blocks.VitmParams.build(store, "b", 4, 36, heads=2)
    _jitter(store)
    x = Tensor(np.random.default_rng(3).standard_normal((1, 4, 6, 6)))
    f = lambda: _scalarize(blocks.vitm_forward(x, params))
    return _coordinate_errors(f, _named(store, x))


def _frm_suite():
    store = ParamStore(0)
    params = blocks.FrmParams.build(store, "b", 4, 2, upsample=True)
    _jitter(store)
    x = Tensor(np.random.default_rng(4).standard_normal((1, 4, 6, 6)))

    def f():
        # Fixed rng seed per call keeps the dropout mask deterministic, which
        # finite differencing requires.
        out = blocks.frm_forward(x, params, mode="train", rng=np.random.default_rng(7))
        return _scalarize(out)

    return _coordinate_errors(f, _named(store, x))


def _model_suite():
    config = ModelConfig(
        in_channels=2,
        input_size=(16, 16),
        encoder_widths=(4, 4, 4, 4),
        decoder_widths=(2, 2, 2, 2),
        heads=2,
        shuffle_groups=2,
        seed=0,
    )
    params = build_model(config)
    _jitter(params.store)
    x = Tensor(np.random.default_rng(5).standard_normal((1, 2, 16, 16)))

    def f():
        trace = model_forward(x, params, mode="train", rng=np.random.default_rng(7))
        return _scalarize(trace.f_out)

    return _directional_errors(f, _named(params.store, x))


_SUITES = {
    "fmcab": _fmcab_suite,
    "biffm": _biffm_suite,
    "vitm": _vitm_suite,
    "frm": _frm_suite,
    "model": _model_suite,
}


def run_suite(block):
    """Max relative gradient errors for one block, in float64.

    Returns (errors, tolerance) where errors is a list of
    (parameter name, max relative error) pairs.
    """
    if block not in _SUITES:
        raise UsageError(f"unknown gradcheck block {block!r}; choose from {BLOCK_NAMES}")
    tolerance = MODEL_TOLERANCE if block == "model" else BLOCK_TOLERANCE
    with dtype_session(np.float64):
        errors = _SUITES[block]()
    return errors, tolerance
