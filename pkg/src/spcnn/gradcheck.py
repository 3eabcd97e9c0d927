"""Finite-difference verification of every layer's backward pass.

Each check builds a small random instance, forms the scalar objective
``sum(layer(x) * R)`` for a fixed random ``R`` (summed in float64), and
compares the analytic gradients with central differences.
"""

from __future__ import annotations

import numpy as np

from . import nnkernels as nn
from . import spnet

# eps per dtype; float64 uses a smaller step so truncation error stays < 1e-9
EPS = {np.float32: 1e-3, np.float64: 1e-5}
THRESHOLD = {np.float32: 1e-3, np.float64: 1e-6}
END_TO_END_THRESHOLD = 1e-2

LAYERS = ("conv", "maxpool", "relu", "linear", "dropout", "softmax_xent", "concat")


def _objective(out_fn, r):
    def f():
        return float(np.sum(out_fn().astype(np.float64) * r))
    return f


def _spaced(rng, shape, dtype, gap=0.05):
    # distinct values at least `gap` apart: no pooling ties within eps
    vals = (rng.permutation(int(np.prod(shape))) - np.prod(shape) / 2) * gap
    return vals.reshape(shape).astype(dtype)


def _away_from_zero(rng, shape, dtype, margin=0.05):
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)
    return x.astype(dtype)


def check_conv(rng, dtype, sabotage=False, stride=2, pad=1):
    x = rng.standard_normal((2, 3, 7, 7)).astype(dtype)
    w = rng.standard_normal((4, 3, 3, 3)).astype(dtype)
    b = rng.standard_normal(4).astype(dtype)
    p = nn.ConvParams.from_arrays(w, b, stride, pad)
    out = nn.conv2d_forward(x, p)
    r = rng.standard_normal(out.shape)
    gx, gw, gb = nn.conv2d_backward(x, p, r.astype(dtype))
    if sabotage:
        gw = gw * 1.1
    f = _objective(lambda: nn.conv2d_forward(x, p), r)
    return max(nn.grad_check(f, {"x": x, "w": w, "b": b},
                             {"x": gx, "w": gw, "b": gb}, EPS[dtype]).values())


def check_maxpool(rng, dtype, sabotage=False):
    x = _spaced(rng, (2, 2, 7, 7), dtype)
    p = nn.PoolParams(3, 2)
    out = nn.maxpool_forward(x, p)
    r = rng.standard_normal(out.shape)
    gx = nn.maxpool_backward(p, r.astype(dtype))
    if sabotage:
        gx = np.roll(gx, 1)
    f = _objective(lambda: nn.maxpool_forward(x, nn.PoolParams(3, 2)), r)
    return max(nn.grad_check(f, {"x": x}, {"x": gx}, EPS[dtype]).values())


def check_relu(rng, dtype, sabotage=False):
    x = _away_from_zero(rng, (3, 11), dtype)
    r = rng.standard_normal(x.shape)
    gx = nn.relu_backward(x, r.astype(dtype))
    if sabotage:
        gx = np.abs(gx)
    f = _objective(lambda: nn.relu_forward(x), r)
    return max(nn.grad_check(f, {"x": x}, {"x": gx}, EPS[dtype]).values())


def check_linear(rng, dtype, sabotage=False):
    x = rng.standard_normal((3, 5)).astype(dtype)
    w = rng.standard_normal((5, 4)).astype(dtype)
    b = rng.standard_normal(4).astype(dtype)
    r = rng.standard_normal((3, 4))
    gx, gw, gb = nn.linear_backward(x, w, r.astype(dtype))
    if sabotage:
        gb = gb * 2
    f = _objective(lambda: nn.linear_forward(x, w, b), r)
    return max(nn.grad_check(f, {"x": x, "w": w, "b": b},
                             {"x": gx, "w": gw, "b": gb}, EPS[dtype]).values())


def check_dropout(rng, dtype, sabotage=False):
    x = rng.standard_normal((4, 6)).astype(dtype)
    _, mask = nn.dropout(x, 0.5, np.random.default_rng(rng.integers(1 << 31)), True)
    r = rng.standard_normal(x.shape)
    gx = nn.dropout_backward(mask, r.astype(dtype))
    if sabotage:
        gx = r.astype(dtype)
    f = _objective(lambda: x * mask, r)
    return max(nn.grad_check(f, {"x": x}, {"x": gx}, EPS[dtype]).values())


def check_softmax_xent(rng, dtype, sabotage=False):
    logits = (2 * rng.standard_normal((3, 8))).astype(dtype)
    labels = rng.integers(0, 8, 3)
    _, g = nn.softmax_xent(logits, labels)
    if sabotage:
        g = g * 3
    # loss evaluated on a float64 view keeps the oracle free of float32 rounding
    hi = logits.astype(np.float64) if dtype == np.float32 else logits

    def f():
        return nn.softmax_xent(hi, labels)[0]

    err = nn.grad_check(f, {"logits": hi}, {"logits": g}, EPS[dtype])["logits"]
    return err


def check_concat(rng, dtype, sabotage=False):
    a = rng.standard_normal((2, 2, 3, 3)).astype(dtype)
    b = rng.standard_normal((2, 4, 1, 1)).astype(dtype)
    w = rng.standard_normal((22, 3)).astype(dtype)
    bias = np.zeros(3, dtype=dtype)
    r = rng.standard_normal((2, 3))
    h = spnet.concat_forward([a, b])
    gh, gw, _ = nn.linear_backward(h, w, r.astype(dtype))
    ga, gb = spnet.concat_backward(gh, [a.shape[1:], b.shape[1:]])
    if sabotage:
        ga = np.zeros_like(a)
    f = _objective(lambda: nn.linear_forward(spnet.concat_forward([a, b]), w, bias), r)
    return max(nn.grad_check(f, {"a": a, "b": b, "w": w},
                             {"a": ga, "b": gb, "w": gw}, EPS[dtype]).values())


CHECKS = {
    "conv": check_conv,
    "maxpool": check_maxpool,
    "relu": check_relu,
    "linear": check_linear,
    "dropout": check_dropout,
    "softmax_xent": check_softmax_xent,
    "concat": check_concat,
}


def small_network_spec(class_count=3) -> spnet.NetworkSpec:
    return spnet.desk_spec(class_count, canonical_size=32, fc6=16, fc7=16,
                           layers=spnet.parse_layers(
                               "conv 4 5 2 0, relu, pool 3 2, conv 6 3 1 1, relu, pool 3 2"),
                           input_scale=1.0)


def check_network(seed=0, samples=20, spec=None, sabotage=False,
                  eps=1e-6, dtype=np.float32) -> float:
    """End-to-end spot check on ``samples`` random parameters.

    Analytic gradients come from the network in ``dtype``; the reference is the
    central difference of the same network evaluated in float64. Errors are
    normalised by the max analytic magnitude of the tensor the parameter
    belongs to.
    """
    rng = np.random.default_rng(seed)
    spec = spec or small_network_spec()
    state = spnet.init_params(spec, seed).astype(dtype)
    xs = [rng.standard_normal((2, 3, s.input_size, s.input_size)).astype(dtype)
          for s in spec.streams]
    labels = rng.integers(0, spec.class_count, 2)
    logits, cache = spnet.forward(state, spec, xs)
    _, g = nn.softmax_xent(logits, labels)
    grads = spnet.backward(state, spec, cache, g)
    if sabotage:
        grads = {k: v * 1.5 if ".conv1." in k else v for k, v in grads.items()}
    hi = state.astype(np.float64)
    xs64 = [x.astype(np.float64) for x in xs]

    def f():
        return nn.softmax_xent(spnet.forward(hi, spec, xs64)[0], labels)[0]

    names = list(grads)
    worst = 0.0
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        idx = int(rng.integers(grads[name].size))
        num = nn.numerical_gradient(f, hi.params[name], eps, indices=[idx]).reshape(-1)[idx]
        scale = float(np.abs(grads[name]).max())
        ana = float(grads[name].reshape(-1)[idx])
        if scale == 0 and num == 0:
            continue
        worst = max(worst, abs(ana - num) / max(scale, abs(num)))
    return worst


def run_suite(seed=0, dtype=np.float32, broken=()) -> dict[str, float]:
    """Max relative error per layer type (plus ``"network"``).

    ``broken`` names layers whose analytic gradient is deliberately
    corrupted (negative control).
    """
    dtype = np.dtype(dtype).type
    results = {}
    for name in LAYERS:
        rng = np.random.default_rng([seed, LAYERS.index(name)])
        results[name] = CHECKS[name](rng, dtype, sabotage=name in broken)
    results["network"] = check_network(seed, sabotage="network" in broken, dtype=dtype)
    return results


def passed(results: dict, dtype=np.float32) -> bool:
    limit = THRESHOLD[np.dtype(dtype).type]
    return all(
        err < (END_TO_END_THRESHOLD if name == "network" else limit)
        for name, err in results.items()
    )
