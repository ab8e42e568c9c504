"""Gradient-check cases shared by the engine tests and the acceptance suite."""

import numpy as np

from lobeseg.autodiff import (
    Tensor,
    add,
    concat_channels,
    conv3d,
    conv_transpose3d,
    div,
    dropout,
    exp,
    group_norm,
    mul,
    neg,
    prelu,
    reshape,
    sigmoid,
    slice_axis,
    softmax_channels,
    sub,
    tsum,
)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def weighted_sum(out, seed=0):
    """Scalar probe sum(out * r) with a fixed random r, so every output element matters."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return tsum(mul(out, Tensor(r)))


def op_cases(rng):
    """(name, scalar function of x, x) triples covering every differentiable op and input slot."""
    x5 = rng.standard_normal((1, 2, 3, 4, 3))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    wt = rng.standard_normal((2, 3, 2, 2, 2))
    slope = rng.uniform(0.05, 0.5, 2)
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    x4 = rng.standard_normal((1, 4, 2, 3, 2))
    logits = rng.standard_normal((1, 6, 2, 2, 2))
    other = rng.standard_normal(x5.shape)
    pos = rng.uniform(0.5, 2.0, x5.shape)
    return [
        ("conv3d/x", lambda x: weighted_sum(conv3d(x, t64(w), t64(b), 1, 1)), x5),
        ("conv3d/w", lambda v: weighted_sum(conv3d(t64(x5), v, t64(b), 2, 1)), w),
        ("conv3d/b", lambda v: weighted_sum(conv3d(t64(x5), t64(w), v, 1, 1)), b),
        ("convT/x", lambda x: weighted_sum(conv_transpose3d(x, t64(wt), None, 2)), x5),
        ("convT/w", lambda v: weighted_sum(conv_transpose3d(t64(x5), v, None, 2)), wt),
        ("convT/b", lambda v: weighted_sum(conv_transpose3d(t64(x5), t64(wt), v, 2)), b),
        ("prelu/x", lambda x: weighted_sum(prelu(x, t64(slope))), x5),
        ("prelu/slope", lambda v: weighted_sum(prelu(t64(x5), v)), slope),
        ("group_norm/x", lambda x: weighted_sum(group_norm(x, 2, t64(gamma), t64(beta))), x4),
        ("group_norm/gamma", lambda v: weighted_sum(group_norm(t64(x4), 2, v, t64(beta))), gamma),
        ("group_norm/beta", lambda v: weighted_sum(group_norm(t64(x4), 2, t64(gamma), v)), beta),
        ("softmax", lambda x: weighted_sum(softmax_channels(x)), logits),
        ("sigmoid", lambda x: weighted_sum(sigmoid(x)), x5),
        ("dropout", lambda x: weighted_sum(dropout(x, 0.5, True, 5)), x5),
        ("concat", lambda x: weighted_sum(concat_channels(x, t64(x5))), x5),
        ("divide", lambda x: tsum((x * x + 1.0) / (x * 3.0 + 10.0) - 2.0 / (x * x + 1.0)), rng.standard_normal(6)),
        ("add/sub/neg", lambda x: weighted_sum(sub(add(x, t64(other)), neg(mul(x, x)))), x5),
        ("mul/div tensors", lambda x: weighted_sum(div(mul(x, t64(other)), t64(pos))), x5),
        ("div/denominator", lambda v: weighted_sum(div(t64(other), v)), pos),
        ("exp", lambda x: weighted_sum(exp(x)), x5 * 0.5),
        ("sum/axis", lambda x: weighted_sum(tsum(x, axis=(0, 2, 3, 4))), x5),
        ("slice_axis", lambda x: weighted_sum(slice_axis(x, 1, 1, 2)), x5),
        ("reshape", lambda x: weighted_sum(reshape(x, (6, 12))), x5),
    ]
