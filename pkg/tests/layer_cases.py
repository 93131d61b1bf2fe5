"""Finite-difference gradient checks for every layer kind, shared by the
unit suite and the acceptance suite."""

from __future__ import annotations

import numpy as np

from navexplain import nn
from navexplain.branch import AttentionBranch
from navexplain.dqn import DqnNetwork

F64 = np.float64


def _away_from_kinks(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def check_layer(layer, inputs, rng, samples=100, step=1e-6):
    """Gradcheck ``sum(R * layer(*inputs))`` over parameters and inputs."""
    xs = [nn.Tensor(np.asarray(x, dtype=F64), f"input{i}") for i, x in enumerate(inputs)]
    out_shape = layer.forward(*[x.data for x in xs]).shape
    weights = rng.normal(size=out_shape)
    tensors = layer.params() + xs

    def loss():
        for t in tensors:
            t.zero_grad()
        out = layer.forward(*[x.data for x in xs])
        grads = layer.backward(weights)
        grads = grads if isinstance(grads, tuple) else (grads,)
        for x, g in zip(xs, grads):
            x.grad[...] = g
        return float((out * weights).sum())

    return nn.gradcheck(loss, tensors, samples=samples, step=step, rng=rng)


def layer_reports(seed=0, samples=100) -> dict[str, nn.GradcheckReport]:
    rng = np.random.default_rng(seed)
    r = {}
    conv = nn.Conv2d(3, 4, 3, 2, rng=rng, dtype=F64, name="conv")
    r["conv2d"] = check_layer(conv, [rng.normal(size=(2, 3, 9, 9))], rng, samples)
    padded = nn.Conv2d(4, 3, 3, 1, padding=1, rng=rng, dtype=F64, name="conv_padded")
    r["conv2d-padded"] = check_layer(padded, [rng.normal(size=(2, 4, 5, 5))], rng, samples)
    blocks = nn.Conv2d(3, 4, 4, 2, rng=rng, dtype=F64, name="conv_blocks")
    r["conv2d-strided"] = check_layer(blocks, [rng.normal(size=(2, 3, 11, 9))], rng, samples)
    fc = nn.Linear(24, 6, rng=rng, dtype=F64, name="fc")
    r["fullyconnected"] = check_layer(fc, [rng.normal(size=(3, 2, 3, 4))], rng, samples)
    r["relu"] = check_layer(nn.ReLU(), [_away_from_kinks(rng, (4, 3, 5, 5))], rng, samples)
    r["sigmoid"] = check_layer(nn.Sigmoid(), [rng.normal(size=(4, 3, 5, 5))], rng, samples)
    r["softmax"] = check_layer(nn.Softmax(), [rng.normal(size=(40, 5))], rng, samples)
    r["globalavgpool"] = check_layer(nn.GlobalAvgPool(), [rng.normal(size=(4, 3, 5, 5))], rng, samples)
    r["concat-channels"] = check_layer(nn.ConcatChannels(),
                                       [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 2, 5, 5))], rng, samples)
    r["broadcast-scalars"] = check_layer(nn.BroadcastScalars(4, 4), [rng.normal(size=(60, 2))], rng, samples)
    r["dqn-trunk"] = trunk_report(rng, samples)
    r["attention-branch"] = branch_report(rng, samples)
    return r


def trunk_report(rng, samples=100):
    net = DqnNetwork(rng=rng).clone(F64)
    frames = np.zeros((2, 3, 64, 64))
    cls = rng.integers(0, 3, size=(2, 64, 64))
    np.put_along_axis(frames, cls[:, None], 1.0, axis=1)
    sub = rng.uniform(-1, 1, size=(2, 2))
    weights = rng.normal(size=(2, 3))
    tensors = net.params()

    def loss():
        net.zero_grad()
        q, _ = net.forward(frames, sub)
        net.backward(weights)
        return float((q * weights).sum())

    return nn.gradcheck(loss, tensors, samples=samples, step=1e-6, rng=rng)


def branch_report(rng, samples=100):
    branch = AttentionBranch(32, rng=rng, dtype=F64)
    feats = np.abs(rng.normal(size=(3, 32, 4, 4)))
    labels = np.eye(3)[[0, 1, 2]]
    tensors = branch.params()

    def loss():
        for t in tensors:
            t.zero_grad()
        probs, _, _ = branch.forward(feats)
        value, grad = nn.cross_entropy(probs, labels)
        branch.backward(grad)
        return value

    return nn.gradcheck(loss, tensors, samples=samples, step=1e-6, rng=rng)
