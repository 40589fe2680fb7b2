"""Graph feature-aggregation layers and the shared per-cell MLP block.

Both aggregation layers first calibrate each neighbor against its center
through a shared MLP on the concatenated pair.  The attention layer then
takes a convex combination of calibrated neighbors, with per-channel
weights normalized over the neighborhood; the max-pool layer takes the
channel-wise maximum instead.
"""

from __future__ import annotations

import numpy as np

from meshseg.knn import gather_edge_features
from meshseg.tensor import (
    BatchNormState,
    Parameter,
    Tensor,
    affine,
    batch_norm,
    concat_channels,
    leaky_relu,
    max_axis,
    mul,
    softmax_axis,
    sub,
    sum_axis,
)


def _init_affine(rng, in_dim, out_dim, dtype):
    # fan-in scaled uniform weights, zero bias
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype)
    b = np.zeros(out_dim, dtype=dtype)
    return (Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


class SharedMLP:
    """Per-row affine + batch norm + LeakyReLU; rows never mix."""

    def __init__(self, name, in_dim, out_dim, rng, slope=0.2, bn=True,
                 activation=True, dtype=np.float32):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.slope = slope
        self.activation = activation
        self.weight, self.bias = _init_affine(rng, in_dim, out_dim, dtype)
        self.bn = BatchNormState(out_dim, dtype=dtype) if bn else None

    def __call__(self, x, train=False):
        y = affine(x, self.weight, self.bias)
        if self.bn is not None:
            y = batch_norm(y, self.bn, train)
        if self.activation:
            y = leaky_relu(y, self.slope)
        return y

    def parameters(self):
        params = [Parameter(f"{self.name}.weight", self.weight),
                  Parameter(f"{self.name}.bias", self.bias)]
        if self.bn is not None:
            params += [Parameter(f"{self.name}.bn.gamma", self.bn.gamma),
                       Parameter(f"{self.name}.bn.beta", self.bn.beta)]
        return params

    def bn_states(self):
        return {f"{self.name}.bn": self.bn} if self.bn is not None else {}


class GraphAttentionLayer:
    """Attention aggregation over a KNN neighborhood (coordinate stream).

    Calibration embeds center (+) neighbor through a shared MLP; a single
    affine map scores (center - neighbor) (+) neighbor per channel, and a
    softmax across the K neighbors turns the scores into convex weights.
    """

    def __init__(self, name, in_dim, out_dim, rng, slope=0.2, dtype=np.float32,
                 attention_hidden=None):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.calibrate = SharedMLP(f"{name}.calibrate", 2 * in_dim, out_dim, rng,
                                   slope=slope, dtype=dtype)
        self.att_hidden = None
        att_in = 2 * in_dim
        if attention_hidden:
            self.att_hidden = SharedMLP(f"{name}.att_hidden", att_in,
                                        attention_hidden, rng, slope=slope,
                                        bn=False, dtype=dtype)
            att_in = attention_hidden
        self.att_weight, self.att_bias = _init_affine(rng, att_in, out_dim, dtype)
        self.last_attention = None  # (M, K, out_dim) weights of the last forward

    def forward(self, features, graph, train=False):
        centers, neighbors = gather_edge_features(features, graph)
        calibrated = self.calibrate(concat_channels([centers, neighbors]), train)
        score_in = concat_channels([sub(centers, neighbors), neighbors])
        if self.att_hidden is not None:
            score_in = self.att_hidden(score_in, train)
        scores = affine(score_in, self.att_weight, self.att_bias)
        weights = softmax_axis(scores, axis=1)
        self.last_attention = weights.data
        return sum_axis(mul(weights, calibrated), axis=1)

    def parameters(self):
        params = self.calibrate.parameters()
        if self.att_hidden is not None:
            params += self.att_hidden.parameters()
        params += [Parameter(f"{self.name}.att.weight", self.att_weight),
                   Parameter(f"{self.name}.att.bias", self.att_bias)]
        return params

    def bn_states(self):
        return self.calibrate.bn_states()


class GraphMaxPoolLayer:
    """Max-pool aggregation over a KNN neighborhood (normal stream)."""

    def __init__(self, name, in_dim, out_dim, rng, slope=0.2, dtype=np.float32):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.calibrate = SharedMLP(f"{name}.calibrate", 2 * in_dim, out_dim, rng,
                                   slope=slope, dtype=dtype)

    def forward(self, features, graph, train=False):
        centers, neighbors = gather_edge_features(features, graph)
        calibrated = self.calibrate(concat_channels([centers, neighbors]), train)
        return max_axis(calibrated, axis=1)

    def parameters(self):
        return self.calibrate.parameters()

    def bn_states(self):
        return self.calibrate.bn_states()


def make_aggregation_layer(kind, name, in_dim, out_dim, rng, slope=0.2,
                           dtype=np.float32):
    if kind == "attention":
        return GraphAttentionLayer(name, in_dim, out_dim, rng, slope, dtype)
    if kind == "maxpool":
        return GraphMaxPoolLayer(name, in_dim, out_dim, rng, slope, dtype)
    raise ValueError(f"unknown aggregation kind: {kind!r}")
