"""The two-stream segmentation network, its ablation variants, and loss.

The coordinate stream aggregates with graph attention, the normal stream
with graph max-pooling, and the normal stream reuses the coordinate
stream's per-layer KNN graphs.  Multi-scale outputs of each stream are
skip-concatenated, lifted by a fusion MLP, and a shared prediction head
maps the fused features to per-cell class logits.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from meshseg.knn import build_block_knn_graph
from meshseg.layers import SharedMLP, make_aggregation_layer, _init_affine
from meshseg.mesh import CellFeatureMatrix
from meshseg.tensor import (
    DimensionError,
    Parameter,
    Tensor,
    affine,
    concat_channels,
    log_softmax_axis,
    mul,
)

COORD_BLOCK = 12
NORMAL_BLOCK = 12

CHECKPOINT_MAGIC = b"TSGC"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Contradictory or out-of-range model configuration."""


class DataError(ValueError):
    """Labels or inputs violate the data contract."""


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class ModelConfig:
    """Hyperparameters and ablation axes; defaults give the full network."""

    num_classes: int = 8
    k_neighbors: int = 32
    stream_widths: tuple = (64, 128, 256)
    fusion_width: int = 512
    head_widths: tuple = (512, 256, 128)  # hidden stages; a final C-wide affine follows
    leaky_slope: float = 0.2
    c_stream_agg: str = "attention"
    n_stream_agg: str = "maxpool"
    streams: str = "both"  # both | coords_only | normals_only | single_concat
    fusion_level: str = "high"  # high | low
    include_self: bool = False
    seed: int = 0

    def __post_init__(self):
        self.stream_widths = tuple(self.stream_widths)
        self.head_widths = tuple(self.head_widths)

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.k_neighbors < 1:
            raise ConfigError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if not self.stream_widths:
            raise ConfigError("stream_widths must name at least one layer")
        for agg, label in ((self.c_stream_agg, "c_stream_agg"),
                           (self.n_stream_agg, "n_stream_agg")):
            if agg not in ("attention", "maxpool"):
                raise ConfigError(f"{label} must be attention or maxpool, got {agg!r}")
        if self.streams not in ("both", "coords_only", "normals_only", "single_concat"):
            raise ConfigError(f"unknown streams setting: {self.streams!r}")
        if self.fusion_level not in ("high", "low"):
            raise ConfigError(f"unknown fusion_level: {self.fusion_level!r}")
        if self.fusion_level == "low" and self.streams != "both":
            raise ConfigError("low fusion requires both streams")
        # An aggregation override for a stream that does not exist is a
        # contradiction rather than a silent no-op.
        if self.streams == "coords_only" and self.n_stream_agg != "maxpool":
            raise ConfigError("coords_only contradicts an n_stream_agg override")
        if self.streams in ("normals_only",) and self.c_stream_agg != "attention":
            raise ConfigError("normals_only contradicts a c_stream_agg override")
        if self.streams == "single_concat" and self.n_stream_agg != "maxpool":
            raise ConfigError("single_concat contradicts an n_stream_agg override")
        return self

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw).validate()

    def layer_input_dims(self):
        """Input width of every aggregation layer, honoring the fusion level."""
        if self.streams == "single_concat":
            first = COORD_BLOCK + NORMAL_BLOCK
        else:
            first = COORD_BLOCK
        dims = [first]
        for width in self.stream_widths[:-1]:
            if self.fusion_level == "low":
                dims.append(2 * width)  # concat of both streams' previous output
            else:
                dims.append(width)
        return dims


class TwoStreamNet:
    """Full network; use build_variant() to construct from a config."""

    def __init__(self, config, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        slope = config.leaky_slope
        in_dims = config.layer_input_dims()
        widths = config.stream_widths
        skip_width = sum(widths)

        self.c_layers = []
        self.n_layers = []
        if config.streams in ("both", "coords_only", "single_concat"):
            agg = config.c_stream_agg
            for i, (d_in, d_out) in enumerate(zip(in_dims, widths), start=1):
                self.c_layers.append(make_aggregation_layer(
                    agg, f"c{i}", d_in, d_out, rng, slope, dtype))
        if config.streams in ("both", "normals_only"):
            agg = config.n_stream_agg
            for i, (d_in, d_out) in enumerate(zip(in_dims, widths), start=1):
                self.n_layers.append(make_aggregation_layer(
                    agg, f"n{i}", d_in, d_out, rng, slope, dtype))

        self.fuse_c = self.fuse_n = None
        if self.c_layers:
            self.fuse_c = SharedMLP("fuse_c", skip_width, config.fusion_width,
                                    rng, slope=slope, dtype=dtype)
        if self.n_layers:
            self.fuse_n = SharedMLP("fuse_n", skip_width, config.fusion_width,
                                    rng, slope=slope, dtype=dtype)

        head_in = config.fusion_width * (2 if (self.fuse_c and self.fuse_n) else 1)
        self.head = []
        for i, width in enumerate(config.head_widths, start=1):
            self.head.append(SharedMLP(f"head{i}", head_in, width, rng,
                                       slope=slope, dtype=dtype))
            head_in = width
        self.out_weight, self.out_bias = _init_affine(
            rng, head_in, config.num_classes, dtype)

        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names in model")

    # -- registry ----------------------------------------------------------

    def parameters(self):
        params = []
        for layer in (*self.c_layers, *self.n_layers):
            params += layer.parameters()
        for block in (self.fuse_c, self.fuse_n, *self.head):
            if block is not None:
                params += block.parameters()
        params += [Parameter("out.weight", self.out_weight),
                   Parameter("out.bias", self.out_bias)]
        return params

    def param_dict(self):
        return {p.name: p for p in self.parameters()}

    def bn_states(self):
        states = {}
        for layer in (*self.c_layers, *self.n_layers):
            states.update(layer.bn_states())
        for block in (self.fuse_c, self.fuse_n, *self.head):
            if block is not None:
                states.update(block.bn_states())
        return states

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.grad = None

    def num_parameters(self):
        return sum(p.tensor.data.size for p in self.parameters())

    # -- forward -----------------------------------------------------------

    def _as_batch(self, features):
        if isinstance(features, CellFeatureMatrix):
            blocks = [features.as_array()]
        elif isinstance(features, np.ndarray):
            blocks = [features]
        else:
            blocks = [f.as_array() if isinstance(f, CellFeatureMatrix) else np.asarray(f)
                      for f in features]
        sizes = {b.shape[0] for b in blocks}
        if len(sizes) != 1:
            raise DimensionError(
                f"cells per mesh differ across the batch: {sorted(sizes)}"
            )
        m = sizes.pop()
        if m <= self.config.k_neighbors:
            raise ConfigError(
                f"mesh with {m} cells cannot support k={self.config.k_neighbors}"
            )
        width = COORD_BLOCK + NORMAL_BLOCK
        for b in blocks:
            if b.ndim != 2 or b.shape[1] != width:
                raise DimensionError(f"expected (M, {width}) features, got {b.shape}")
        x = np.concatenate(blocks, axis=0).astype(self.dtype)
        if not np.isfinite(x).all():
            raise DataError("non-finite feature values")
        return x, m

    def _graph(self, source, m):
        return build_block_knn_graph(source.data, m, self.config.k_neighbors,
                                     self.config.include_self)

    def forward(self, features, train=False, return_parts=False):
        """Per-cell logits, (total cells) x C.

        `features` is one M x 24 matrix (or CellFeatureMatrix) or a list of
        equally sized ones; a batch is stacked along rows with KNN graphs
        kept inside each mesh.
        """
        x, m = self._as_batch(features)
        cfg = self.config
        coords = Tensor(x[:, :COORD_BLOCK])
        normals = Tensor(x[:, COORD_BLOCK:])
        parts = {}

        if cfg.streams == "both":
            c_in, n_in = coords, normals
            c_taps, n_taps = [], []
            for i, (cl, nl) in enumerate(zip(self.c_layers, self.n_layers), start=1):
                graph = self._graph(c_in, m)
                fc = cl.forward(c_in, graph, train)
                fn = nl.forward(n_in, graph, train)
                c_taps.append(fc)
                n_taps.append(fn)
                parts[f"F_c{i}"], parts[f"F_n{i}"] = fc, fn
                if cfg.fusion_level == "low" and i < len(self.c_layers):
                    # both streams consume the concatenated pair next layer
                    c_in = n_in = concat_channels([fc, fn])
                else:
                    c_in, n_in = fc, fn
            fused_c = self.fuse_c(concat_channels(c_taps), train)
            fused_n = self.fuse_n(concat_channels(n_taps), train)
            parts["F_c"], parts["F_n"] = fused_c, fused_n
            h = concat_channels([fused_c, fused_n])
        else:
            if cfg.streams == "coords_only":
                s_in, layers, fuse = coords, self.c_layers, self.fuse_c
            elif cfg.streams == "normals_only":
                s_in, layers, fuse = normals, self.n_layers, self.fuse_n
            else:  # single_concat
                s_in, layers, fuse = concat_channels([coords, normals]), \
                    self.c_layers, self.fuse_c
            taps = []
            for i, layer in enumerate(layers, start=1):
                graph = self._graph(s_in, m)
                s_in = layer.forward(s_in, graph, train)
                taps.append(s_in)
                parts[f"F_s{i}"] = s_in
            fused = fuse(concat_channels(taps), train)
            parts["F_s"] = fused
            h = fused

        parts["head_in"] = h
        for block in self.head:
            h = block(h, train)
        logits = affine(h, self.out_weight, self.out_bias)
        if return_parts:
            parts["logits"] = logits
            return logits, parts
        return logits

    def predict(self, features):
        """Argmax class per cell, eval mode."""
        logits = self.forward(features, train=False)
        return np.argmax(logits.data, axis=1)


def build_variant(config, dtype=np.float32):
    """Construct the network described by a (validated) ModelConfig."""
    return TwoStreamNet(config, dtype=dtype)


# Ablation vocabulary: variant name -> config overrides relative to defaults.
VARIANT_OVERRIDES = {
    "full": {},
    "att-max": {},  # aggregation spelling of the default network
    "coords-only": {"streams": "coords_only"},
    "normals-only": {"streams": "normals_only"},
    "single-stream": {"streams": "single_concat"},
    "max-max": {"c_stream_agg": "maxpool", "n_stream_agg": "maxpool"},
    "att-att": {"c_stream_agg": "attention", "n_stream_agg": "attention"},
    "max-att": {"c_stream_agg": "maxpool", "n_stream_agg": "attention"},
    "low-fusion": {"fusion_level": "low"},
}


def variant_config(base, name):
    if name not in VARIANT_OVERRIDES:
        raise ConfigError(
            f"unknown variant {name!r}; valid: {', '.join(sorted(VARIANT_OVERRIDES))}"
        )
    raw = asdict(base)
    raw.update(VARIANT_OVERRIDES[name])
    return ModelConfig(**raw).validate()


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels, reduction="sum"):
    """Cross-entropy of per-cell logits against integer labels.

    Default reduction sums over cells; "mean" divides by the cell count,
    which keeps learning-rate behavior independent of mesh size.
    """
    labels = np.asarray(labels)
    m, c = logits.data.shape
    if labels.shape != (m,):
        raise DataError(f"{labels.shape} labels for {m} cells")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise DataError(f"cell {i} label {labels[i]} outside [0, {c})")
    onehot = np.zeros((m, c), dtype=logits.data.dtype)
    onehot[np.arange(m), labels] = 1.0
    total = mul(mul(log_softmax_axis(logits, axis=1), Tensor(onehot)), -1.0).sum()
    if reduction == "mean":
        return total * (1.0 / m)
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _state_records(model):
    records = [(p.name, p.tensor.data) for p in model.parameters()]
    for name, st in model.bn_states().items():
        records.append((f"{name}.running_mean", st.running_mean))
        records.append((f"{name}.running_var", st.running_var))
    return records


def save_checkpoint(model, path):
    """Versioned binary container: config plus every named array, float32 LE."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    cfg = model.config.to_json().encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    records = _state_records(model)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelConfig, {name: float32 array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    off = 4
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, off)
    off += 4
    config = ModelConfig.from_json(data[off:off + cfg_len].decode())
    off += cfg_len
    (n_records,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(n_records):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        arrays[name] = arr.copy()
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes in checkpoint")
    return config, arrays


def load_model(path, dtype=np.float32):
    """Rebuild a model from a checkpoint, restoring parameters and BN stats."""
    config, arrays = load_checkpoint(path)
    model = build_variant(config, dtype=dtype)
    params = model.param_dict()
    states = model.bn_states()
    expected = {name for name, _ in _state_records(model)}
    missing = expected - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint missing arrays: {sorted(missing)[:3]} ...")
    for name, arr in arrays.items():
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            state = states.get(name.rsplit(".", 1)[0])
            if state is None:
                raise CheckpointError(f"no batch-norm state for {name}")
            target = name.rsplit(".", 1)[1]
            setattr(state, target, arr.astype(dtype))
        elif name in params:
            t = params[name].tensor
            if t.data.shape != arr.shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {arr.shape} vs model {t.data.shape}"
                )
            t.data = arr.astype(dtype)
        else:
            raise CheckpointError(f"unexpected array {name!r} in checkpoint")
    return model
