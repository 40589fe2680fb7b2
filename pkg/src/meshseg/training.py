"""Adam optimization, learning-rate schedule, augmentation, and the train loop.

Everything is seed-deterministic: per-epoch RNG streams are derived from
(seed, epoch), so a run resumed from an epoch-boundary checkpoint replays
exactly the same trajectory as an uninterrupted run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from meshseg.mesh import build_cell_features, cell_centroid_mean, transform_mesh
from meshseg.model import cross_entropy


class TrainingError(RuntimeError):
    """Training contract violation (missing grads, NaN loss, bad batch)."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr0: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    translation_range: float = 10.0
    rotation_range: float = math.pi / 6
    augment: bool = True
    fixed_augmentation: bool = False  # one pre-generated copy per mesh instead
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = end only
    seed: int = 0


def lr_at_epoch(config, epoch):
    """Closed-form schedule: lr0 * factor^(epoch // interval)."""
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    """Standard Adam with bias correction; clears gradients after each step."""

    def __init__(self, parameters, beta1=0.9, beta2=0.999, eps=1e-8):
        self.parameters = list(parameters)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState(
            m={p.name: np.zeros_like(p.tensor.data) for p in self.parameters},
            v={p.name: np.zeros_like(p.tensor.data) for p in self.parameters},
        )

    def step(self, lr):
        self.state.step += 1
        t = self.state.step
        b1, b2 = self.beta1, self.beta2
        for p in self.parameters:
            g = p.tensor.grad
            if g is None:
                raise TrainingError(f"parameter {p.name} has no gradient")
            m = self.state.m[p.name] = b1 * self.state.m[p.name] + (1 - b1) * g
            v = self.state.v[p.name] = b2 * self.state.v[p.name] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.tensor.grad = None


def save_optimizer_state(adam, epoch, path):
    arrays = {"__step__": np.array(adam.state.step), "__epoch__": np.array(epoch)}
    for name in adam.state.m:
        arrays[f"m:{name}"] = adam.state.m[name]
        arrays[f"v:{name}"] = adam.state.v[name]
    np.savez(path, **arrays)


def load_optimizer_state(adam, path):
    """Restore moments and step counter; returns the epoch to resume from."""
    with np.load(path) as data:
        adam.state.step = int(data["__step__"])
        for name in adam.state.m:
            adam.state.m[name] = data[f"m:{name}"]
            adam.state.v[name] = data[f"v:{name}"]
        return int(data["__epoch__"]) + 1


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def rotation_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def augment_mesh(mesh, rng, translation_range, rotation_range):
    """Random rigid jitter: y-rotation about the centroid, then translation.

    Labels, face count, and face order are untouched; normals follow from
    the transformed vertices when features are recomputed.
    """
    translation = rng.uniform(-translation_range, translation_range, size=3)
    angle = rng.uniform(-rotation_range, rotation_range)
    rotation = rotation_y(angle) if angle != 0.0 else None
    if not np.any(translation) and rotation is None:
        return transform_mesh(mesh)  # identity copy
    return transform_mesh(
        mesh,
        rotation=rotation,
        translation=translation if np.any(translation) else None,
        pivot=cell_centroid_mean(mesh) if rotation is not None else None,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    train_oa: float


LOG_HEADER = "epoch\tlr\tmean_loss\ttrain_oa"


def format_log_row(rec):
    return f"{rec.epoch}\t{rec.lr:.8g}\t{rec.mean_loss:.6f}\t{rec.train_oa:.6f}"


def parse_log(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("epoch"):
                continue
            e, lr, loss, oa = line.split("\t")
            rows.append(EpochRecord(int(e), float(lr), float(loss), float(oa)))
    return rows


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def prepare_training_meshes(meshes, config):
    """Center each mesh; with fixed augmentation, append one jittered copy."""
    centered = [
        transform_mesh(m, translation=-cell_centroid_mean(m)) for m in meshes
    ]
    if config.fixed_augmentation:
        rng = np.random.default_rng([config.seed, 0xF1D0])  # own stream, not an epoch's
        centered += [
            augment_mesh(m, rng, config.translation_range, config.rotation_range)
            for m in centered
        ]
    return centered


def train(model, meshes, config, checkpoint_path=None, log_fh=None,
          adam=None, start_epoch=0):
    """Mini-batch training; returns (per-epoch records, adam).

    `meshes` must carry labels and share one cell count.  When resuming,
    pass the restored `adam` and `start_epoch`; the per-epoch RNG streams
    make the continuation identical to an uninterrupted run.
    """
    if not meshes:
        raise TrainingError("empty training set")
    for i, m in enumerate(meshes):
        if m.labels is None:
            raise TrainingError(f"mesh {i} has no labels")
    cell_counts = {m.num_cells for m in meshes}
    if len(cell_counts) != 1:
        raise TrainingError(
            f"meshes in a batch must share a cell count, got {sorted(cell_counts)}"
        )

    dataset = prepare_training_meshes(meshes, config)
    if adam is None:
        adam = Adam(model.parameters(), config.beta1, config.beta2, config.eps)
    records = []

    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        order = rng.permutation(len(dataset))
        lr = lr_at_epoch(config, epoch)
        loss_sum = 0.0
        n_batches = 0
        correct = 0
        total = 0

        for b_start in range(0, len(order), config.batch_size):
            batch_ids = order[b_start:b_start + config.batch_size]
            feats, labels = [], []
            for mi in batch_ids:
                mesh = dataset[mi]
                if config.augment and not config.fixed_augmentation:
                    mesh = augment_mesh(mesh, rng, config.translation_range,
                                        config.rotation_range)
                feats.append(build_cell_features(mesh, center=False).as_array())
                labels.append(dataset[mi].labels)
            labels = np.concatenate(labels)

            logits = model.forward(feats, train=True)
            loss = cross_entropy(logits, labels, reduction="mean")
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch meshes {batch_ids.tolist()}"
                )
            model.zero_grad()
            loss.backward()
            adam.step(lr)

            loss_sum += value
            n_batches += 1
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == labels).sum())
            total += len(labels)

        rec = EpochRecord(epoch, lr, loss_sum / max(n_batches, 1),
                          correct / max(total, 1))
        records.append(rec)
        if log_fh is not None:
            log_fh.write(format_log_row(rec) + "\n")
            log_fh.flush()
        if checkpoint_path is not None:
            last = epoch == config.epochs - 1
            cadence = config.checkpoint_every
            if last or (cadence and (epoch + 1) % cadence == 0):
                from meshseg.model import save_checkpoint

                save_checkpoint(model, checkpoint_path)
                save_optimizer_state(adam, epoch, str(checkpoint_path) + ".opt.npz")

    return records, adam


def inference_features(mesh):
    """Centered features for evaluation and prediction."""
    return build_cell_features(mesh, center=True).as_array()
