"""PointNet-style classifier without transform networks.

A shared per-point MLP (3-64-64-128-1024, relu) is max-pooled over points
and fed to a 1024-512-256-C head with dropout after the two hidden head
layers. Mesh vertices are consumed directly as the point cloud.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .errors import DivergenceError, NonFiniteValue
from .grad import Tape, Tensor

POINT_WIDTHS = (3, 64, 64, 128, 1024)
HEAD_WIDTHS = (1024, 512, 256)
VERTICAL_AXIS = 1  # y is up
TRANSLATION_RANGE = 0.1

CHECKPOINT_MAGIC = b"MADV"
CHECKPOINT_VERSION = 1


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0):
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)) * scale
    return Tensor(w), Tensor(np.zeros(fan_out))


@dataclass(eq=False)
class ClassifierNet:
    point_layers: list  # [(W, b)] for the shared per-point MLP
    head_layers: list   # [(W, b)] for the classification head
    n_classes: int
    dropout: float = 0.3

    @classmethod
    def init(cls, n_classes: int, seed: int = 0, dropout: float = 0.3) -> ClassifierNet:
        rng = np.random.default_rng(seed)
        point = [_dense(rng, a, b) for a, b in zip(POINT_WIDTHS[:-1], POINT_WIDTHS[1:])]
        widths = HEAD_WIDTHS + (n_classes,)
        head = [_dense(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
        return cls(point, head, n_classes, dropout)

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.point_layers + self.head_layers for t in layer]

    def copy(self) -> ClassifierNet:
        dup = lambda layers: [(Tensor(w.value), Tensor(b.value)) for w, b in layers]
        return ClassifierNet(dup(self.point_layers), dup(self.head_layers), self.n_classes, self.dropout)


def data_dependent_init(net: ClassifierNet, clouds: np.ndarray, eps: float = 1e-3,
                        pooled_offset: float = 1.0) -> ClassifierNet:
    """Rescale each layer so its pre-activations on ``clouds`` have zero mean and unit spread.

    Hidden per-point layers are standardized over every point. The last
    per-point layer is standardized on its per-cloud maxima and shifted to
    mean ``pooled_offset``, so pooled features vary across shapes on the
    scale of their own mean. Head layers are standardized over clouds and
    the logit layer is only centered. Without this, pooled features carry
    a shape-independent offset about ten times their spread and Adam steps
    on the first head layer are amplified by it.
    """
    h = np.asarray(clouds, dtype=np.float64)
    last = len(net.point_layers) - 1
    for i, (w, b) in enumerate(net.point_layers):
        z = h @ w.value
        if i < last:
            flat = z.reshape(-1, z.shape[-1])
            mu, sd = flat.mean(axis=0), flat.std(axis=0) + eps
            shift = 0.0
        else:
            top = z.max(axis=-2).reshape(-1, z.shape[-1])
            mu, sd = top.mean(axis=0), top.std(axis=0) + eps
            shift = pooled_offset
        w.value = w.value / sd
        b.value = shift - mu / sd
        h = np.maximum(h @ w.value + b.value, 0.0)
    h = h.max(axis=-2)
    for i, (w, b) in enumerate(net.head_layers):
        z = h @ w.value
        mu, sd = z.mean(axis=0), z.std(axis=0) + eps
        if i < len(net.head_layers) - 1:
            w.value = w.value / sd
            b.value = -mu / sd
            h = np.maximum(h @ w.value + b.value, 0.0)
        else:
            b.value = -mu
    return net


def point_features(layers, points) -> Tensor:
    """Per-point MLP: (..., n, 3) -> (..., n, width), relu after every layer."""
    h = G.as_tensor(points)
    for w, b in layers:
        h = G.relu(G.linear(h, w, b))
    return h


def mlp_head(layers, h, dropout: float = 0.0, rng=None) -> Tensor:
    """Dense stack with relu (and optional dropout) on all but the last layer."""
    for i, (w, b) in enumerate(layers):
        h = G.linear(h, w, b)
        if i < len(layers) - 1:
            h = G.relu(h)
            if dropout > 0 and rng is not None:
                keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
                h = h * keep
    return h


def canonical_order(points) -> Tensor:
    """Points of each cloud sorted by (x, y, z)."""
    points = G.as_tensor(points)
    v = points.value
    order = np.lexsort((v[..., 2], v[..., 1], v[..., 0]), axis=-1)
    return G.permute_rows(points, order)


def forward(net: ClassifierNet, points, train: bool = False, rng=None) -> Tensor:
    """Logits for one cloud (n, 3) -> (C,) or a batch (B, n, 3) -> (B, C).

    Dropout is active only when ``train`` is set and an ``rng`` is given.
    Points are first sorted lexicographically, so any permutation of the
    input gives bitwise identical logits regardless of how BLAS blocks rows.
    """
    h = point_features(net.point_layers[:-1], canonical_order(points))
    pooled = G.linear_relu_max(h, *net.point_layers[-1])
    return mlp_head(net.head_layers, pooled, net.dropout if train else 0.0, rng if train else None)


def predict(net: ClassifierNet, points) -> int | np.ndarray:
    """Arg-max class (lowest index on ties)."""
    logits = forward(net, points).value
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=-1)


def rotation_matrix(angle: float, axis: int = VERTICAL_AXIS) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    R = np.eye(3)
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def augment(points, rng: np.random.Generator | None = None, angle: float | None = None,
            translation=None, full_rotation: bool = False) -> np.ndarray:
    """Random rigid motion: rotation (vertical axis by default), then a small translation.

    ``angle`` / ``translation`` override the random draws.
    """
    points = np.asarray(points, dtype=np.float64)
    if full_rotation and angle is None:
        R = random_rotation(rng)
    else:
        if angle is None:
            angle = rng.uniform(0.0, 2 * np.pi)
        R = rotation_matrix(angle)
    if translation is None:
        translation = rng.uniform(-TRANSLATION_RANGE, TRANSLATION_RANGE, size=3)
    return points @ R.T + np.asarray(translation, dtype=np.float64)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # dicts: epoch, train_loss, train_acc, val_loss, val_acc
    test_accuracy: float = float("nan")
    test_loss: float = float("nan")
    seed: int = 0
    augmentation: dict = field(default_factory=dict)

    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def evaluate(net: ClassifierNet, clouds, labels, batch_size: int = 16) -> tuple[float, float]:
    """Mean cross-entropy and accuracy without dropout or augmentation."""
    from .losses import cross_entropy

    if len(clouds) == 0:
        return float("nan"), float("nan")
    losses, correct = [], 0
    for start in range(0, len(clouds), batch_size):
        batch = np.stack(clouds[start:start + batch_size])
        y = np.asarray(labels[start:start + batch_size])
        logits = forward(net, batch)
        losses.append(cross_entropy(logits, y).item() * len(y))
        correct += int(np.sum(np.argmax(logits.value, axis=1) == y))
    return float(np.sum(losses) / len(clouds)), correct / len(clouds)


def train_classifier(dataset, config) -> tuple[ClassifierNet, TrainReport]:
    """Adam on batch cross-entropy with rigid-motion augmentation.

    ``dataset`` must provide ``split(name)`` returning items with ``mesh``
    and ``label``. Reads ``seed``, ``classifier_lr``, ``batch_size``,
    ``epochs``, ``dropout``, ``augmentation`` and ``full_rotation`` from
    ``config``.
    """
    from .losses import cross_entropy

    train = dataset.split("train")
    val = dataset.split("val")
    test = dataset.split("test")
    x_train = [item.mesh.vertices for item in train]
    y_train = np.array([item.label for item in train])
    x_val, y_val = [item.mesh.vertices for item in val], [item.label for item in val]
    n_classes = int(getattr(config, "n_classes", 0) or dataset.n_classes)

    net = ClassifierNet.init(n_classes, seed=config.seed, dropout=config.dropout)
    rng = np.random.default_rng(config.seed + 1)
    use_aug = getattr(config, "augmentation", True)

    def draw(x):
        return augment(x, rng, full_rotation=config.full_rotation) if use_aug else x

    sample = np.stack([draw(x) for x in x_train])
    data_dependent_init(net, sample)
    opt = G.Adam(net.parameters(), lr=config.classifier_lr)
    report = TrainReport(seed=config.seed, augmentation={
        "rotation": ("SO(3)" if config.full_rotation else "vertical axis") if use_aug else "none",
        "translation_range": TRANSLATION_RANGE if use_aug else 0.0,
    })

    tl, ta = evaluate(net, x_train, y_train)
    vl, va = evaluate(net, x_val, y_val)
    report.rows.append({"epoch": 0, "train_loss": tl, "train_acc": ta, "val_loss": vl, "val_acc": va})

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x_train))
        total, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = np.stack([draw(x_train[i]) for i in idx])
            with Tape() as tape:
                tape.watch(*net.parameters())
                try:
                    logits = forward(net, batch, train=True, rng=rng)
                    loss = cross_entropy(logits, y_train[idx])
                except NonFiniteValue as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}") from exc
                tape.backward(loss)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"epoch {epoch}: loss became non-finite")
            opt.step()
            total += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.value, axis=1) == y_train[idx]))
        vl, va = evaluate(net, x_val, y_val)
        report.rows.append({"epoch": epoch, "train_loss": total / len(order),
                            "train_acc": correct / len(order), "val_loss": vl, "val_acc": va})

    report.test_loss, report.test_accuracy = evaluate(
        net, [item.mesh.vertices for item in test], [item.label for item in test])
    return net, report


# --------------------------------------------------------------------------
# checkpoints: magic, uint32 version, uint32 C, uint32 metadata length,
# JSON metadata, uint32 array count, then per array uint32 ndim, uint32
# dims and little-endian float64 data

def write_checkpoint(path, n_classes: int, arrays, metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, n_classes, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> tuple[int, dict, list[np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, n_classes, meta_len = struct.unpack("<III", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(raw[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", raw[pos:pos + 4])
        pos += 4
        shape = struct.unpack(f"<{ndim}I", raw[pos:pos + 4 * ndim])
        pos += 4 * ndim
        size = int(np.prod(shape)) * 8
        arrays.append(np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64))
        pos += size
    return n_classes, meta, arrays


def save_classifier(net: ClassifierNet, path) -> None:
    meta = {"kind": "classifier", "dropout": net.dropout,
            "point_layers": len(net.point_layers), "head_layers": len(net.head_layers)}
    write_checkpoint(path, net.n_classes, [p.value for p in net.parameters()], meta)


def load_classifier(path) -> ClassifierNet:
    n_classes, meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path} does not hold a classifier")
    tensors = [Tensor(a) for a in arrays]
    pairs = list(zip(tensors[0::2], tensors[1::2]))
    npl = meta["point_layers"]
    return ClassifierNet(pairs[:npl], pairs[npl:], n_classes, meta["dropout"])


def report_dict(report: TrainReport) -> dict:
    return asdict(report)
