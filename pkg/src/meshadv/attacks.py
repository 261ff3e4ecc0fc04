"""Spectral adversarial deformations.

Two procedures share the objective pieces in :mod:`meshadv.losses`:

* :func:`optimize_attack` fits band-limited coefficients ``v`` for one
  shape so that ``X + Phi v`` is classified as a chosen target, with
  :func:`c_search` picking the smallest sufficient hinge weight.
* :class:`GeneratorNet` learns a map from shapes to perturbations, either
  spectral coefficients (``model1``) or a raw per-vertex field (``model2``).

The classifier is always used through a private copy whose weights never
require gradients, so attacks cannot modify it.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import grad as G
from .classifier import (POINT_WIDTHS, ClassifierNet, data_dependent_init, forward, read_checkpoint,
                         write_checkpoint)
from .errors import (DivergenceError, EmptySplit, InvalidTarget, NoAttackFound, NonFiniteValue,
                     ShapeMismatch)
from .grad import Tape, Tensor
from .losses import (LossBreakdown, curvature_distortion, edge_loss, l2_loss, laplacian_smoothing,
                     local_euclidean_loss, margin_loss, reconstruction_loss, spike_score)
from .mesh import Mesh, save_mesh
from .spectral import SpectralBasis, laplacian_operators, mass_matrix, mesh_basis, stiffness_matrix

GENERATOR_HEADS = {
    "model1": (1024, 512, 256),          # then k * 3
    "model2": (64 + 1024, 256, 128, 3),  # per point
}
LOCAL_FEATURE_LAYER = 1  # per-point features after the second 64-wide layer feed Model 2
REFERENCE_ROW = {"curvature_distortion": 3.05, "edge_loss": "-", "l2": 0.062}


@dataclass(eq=False)
class AttackResult:
    """One attacked shape.

    ``V`` is the displacement field and ``X_adv = X + V``. For spectral
    attacks ``v`` holds the coefficients and ``V = Phi v``.
    """

    X: np.ndarray
    X_adv: np.ndarray
    V: np.ndarray
    v: np.ndarray | None
    target: int | None
    predicted: int
    success: bool
    losses: LossBreakdown
    iterations: int
    c: float
    label: int | None = None
    shape_index: int | None = None
    split: str = ""
    model: str = "opt"

    def reconstruct(self, basis: SpectralBasis | None = None) -> np.ndarray:
        if self.v is not None and basis is not None:
            return self.X + basis.eigenvectors @ self.v
        return self.X + self.V


def frozen_copy(net: ClassifierNet) -> ClassifierNet:
    """Copy whose weight tensors do not require gradients."""
    return net.copy()


def _classifier_input(Xp, center: bool):
    if not center:
        return Xp
    axis = -2
    return Xp - G.mean(Xp, axis=axis, keepdims=True)


def _predict_logits(logits: np.ndarray) -> np.ndarray | int:
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=-1)


def _smoothing_ops(mesh: Mesh, config):
    if getattr(config, "laplacian_smoothing", False):
        return mass_matrix(mesh), stiffness_matrix(mesh)
    return None


def _check_target(target, n_classes: int) -> int:
    if not isinstance(target, (int, np.integer)) or not 0 <= target < n_classes:
        raise InvalidTarget(f"target {target!r} outside [0, {n_classes})")
    return int(target)


# --------------------------------------------------------------------------
# per-shape optimization

def optimize_attack(mesh: Mesh, basis: SpectralBasis, net: ClassifierNet, target: int, config,
                    c: float | None = None, stop_on_success: bool = False, frozen: bool = False,
                    label: int | None = None) -> AttackResult:
    """Minimize ``reconstruction + c * hinge`` over coefficients ``v`` with Adam.

    ``v`` starts at zero. The returned iterate is the successful one with
    the lowest reconstruction loss, or the last iterate if none succeeded.
    Optimization stops early when the target has held for
    ``config.stop_window`` iterations and the reconstruction improved by
    less than 1e-6 (relative) over that window, when the objective has not
    improved by more than 1e-6 (relative) for ``config.stall_patience``
    iterations, or at a successful iterate with zero reconstruction loss.
    ``stop_on_success`` stops at the first successful iterate instead,
    which is all :func:`c_search` needs to know.
    """
    target = _check_target(target, net.n_classes)
    if basis.n != mesh.n_vertices:
        raise ShapeMismatch(f"basis has {basis.n} rows, mesh {mesh.n_vertices} vertices")
    c = config.c if c is None else float(c)
    net = net if frozen else frozen_copy(net)
    X = mesh.vertices
    Phi = basis.eigenvectors
    terms = config.reconstruction_terms()
    smooth_ops = _smoothing_ops(mesh, config)
    sw = float(config.smoothing_weight) if smooth_ops is not None else 0.0

    v = Tensor(np.zeros((basis.k, 3)))
    opt = G.Adam([v], lr=config.attack_lr)
    best = None          # (recon, v, parts, predicted, iteration)
    last = None
    best_obj, since = math.inf, 0
    streak = 0
    recon_hist: list[float] = []
    it = 0
    for it in range(config.max_iterations):
        with Tape() as tape:
            tape.watch(v)
            V = G.matmul(Phi, v)
            Xp = G.add(X, V)
            logits = forward(net, _classifier_input(Xp, config.center))
            hinge = margin_loss(logits, target)
            recon = reconstruction_loss(mesh, Xp, terms)
            total = G.mul(hinge, c) + recon
            smooth = 0.0
            if smooth_ops is not None:
                s = laplacian_smoothing(smooth_ops[0], smooth_ops[1], V)
                smooth = s.item()
                total = total + G.mul(s, sw)
        pred = _predict_logits(logits.value)
        r = recon.item()
        parts = (hinge.item(), r, smooth)
        success = pred == target
        last = (r, v.value.copy(), parts, pred, it)
        if success and (best is None or r < best[0]):
            best = last
        if success and (stop_on_success or r == 0.0):
            break
        streak = streak + 1 if success else 0
        recon_hist.append(r)
        if streak >= config.stop_window:
            old = recon_hist[-config.stop_window]
            if old - r < 1e-6 * max(abs(old), 1e-300):
                break
        obj = total.item()
        if obj < best_obj - 1e-6 * abs(best_obj):
            best_obj, since = obj, 0
        else:
            since += 1
            if since >= config.stall_patience:
                break
        tape.backward(total)
        opt.step()

    chosen = best if best is not None else last
    r, coeffs, (h, rc, sm), pred, _ = chosen
    V = Phi @ coeffs
    losses = LossBreakdown.combine(h, rc, sm, c=1.0, smoothing_weight=sw, misclass_weight=c)
    return AttackResult(X, X + V, V, coeffs, target, int(pred), best is not None, losses,
                        it + 1, c, label)


def c_search(runner, c0: float = 1e-2, growth: float = 2.0, max_rounds: int = 12,
             bisections: int = 8):
    """Smallest successful ``c`` by doubling then bisection.

    ``runner(c)`` returns an object with a boolean ``success``. ``c`` grows
    by ``growth`` from ``c0`` for up to ``max_rounds`` calls; the bracket
    between the last failure (0 if ``c0`` already succeeds) and the first
    success is then bisected ``bisections`` times. Returns
    ``(c, result)`` for the smallest successful ``c`` found.
    """
    if c0 <= 0 or growth <= 1:
        raise ValueError("c0 must be positive and growth greater than 1")
    lo, hi, found, result = 0.0, c0, None, None
    c = c0
    for _ in range(max_rounds):
        result = runner(c)
        if result.success:
            hi, found = c, result
            break
        lo = c
        c *= growth
    if found is None:
        exc = NoAttackFound(f"no success for c up to {lo:g}")
        exc.result = result
        raise exc
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        trial = runner(mid)
        if trial.success:
            hi, found = mid, trial
        else:
            lo = mid
    return hi, found


def search_attack(mesh: Mesh, basis: SpectralBasis, net: ClassifierNet, target: int, config,
                  label: int | None = None) -> AttackResult:
    """Optimization attack at the smallest successful ``c``.

    The search probes stop at first success; the final run at the chosen
    ``c`` follows the same trajectory and then keeps improving the
    reconstruction. Raises NoAttackFound when the search exhausts.
    """
    net = frozen_copy(net)
    probe = lambda c: optimize_attack(mesh, basis, net, target, config, c=c,
                                      stop_on_success=True, frozen=True)
    c, _ = c_search(probe, config.c0, config.c_growth, config.c_rounds, config.c_bisections)
    return optimize_attack(mesh, basis, net, target, config, c=c, frozen=True, label=label)


def _attack_task(args):
    mesh, basis, net, target, config, label = args
    try:
        return search_attack(mesh, basis, net, target, config, label=label)
    except NoAttackFound as exc:
        res = exc.result
        res.label = label
        return res


def attack_pairs(items, bases, net: ClassifierNet, config, targets=None, workers: int = 1,
                 progress=None) -> list[AttackResult]:
    """Targeted c-searched attacks over (shape, target) pairs.

    ``items`` are (index, LabeledMesh) pairs; ``targets`` maps an index to
    its target list and defaults to every wrong class (or ``config.target``
    when it is set). Failed searches are returned with ``success=False``.
    """
    net = frozen_copy(net)
    tasks, keys = [], []
    for idx, item in items:
        if targets is not None:
            ts = targets[idx]
        elif config.target >= 0:
            ts = [config.target]
        else:
            ts = [t for t in range(net.n_classes) if t != item.label]
        for t in ts:
            if t == item.label:
                raise InvalidTarget(f"target {t} equals the true class of shape {idx}")
            tasks.append((item.mesh, bases[idx], net, t, config, item.label))
            keys.append((idx, item.split))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_attack_task, tasks))
    else:
        results = []
        for task, (idx, split) in zip(tasks, keys):
            results.append(_attack_task(task))
            results[-1].shape_index, results[-1].split = idx, split
            if progress is not None:
                progress(len(results), len(tasks), results[-1])
    for res, (idx, split) in zip(results, keys):
        res.shape_index, res.split = idx, split
    return results


# --------------------------------------------------------------------------
# generators

def _dense(rng, fan_in, fan_out, scale=1.0):
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)) * scale
    return Tensor(w), Tensor(np.zeros(fan_out))


@dataclass(eq=False)
class GeneratorNet:
    """PointNet-lite trunk with a regression head.

    ``model1`` pools the trunk and regresses ``k * 3`` spectral
    coefficients. ``model2`` applies a per-point head to each point's
    64-wide local feature concatenated with the pooled global feature.
    """

    variant: str
    point_layers: list
    head_layers: list
    k: int = 0

    @classmethod
    def init(cls, variant: str, k: int = 0, seed: int = 0, final_scale: float = 1e-2) -> GeneratorNet:
        if variant not in GENERATOR_HEADS:
            raise ValueError(f"unknown generator variant {variant!r}")
        if variant == "model1" and k < 1:
            raise ValueError("model1 needs a bandwidth k >= 1")
        rng = np.random.default_rng(seed)
        point = [_dense(rng, a, b) for a, b in zip(POINT_WIDTHS[:-1], POINT_WIDTHS[1:])]
        widths = GENERATOR_HEADS[variant] + ((3 * k,) if variant == "model1" else ())
        pairs = list(zip(widths[:-1], widths[1:]))
        head = [_dense(rng, a, b, final_scale if i == len(pairs) - 1 else 1.0)
                for i, (a, b) in enumerate(pairs)]
        return cls(variant, point, head, k if variant == "model1" else 0)

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.point_layers + self.head_layers for t in layer]

    def copy(self) -> GeneratorNet:
        dup = lambda layers: [(Tensor(w.value), Tensor(b.value)) for w, b in layers]
        return GeneratorNet(self.variant, dup(self.point_layers), dup(self.head_layers), self.k)

    def zero_head(self) -> None:
        w, b = self.head_layers[-1]
        w.value = np.zeros_like(w.value)
        b.value = np.zeros_like(b.value)


def generator_output(gen: GeneratorNet, X) -> Tensor:
    """Raw head output: (B, k, 3) coefficients or a (B, n, 3) field."""
    X = G.as_tensor(X)
    batched = X.ndim == 3
    h = X if batched else G.reshape(X, (1,) + X.shape)
    B = h.shape[0]
    local = None
    for i, (w, b) in enumerate(gen.point_layers[:-1]):
        h = G.relu(G.linear(h, w, b))
        if i == LOCAL_FEATURE_LAYER:
            local = h
    pooled = G.linear_relu_max(h, *gen.point_layers[-1])
    if gen.variant == "model1":
        out = pooled
        for i, (w, b) in enumerate(gen.head_layers):
            out = G.linear(out, w, b)
            if i < len(gen.head_layers) - 1:
                out = G.relu(out)
        out = G.reshape(out, (B, gen.k, 3))
    else:
        (w0, b0), rest = gen.head_layers[0], gen.head_layers[1:]
        width = local.shape[-1]
        glob = G.linear(pooled, G.index(w0, slice(width, None)), b0)
        out = G.relu(G.matmul(local, G.index(w0, slice(0, width))) + G.reshape(glob, (B, 1, -1)))
        for i, (w, b) in enumerate(rest):
            out = G.linear(out, w, b)
            if i < len(rest) - 1:
                out = G.relu(out)
    return out if batched else G.reshape(out, out.shape[1:])


def standardize_generator(gen: GeneratorNet, clouds) -> GeneratorNet:
    """Data-dependent rescaling of the trunk (and the model1 head) on ``clouds``.

    Same scheme as the classifier. The model2 head mixes local and pooled
    features, so only its trunk is rescaled. The output layer keeps its
    small scale and is only centered.
    """
    target = gen if gen.variant == "model1" else GeneratorNet(gen.variant, gen.point_layers, [], 0)
    data_dependent_init(target, clouds)
    return gen


def _displacements(gen: GeneratorNet, raw: Tensor, bases) -> list[Tensor]:
    if gen.variant == "model2":
        return [G.index(raw, i) for i in range(raw.shape[0])]
    fields = []
    for i, basis in enumerate(bases):
        if basis is None or basis.k != gen.k:
            raise ShapeMismatch(f"model1 with k={gen.k} needs a matching spectral basis")
        fields.append(G.matmul(basis.eigenvectors, G.index(raw, i)))
    return fields


def generator_forward(gen: GeneratorNet, mesh: Mesh, basis: SpectralBasis | None = None) -> Tensor:
    """Adversarial vertices ``X + Phi gen(X)`` (model1) or ``X + gen(X)`` (model2)."""
    X = mesh.vertices
    if gen.variant == "model1" and (basis is None or basis.n != len(X)):
        raise ShapeMismatch("model1 needs a spectral basis for this mesh")
    raw = generator_output(gen, X[None])
    return G.add(X, _displacements(gen, raw, [basis])[0])


def _stack(tensors: list[Tensor]) -> Tensor:
    return G.concat([G.reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def _batch_loss(gen, net, items, bases, config, c):
    """Per-batch mean hinge, reconstruction and smoothing plus adversarial logits."""
    X = np.stack([item.mesh.vertices for item in items])
    raw = generator_output(gen, X)
    fields = _displacements(gen, raw, bases)
    Xp = G.add(X, _stack(fields))
    logits = forward(net, _classifier_input(Xp, config.center))
    targets = np.array([(item.label + 1) % net.n_classes for item in items])
    hinge = G.mean(margin_loss(logits, targets))
    terms = config.reconstruction_terms()
    recon_parts = [reconstruction_loss(item.mesh, G.index(Xp, i), terms) for i, item in enumerate(items)]
    recon = G.mean(G.concat([G.reshape(r, (1,)) for r in recon_parts]))
    total = hinge + G.mul(recon, c)
    smooth = Tensor(0.0)
    if config.laplacian_smoothing and config.smoothing_weight > 0:
        ops = [laplacian_operators(item.mesh) for item in items]
        smooth = laplacian_smoothing([o[0] for o in ops], [o[1] for o in ops], fields)
        total = total + G.mul(smooth, config.smoothing_weight)
    return total, hinge, recon, smooth, logits, targets


def generator_target(label: int, n_classes: int) -> int:
    return (label + 1) % n_classes


def evaluate_generator(gen, net, items, bases, config, batch_size: int = 8) -> dict:
    """Split metrics: misclass_pct (any wrong label), target_hit_pct, recon_loss, total_loss."""
    if not items:
        return {"misclass_pct": float("nan"), "target_hit_pct": float("nan"),
                "recon_loss": float("nan"), "total_loss": float("nan")}
    wrong = hits = 0
    recon = total = 0.0
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        t, _, r, _, logits, targets = _batch_loss(gen, net, chunk, bases[start:start + batch_size],
                                                   config, config.c)
        pred = np.argmax(logits.value, axis=1)
        labels = np.array([item.label for item in chunk])
        wrong += int(np.sum(pred != labels))
        hits += int(np.sum(pred == targets))
        recon += r.item() * len(chunk)
        total += t.item() * len(chunk)
    n = len(items)
    return {"misclass_pct": 100.0 * wrong / n, "target_hit_pct": 100.0 * hits / n,
            "recon_loss": recon / n, "total_loss": total / n}


def dataset_bases(dataset, k: int, cache_dir=None) -> list[SpectralBasis]:
    """Per-mesh spectral bases in dataset order."""
    return [mesh_basis(item.mesh, k, cache_dir or None) for item in dataset.items]


def train_generator(gen: GeneratorNet, dataset, classifier: ClassifierNet, bases, config,
                    optimizer_state: dict | None = None, start_epoch: int = 0):
    """Fit generator weights on the train split with a single global ``c``.

    Each shape is pushed towards target ``(label + 1) mod C``. The loss is
    the batch mean of hinge plus ``c`` times the batch-mean reconstruction
    (plus the optional smoothing term). ``bases`` is a list aligned with
    ``dataset.items`` (entries may be None for model2).

    Returns ``(gen, rows, optimizer)``; rows hold epoch, split,
    misclass_pct, recon_loss, total_loss and target_hit_pct, with epoch
    ``start_epoch`` measured before any update. A fresh run (no optimizer
    state, ``start_epoch == 0``) first rescales ``gen`` in place with
    :func:`standardize_generator` on the training shapes.
    """
    net = frozen_copy(classifier)
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    pick = lambda idx: ([dataset.items[i] for i in idx], [bases[i] for i in idx])
    train_items, train_bases = pick(train_idx)
    val_items, val_bases = pick(val_idx)
    if optimizer_state is None and start_epoch == 0:
        standardize_generator(gen, np.stack([item.mesh.vertices for item in train_items]))
    opt = G.Adam(gen.parameters(), lr=config.generator_lr)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)

    rows = []

    def log(epoch):
        for split, items, bs in (("train", train_items, train_bases), ("val", val_items, val_bases)):
            rows.append({"epoch": epoch, "split": split,
                         **evaluate_generator(gen, net, items, bs, config)})

    if start_epoch == 0:
        log(0)
    for epoch in range(start_epoch + 1, start_epoch + config.generator_epochs + 1):
        # per-epoch stream so a resumed run shuffles exactly like an uninterrupted one
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(train_items))
        for start in range(0, len(order), config.generator_batch):
            idx = order[start:start + config.generator_batch]
            with Tape() as tape:
                tape.watch(*gen.parameters())
                try:
                    total, *_ = _batch_loss(gen, net, [train_items[i] for i in idx],
                                            [train_bases[i] for i in idx], config, config.c)
                except NonFiniteValue as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}") from exc
                tape.backward(total)
            if not np.isfinite(total.item()):
                raise DivergenceError(f"epoch {epoch}: loss became non-finite")
            opt.step()
        log(epoch)
    return gen, rows, opt


def generator_attacks(gen: GeneratorNet, classifier: ClassifierNet, dataset, bases, config,
                      splits=("train", "val", "test")) -> list[AttackResult]:
    """Apply a trained generator to every shape in ``splits``."""
    net = frozen_copy(classifier)
    out = []
    for idx, item in enumerate(dataset.items):
        if item.split not in splits:
            continue
        basis = bases[idx] if gen.variant == "model1" else None
        raw = generator_output(gen, item.mesh.vertices[None])
        coeffs = raw.value[0]
        V = basis.eigenvectors @ coeffs if basis is not None else coeffs
        X = item.mesh.vertices
        Xp = X + V
        inp = Xp - Xp.mean(axis=0) if config.center else Xp
        logits = forward(net, inp).value
        target = generator_target(item.label, net.n_classes)
        pred = int(np.argmax(logits))
        hinge = margin_loss(logits, target).item()
        recon = reconstruction_loss(item.mesh, Xp, config.reconstruction_terms()).item()
        losses = LossBreakdown.combine(hinge, recon, 0.0, c=config.c)
        out.append(AttackResult(X, Xp, V, coeffs if basis is not None else None, target, pred,
                                pred == target, losses, 0, config.c, item.label, idx, item.split,
                                gen.variant))
    return out


def save_generator(gen: GeneratorNet, path, optimizer=None, epoch: int = 0) -> None:
    arrays = [p.value for p in gen.parameters()]
    meta = {"kind": "generator", "variant": gen.variant, "k": gen.k, "epoch": epoch,
            "point_layers": len(gen.point_layers), "head_layers": len(gen.head_layers),
            "n_params": len(arrays)}
    if optimizer is not None:
        state = optimizer.state()
        meta["adam_t"] = state["t"]
        arrays = arrays + state["m"] + state["v"]
    write_checkpoint(path, gen.k, arrays, meta)


def load_generator(path):
    """``(gen, optimizer_state or None, epoch)`` from a generator checkpoint."""
    _, meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "generator":
        raise ValueError(f"{path} does not hold a generator")
    n = meta["n_params"]
    tensors = [Tensor(a) for a in arrays[:n]]
    pairs = list(zip(tensors[0::2], tensors[1::2]))
    npl = meta["point_layers"]
    gen = GeneratorNet(meta["variant"], pairs[:npl], pairs[npl:], meta["k"])
    state = None
    if "adam_t" in meta:
        state = {"t": meta["adam_t"], "m": arrays[n:2 * n], "v": arrays[2 * n:3 * n]}
    return gen, state, meta.get("epoch", 0)


# --------------------------------------------------------------------------
# evaluation and artifacts

METRIC_NAMES = ("curvature_distortion", "edge_loss", "l2", "misclass_rate", "target_rate")


def attack_metrics(result: AttackResult, mesh: Mesh) -> dict:
    A, W = mass_matrix(mesh), stiffness_matrix(mesh)
    return {
        "curvature_distortion": curvature_distortion(mesh, result.X_adv, A, W),
        "edge_loss": edge_loss(mesh, result.X_adv).item(),
        "l2": l2_loss(result.X, result.X_adv).item(),
        "local_euclidean": local_euclidean_loss(mesh, result.X, result.X_adv).item(),
        "spike_score": spike_score(result.V),
    }


def evaluate_attacks(results, dataset) -> dict:
    """Per-split means of the distortion metrics and prediction rates.

    Returns ``{split: {metric: value, "count": n}}``. ``misclass_rate`` is
    the fraction predicted differently from the true label and
    ``target_rate`` the fraction predicted as the target.
    """
    results = list(results)
    if not results:
        raise EmptySplit("no attack results to evaluate")
    grouped: dict[str, list] = {}
    for res in results:
        split = res.split or dataset.items[res.shape_index].split
        grouped.setdefault(split, []).append(res)
    table = {}
    for split, group in grouped.items():
        rows = [attack_metrics(r, dataset.items[r.shape_index].mesh) for r in group]
        entry = {name: float(np.mean([row[name] for row in rows]))
                 for name in ("curvature_distortion", "edge_loss", "l2")}
        entry["misclass_rate"] = float(np.mean([r.predicted != r.label for r in group]))
        entry["target_rate"] = float(np.mean([r.predicted == r.target for r in group]))
        entry["count"] = len(group)
        table[split] = entry
    return table


def write_table(path, runs: dict, splits=("train", "val", "test")) -> None:
    """Comparison table: one row per run, metric x split columns, reference footer."""
    columns = [f"{m}_{s}" for m in METRIC_NAMES for s in splits]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run"] + columns)
        for name, table in runs.items():
            row = [name]
            for m in METRIC_NAMES:
                for s in splits:
                    row.append(f"{table[s][m]:.10g}" if s in table else "")
            writer.writerow(row)
        footer = ["reference"]
        for m in METRIC_NAMES:
            for i, _ in enumerate(splits):
                value = REFERENCE_ROW.get(m, "") if i == 0 else ""
                footer.append(value if isinstance(value, str) else f"{value:g}")
        writer.writerow(footer)


def write_attack_artifacts(directory, results, dataset, bases=None) -> Path:
    """Per-shape OFF exports, coefficient CSVs and a metrics CSV."""
    directory = Path(directory)
    (directory / "meshes").mkdir(parents=True, exist_ok=True)
    (directory / "coefficients").mkdir(exist_ok=True)
    written = set()
    fields = ["shape", "split", "label", "target", "predicted", "success", "c", "iterations",
              "hinge", "recon", "curvature_distortion", "edge_loss", "l2", "local_euclidean",
              "spike_score"]
    with open(directory / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for res in results:
            item = dataset.items[res.shape_index]
            tag = f"{res.shape_index:03d}_t{res.target}"
            if res.shape_index not in written:
                save_mesh(item.mesh, directory / "meshes" / f"{res.shape_index:03d}_orig.off")
                written.add(res.shape_index)
            save_mesh(item.mesh.with_vertices(res.X_adv), directory / "meshes" / f"{tag}_adv.off")
            if res.v is not None:
                np.savetxt(directory / "coefficients" / f"{tag}.csv", res.v, delimiter=",",
                           fmt="%.17g", header="x,y,z", comments="")
            m = attack_metrics(res, item.mesh)
            row = {"shape": res.shape_index, "split": res.split, "label": res.label,
                   "target": res.target, "predicted": res.predicted, "success": int(res.success),
                   "c": f"{res.c:.10g}", "iterations": res.iterations,
                   "hinge": f"{res.losses.misclassification:.10g}",
                   "recon": f"{res.losses.reconstruction:.10g}"}
            row.update({k: f"{v:.10g}" for k, v in m.items()})
            writer.writerow(row)
    return directory
