from types import SimpleNamespace

import numpy as np
import pytest

from meshadv import attacks as A
from meshadv.classifier import ClassifierNet, predict
from meshadv.config import RunConfig
from meshadv.errors import EmptySplit, InvalidTarget, NoAttackFound, ShapeMismatch
from meshadv.mesh import icosphere
from meshadv.spectral import mesh_basis, synthesize


@pytest.fixture(scope="module")
def shape(synthetic):
    return synthetic.items[synthetic.indices("test")[0]]


@pytest.fixture(scope="module")
def basis(shape):
    return mesh_basis(shape.mesh, 20)


def constant_net(logits):
    net = ClassifierNet.init(len(logits), seed=0)
    w, b = net.head_layers[-1]
    w.value = np.zeros_like(w.value)
    b.value = np.asarray(logits, dtype=float)
    return net


def subspace_residual(result, basis):
    """A-norm of the part of X' - X outside span(Phi)."""
    D = result.X_adv - result.X
    Phi, a = basis.eigenvectors, basis.mass
    R = D - Phi @ (Phi.T @ (a[:, None] * D))
    return np.sqrt(np.sum(a[:, None] * R * R))


class TestOptimizeAttack:
    def test_zero_init(self, shape, basis):
        res = A.optimize_attack(shape.mesh, basis, ClassifierNet.init(10, 0), 3,
                                RunConfig(max_iterations=1, k=20))
        assert res.iterations == 1
        assert np.all(res.v == 0) and np.array_equal(res.X_adv, res.X)
        assert res.losses.reconstruction == 0

    def test_already_target(self, shape, basis):
        res = A.optimize_attack(shape.mesh, basis, constant_net([0.0, 0.0, 5.0]), 2, RunConfig(k=20))
        assert res.success and res.iterations == 1
        assert np.all(res.v == 0)

    def test_invalid_target(self, shape, basis):
        with pytest.raises(InvalidTarget):
            A.optimize_attack(shape.mesh, basis, ClassifierNet.init(10, 0), 10, RunConfig())

    def test_basis_mismatch(self, shape):
        other = mesh_basis(icosphere(2), 5)
        with pytest.raises(ShapeMismatch):
            A.optimize_attack(shape.mesh, other, ClassifierNet.init(10, 0), 1, RunConfig())

    def test_success_is_reconstructible_and_band_limited(self, shape, basis, trained):
        target = (shape.label + 1) % 10
        res = A.optimize_attack(shape.mesh, basis, trained, target, RunConfig(k=20, c=1.0, max_iterations=400))
        assert res.success
        assert predict(trained, res.X_adv) == target
        assert np.abs(res.reconstruct(basis) - res.X_adv).max() < 1e-10
        np.testing.assert_array_equal(res.X + res.V, res.X_adv)
        assert subspace_residual(res, basis) < 1e-8

    def test_classifier_untouched(self, shape, basis, trained):
        before = [p.value.copy() for p in trained.parameters()]
        A.optimize_attack(shape.mesh, basis, trained, (shape.label + 2) % 10,
                          RunConfig(k=20, max_iterations=20))
        assert all(np.array_equal(a, p.value) for a, p in zip(before, trained.parameters()))

    def test_deterministic(self, shape, basis, trained):
        cfg = RunConfig(k=20, max_iterations=50)
        a = A.optimize_attack(shape.mesh, basis, trained, 4 if shape.label != 4 else 5, cfg)
        b = A.optimize_attack(shape.mesh, basis, trained, 4 if shape.label != 4 else 5, cfg)
        assert np.array_equal(a.v, b.v) and a.iterations == b.iterations

    def test_monotone_in_c(self, synthetic, trained):
        # success at larger c is never lost, up to one optimization-noise violation
        items = synthetic.split("train")[::7][:10] + synthetic.split("val")[:10]
        cfg = RunConfig(k=10, max_iterations=200)
        violations = 0
        for item in items:
            b = mesh_basis(item.mesh, 10)
            t = (item.label + 3) % 10
            lo = A.optimize_attack(item.mesh, b, trained, t, cfg, c=1e-4).success
            hi = A.optimize_attack(item.mesh, b, trained, t, cfg, c=1e-1).success
            violations += int(lo and not hi)
        assert len(items) == 20 and violations <= 1


class TestCSearch:
    @staticmethod
    def runner(rule):
        calls = []

        def run(c):
            calls.append(c)
            return SimpleNamespace(success=rule(c), c=c)
        return run, calls

    def test_always_success(self):
        run, calls = self.runner(lambda c: True)
        c, res = A.c_search(run)
        assert res.success and c == pytest.approx(1e-2 / 2 ** 8)
        assert len(calls) == 9

    def test_always_fail(self):
        run, calls = self.runner(lambda c: False)
        with pytest.raises(NoAttackFound) as info:
            A.c_search(run)
        assert len(calls) == 12
        assert info.value.result.success is False

    def test_threshold_oracle(self):
        run, _ = self.runner(lambda c: c >= 0.3)
        c, res = A.c_search(run)
        span = 0.32 - 0.16
        assert res.success and 0.3 <= c <= 0.3 + span * 2 ** -8

    def test_bad_arguments(self):
        run, _ = self.runner(lambda c: True)
        with pytest.raises(ValueError):
            A.c_search(run, c0=0)
        with pytest.raises(ValueError):
            A.c_search(run, growth=1.0)

    def test_search_attack(self, shape, basis, trained):
        t = (shape.label + 1) % 10
        res = A.search_attack(shape.mesh, basis, trained, t, RunConfig(k=20), label=shape.label)
        assert res.success and res.label == shape.label and res.c > 0


class TestAttackPairs:
    def test_workers_agree(self, synthetic, trained):
        idx = synthetic.indices("test")[:2]
        items = [(i, synthetic.items[i]) for i in idx]
        bases = {i: mesh_basis(synthetic.items[i].mesh, 8) for i in idx}
        cfg = RunConfig(k=8, max_iterations=60, c_rounds=3, c_bisections=1)
        targets = {i: [(synthetic.items[i].label + 1) % 10] for i in idx}
        one = A.attack_pairs(items, bases, trained, cfg, targets=targets, workers=1)
        two = A.attack_pairs(items, bases, trained, cfg, targets=targets, workers=2)
        assert [r.shape_index for r in one] == idx
        for a, b in zip(one, two):
            assert np.array_equal(a.X_adv, b.X_adv) and a.success == b.success and a.c == b.c


class TestGenerator:
    def test_zero_head_is_identity(self, shape, basis):
        for variant, b in (("model1", basis), ("model2", None)):
            gen = A.GeneratorNet.init(variant, 20 if variant == "model1" else 0, seed=1)
            gen.zero_head()
            Xp = A.generator_forward(gen, shape.mesh, b).value
            assert np.array_equal(Xp, shape.mesh.vertices)

    def test_k1_constant(self, shape):
        b1 = mesh_basis(shape.mesh, 1)
        gen = A.GeneratorNet.init("model1", 1, seed=2)
        V = A.generator_forward(gen, shape.mesh, b1).value - shape.mesh.vertices
        assert np.abs(V - V[0]).max() < 1e-12

    def test_output_shapes(self, shape, basis):
        X = shape.mesh.vertices
        assert A.generator_output(A.GeneratorNet.init("model1", 20), X).shape == (20, 3)
        assert A.generator_output(A.GeneratorNet.init("model2"), X).shape == X.shape

    def test_model2_permutation_equivariant(self, shape):
        gen = A.GeneratorNet.init("model2", seed=3)
        X = shape.mesh.vertices
        perm = np.random.default_rng(0).permutation(len(X))
        out = A.generator_output(gen, X).value
        permuted = A.generator_output(gen, X[perm]).value
        back = np.empty_like(permuted)
        back[perm] = permuted
        assert np.abs(back - out).max() < 1e-9

    def test_mismatch(self, shape):
        with pytest.raises(ShapeMismatch):
            A.generator_forward(A.GeneratorNet.init("model1", 5), shape.mesh, None)
        with pytest.raises(ShapeMismatch):
            A.generator_forward(A.GeneratorNet.init("model1", 5), shape.mesh, mesh_basis(shape.mesh, 6))

    def test_bad_variant(self):
        with pytest.raises(ValueError):
            A.GeneratorNet.init("model3")
        with pytest.raises(ValueError):
            A.GeneratorNet.init("model1", 0)

    def test_training_keeps_classifier_frozen(self, synthetic, trained):
        before = [p.value.copy() for p in trained.parameters()]
        gen = A.GeneratorNet.init("model1", 8, seed=0)
        bases = A.dataset_bases(synthetic, 8)
        cfg = RunConfig(model="model1", k=8, generator_epochs=1)
        gen, rows, _ = A.train_generator(gen, synthetic, trained, bases, cfg)
        assert all(np.array_equal(a, p.value) for a, p in zip(before, trained.parameters()))
        assert [(r["epoch"], r["split"]) for r in rows] == [(0, "train"), (0, "val"), (1, "train"), (1, "val")]
        assert set(rows[0]) == {"epoch", "split", "misclass_pct", "target_hit_pct", "recon_loss", "total_loss"}

    def test_results_band_limited(self, synthetic, trained):
        bases = A.dataset_bases(synthetic, 8)
        gen = A.GeneratorNet.init("model1", 8, seed=4, final_scale=1.0)
        results = A.generator_attacks(gen, trained, synthetic, bases, RunConfig(model="model1", k=8),
                                      splits=("val",))
        assert len(results) == 15
        for r in results:
            b = bases[r.shape_index]
            assert np.abs(r.reconstruct(b) - r.X_adv).max() < 1e-10
            assert subspace_residual(r, b) < 1e-8

    def test_unconstrained_ablation(self, synthetic, trained):
        # c = 0: nothing holds the generator back, misclassification saturates
        bases = A.dataset_bases(synthetic, 20)
        cfg = RunConfig(model="model1", k=20, c=0.0, generator_epochs=20)
        _, rows, _ = A.train_generator(A.GeneratorNet.init("model1", 20), synthetic, trained, bases, cfg)
        assert rows[-2]["split"] == "train" and rows[-2]["misclass_pct"] >= 95

    def test_resume_matches_uninterrupted(self, tmp_path, synthetic, trained):
        bases = A.dataset_bases(synthetic, 6)
        cfg = RunConfig(model="model1", k=6, generator_epochs=2)
        full, rows_full, _ = A.train_generator(A.GeneratorNet.init("model1", 6), synthetic, trained, bases, cfg)
        half_cfg = cfg.with_updates(generator_epochs=1)
        half, _, opt = A.train_generator(A.GeneratorNet.init("model1", 6), synthetic, trained, bases, half_cfg)
        A.save_generator(half, tmp_path / "g.madv", opt, 1)
        gen, state, epoch = A.load_generator(tmp_path / "g.madv")
        assert epoch == 1 and state["t"] == opt.t
        resumed, rows, _ = A.train_generator(gen, synthetic, trained, bases, half_cfg, state, epoch)
        for p, q in zip(full.parameters(), resumed.parameters()):
            assert np.abs(p.value - q.value).max() < 1e-9
        assert rows[-1]["misclass_pct"] == rows_full[-1]["misclass_pct"]


class TestEvaluate:
    def test_identity_attacks(self, synthetic, trained):
        results = []
        correct = 0
        for idx in synthetic.indices("test"):
            item = synthetic.items[idx]
            X = item.mesh.vertices
            pred = predict(trained, X)
            correct += pred == item.label
            results.append(A.AttackResult(X, X.copy(), np.zeros_like(X), None, None, pred, False,
                                          None, 0, 0.0, item.label, idx, "test"))
        table = A.evaluate_attacks(results, synthetic)["test"]
        assert table["curvature_distortion"] == 0 and table["edge_loss"] == 0 and table["l2"] == 0
        assert table["misclass_rate"] == pytest.approx(1 - correct / 15)

    def test_empty(self, synthetic):
        with pytest.raises(EmptySplit):
            A.evaluate_attacks([], synthetic)

    def test_table_footer(self, tmp_path):
        entry = {m: 0.5 for m in A.METRIC_NAMES}
        A.write_table(tmp_path / "t.csv", {"run1": {"train": entry, "val": entry, "test": entry}})
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("run,curvature_distortion_train")
        assert lines[-1].split(",")[:2] == ["reference", "3.05"]
        header, footer = lines[0].split(","), lines[-1].split(",")
        assert footer[header.index("l2_train")] == "0.062"
        assert footer[header.index("edge_loss_train")] == "-"

    def test_artifacts(self, tmp_path, synthetic, shape, basis, trained):
        idx = synthetic.items.index(shape)
        res = A.optimize_attack(shape.mesh, basis, trained, (shape.label + 1) % 10,
                                RunConfig(k=20, max_iterations=30), label=shape.label)
        res.shape_index, res.split = idx, shape.split
        out = A.write_attack_artifacts(tmp_path / "run", [res], synthetic)
        assert (out / "metrics.csv").read_text().count("\n") == 2
        coeffs = np.loadtxt(next((out / "coefficients").iterdir()), delimiter=",", skiprows=1)
        assert np.abs(synthesize(basis, coeffs) + shape.mesh.vertices - res.X_adv).max() < 1e-10
        assert len(list((out / "meshes").iterdir())) == 2
