"""Joint model assembly, losses, objectives, and closed-form gradients."""

import math

import numpy as np
import pytest

from dmtl import layers as L
from dmtl import model as M
from dmtl import tensor as T
from dmtl.catalog import (NOMINAL, ORDINAL, AttributeCatalog, AttributeDef,
                          CategorySpec, demographic_catalog, face40_catalog)
from dmtl.errors import (ArchitectureError, ContractError, DimensionError,
                         LabelError)

VEC_TRUNK = [L.FullyConnected(12), L.ReLU()]


def vec_model(catalog, seed=0, dtype=np.float64, head_hidden=6, input_dim=5):
    return M.build_dmtl(catalog, VEC_TRUNK, (input_dim,), seed=seed,
                        head_hidden=head_hidden, dtype=dtype)


def demo_labels(n, rng):
    return {"age": rng.uniform(0, 100, size=n),
            "gender": rng.integers(0, 2, size=n),
            "race": rng.integers(0, 3, size=n)}


class TestBuild:
    def test_demographic_two_heads(self):
        model = vec_model(demographic_catalog())
        widths = sorted(model.head_specs[c][-1].out_features
                        for c in model.head_specs)
        assert len(model.head_specs) == 2
        assert widths == [1, 5]

    def test_face40_eight_heads(self):
        cat = face40_catalog()
        model = vec_model(cat, head_hidden=4)
        assert len(model.head_specs) == 8
        for c in cat.categories:
            assert model.head_specs[c.id][-1].out_features == cat.head_width(c.id)

    def test_single_category_degenerates(self):
        cat = AttributeCatalog([AttributeDef("x", NOMINAL, "c", classes=2)],
                               [CategorySpec("c", NOMINAL)])
        model = vec_model(cat)
        assert list(model.head_specs) == ["c"]

    def test_head_width_mismatch_rejected(self):
        cat = demographic_catalog()
        bad = {"ord_holistic": L.preset_head(1, [3])}  # catalog demands 1
        with pytest.raises(ArchitectureError):
            M.build_dmtl(cat, VEC_TRUNK, (5,), head_specs=bad)

    def test_category_head_spec_override(self):
        cat = AttributeCatalog(
            [AttributeDef("x", NOMINAL, "c", classes=2)],
            [CategorySpec("c", NOMINAL,
                          head_spec=tuple(L.preset_head(1, [2])))])
        model = vec_model(cat)
        assert model.head_specs["c"] == L.preset_head(1, [2])
        # the override is invisible to serialization and the digest
        plain = AttributeCatalog(
            [AttributeDef("x", NOMINAL, "c", classes=2)],
            [CategorySpec("c", NOMINAL)])
        assert cat.digest() == plain.digest()

    def test_same_seed_bitwise(self):
        a = vec_model(demographic_catalog(), seed=4)
        b = vec_model(demographic_catalog(), seed=4)
        for (qa, pa), (qb, pb) in zip(a.qualified_params(), b.qualified_params()):
            assert qa == qb and np.array_equal(pa.data, pb.data)


class TestForward:
    def test_trunk_computed_once(self):
        cat2 = demographic_catalog()
        cat1 = AttributeCatalog([AttributeDef("x", NOMINAL, "c", classes=2)],
                                [CategorySpec("c", NOMINAL)])
        batch = np.random.default_rng(0).normal(size=(3, 1, 16, 16))
        trunk = L.preset_trunk("tiny")
        conv_layers = sum(isinstance(s, L.Conv) for s in trunk)
        for cat in (cat1, cat2):
            model = M.build_dmtl(cat, trunk, (1, 16, 16), seed=0,
                                 head_hidden=4, dtype=np.float64)
            pred = M.forward(model, batch, "eval")
            assert pred.graph.count_kind("conv2d") == conv_layers

    def test_eval_forward_bitwise_repeatable(self):
        model = vec_model(demographic_catalog())
        batch = np.random.default_rng(1).normal(size=(4, 5))
        a = M.forward(model, batch, "eval").values()
        b = M.forward(model, batch, "eval").values()
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_zero_weight_heads_emit_zero(self):
        model = vec_model(demographic_catalog())
        for pset in model.head_params.values():
            for p in pset:
                if p.trainable:
                    p.data[:] = 0
        batch = np.random.default_rng(2).normal(size=(4, 5))
        pred = M.forward(model, batch, "eval")
        for out in pred.outputs.values():
            assert not out.data.any()

    def test_batch_shape_mismatch(self):
        model = vec_model(demographic_catalog())
        with pytest.raises(DimensionError):
            M.forward(model, np.zeros((2, 7)), "eval")

    def test_prediction_covers_catalog(self):
        cat = demographic_catalog()
        model = vec_model(cat)
        pred = M.forward(model, np.zeros((2, 5)), "eval")
        assert sorted(pred.outputs) == sorted(cat.names())


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(M.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3,
                                   atol=1e-15)

    def test_log2_case(self):
        # oracle: scalar evaluation with e^ln2 = 2 gives [1, 2, 1]/4
        out = M.softmax([0.0, math.log(2.0), 0.0])
        np.testing.assert_allclose(out, [0.25, 0.5, 0.25], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = rng.normal(size=6)
            c = rng.normal() * 10
            np.testing.assert_allclose(M.softmax(s + c), M.softmax(s),
                                       atol=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        s = rng.normal(scale=20, size=(100, 7))
        np.testing.assert_allclose(M.softmax(s).sum(axis=1), 1.0, atol=1e-9)

    def test_rejects_non_finite(self):
        with pytest.raises(ContractError):
            M.softmax([np.inf, 0.0])


def scalar_loss_nominal(scores, truths):
    g = T.Graph()
    s = g.leaf(np.asarray(scores, dtype=np.float64))
    return M.loss_nominal([s], [np.asarray(truths)]).item()


class TestLossNominal:
    def test_saturated_truth_is_zero(self):
        assert scalar_loss_nominal([[1000.0, 0.0]], [0]) == 0.0

    def test_uniform_four_classes(self):
        # oracle: -log(1/4) = ln 4
        out = scalar_loss_nominal([[0.0, 0.0, 0.0, 0.0]], [2])
        assert out == pytest.approx(math.log(4.0), abs=1e-12)

    def test_additive_over_batch(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(2, 3))
        ta = rng.integers(0, 3, size=4)
        tb = rng.integers(0, 3, size=2)
        joint = scalar_loss_nominal(np.vstack([a, b]), np.concatenate([ta, tb]))
        split = scalar_loss_nominal(a, ta) + scalar_loss_nominal(b, tb)
        assert joint == pytest.approx(split, abs=1e-9)

    def test_out_of_range_label(self):
        cat = AttributeCatalog([AttributeDef("c", NOMINAL, "g", classes=3)],
                               [CategorySpec("g", NOMINAL)])
        g = T.Graph()
        s = g.leaf(np.zeros((2, 3)))
        with pytest.raises(LabelError, match="sample 1.*'c'"):
            M.loss_nominal([s], [np.array([0, 3])], attrs=cat.attributes)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            s = rng.normal(scale=5, size=(6, 4))
            t = rng.integers(0, 4, size=6)
            assert scalar_loss_nominal(s, t) >= 0.0


class TestLossOrdinal:
    def run(self, preds, truths):
        g = T.Graph()
        p = g.leaf(np.asarray(preds, dtype=np.float64).reshape(-1, 1))
        return M.loss_ordinal([p], [np.asarray(truths, dtype=np.float64)]).item()

    def test_perfect_is_zero(self):
        assert self.run([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_case(self):
        # oracle: 1^2 + 2^2 = 5
        assert self.run([0.0, 0.0], [1.0, 2.0]) == 5.0

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=6)
        t = rng.normal(size=6)
        base = self.run(p, t)
        for s in (2.0, 0.5):
            scaled = self.run(t + s * (p - t), t)
            assert scaled == pytest.approx(s * s * base, rel=1e-12)

    def test_length_mismatch(self):
        g = T.Graph()
        p = g.leaf(np.zeros((3, 1)))
        with pytest.raises(ContractError):
            M.loss_ordinal([p], [np.zeros(4)])


class TestObjective:
    def setup_method(self):
        self.cat = demographic_catalog()
        self.rng = np.random.default_rng(9)
        self.model = vec_model(self.cat, seed=2)
        self.batch = self.rng.normal(size=(6, 5))
        self.labels = demo_labels(6, self.rng)

    def test_gamma_zero_equals_plain_sum(self):
        obj = M.objective_dmtl(self.model, self.batch, self.labels,
                               mode="eval")
        plain = sum(t.item() for t in obj.category_losses.values())
        assert obj.value.item() == pytest.approx(plain, abs=1e-9)

    def test_nonnegative(self):
        for g1, g2 in ((0.0, 0.0), (0.1, 0.2)):
            obj = M.objective_dmtl(self.model, self.batch, self.labels,
                                   gamma1=g1, gamma2=g2, mode="eval")
            assert obj.value.item() >= 0.0

    def test_zero_weights_gamma_only_objective_is_zero(self):
        model = vec_model(self.cat, seed=3)
        for _, p in model.qualified_params():
            if p.trainable:
                p.data[:] = 0
        labels = {"age": np.zeros(4), "gender": np.zeros(4, np.int64),
                  "race": np.zeros(4, np.int64)}
        obj = M.objective_dmtl(model, np.zeros((4, 5)), labels,
                               gamma1=0.5, gamma2=0.5, mode="eval")
        # CE of all-zero scores is ln C per sample; the penalty itself is 0
        penalty_only = obj.value.item() - sum(
            t.item() for t in obj.category_losses.values())
        assert penalty_only == 0.0

    def test_doubling_lambda_doubles_head_gradient(self):
        def head_grads(lam):
            model = vec_model(self.cat, seed=2)
            obj = M.objective_dmtl(model, self.batch, self.labels,
                                   lambdas={"nom_holistic": lam}, mode="eval")
            grads = obj.backward()
            return {k: v for k, v in grads.items()
                    if k.startswith("head.nom_holistic.")}

        g1, g2 = head_grads(1.0), head_grads(2.0)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2.0 * g1[k], atol=1e-9)

    def test_zero_lambda_and_gamma2_zero_head_gradient(self):
        obj = M.objective_dmtl(self.model, self.batch, self.labels,
                               lambdas={"ord_holistic": 0.0}, gamma2=0.0,
                               mode="eval")
        grads = obj.backward()
        for k, v in grads.items():
            if k.startswith("head.ord_holistic."):
                assert not v.any()

    def test_label_mismatch_rejected(self):
        with pytest.raises(LabelError):
            M.objective_dmtl(self.model, self.batch,
                             {"age": np.zeros(6)}, mode="eval")

    def test_trunk_gradient_sums_over_categories(self):
        # three categories; per-category backward passes summed must equal
        # the joint backward on the shared trunk
        cat = AttributeCatalog(
            [AttributeDef("u", NOMINAL, "c1", classes=2),
             AttributeDef("v", NOMINAL, "c2", classes=3),
             AttributeDef("w", ORDINAL, "c3", lo=0, hi=1)],
            [CategorySpec("c1", NOMINAL), CategorySpec("c2", NOMINAL),
             CategorySpec("c3", ORDINAL)])
        rng = np.random.default_rng(11)
        batch = rng.normal(size=(5, 5))
        labels = {"u": rng.integers(0, 2, 5), "v": rng.integers(0, 3, 5),
                  "w": rng.uniform(0, 1, 5)}
        base = vec_model(cat, seed=6)

        def trunk_grads(lambdas):
            model = base.copy()
            obj = M.objective_dmtl(model, batch, labels, lambdas=lambdas,
                                   mode="train")
            grads = obj.backward()
            return {k: v for k, v in grads.items() if k.startswith("trunk.")}

        joint = trunk_grads({"c1": 1.0, "c2": 1.0, "c3": 1.0})
        parts = [trunk_grads({"c1": 0.0, "c2": 0.0, "c3": 0.0} | {c: 1.0})
                 for c in ("c1", "c2", "c3")]
        for k in joint:
            summed = parts[0][k] + parts[1][k] + parts[2][k]
            np.testing.assert_allclose(joint[k], summed, atol=1e-9)


class TestStl:
    def test_single_attribute_equals_joint_with_trunk_folded(self):
        cat = AttributeCatalog([AttributeDef("x", NOMINAL, "c", classes=3)],
                               [CategorySpec("c", NOMINAL)])
        rng = np.random.default_rng(13)
        batch = rng.normal(size=(4, 5))
        labels = {"x": rng.integers(0, 3, 4)}
        # trunkless model: the head is the whole network
        model = M.build_dmtl(cat, [], (5,), seed=1, head_hidden=4,
                             dtype=np.float64)
        bundle = [("x", model)]
        stl = M.objective_stl(bundle, batch, labels, gamma=0.3, mode="eval")
        joint = M.objective_dmtl(model, batch, labels, gamma1=0.0, gamma2=0.3,
                                 mode="eval")
        assert stl[0].value.item() == pytest.approx(joint.value.item(), abs=1e-9)

    def test_per_model_independence(self):
        cat = demographic_catalog()
        bundle = M.stl_bundle(cat, VEC_TRUNK, (5,), seed=0, head_hidden=4,
                              dtype=np.float64)
        rng = np.random.default_rng(14)
        batch = rng.normal(size=(4, 5))
        labels = demo_labels(4, rng)
        objectives = M.objective_stl(bundle, batch, labels, mode="eval")
        # models share no parameters: every gradient belongs to its own model
        total = sum(o.value.item() for o in objectives)
        brute = 0.0
        for (name, model), obj in zip(bundle, objectives):
            alone = M.objective_dmtl(model, batch, {name: labels[name]},
                                     mode="eval")
            brute += alone.value.item()
            assert obj.value.item() == pytest.approx(alone.value.item(),
                                                     abs=1e-12)
        assert total == pytest.approx(brute, abs=1e-9)

    def test_bundle_models_are_distinct(self):
        cat = demographic_catalog()
        bundle = M.stl_bundle(cat, VEC_TRUNK, (5,), seed=0, head_hidden=4)
        w0 = bundle[0][1].trunk_params["fc1.weight"].data
        w1 = bundle[1][1].trunk_params["fc1.weight"].data
        assert not np.array_equal(w0, w1)


class TestClosedFormHeadGradient:
    def test_nominal_perfect_prediction_zero(self):
        x = np.array([[1.0, 0.0]])
        w = np.array([[1000.0, 0.0], [0.0, 0.0]])
        y = np.array([[1.0, 0.0]])
        grad = M.head_gradient_closed_form("nominal", x, w, y)
        assert not grad.any()

    def test_ordinal_perfect_prediction_zero(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 1))
        y = x @ w
        grad = M.head_gradient_closed_form("ordinal", x, w, y)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    @pytest.mark.parametrize("kind", ["nominal", "ordinal"])
    def test_matches_autodiff(self, kind):
        rng = np.random.default_rng(16)
        for _ in range(20):
            n, d, c = 5, 4, 3 if kind == "nominal" else 1
            x = rng.normal(size=(n, d))
            w = rng.normal(size=(d, c))
            g = T.Graph()
            xt = g.leaf(x)
            wt = g.leaf(w, requires_grad=True)
            scores = T.matmul(xt, wt)
            if kind == "nominal":
                t = rng.integers(0, c, size=n)
                onehot = np.eye(c)[t]
                loss = M.loss_nominal([scores], [t])
                closed = M.head_gradient_closed_form(kind, x, w, onehot)
            else:
                y = rng.normal(size=(n, 1))
                loss = M.loss_ordinal([scores], [y])
                closed = M.head_gradient_closed_form(kind, x, w, y)
            g.backward(loss)
            np.testing.assert_allclose(closed, wt.grad, atol=1e-10)

    def test_multi_layer_head_rejected(self):
        with pytest.raises(ContractError):
            M.head_gradient_closed_form(
                "nominal", np.zeros((1, 2)), np.zeros((2, 2)),
                np.array([[1.0, 0.0]]), head_specs=L.preset_head(2, [4, 2]))

    def test_single_linear_head_spec_accepted(self):
        out = M.head_gradient_closed_form(
            "ordinal", np.ones((1, 2)), np.zeros((2, 1)), np.zeros((1, 1)),
            head_specs=L.preset_head(1, [1]))
        assert out.shape == (2, 1)

    def test_non_onehot_rejected(self):
        with pytest.raises(ContractError):
            M.head_gradient_closed_form("nominal", np.ones((1, 2)),
                                        np.zeros((2, 2)),
                                        np.array([[0.5, 0.5]]))


class TestDecode:
    def setup_method(self):
        self.cat = demographic_catalog()

    def test_argmax(self):
        values = {"age": np.array([[50.0]]),
                  "gender": np.array([[0.1, 5.0]]),
                  "race": np.array([[0.1, 5.0, 0.1]])}
        out = M.decode(values, self.cat)
        assert out["race"][0] == 1

    def test_ordinal_clamp(self):
        values = {"age": np.array([[103.2]]),
                  "gender": np.array([[1.0, 0.0]]),
                  "race": np.array([[1.0, 0.0, 0.0]])}
        assert M.decode(values, self.cat)["age"][0] == 100.0

    def test_tie_goes_to_lowest_index(self):
        values = {"age": np.array([[1.0]]),
                  "gender": np.array([[2.0, 2.0]]),
                  "race": np.array([[1.0, 1.0, 1.0]])}
        out = M.decode(values, self.cat)
        assert out["gender"][0] == 0
        assert out["race"][0] == 0


def test_whole_model_finite_difference():
    # end-to-end oracle: central differences of the full objective with
    # respect to sampled parameters across trunk and both heads (f64)
    cat = demographic_catalog()
    trunk = [L.FullyConnected(6), L.BatchNorm(), L.ReLU()]
    base = M.build_dmtl(cat, trunk, (4,), seed=8, head_hidden=4,
                        dtype=np.float64)
    rng = np.random.default_rng(19)
    batch = rng.normal(size=(5, 4))
    labels = demo_labels(5, rng)

    def objective_value(model):
        obj = M.objective_dmtl(model.copy(), batch, labels,
                               gamma1=0.01, gamma2=0.02, mode="train")
        return obj.value.item()

    work = base.copy()
    obj = M.objective_dmtl(work, batch, labels, gamma1=0.01, gamma2=0.02,
                           mode="train")
    grads = obj.backward()

    params = dict(base.qualified_params())
    trainable = [q for q, p in params.items() if p.trainable]
    step = 1e-5
    for qname in rng.choice(trainable, size=min(8, len(trainable)),
                            replace=False):
        flat = params[qname].data.reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + step
        f_plus = objective_value(base)
        flat[j] = orig - step
        f_minus = objective_value(base)
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        analytic = grads[qname].reshape(-1)[j]
        denom = max(abs(numeric), abs(analytic), 1.0)
        assert abs(numeric - analytic) / denom < 1e-6, qname


def test_full_scale_trunk_trains_one_step():
    # the 256x256x3 preset with all 8 category heads: one forward/backward
    # plus an update must run and stay finite
    from dmtl import train as TR
    cat = face40_catalog()
    model = M.build_dmtl(cat, L.preset_trunk("modified_alexnet"),
                         (3, 256, 256), seed=0, head_hidden=64)
    rng = np.random.default_rng(0)
    batch = rng.normal(size=(2, 3, 256, 256)).astype(np.float32)
    labels = {a.name: rng.integers(0, 2, 2) for a in cat.attributes}
    obj = M.objective_dmtl(model, batch, labels, mode="train")
    grads = obj.backward()
    TR.sgd_step(model, grads, lr=1e-4, gamma1=1e-4, gamma2=1e-4)
    assert np.isfinite(obj.value.item())
    assert all(np.all(np.isfinite(p.data))
               for _, p in model.qualified_params())


def test_separability_advantage(comparison_table):
    """On the shared-latent dataset, joint training beats matched-budget
    single-task training on held-out mean accuracy in at least 4 of 5 seeds."""
    assert comparison_table.wins(strict=True) >= 4
