"""Shared fixtures: canonical synthetic datasets and cached experiments.

The expensive experiments (memorization run, multi-task-vs-single-task
comparison) are session-scoped so the acceptance suite and the property
tests share one training run each.
"""

import pytest

from dmtl import data as D
from dmtl import layers as L
from dmtl import metrics as ME
from dmtl import model as M
from dmtl import train as TR


@pytest.fixture
def demo_catalog():
    from dmtl.catalog import demographic_catalog
    return demographic_catalog()


def small_image_spec(n_samples=64, seed=21, noise=0.1):
    """One ordinal + one nominal attribute over (1, 16, 16) image inputs."""
    return D.SyntheticSpec(
        n_samples=n_samples, latent_dim=3, input_dim=256, noise=noise,
        seed=seed, input_shape=(1, 16, 16),
        attributes=(
            D.SynthAttribute("level", "O", (1.0, 0.4, 0.0), "c_ord",
                             lo=0.0, hi=1.0),
            D.SynthAttribute("flag", "N", (0.0, 1.0, 0.5), "c_nom", classes=2),
        ))


def shared_latent_spec(n_samples=2000, seed=123, noise=0.25):
    """Six binary tasks, each the sign of one latent product, so the sign
    features of four latent factors are shared across tasks.  Tasks are not
    linearly separable in input space but become separable once the latent
    factors are recovered."""
    Z = (0.0, 0.0, 0.0, 0.0)
    attrs = (
        D.SynthAttribute("a0", "N", Z, "c0", pairs=((0, 1, 1.0),)),
        D.SynthAttribute("a1", "N", Z, "c0", pairs=((0, 2, 1.0),)),
        D.SynthAttribute("a2", "N", Z, "c0", pairs=((1, 2, 1.0),)),
        D.SynthAttribute("a3", "N", Z, "c1", pairs=((0, 3, 1.0),)),
        D.SynthAttribute("a4", "N", Z, "c1", pairs=((1, 3, 1.0),)),
        D.SynthAttribute("a5", "N", Z, "c1", pairs=((2, 3, 1.0),)),
    )
    return D.SyntheticSpec(n_samples=n_samples, latent_dim=4, attributes=attrs,
                           input_dim=16, noise=noise, seed=seed)


COMPARISON_TRUNK = [L.FullyConnected(16), L.ReLU(), L.FullyConnected(8), L.ReLU()]
COMPARISON_SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="session")
def small_image_dataset():
    return D.synth_generate(small_image_spec())


@pytest.fixture(scope="session")
def overfit_run(small_image_dataset):
    """Tiny trunk + two heads memorizing 64 samples; returns
    (model, history, elapsed seconds)."""
    import time
    ds = small_image_dataset
    model = M.build_dmtl(ds.catalog, L.preset_trunk("tiny"), (1, 16, 16),
                         seed=5, head_hidden=8)
    config = TR.TrainConfig(eta=0.002, batch_size=16, max_iterations=2000,
                            seed=3, step_interval=1500)
    start = time.monotonic()
    model, history = TR.train_loop(model, ds, config)
    elapsed = time.monotonic() - start
    return model, history, elapsed


@pytest.fixture(scope="session")
def comparison_table():
    """The 2000-sample, 6-attribute multi-task vs single-task experiment."""
    ds = D.synth_generate(shared_latent_spec())
    config = TR.TrainConfig(eta=0.01, batch_size=32, max_iterations=1200,
                            seed=0, step_interval=900)
    return ME.mtl_vs_stl_report(ds.catalog, ds, COMPARISON_TRUNK, (16,),
                                config, seeds=COMPARISON_SEEDS, head_hidden=4)


# pass/fail summary lines for the acceptance suite
CRITERIA = {
    "test_criterion_01_scope":
        "criterion 1: benchmark-scale results are out of scope; the "
        "property suite below substitutes",
    "test_criterion_02_gradient_correctness":
        "criterion 2: all registered ops pass 100-case finite-difference "
        "checks (rel < 1e-4) in < 60 s",
    "test_criterion_03_closed_form_head_gradients":
        "criterion 3: closed-form linear-head gradients match autodiff "
        "within 1e-10 on 100 cases per kind",
    "test_criterion_04_shared_trunk_summation":
        "criterion 4: per-category backward passes sum to the joint trunk "
        "gradient within 1e-9 (3 categories)",
    "test_criterion_05_loss_invariants":
        "criterion 5: softmax rows sum to 1 and are shift-invariant; "
        "losses >= 0, exactly 0 at perfect prediction; objective reduces "
        "to the plain loss sum at gamma=0, lambda=1",
    "test_criterion_06_overfit":
        "criterion 6: tiny trunk + 2 heads memorizes 64 samples (nominal "
        "accuracy 1.0, ordinal MAE < 0.05) within 2000 iterations, < 5 min",
    "test_criterion_07_mtl_vs_stl":
        "criterion 7: joint model >= budget-matched single-task baselines "
        "on held-out mean accuracy in >= 4 of 5 seeds (N=2000, 6 attrs)",
    "test_criterion_08_metric_oracles":
        "criterion 8: metrics match exact brute-force recomputation on a "
        "200-sample dump; epsilon-error fixed points within 1e-12",
    "test_criterion_09_cooccurrence":
        "criterion 9: phi matrix equals brute-force contingency "
        "computation exactly; identical 1.0, complementary -1.0",
    "test_criterion_10_learning_rate_schedule":
        "criterion 10: schedule returns exactly 0.0001 at iteration 0 "
        "and 0.00001 at iteration 100000",
    "test_criterion_11_determinism_persistence":
        "criterion 11: same-seed training bitwise identical; checkpoints "
        "round-trip and resume bitwise at any split point",
    "test_criterion_12_subject_exclusivity":
        "criterion 12: over 1000 fuzzed datasets no subject spans two "
        "folds and fold subject counts balance within 1",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    reports = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call" and status != "error":
                continue
            if "test_acceptance.py" in rep.nodeid:
                reports.append((rep.nodeid.split("::")[-1], status))
    if not reports:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status in sorted(set(reports)):
        label = "PASS" if status == "passed" else "FAIL"
        base = name.split("[")[0]
        suffix = name[len(base):]
        desc = CRITERIA.get(base, base) + (f" {suffix}" if suffix else "")
        terminalreporter.write_line(f"{label}  {desc}")
