import numpy as np
import pytest

from wmbench import codec, dfd, experiment, injector, nn


@pytest.fixture(scope="session")
def cfg():
    return experiment.ExperimentConfig()


@pytest.fixture(scope="session")
def task(cfg):
    return experiment.load_task(cfg, 0)


@pytest.fixture(scope="session")
def clean(cfg, task):
    return experiment.train_clean(cfg, task, 0)


@pytest.fixture(scope="session")
def small_gen(clean):
    gen, _, _ = dfd.distill(clean, steps=300, cfg=dfd.DistillConfig(seed=0))
    return gen


@pytest.fixture(scope="session")
def encoder():
    return codec.EncoderSpec("seeded-noise", (16, 16, 1))


@pytest.fixture(scope="session")
def honest_pkg(clean, small_gen, encoder):
    """Scheme A, plain triggers, trained until every trigger is learned."""
    icfg = injector.InjectionConfig("A", "T", trigger_acc_target=1.0, max_epochs=400)
    pkg = injector.embed(clean, "test-owner", 50, encoder, small_gen, None, icfg, seed=0)
    assert not pkg.below_target
    return pkg


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


def tiny_model(seed=0, dtype=np.float64, num_classes=3):
    layers = [nn.conv2d(1, 2), nn.RELU, nn.MAXPOOL, nn.FLATTEN, nn.dense(2 * 2 * 2, 5), nn.RELU,
              nn.dense(5, num_classes)]
    return nn.Model.init(layers, (4, 4, 1), seed, dtype=dtype)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
