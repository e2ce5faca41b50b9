import pytest

from latentleak.attack import run_attack
from latentleak.benchmark import build_benchmark, default_attack_config


@pytest.fixture(scope="session")
def small_bench():
    """Four-class benchmark shared by tests that need real models."""
    return build_benchmark(num_classes=4, seed=3, n_train=12)


@pytest.fixture(scope="session")
def tiny_config(small_bench):
    """Attack config small enough to run in a couple of seconds."""
    return default_attack_config(
        small_bench,
        master_seed=7,
        target_classes=(0, 1),
        sample_count=60,
        candidates_per_class=8,
        final_count=4,
        steps=6,
        mc_samples=12,
        batch_size=8,
    )


@pytest.fixture(scope="session")
def tiny_result(small_bench, tiny_config):
    return run_attack(tiny_config, small_bench.generator, small_bench.target_model)
