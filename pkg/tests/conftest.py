import sys
import warnings
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dfkdlab.conditions import WorldBinding  # noqa: E402
from dfkdlab.diffusion import DiffusionTrainConfig, NoiseSchedule, train_diffusion  # noqa: E402
from dfkdlab.nets import ClassifierModel, TrainConfig, train_autoencoder, train_classifier  # noqa: E402
from dfkdlab.world import WorldSpec, build_world, sample_split  # noqa: E402

TINY_TOML = """
[world]
K = 4
n_content = 3
n_style = 2
d_x = 16
ood_extra = 2
factor_dim = 6
seed = 5

[data]
n_train = 1500
n_test = 600
n_prior = 3000
n_reference = 300

[teacher]
epochs = 8

[autoencoder]
epochs = 20
d_z = 6
threshold_factor = 1.0

[diffusion]
epochs = 10
width = 32
depth = 2
T = 50

[dpe]
n_content = 3
n_style = 2

[synthesis]
per_class = 24
trace = true

[distill]
epochs = 4

[ablation]
seeds = [0]
"""

SMALL_SPEC = WorldSpec(K=4, n_content=3, n_style=2, d_x=16, ood_extra=2, factor_dim=6, seed=5)


class SmallStack:
    """A minutes-free stack on a 4-class world: teacher, autoencoder, short diffusion run."""

    def __init__(self):
        self.world = build_world(SMALL_SPEC)
        self.train = sample_split(self.world, "id_train", 1500)
        self.test = sample_split(self.world, "id_test", 600)
        self.prior = sample_split(self.world, "broad_prior", 3000)
        self.teacher, _ = train_classifier(self.train, TrainConfig(epochs=8),
                                           model=ClassifierModel(16, (24, 16), 4, seed=1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.ae = train_autoencoder(self.prior.x, TrainConfig(epochs=20, lr=0.01), d_z=6)
        self.binding = WorldBinding.from_spec(SMALL_SPEC)
        self.diffusion = train_diffusion(self.prior, self.ae, self.binding,
                                         DiffusionTrainConfig(epochs=15, width=32, depth=2),
                                         NoiseSchedule.linear(50))


@pytest.fixture(scope="session")
def small_stack():
    return SmallStack()


# ----------------------------------------------------------------------------- default world


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


DEFAULT_STAGES = ("gen-data", "train-teacher", "train-ae", "train-diffusion", "dpe", "synthesize", "distill",
                  "evaluate", "ablate", "report")


@pytest.fixture(scope="session")
def default_run(request):
    """Full pipeline plus ablation on the default world, cached across sessions by stage hashes."""
    from dfkdlab.pipeline import Run, config_hash, load_config

    cfg = load_config()
    run_dir = request.config.cache.mkdir("dfkdlab-default") / config_hash(cfg)
    run = Run(cfg, run_dir)
    run.run_all(DEFAULT_STAGES)
    return run
