"""Shared fixtures.

The expensive piece is the session-scoped ``pipeline`` fixture: one full
stock experiment (dataset generation, closed training, open-set finetune,
one incremental stage, evaluations for every scoring method) driven through
the CLI. Acceptance and CLI tests read its reports instead of re-training.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

from owlseg.cli import main as cli_main
from owlseg.config import default_config
from owlseg.data import SceneConfig, ShapeSpec

torch.set_num_threads(1)

# Verdict lines appended by the acceptance tests; printed after the run so
# they stay visible even when pytest captures test stdout.
ACCEPTANCE_VERDICTS: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.line(line)


settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")


@dataclass
class PipelineRun:
    root: Path
    config_path: Path
    cfg: object
    timings: dict = field(default_factory=dict)

    def report(self, tag: str) -> dict:
        path = self.root / "reports" / f"report-{tag}.json"
        return json.loads(path.read_text())

    @property
    def state(self) -> dict:
        return json.loads((self.root / "state.json").read_text())


PIPELINE_STEPS = (
    ("gen-data", ("gen-data",)),
    ("train-closed", ("train-closed",)),
    ("evaluate-closed", ("evaluate", "--stage", "closed")),
    ("finetune-oseg", ("finetune-oseg",)),
    ("evaluate-open-real", ("evaluate", "--stage", "open", "--method", "real")),
    ("evaluate-open-msp", ("evaluate", "--stage", "open", "--method", "msp")),
    ("evaluate-open-maxlogit", ("evaluate", "--stage", "open", "--method", "maxlogit")),
    ("evaluate-open-mcdropout", ("evaluate", "--stage", "open", "--method", "mcdropout")),
    ("il-6", ("il", "--class", "6")),
    ("evaluate-il", ("evaluate", "--stage", "il")),
    ("dump-scores", ("dump-scores", "--stage", "open", "--format", "bin")),
    ("plot-data", ("plot-data",)),
)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> PipelineRun:
    root = tmp_path_factory.mktemp("stock-run")
    cfg = default_config(seed=7)
    config_path = root / "config.json"
    config_path.write_text(json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True))
    run = PipelineRun(root=root, config_path=config_path, cfg=cfg)
    for name, argv in PIPELINE_STEPS:
        t0 = time.monotonic()
        rc = cli_main([*argv, "--config", str(config_path), "--out", str(root)])
        run.timings[name] = time.monotonic() - t0
        assert rc == 0, f"pipeline step {name} exited with {rc}"
    return run


# --- small synthetic experiment configs for CLI-level tests -------------------

def small_scene(points: int = 512, extent: float = 30.0, two_novel: bool = False,
                **overrides) -> SceneConfig:
    known = (
        ShapeSpec("ground", 1, "ground"),
        ShapeSpec("crate", 2, "box", (2.0, 2.0, 1.5), (3.0, 3.0, 2.0), 1, 2),
        ShapeSpec("bush", 5, "ellipsoid", (1.2, 1.2, 1.0), (2.0, 2.0, 1.6), 1, 2),
    )
    novel = (ShapeSpec("blob", 6, "ellipsoid", (2.4, 2.4, 2.0), (4.0, 4.0, 3.2), 1, 1),)
    if two_novel:
        novel += (ShapeSpec("pole", 7, "cylinder", (0.4, 0.4, 3.0), (0.6, 0.6, 4.0), 1, 1),)
    base = dict(
        points_per_scan=points,
        known_shape_classes=known,
        novel_shape_classes=novel,
        scene_extent=extent,
        min_object_points=20,
    )
    base.update(overrides)
    return SceneConfig(**base)


def small_config(seed: int = 5, two_novel: bool = False, **overrides):
    """Minutes-not-hours experiment config used by CLI and determinism tests."""
    from owlseg.config import DatasetSection, RegistrySection, TrainingSection
    from owlseg.network import ArchConfig

    novel = (6, 7) if two_novel else (6,)
    base = dict(
        dataset=DatasetSection(
            scene=small_scene(two_novel=two_novel), num_train=3, num_val=2
        ),
        registry=RegistrySection(old_classes=(1, 2, 5), novel_classes=novel),
        arch=ArchConfig(hidden_width=24, dropout_rate=0.1),
        training=TrainingSection(
            closed_epochs=6, oseg_epochs=8, il_epochs=2, baseline_epochs=2
        ),
    )
    base.update(overrides)
    return default_config(seed=seed, **base)


def write_config(cfg, path: Path) -> Path:
    path.write_text(json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True))
    return path
