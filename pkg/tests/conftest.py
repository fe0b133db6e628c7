import os
from pathlib import Path

import numpy as np
import pytest

from ivx.config import load_config
from ivx.pipeline import run_pipeline

SMOKE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "smoke.ini"


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """One pipeline run on the bundled ten-speaker smoke config, shared across tests."""
    os.environ.pop("IVX_SEED", None)
    cfg = load_config(SMOKE_CONFIG, {"workdir": str(tmp_path_factory.mktemp("smoke"))})
    return cfg, run_pipeline(cfg)


@pytest.fixture(scope="session")
def smoke_ivectors(smoke_run):
    from ivx.corpus import read_manifest
    from ivx.tvspace import load_ivectors

    cfg, record = smoke_run
    stages = Path(cfg.workdir) / "stages"
    ivx_dir = next(stages.glob("ivectors-*"))
    manifest = read_manifest(next(stages.glob("corpus-*")) / "corpus" / "manifest.csv")
    train_ids = {r.utterance_id for r in manifest.split("train")}
    return np.array([iv.w for iv in load_ivectors(ivx_dir / "ivectors.ivxv") if iv.utterance_id in train_ids])


# -- acceptance summary: one PASS/FAIL line per criterion -------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[marker.args[0]] = (marker.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
