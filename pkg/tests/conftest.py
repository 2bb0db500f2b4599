from collections.abc import Callable
from pathlib import Path

import pytest

from stablab.instances import build_convex_lower
from stablab.instances import build_nonconvex
from stablab.instances import build_strongly_convex_lower
from stablab.instances import Instance


@pytest.fixture
def convex_instance() -> Instance:
    return build_convex_lower(10, 3, 2, alpha=0.05)


@pytest.fixture
def strongly_convex_instance() -> Instance:
    return build_strongly_convex_lower(10, 2, 1.0)


@pytest.fixture
def nonconvex_instance() -> Instance:
    return build_nonconvex(10, 2, 1.0, 0.05)


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[[str], Path]:
    """write a config file that sends its CSV output into ``tmp_path``"""
    def _write(text: str, name: str = 'experiment.cfg') -> Path:
        path = tmp_path / name
        path.write_text(f'{text}\noutput = {tmp_path / "results.csv"}\n')
        return path

    return _write
