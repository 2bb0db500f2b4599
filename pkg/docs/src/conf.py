"""Sphinx configuration of the stablab documentation"""
from __future__ import annotations

import importlib.metadata
import os
import sys
from datetime import date
from typing import Any

from sphinx.application import Sphinx

sys.path.insert(0, os.path.abspath('../..'))

project = 'stablab'
copyright = f'{date.today().year}, stablab developers'
author = 'stablab developers'

release = importlib.metadata.version(project)
version = '.'.join(release.split('.')[:2])

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    'sphinx.ext.mathjax',
    'sphinx_autodoc_typehints',
    'myst_parser',
    'sphinx_copybutton',
    'sphinx.ext.viewcode',
    'sphinxcontrib.autodoc_pydantic',
]
typehints_fully_qualified = False
always_use_bars_union = True
typehints_defaults = 'braces-after'
typehints_use_signature_return = True
autodoc_pydantic_model_show_json = False
autodoc_pydantic_settings_show_json = False

exclude_patterns: list[str] = []
intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable', None),
    'pandas': ('https://pandas.pydata.org/docs', None),
    'pydantic': ('https://docs.pydantic.dev/latest', None),
}

html_theme = 'furo'
html_title = 'stablab'
html_short_title = f'stablab-{release}'

source_suffix = {
    '.rst': 'restructuredtext',
    '.md': 'markdown',
}

# pydantic internals that would otherwise show up on every model
SKIP_MEMBERS = {
    'model_config',
    'model_fields',
    'model_computed_fields',
}


def skip_member(
        app: Sphinx,
        what: str,
        name: str,
        obj: object,
        skip: bool,
        options: dict[str, Any],
) -> bool:
    return True if name in SKIP_MEMBERS else skip


def setup(app: Sphinx) -> None:
    app.connect('autodoc-skip-member', skip_member)
