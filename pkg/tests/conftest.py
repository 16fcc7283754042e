"""Shared fixtures: the optional Stanford dataset and tmp working dirs."""

from __future__ import annotations

import os

import pytest

STANFORD_ENV = "IMTKIT_STANFORD"
STANFORD_DEFAULT = os.path.join(os.path.dirname(__file__), "data", "stanford.csv")
FETCH_HINT = (
    "Stanford heart transplant data not present (it is not vendored). "
    "Fetch it once with:  imtkit fetch-stanford --out {path}  "
    "or point the {env} environment variable at an existing copy."
)


def stanford_path() -> str | None:
    path = os.environ.get(STANFORD_ENV, STANFORD_DEFAULT)
    return path if os.path.exists(path) else None


@pytest.fixture(scope="session")
def stanford_subjects():
    path = stanford_path()
    if path is None:
        pytest.skip(FETCH_HINT.format(path=STANFORD_DEFAULT, env=STANFORD_ENV))
    from imtkit.io import load_stanford

    return list(load_stanford(path))
