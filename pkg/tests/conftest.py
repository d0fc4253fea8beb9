import os
import sys

import pytest

# Add project root to path
current_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(current_dir)
sys.path.insert(0, project_root)

from config import Config
from layout_data.coco_io import load_coco
from layout_engine.synth import SynthPageSpec, generate_corpus

FIXTURES = os.path.join(current_dir, "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def read_tsv(name):
    """Rows of a '#'-headed TSV fixture as dicts keyed by the header names."""
    with open(fixture_path(name), encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    header = lines[0].lstrip("# ").split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def small_spec(**overrides):
    """64x64 pages with up to three blocks, small enough for CPU model tests."""
    base = dict(categories=("paragraph", "title", "figure"), width=64, height=64,
                min_instances=1, max_instances=3, margin=4, gap=4, min_block=12)
    base.update(overrides)
    return SynthPageSpec(**base)


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, "CACHE_DIR", str(tmp_path / "cache"))


@pytest.fixture
def three_pages_path():
    return fixture_path("three_pages.json")


@pytest.fixture
def three_pages(three_pages_path):
    return load_coco(three_pages_path)


@pytest.fixture
def small_corpus():
    return generate_corpus(small_spec(), 4, seed=3)
