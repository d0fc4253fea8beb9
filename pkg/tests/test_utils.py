import json
import math

import numpy as np
import pandas as pd
import pytest

from layout_data.coco_io import dataset_stats
from layout_data.types import Dataset, PageRecord, Taxonomy
from utils.exporters import (MANIFEST_NAME, TOOL_VERSION, append_jsonl, format_stats_table, read_jsonl, write_frame,
                             write_run_manifest)
from utils.helpers import (allowed_image, codec_cache_path, file_sha256, format_duration, load_page_images,
                           save_image)


def test_allowed_image():
    assert allowed_image("page.PNG")
    assert allowed_image("scan.tiff")
    assert not allowed_image("notes.txt")
    assert not allowed_image("png")


def test_format_duration():
    assert format_duration(0) == "00:00:00.000"
    assert format_duration(3723.25) == "01:02:03.250"


def test_file_sha256_and_cache_path(tmp_path):
    path = tmp_path / "a.json"
    path.write_bytes(b"abc")
    digest = file_sha256(path)
    assert digest == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    cached = codec_cache_path(digest, 40, 28, cache_dir=str(tmp_path))
    assert cached == tmp_path / "codecs" / "ba7816bf8f01cfea_d40_m28.pt"


def test_load_page_images(tmp_path):
    pages = (PageRecord(1, 20, 10, file_name="images/a.png"), PageRecord(2, 20, 10, file_name="images/b.png"))
    d = Dataset(Taxonomy.from_names("demo", ["x"]), pages)
    save_image(np.full((10, 20, 3), 7), tmp_path / "images" / "a.png")
    with pytest.raises(FileNotFoundError):
        load_page_images(d, tmp_path)
    save_image(np.zeros((12, 20, 3)), tmp_path / "images" / "b.png")
    with pytest.raises(ValueError):
        load_page_images(d, tmp_path)
    save_image(np.zeros((10, 20, 3)), tmp_path / "images" / "b.png")
    images = load_page_images(d, tmp_path)
    assert images[1].shape == (10, 20, 3)
    assert images[1][0, 0, 0] == 7


def test_jsonl_handles_nan_and_numpy(tmp_path):
    path = tmp_path / "log.jsonl"
    append_jsonl(path, {"loss": np.float32(0.5), "ap": math.nan, "steps": np.int64(3)})
    append_jsonl(path, {"loss": 0.25})
    assert read_jsonl(path) == [{"loss": 0.5, "ap": None, "steps": 3}, {"loss": 0.25}]


def test_stats_table_has_a_total_row(three_pages):
    lines = format_stats_table(dataset_stats(three_pages)).splitlines()
    assert lines[0] == "category\tall\tall_pct"
    assert lines[1].split("\t")[:2] == ["paragraph", "3"]
    assert lines[-1] == "total\t7\t100.000"


def test_write_frame_spells_out_nan(tmp_path):
    path = write_frame(pd.DataFrame({"metric": ["a", "b"], "value": [0.5, math.nan]}), tmp_path / "f.tsv")
    assert path.read_text().splitlines() == ["metric\tvalue", "a\t0.500000", "b\tnan"]


def test_run_manifest(tmp_path):
    path = write_run_manifest(tmp_path, "split", {"ratios": (6, 1, 3)}, 7, {"annotations": tmp_path / "x.json"},
                              {}, 61.5)
    assert path.name == MANIFEST_NAME
    manifest = json.loads(path.read_text())
    assert manifest["config"] == {"ratios": [6, 1, 3]}
    assert manifest["inputs"]["annotations"] == str(tmp_path / "x.json")
    assert manifest["tool_version"] == TOOL_VERSION
    assert manifest["wall_time"] == "00:01:01.500"
    assert manifest["wall_time_s"] == 61.5
