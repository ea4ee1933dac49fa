import json

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from histoage.age.attention import rank_attention_patches
from histoage.pipeline.report import (
    curves_svg,
    emit_montage,
    hr_svg,
    inertia_svg,
    montage_enrichment,
    montage_shape,
    scatter_svg,
    write_table,
)
from histoage.utils.errors import DataError


def _ranking(n):
    ids = [f"P{i:05d}-1_S1_000_000" for i in range(n)]
    return rank_attention_patches(ids, [i[:8] for i in ids], [i[:6] for i in ids], ["M"] * n,
                                  [40.0] * n, [40.0 + i for i in range(n)])


def _images(ranked):
    return {pid: np.full((256, 256, 3), 10 * i, dtype=np.uint8) for i, pid in enumerate(ranked["patch_id"])}


@pytest.mark.parametrize("n, shape", [(8, (2, 4)), (12, (2, 4)), (5, (2, 4)), (3, (1, 3)), (1, (1, 1))])
def test_montage_shape(n, shape):
    assert montage_shape(n, 2, 4) == shape


def test_full_montage(tmp_path):
    ranked = _ranking(10)
    png, sidecar = emit_montage(ranked, _images(ranked), tmp_path / "montage.png")
    assert Image.open(png).size == (1024, 592)
    cells = json.loads(sidecar.read_text())["cells"]
    assert [c["rank"] for c in cells] == list(range(1, 9))
    assert (cells[4]["row"], cells[4]["col"]) == (1, 0)


def test_single_cell_montage(tmp_path):
    ranked = _ranking(1)
    png, _ = emit_montage(ranked, _images(ranked), tmp_path / "one.png")
    assert Image.open(png).size == (256, 296)


def test_montage_errors(tmp_path):
    ranked = _ranking(2)
    with pytest.raises(DataError):
        emit_montage(ranked.iloc[:0], {}, tmp_path / "empty.png")
    with pytest.raises(DataError):
        emit_montage(ranked, {}, tmp_path / "missing.png")


def test_region_enrichment_in_sidecar(tmp_path):
    ranked = _ranking(10)
    regions = {pid: ("epidermis" if i < 4 else "collagen") for i, pid in enumerate(ranked["patch_id"])}
    _, sidecar = emit_montage(ranked, _images(ranked), tmp_path / "m.png", rows=1, cols=2, regions=regions)
    enrichment = json.loads(sidecar.read_text())["region_enrichment"]
    assert enrichment["epidermis"]["montage_share"] == 1.0
    assert enrichment["epidermis"]["ratio"] == pytest.approx(2.5)


def test_montage_enrichment_math():
    out = montage_enrichment(["nevus", "dermis"], ["nevus", "dermis", "dermis", "dermis", None])
    assert out["nevus"] == {"montage_share": 0.5, "base_share": 0.25, "ratio": 2.0}


def test_svg_plots():
    predictions = pd.DataFrame({"sex": ["M", "F"], "actual_age": [30.0, 60.0], "predicted_age": [35.0, 58.0]})
    svg = scatter_svg(predictions)
    assert svg.startswith("<svg") and svg.count("<circle") == 2
    curves = pd.DataFrame({"stratum": ["M", "M", "F", "F"], "t": [0.0, 1.0, 0.0, 1.0], "survival": [1.0, 0.9, 1.0, 0.8]})
    assert curves_svg(curves, "Actual arm").count("<polyline") == 2
    table = pd.DataFrame({"covariate": ["age", "age"], "arm": ["actual", "predicted"],
                          "hr": [1.08, 1.05], "ci_lo": [1.05, 1.02], "ci_hi": [1.11, 1.09]})
    assert "age" in hr_svg(table)
    elbow = pd.DataFrame({"k": [1, 2, 3], "mean_inertia": [9.0, 4.0, 3.5], "slides": [2, 2, 2]})
    svg = inertia_svg(elbow, "Mean k-means inertia (S1)")
    assert svg.count("<polyline") == 1 and svg.count("<circle") == 3
    assert "(S1)" in svg


def test_tables_are_written_twice(tmp_path):
    frame = pd.DataFrame({"a": [1.5, 2.25]})
    csv_path, txt_path = write_table(frame, tmp_path / "t.csv", frame.rename(columns={"a": "A"}))
    assert csv_path.read_text().splitlines() == ["a", "1.5", "2.25"]
    assert txt_path.suffix == ".txt" and "A" in txt_path.read_text()
