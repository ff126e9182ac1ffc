import json
import os

import numpy as np
import pytest
from filelock import FileLock

from oracles import brute_classes_local, overpass_point_count
from streetcrop.cli import main
from streetcrop.config import ConfigError, PipelineConfig, load_config
from streetcrop.forest import ForestParams, evaluate, train
from streetcrop.landcover import LandCoverGrid, load_grid
from streetcrop.pipeline import (
    AlignmentError,
    FunnelEntry,
    FunnelReport,
    PipelineLockedError,
    default_sizes,
    f1_vs_trainsize,
    rasterize_map,
    read_curve,
    run_stage,
    run_stages,
    spearman,
)
from streetcrop.roadnet import read_candidates
from streetcrop.synthetic import prototype_features, sample_references

# counts for the seed-0 synthetic country, computed with the oracles in
# oracles.py (segment arithmetic and a cell-by-cell haversine scan)
STREET_POINTS = 3584
VIEWS = 7168
VIEWS_KEPT = 4754
CANDIDATES_KEPT = 2935


# -- config ------------------------------------------------------------------


def test_defaults_round_trip(tmp_path):
    cfg = PipelineConfig()
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    back = load_config(path)
    assert back.to_sections()["forest"] == cfg.to_sections()["forest"]
    assert back.step_m == 10.0 and back.field_distance_m == 30.0 and back.min_sep_m == 100.0
    assert (back.window, back.stride, back.tau) == (300, 50, 0.9)
    assert back.forest.n_trees == 500 and back.harmonic.order == 3


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("[labeling]\ntau = lots\n")
    with pytest.raises(ConfigError, match="tau"):
        load_config(bad)
    bad.write_text("[labeling]\ntua = 0.5\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(bad)
    bad.write_text("[imagery]\ntransport = carrier-pigeon\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_overrides_and_relative_paths(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[paths]\nroads = roads.json\n[run]\nseed = 3\n")
    cfg = load_config(path, {"labeling.tau": "0.95", "run.seed": "7"})
    assert cfg.tau == 0.95 and cfg.seed == 7 and cfg.forest.seed == 7
    assert cfg.path("roads") == tmp_path / "roads.json"


# -- CLI exit codes ------------------------------------------------------------


def test_exit_code_config_error(tmp_path):
    assert main(["densify", "--config", str(tmp_path / "nope.ini")]) == 2
    assert main(["densify", "--workdir", str(tmp_path)]) == 2  # no roads configured


def test_exit_code_dependency_error(tmp_path, capsys):
    assert main(["train", "--workdir", str(tmp_path)]) == 3
    assert "features" in capsys.readouterr().err


def test_exit_code_budget(synthetic_country, tmp_path):
    args = ["all", "--config", str(synthetic_country / "config.ini"), "--workdir", str(tmp_path / "w"),
            "--set", "imagery.budget_usd=1.00"]
    assert main(args) == 4
    manifest = (tmp_path / "w" / "cache" / "manifest.csv").read_text().splitlines()
    assert len(manifest) - 1 >= 142  # $1.00 buys 142 images at $7/1000


def test_stage_flag_equivalent_to_subcommand(synthetic_country, tmp_path):
    cfg = str(synthetic_country / "config.ini")
    assert main(["--config", cfg, "--workdir", str(tmp_path / "a"), "--stage", "densify"]) == 0
    assert main(["densify", "--config", cfg, "--workdir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "candidates.csv").read_bytes() == (tmp_path / "b" / "candidates.csv").read_bytes()


# -- stages ------------------------------------------------------------------


def test_run_stage_idempotent(synthetic_country, tmp_path):
    cfg = load_config(synthetic_country / "config.ini", {"run.workdir": str(tmp_path)})
    first = run_stage("densify", cfg)
    assert not first.skipped
    out = tmp_path / "candidates.csv"
    before = (out.read_bytes(), os.stat(out).st_mtime_ns)
    second = run_stage("densify", cfg)
    assert second.skipped
    assert (out.read_bytes(), os.stat(out).st_mtime_ns) == before
    assert second.entries == first.entries
    # a config change invalidates the stamp
    cfg2 = load_config(synthetic_country / "config.ini", {"run.workdir": str(tmp_path), "roads.step_m": "20"})
    assert not run_stage("densify", cfg2).skipped


def test_lock_excludes_second_instance(synthetic_country, tmp_path):
    cfg = load_config(synthetic_country / "config.ini", {"run.workdir": str(tmp_path)})
    with FileLock(str(tmp_path / ".streetcrop.lock")):
        with pytest.raises(PipelineLockedError):
            run_stages(["densify"], cfg)


def test_densify_filter_funnel_matches_oracle(synthetic_country, tmp_path):
    cfg = load_config(synthetic_country / "config.ini", {"run.workdir": str(tmp_path)})
    d = run_stage("densify", cfg).entries[0]
    f = run_stage("filter", cfg).entries[0]
    assert (d.n_in, d.n_out) == (STREET_POINTS, VIEWS)
    assert (f.n_in, f.n_out) == (VIEWS, VIEWS_KEPT)
    assert f.details["candidates_kept"] == CANDIDATES_KEPT

    doc = json.loads((synthetic_country / "roads.json").read_text())
    assert overpass_point_count(doc, cfg.step_m) == STREET_POINTS

    # cell-by-cell recount on every 15th candidate
    g = load_grid(cfg.path("landcover"))
    cells = np.asarray(g.cells)
    kept = {(round(c.street.lat, 9), round(c.street.lon, 9)): len(c.field_points)
            for c in read_candidates(tmp_path / "filtered.csv")}
    for c in read_candidates(tmp_path / "candidates.csv")[::15]:
        n = 0
        for fp in c.field_points:
            cl = brute_classes_local(cells, g.yur, g.xll, g.cellsize, fp.lat, fp.lon, 10.0, g.nodata)
            n += 40 in cl and 10 not in cl
        assert kept.get((round(c.street.lat, 9), round(c.street.lon, 9)), 0) == n


def test_funnel_consistent_and_monotone(synthetic_run):
    wd, _ = synthetic_run
    funnel = FunnelReport.load(wd / "funnel.json")
    assert [e.stage for e in funnel.entries] == [
        "densify", "filter", "plan", "fetch", "field_classifier", "mhp", "features"]
    assert funnel.problems() == []
    outs = [e.n_out for e in funnel.entries[1:]]
    assert outs == sorted(outs, reverse=True)
    assert funnel.entries[1].n_out == VIEWS_KEPT


def test_funnel_problems_detected():
    f = FunnelReport()
    f.upsert(FunnelEntry("filter", 10, 8, "views", "views"))
    f.upsert(FunnelEntry("plan", 7, 9, "views", "requests"))
    probs = f.problems()
    assert any("input 7" in p for p in probs) and any("exceeds" in p for p in probs)


def test_rerun_of_all_is_noop(synthetic_run, synthetic_country):
    wd, _ = synthetic_run
    cfg = load_config(synthetic_country / "config.ini")
    results = run_stages(["densify", "filter", "plan", "fetch", "label", "features", "train"], cfg)
    assert all(r.skipped for r in results)


def test_no_auto_reference_near_test_point(synthetic_run, synthetic_country):
    from streetcrop.geodesy import distance
    from streetcrop.labeling import read_references

    wd, _ = synthetic_run
    used = {line.split(",")[0] for line in (wd / "train_ids.csv").read_text().splitlines()[1:]}
    refs = {r.image_id: r for r in read_references(wd / "refs.csv")}
    test = read_references(wd / "expert_test.csv")
    for rid in list(used)[:300]:
        assert min(distance(refs[rid].point, t.point) for t in test) > 100.0


# -- map -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def signature_model():
    X, _, y = sample_references(1500, 11)
    return train(X, y, ForestParams(n_trees=60, seed=2))


def _grid(cells):
    cells = np.asarray(cells)
    return LandCoverGrid(cells.shape[1], cells.shape[0], 100.0, 15.0, 1e-4, 255, cells)


def test_rasterize_uniform(signature_model):
    cells = np.full((8, 10), 40)
    cells[0, :] = 10
    proto = prototype_features()
    fr = np.broadcast_to(proto[2], (8, 10, 35))
    out = rasterize_map(signature_model, fr, _grid(cells))
    assert out.shape == (8, 10)
    assert (out[1:] == 2).all() and (out[0] == 255).all()


def test_rasterize_four_quadrants(signature_model):
    proto = prototype_features()
    fr = np.empty((10, 10, 35))
    quad = np.empty((10, 10), dtype=int)
    for k, (rs, cs) in enumerate([(slice(0, 5), slice(0, 5)), (slice(0, 5), slice(5, 10)),
                                  (slice(5, 10), slice(0, 5)), (slice(5, 10), slice(5, 10))]):
        fr[rs, cs] = proto[k]
        quad[rs, cs] = k
    out = rasterize_map(signature_model, fr, _grid(np.full((10, 10), 40)))
    np.testing.assert_array_equal(out, quad)


def test_rasterize_masks_noncrop_and_missing(signature_model):
    cells = np.full((4, 4), 40)
    cells[1, 1] = 50
    fr = np.broadcast_to(prototype_features()[0], (4, 4, 35)).copy()
    fr[2, 2] = np.nan
    out = rasterize_map(signature_model, fr, _grid(cells))
    assert out[1, 1] == 255 and out[2, 2] == 255
    assert (out[out != 255] == 0).all()


def test_rasterize_alignment_error(signature_model):
    with pytest.raises(AlignmentError):
        rasterize_map(signature_model, np.zeros((4, 5, 35)), _grid(np.full((4, 4), 40)))
    with pytest.raises(AlignmentError):
        rasterize_map(signature_model, np.zeros((4, 4, 34)), _grid(np.full((4, 4), 40)))


# -- curve ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def curve_data():
    X, _, y = sample_references(600, 21, label_noise=0.1)
    Xt, yt, _ = sample_references(400, 22)
    return X, y, Xt, yt


def test_curve_full_size_equals_direct_run(curve_data):
    X, y, Xt, yt = curve_data
    params = ForestParams(n_trees=30, seed=4)
    (pt,) = f1_vs_trainsize(X, y, Xt, yt, [len(y)], seed=9, params=params)
    assert pt.macro_f1 == evaluate(train(X, y, params), Xt, yt).macro_f1


def test_curve_deterministic_and_checked(curve_data):
    X, y, Xt, yt = curve_data
    params = ForestParams(n_trees=20, seed=1)
    a = f1_vs_trainsize(X, y, Xt, yt, [20, 80, 300], seed=5, params=params)
    assert a == f1_vs_trainsize(X, y, Xt, yt, [20, 80, 300], seed=5, params=params)
    with pytest.raises(ValueError):
        f1_vs_trainsize(X, y, Xt, yt, [len(y) + 1], seed=5, params=params)


def test_default_sizes():
    assert default_sizes(300) == [25, 50, 100, 200, 300]
    assert default_sizes(25) == [25]


def test_spearman_matches_scipy():
    from scipy.stats import spearmanr

    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.integers(0, 6, 12)
        y = rng.normal(size=12)
        assert spearman(x, y) == pytest.approx(spearmanr(x, y).statistic, abs=1e-12)
    assert spearman([1, 2, 3], [1, 2, 3]) == 1.0


def test_pipeline_curve_file(synthetic_run):
    wd, _ = synthetic_run
    pts = read_curve(wd / "curve.csv")
    assert [p.size for p in pts] == sorted(p.size for p in pts)
    assert all(0 <= p.macro_f1 <= 1 for p in pts)
