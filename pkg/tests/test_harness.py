"""Experiment harness: validity mask, LOUO cross-validation, the grid,
reduced-vocabulary tasks, ablations, and report files."""
from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from gestfuse import harness
from gestfuse.config import PipelineConfig, canonical_json
from gestfuse.types import FeatureBundle, PipelineError

SEED = 11


@pytest.fixture(scope="module")
def cfg():
    base = PipelineConfig()
    return dataclasses.replace(
        base, sim=dataclasses.replace(base.sim, n_users=2, commands_per_session=2))


@pytest.fixture(scope="module")
def tiny_root(cfg, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_dataset")
    harness.run_simulate(root, cfg, SEED)
    harness.run_preprocess(root, cfg)
    harness.run_features(root, cfg, SEED)
    return root


# -- validity mask ------------------------------------------------------------

def test_validity_mask_pattern():
    mask = harness.validity_mask()
    expected = {
        "RE": ("V",),
        "LE+RE": ("V",),
        "LE+RE+W": ("V", "U", "V+U"),
        "ALL-4ch": ("V", "U", "I", "V+U", "ALL-L", "ALL-F"),
        "ALL-6ch": ("V", "U", "I", "V+U", "ALL-L", "ALL-F"),
    }
    for combo, valid in expected.items():
        for selector in harness.SELECTOR_ORDER:
            assert mask[combo][selector] == (selector in valid)
    assert sum(sum(row.values()) for row in mask.values()) == 17


def test_selector_valid_unknown_combo():
    with pytest.raises(PipelineError, match="unknown-combo"):
        harness.selector_valid("LE", "V")


# -- cross-validation ---------------------------------------------------------

def test_louo_cv_fold_structure(tiny_root, cfg):
    bundles = harness.load_bundles(tiny_root, "ALL-4ch")
    cv = harness.louo_cv(bundles, "ALL-4ch", "I", cfg, SEED)
    assert [f["user"] for f in cv["folds"]] == [0, 1]
    assert all(f["n"] == 18 for f in cv["folds"])
    assert 0.0 <= cv["mean"] <= 100.0 and cv["sd"] >= 0.0
    conf = np.asarray(cv["confusion"])
    assert conf.shape == (9, 9)
    assert conf.sum() == len(bundles)
    assert np.array_equal(conf.sum(axis=1), np.full(9, 4))  # 2 users x 2 per class


def test_confusion_diagonal_matches_mean(tiny_root, cfg):
    # equal fold sizes make the unweighted fold mean equal pooled accuracy
    bundles = harness.load_bundles(tiny_root, "ALL-4ch")
    cv = harness.louo_cv(bundles, "ALL-4ch", "I", cfg, SEED)
    conf = np.asarray(cv["confusion"])
    pooled = 100.0 * np.trace(conf) / conf.sum()
    assert cv["mean"] == pytest.approx(pooled, abs=1e-9)


def test_louo_cv_invalid_cell(tiny_root, cfg):
    bundles = harness.load_bundles(tiny_root, "LE+RE")
    with pytest.raises(PipelineError, match="combo-selector-invalid"):
        harness.louo_cv(bundles, "LE+RE", "U", cfg, SEED)


def test_louo_cv_needs_two_users(tiny_root, cfg):
    bundles = [b for b in harness.load_bundles(tiny_root, "RE") if b.user_id == 0]
    with pytest.raises(PipelineError, match="missing-users"):
        harness.louo_cv(bundles, "RE", "V", cfg, SEED)


def test_louo_cv_deterministic_and_jobs_invariant(tiny_root, cfg):
    bundles = harness.load_bundles(tiny_root, "RE")
    a = harness.louo_cv(bundles, "RE", "V", cfg, SEED)
    b = harness.louo_cv(bundles, "RE", "V", cfg, SEED)
    c = harness.louo_cv(bundles, "RE", "V", cfg, SEED, jobs=2)
    assert canonical_json(a) == canonical_json(b) == canonical_json(c)


# -- grid and selection -------------------------------------------------------

def _cell(mean):
    return {"mean": mean, "sd": 0.0, "folds": [], "confusion": []}


def test_optimal_selector_argmax_and_ties():
    grid = {"ALL-4ch": {"V": _cell(80.0), "U": _cell(91.0), "I": _cell(91.0),
                        "V+U": None, "ALL-L": _cell(90.0), "ALL-F": None}}
    assert harness.optimal_selector(grid, "ALL-4ch") == "U"  # tie -> earlier
    with pytest.raises(PipelineError, match="missing-grid"):
        harness.optimal_selector({"RE": {"V": None}}, "RE")


def test_optimal_cell_over_grid():
    grid = {
        "RE": {"V": _cell(70.0)},
        "ALL-6ch": {"V": _cell(70.0), "ALL-F": _cell(95.0)},
    }
    assert harness.optimal_cell(grid) == ("ALL-6ch", "ALL-F")


def test_subset_bundles_remap():
    bundles = [FeatureBundle(label=l, user_id=0, session=l, index=0)
               for l in range(9)]
    sub = harness._subset_bundles(bundles, [3, 4, 6, 8])
    assert [b.label for b in sub] == [0, 1, 2, 3]
    assert [b.session for b in sub] == [3, 4, 6, 8]  # untouched fields survive


def test_run_grid_matches_validity(tiny_root, cfg):
    grid = harness.run_grid(tiny_root, cfg, SEED, combos=("RE", "LE+RE+W"))
    mask = harness.validity_mask()
    for combo in ("RE", "LE+RE+W"):
        for selector in harness.SELECTOR_ORDER:
            assert (grid[combo][selector] is not None) == mask[combo][selector]


# -- reduced tasks and ablation ------------------------------------------------

@pytest.fixture(scope="module")
def grid_4ch(tiny_root, cfg):
    return harness.run_grid(tiny_root, cfg, SEED, combos=("ALL-4ch",))


def test_run_reduced_structure(tiny_root, cfg, grid_4ch):
    out = harness.run_reduced(tiny_root, cfg, SEED, grid_4ch, combos=("ALL-4ch",))
    tasks = out["ALL-4ch"]
    assert set(tasks) == {"G1+E", "G2+E", "G3+E", "G1+G2+G3+E"}
    assert tasks["G1+E"]["classes"] == [3, 8]
    assert tasks["G1+G2+G3+E"]["classes"] == [3, 4, 6, 8]
    opt = harness.optimal_selector(grid_4ch, "ALL-4ch")
    for cell in tasks.values():
        assert cell["selector"] == opt
        assert 0.0 <= cell["mean"] <= 100.0
        conf = np.asarray(cell["confusion"])
        assert conf.shape == (len(cell["classes"]),) * 2
        assert conf.sum() == 2 * 2 * len(cell["classes"])


def test_run_ablation_rows(tiny_root, cfg, grid_4ch):
    out = harness.run_ablation(tiny_root, cfg, SEED, grid_4ch)
    assert [r["name"] for r in out["rows"]] == list(harness.ABLATION_ROWS)
    assert out["combo"] == "ALL-4ch"
    assert out["selector"] == harness.optimal_selector(grid_4ch, "ALL-4ch")
    for row in out["rows"]:
        assert 0.0 <= row["mean"] <= 100.0
        assert [f["user"] for f in row["folds"]] == [0, 1]  # shared folds


# -- reports -------------------------------------------------------------------

def test_report_files(tmp_path, cfg, grid_4ch):
    grid = {c: {s: None for s in harness.SELECTOR_ORDER} for c in harness.COMBO_ORDER}
    grid["ALL-4ch"] = grid_4ch["ALL-4ch"]
    report = harness.assemble_report(cfg, SEED, grid=grid)
    path = harness.write_report(tmp_path, report)

    loaded = json.loads(path.read_text())
    assert loaded["seed"] == SEED
    assert loaded["validity"]["LE+RE"]["U"] is False
    assert loaded["grid"]["RE"]["ALL-F"] is None
    assert path.read_text() == canonical_json(loaded) + "\n"  # canonical bytes

    csv_text = (tmp_path / "report.csv").read_text()
    lines = csv_text.strip().split("\n")
    assert lines[0] == "combo," + ",".join(harness.SELECTOR_ORDER)
    assert len(lines) == 6
    assert lines[1].startswith("RE,") and lines[1].endswith(",-,-,-,-,-")

    conf_text = (tmp_path / "confusions.txt").read_text()
    assert "[ALL-4ch / V]" in conf_text
    assert "[RE / V]" not in conf_text  # cell absent from this grid


def test_seed_for_stable():
    a = harness._seed_for(3, "fold", "RE", "V", 1)
    b = harness._seed_for(3, "fold", "RE", "V", 1)
    c = harness._seed_for(3, "fold", "RE", "V", 2)
    assert a == b != c
