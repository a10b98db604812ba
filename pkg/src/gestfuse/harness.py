"""Experiment harness: dataset staging, the sensor-combo x model-selector
accuracy grid under leave-one-user-out cross-validation, reduced-gesture
tasks, ablations, and report rendering.

Stages write into one dataset root:

  <root>/user_XX/session_L/          raw session files  (simulate)
  <root>/samples/...                 per-gesture samples (preprocess)
  <root>/features/cache/             per-sample primitives (features, stage A)
  <root>/features/bundles_<combo>.npz  per-combo feature bundles (stage B)
  <root>/report/                     report.json / report.csv / confusions.txt

Every random decision is seeded from (master seed, stage, task identity), so
results do not depend on execution order or the number of worker processes.
"""
from __future__ import annotations

import dataclasses
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset, features, model, preprocess, simulate
from .config import PipelineConfig, canonical_json, config_hash
from .types import N_GESTURES, FeatureBundle, PipelineError

COMBOS = {
    "RE": ("re_outer", "re_inner"),
    "LE+RE": ("le_outer", "le_inner", "re_outer", "re_inner"),
    "LE+RE+W": ("le_outer", "re_outer", "watch"),
    "ALL-4ch": ("le_outer", "re_outer", "watch", "ring"),
    "ALL-6ch": ("le_outer", "le_inner", "re_outer", "re_inner", "watch", "ring"),
}
COMBO_ORDER = ("RE", "LE+RE", "LE+RE+W", "ALL-4ch", "ALL-6ch")
SELECTOR_ORDER = model.SELECTORS

# Reduced-vocabulary tasks: three gestures with distinct single-channel
# signatures plus the empty-hand class.
REDUCED_LABELS = {"G1": 3, "G2": 4, "G3": 6}
EMPTY_LABEL = 8
REDUCED_TASKS = (("G1",), ("G2",), ("G3",), ("G1", "G2", "G3"))

ABLATION_ROWS = ("No Optimization", "No Pretraining", "No Dropout",
                 "No Warm-up", "Full Model")


def _seed_for(master: int, *tags) -> int:
    parts = [int(master) & 0xFFFFFFFF]
    for t in tags:
        parts.append(zlib.crc32(str(t).encode()) if isinstance(t, str)
                     else int(t) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def selector_valid(combo: str, selector: str) -> bool:
    """Ultrasound needs the watch emitter; inertial needs the ring IMU."""
    if combo not in COMBOS:
        raise PipelineError(f"unknown-combo: {combo!r}")
    chans = set(COMBOS[combo])
    ok = {"v": True, "u": "watch" in chans, "i": "ring" in chans}
    return all(ok[m] for m in model.selector_modalities(selector))


def validity_mask() -> dict[str, dict[str, bool]]:
    return {c: {s: selector_valid(c, s) for s in SELECTOR_ORDER}
            for c in COMBO_ORDER}


def _run_tasks(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks, chunksize=1))


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def _simulate_one(args) -> str:
    root, plan, cfg = args
    data = simulate.simulate_session(plan, cfg.sim, cfg.fmcw.chirp)
    return str(dataset.write_session(root, data))


def run_simulate(root: Path | str, cfg: PipelineConfig, seed: int,
                 jobs: int = 1) -> list[str]:
    """Plan and synthesize every session of the experiment matrix."""
    plans = simulate.plan_dataset(cfg.sim, seed)
    return _run_tasks(_simulate_one, [(root, p, cfg) for p in plans], jobs)


def _preprocess_one(args) -> dict:
    root, path, cfg = args
    data = dataset.read_session(path)
    samples, report = preprocess.preprocess_session(data, cfg.dsp)
    for s in samples:
        dataset.write_sample(dataset.sample_path(root, s.user_id, s.label, s.index), s)
    report["session"] = Path(path).name
    report["user_id"] = data.meta["user_id"]
    report["n_samples"] = len(samples)
    return report


def run_preprocess(root: Path | str, cfg: PipelineConfig,
                   jobs: int = 1) -> list[dict]:
    sessions = dataset.list_sessions(root)
    if not sessions:
        raise PipelineError(f"missing-session: no sessions under {root}")
    return _run_tasks(_preprocess_one, [(root, p, cfg) for p in sessions], jobs)


def _primitives_one(args) -> str:
    root, path, cfg = args
    sample = dataset.read_sample(path)
    cpath = dataset.cache_path(root, sample.user_id, sample.label, sample.index)
    if not cpath.exists():
        dataset.write_npz(cpath, features.sample_primitives(sample, cfg))
    return str(cpath)


def _sample_keys(root: Path | str) -> list[tuple[int, int, int]]:
    """(user_id, label, index) for every preprocessed sample, sorted."""
    keys = []
    for p in dataset.list_sample_paths(root):
        user = int(p.parent.parent.name.split("_")[1])
        label = int(p.parent.name.split("_")[1])
        index = int(p.stem.split("_")[1])
        keys.append((user, label, index))
    return sorted(keys)


def _combo_maps(caches: list[dict], combo: str) -> tuple[np.ndarray, np.ndarray | None]:
    chans = COMBOS[combo]
    vocal = np.stack([features.vocal_map_from_cache(c, chans) for c in caches])
    ultra = None
    if "watch" in chans:
        ultra = np.stack([features.ultra_map_from_cache(c, chans) for c in caches])
    return vocal, ultra


def build_combo_bundles(root: Path | str, combo: str, cfg: PipelineConfig,
                        seed: int, pretrain: bool = True) -> list[FeatureBundle]:
    """Fit this combo's extractors and assemble one FeatureBundle per sample.

    The extractor warm start is self-supervised (no labels), so it is fitted
    once on a subsample of the whole dataset; the fold-sensitive statistics
    (z-normalization, tau) stay inside model training.
    """
    if combo not in COMBOS:
        raise PipelineError(f"unknown-combo: {combo!r}")
    keys = _sample_keys(root)
    if not keys:
        raise PipelineError(f"missing-samples: no preprocessed samples under {root}")
    chans = COMBOS[combo]
    has_ultra = "watch" in chans
    has_imu = "ring" in chans

    # warm-start subsample: load only the picked caches, bounding memory
    rng = np.random.default_rng(_seed_for(seed, "warm-pick", combo))
    n_warm = min(cfg.extractor.warm_cap, len(keys))
    picked = sorted(rng.permutation(len(keys))[:n_warm].tolist())
    warm_caches = [dataset.read_npz(dataset.cache_path(root, *keys[i])) for i in picked]
    warm_vocal, warm_ultra = _combo_maps(warm_caches, combo)
    ext_v = model.fit_extractor(warm_vocal, cfg.extractor,
                                _seed_for(seed, "extractor", combo, "v"), pretrain)
    ext_u = None
    if has_ultra:
        ext_u = model.fit_extractor(warm_ultra, cfg.extractor,
                                    _seed_for(seed, "extractor", combo, "u"), pretrain)
    del warm_caches, warm_vocal, warm_ultra

    bundles: list[FeatureBundle] = []
    chunk = 64
    for lo in range(0, len(keys), chunk):
        part = keys[lo: lo + chunk]
        caches = [dataset.read_npz(dataset.cache_path(root, *k)) for k in part]
        vocal, ultra = _combo_maps(caches, combo)
        emb_v = ext_v.embed(vocal)
        emb_u = ext_u.embed(ultra) if has_ultra else None
        for j, (user, label, index) in enumerate(part):
            c = caches[j]
            dists, pairs = features.dist_vector_from_cache(c, chans)
            bundles.append(FeatureBundle(
                label=label, user_id=user, session=label, index=index,
                f_spec=emb_v[j].astype(np.float32),
                f_amp=features.amp_vector_from_cache(c, chans).astype(np.float32),
                f_mfcc_dist=dists.astype(np.float32),
                f_ultra_spec=emb_u[j].astype(np.float32) if has_ultra else None,
                f_ultra_stats=(features.stats_vector_from_cache(c, chans)
                               .astype(np.float32) if has_ultra else None),
                f_imu=c["imu"].astype(np.float32) if has_imu else None,
                pair_names=pairs,
            ))
    return bundles


def run_features(root: Path | str, cfg: PipelineConfig, seed: int,
                 jobs: int = 1, combos: tuple[str, ...] = COMBO_ORDER) -> dict[str, str]:
    """Stage A: per-sample primitive cache. Stage B: per-combo bundles."""
    spaths = dataset.list_sample_paths(root)
    if not spaths:
        raise PipelineError(f"missing-samples: no preprocessed samples under {root}")
    _run_tasks(_primitives_one, [(root, p, cfg) for p in spaths], jobs)
    out = {}
    for combo in combos:
        bundles = build_combo_bundles(root, combo, cfg, seed)
        path = dataset.bundle_path(root, combo)
        dataset.write_bundles(path, bundles, combo, config_hash(cfg))
        out[combo] = str(path)
    return out


def load_bundles(root: Path | str, combo: str) -> list[FeatureBundle]:
    path = dataset.bundle_path(root, combo)
    if not path.exists():
        raise PipelineError(f"missing-features: run the features stage first ({path})")
    return dataset.read_bundles(path)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def confusion_matrix(truth, preds, n_classes: int) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(truth, preds):
        out[int(t), int(p)] += 1
    return out


def _fold_one(args) -> dict:
    bundles, combo, selector, train_cfg, seed, n_classes, user = args
    train = [b for b in bundles if b.user_id != user]
    test = [b for b in bundles if b.user_id == user]
    m = model.train_fusion(train, combo, selector, train_cfg,
                           _seed_for(seed, "fold", combo, selector, user),
                           n_classes)
    acc, preds = model.evaluate(m, test)
    truth = [b.label for b in test]
    return {"user": user, "accuracy": acc, "n": len(test),
            "confusion": confusion_matrix(truth, preds, n_classes)}


def louo_cv(bundles: list[FeatureBundle], combo: str, selector: str,
            cfg: PipelineConfig, seed: int, n_classes: int = N_GESTURES,
            jobs: int = 1) -> dict:
    """Leave-one-user-out CV for one grid cell; one fold per user."""
    if not selector_valid(combo, selector):
        raise PipelineError(f"combo-selector-invalid: ({combo}, {selector})")
    users = sorted({b.user_id for b in bundles})
    if len(users) < 2:
        raise PipelineError("missing-users: need at least two users for cross-validation")
    tasks = [(bundles, combo, selector, cfg.train, seed, n_classes, u) for u in users]
    folds = _run_tasks(_fold_one, tasks, jobs)
    accs = np.array([f["accuracy"] for f in folds])
    total = np.sum([f["confusion"] for f in folds], axis=0)
    return {
        "mean": float(100.0 * accs.mean()),
        "sd": float(100.0 * accs.std(ddof=1)),
        "folds": [{"user": f["user"], "accuracy": float(f["accuracy"]),
                   "n": f["n"]} for f in folds],
        "confusion": total.tolist(),
    }


# ---------------------------------------------------------------------------
# experiment matrix
# ---------------------------------------------------------------------------

def run_grid(root: Path | str, cfg: PipelineConfig, seed: int,
             jobs: int = 1, combos: tuple[str, ...] = COMBO_ORDER) -> dict:
    """Every valid (combo, selector) cell under LOUO CV."""
    grid: dict[str, dict] = {}
    for combo in combos:
        bundles = load_bundles(root, combo)
        grid[combo] = {}
        for selector in SELECTOR_ORDER:
            if not selector_valid(combo, selector):
                grid[combo][selector] = None
                continue
            grid[combo][selector] = louo_cv(bundles, combo, selector, cfg,
                                            seed, jobs=jobs)
    return grid


def optimal_selector(grid: dict, combo: str) -> str:
    """Highest mean accuracy among this combo's valid cells; selector order
    breaks ties."""
    cells = grid.get(combo) or {}
    best, best_mean = None, -1.0
    for selector in SELECTOR_ORDER:
        cell = cells.get(selector)
        if cell is not None and cell["mean"] > best_mean:
            best, best_mean = selector, cell["mean"]
    if best is None:
        raise PipelineError(f"missing-grid: no evaluated cells for {combo}")
    return best


def optimal_cell(grid: dict) -> tuple[str, str]:
    best, best_mean = None, -1.0
    for combo in COMBO_ORDER:
        for selector in SELECTOR_ORDER:
            cell = (grid.get(combo) or {}).get(selector)
            if cell is not None and cell["mean"] > best_mean:
                best, best_mean = (combo, selector), cell["mean"]
    if best is None:
        raise PipelineError("missing-grid: no evaluated cells")
    return best


def _subset_bundles(bundles: list[FeatureBundle],
                    classes: list[int]) -> list[FeatureBundle]:
    remap = {orig: new for new, orig in enumerate(classes)}
    return [dataclasses.replace(b, label=remap[b.label])
            for b in bundles if b.label in remap]


def run_reduced(root: Path | str, cfg: PipelineConfig, seed: int, grid: dict,
                jobs: int = 1, combos: tuple[str, ...] = COMBO_ORDER) -> dict:
    """Reduced-vocabulary tasks ({G1,E}, {G2,E}, {G3,E}, {G1,G2,G3,E}) with
    each combo's optimal selector."""
    out: dict[str, dict] = {}
    for combo in combos:
        selector = optimal_selector(grid, combo)
        bundles = load_bundles(root, combo)
        out[combo] = {}
        for task in REDUCED_TASKS:
            classes = [REDUCED_LABELS[g] for g in task] + [EMPTY_LABEL]
            subset = _subset_bundles(bundles, classes)
            cv = louo_cv(subset, combo, selector, cfg,
                         _seed_for(seed, "reduced", *task),
                         n_classes=len(classes), jobs=jobs)
            cv["selector"] = selector
            cv["classes"] = classes
            out[combo]["+".join(task) + "+E"] = cv
    return out


def run_ablation(root: Path | str, cfg: PipelineConfig, seed: int, grid: dict,
                 jobs: int = 1) -> dict:
    """Switch off the training optimizations one at a time on the best cell.

    All rows share the folds and the fold seeds; the extractor used by the
    "no pretraining" rows has the same random initialization as the full
    model's but skips the self-supervised warm start.
    """
    combo, selector = optimal_cell(grid)
    pre = load_bundles(root, combo)
    rand = build_combo_bundles(root, combo, cfg, seed, pretrain=False)

    def variant(name: str, bundles, dropout=None, warmup=None):
        train = cfg.train
        if dropout is not None:
            train = dataclasses.replace(train, dropout=dropout)
        if warmup is not None:
            train = dataclasses.replace(train, warmup=warmup)
        cv = louo_cv(bundles, combo, selector,
                     dataclasses.replace(cfg, train=train), seed, jobs=jobs)
        return {"name": name, "mean": cv["mean"], "sd": cv["sd"],
                "folds": cv["folds"]}

    rows = [
        variant("No Optimization", rand, dropout=0.0, warmup=False),
        variant("No Pretraining", rand),
        variant("No Dropout", pre, dropout=0.0),
        variant("No Warm-up", pre, warmup=False),
        variant("Full Model", pre),
    ]
    return {"combo": combo, "selector": selector, "rows": rows}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def assemble_report(cfg: PipelineConfig, seed: int, grid: dict | None = None,
                    reduced: dict | None = None,
                    ablation: dict | None = None) -> dict:
    report = {
        "seed": int(seed),
        "config_hash": config_hash(cfg),
        "combos": {c: list(COMBOS[c]) for c in COMBO_ORDER},
        "validity": validity_mask(),
    }
    if grid is not None:
        report["grid"] = grid
    if reduced is not None:
        report["reduced"] = reduced
    if ablation is not None:
        report["ablation"] = ablation
    return _plain(report)


def render_grid_csv(report: dict) -> str:
    lines = ["combo," + ",".join(SELECTOR_ORDER)]
    grid = report.get("grid", {})
    for combo in COMBO_ORDER:
        row = [combo]
        for selector in SELECTOR_ORDER:
            cell = grid.get(combo, {}).get(selector)
            row.append("-" if cell is None
                       else f"{cell['mean']:.1f}+-{cell['sd']:.1f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def render_confusions(report: dict) -> str:
    """Plain-text confusion grids (rows = truth, columns = prediction)."""
    blocks = []
    for combo in COMBO_ORDER:
        for selector in SELECTOR_ORDER:
            cell = report.get("grid", {}).get(combo, {}).get(selector)
            if cell is None:
                continue
            mat = np.asarray(cell["confusion"])
            width = max(3, len(str(mat.max())))
            head = f"[{combo} / {selector}] mean={cell['mean']:.1f}% sd={cell['sd']:.1f}"
            body = "\n".join(" ".join(f"{v:>{width}d}" for v in row) for row in mat)
            blocks.append(head + "\n" + body)
    return "\n\n".join(blocks) + "\n"


def write_report(out_dir: Path | str, report: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(canonical_json(_plain(report)) + "\n")
    if "grid" in report:
        (out / "report.csv").write_text(render_grid_csv(report))
        (out / "confusions.txt").write_text(render_confusions(report))
    return path
