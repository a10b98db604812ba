"""Fusion-model tests: schedule values, training behavior, persistence."""
from __future__ import annotations

import numpy as np
import pytest

from gestfuse import model as gm
from gestfuse.config import ExtractorConfig, TrainConfig
from gestfuse.types import FeatureBundle, PipelineError


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_values():
    assert abs(gm.lr_at(1) - 0.001) < 1e-15
    assert abs(gm.lr_at(5) - 0.005) < 1e-15
    assert abs(gm.lr_at(10) - 0.01) < 1e-15
    assert abs(gm.lr_at(11) - 0.01 * 0.97) < 1e-15
    assert abs(gm.lr_at(30) - 0.01 * 0.97 ** 20) < 1e-15


def test_lr_schedule_monotone_sections():
    ramps = [gm.lr_at(n) for n in range(1, 11)]
    assert ramps == sorted(ramps)
    decays = [gm.lr_at(n) for n in range(11, 40)]
    assert decays == sorted(decays, reverse=True)


def test_lr_schedule_rejects_bad_epoch():
    with pytest.raises(PipelineError, match="bad-epoch"):
        gm.lr_at(0)
    with pytest.raises(PipelineError, match="bad-epoch"):
        gm.lr_at(-3)


def test_lr_schedule_without_warmup():
    assert gm.lr_at(1, warmup=False) == 0.01
    assert gm.lr_at(10, warmup=False) == 0.01
    assert gm.lr_at(12, warmup=False) == pytest.approx(0.01 * 0.97 ** 2)


def test_selector_modalities():
    assert gm.selector_modalities("V") == ("v",)
    assert gm.selector_modalities("V+U") == ("v", "u")
    assert gm.selector_modalities("ALL-L") == ("v", "u", "i")
    assert gm.selector_modalities("ALL-F") == ("v", "u", "i")
    with pytest.raises(PipelineError, match="unknown-selector"):
        gm.selector_modalities("VUI")


# ---------------------------------------------------------------------------
# extractor
# ---------------------------------------------------------------------------

EXT_CFG = ExtractorConfig(widths=(4, 8, 8, 16), embed_dim=32, warm_cap=24,
                          warm_epochs=2, warm_batch=8)


def test_extractor_embedding_shape_invariant_to_height():
    rng = np.random.default_rng(0)
    ext = gm.Extractor(EXT_CFG, np.random.default_rng(1))
    short = ext.embed(rng.normal(size=(3, 128, 250)).astype(np.float32))
    tall = ext.embed(rng.normal(size=(2, 384, 250)).astype(np.float32))
    assert short.shape == (3, 32)
    assert tall.shape == (2, 32)


def test_extractor_deterministic_given_seed():
    rng = np.random.default_rng(5)
    maps = rng.normal(size=(10, 128, 125)).astype(np.float32)
    a = gm.fit_extractor(maps, EXT_CFG, seed=42).embed(maps[:4])
    b = gm.fit_extractor(maps, EXT_CFG, seed=42).embed(maps[:4])
    np.testing.assert_array_equal(a, b)


def test_extractor_no_pretrain_calibrates_bn():
    rng = np.random.default_rng(6)
    maps = (5.0 * rng.normal(size=(12, 64, 50))).astype(np.float32)
    ext = gm.fit_extractor(maps, EXT_CFG, seed=1, pretrain=False)
    bn = [l for l in ext.net.layers if hasattr(l, "running_var")][0]
    assert not np.allclose(bn.running_var, 1.0)


def test_extractor_warm_start_changes_weights():
    rng = np.random.default_rng(7)
    maps = rng.normal(size=(20, 64, 50)).astype(np.float32)
    cold = gm.fit_extractor(maps, EXT_CFG, seed=3, pretrain=False)
    warm = gm.fit_extractor(maps, EXT_CFG, seed=3, pretrain=True)
    first_cold = [l for l in cold.net.layers if hasattr(l, "w")][0].w.value
    first_warm = [l for l in warm.net.layers if hasattr(l, "w")][0].w.value
    assert not np.allclose(first_cold, first_warm)


def test_adaptive_avg_pool():
    maps = np.arange(2 * 6 * 4, dtype=float).reshape(2, 6, 4)
    out = gm.adaptive_avg_pool(maps, (3, 2))
    assert out.shape == (2, 3, 2)
    assert out[0, 0, 0] == pytest.approx(maps[0, 0:2, 0:2].mean())


def test_extractor_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    maps = rng.normal(size=(10, 64, 50)).astype(np.float32)
    ext = gm.fit_extractor(maps, EXT_CFG, seed=11)
    path = tmp_path / "ext.ckpt"
    ext.save(path)
    back = gm.Extractor.load(path)
    np.testing.assert_array_equal(ext.embed(maps[:3]), back.embed(maps[:3]))


# ---------------------------------------------------------------------------
# training on separable synthetic bundles
# ---------------------------------------------------------------------------

DIMS = {"spec": 24, "amp": 16, "dist": 3, "uspec": 24, "ustats": 10, "imu": 18}


def make_bundles(n_per_class, n_classes, rng, scale=0.1, shuffle_labels=False):
    centers = {
        k: rng.normal(size=(n_classes, d))
        for k, d in DIMS.items()
    }
    bundles = []
    labels = []
    for c in range(n_classes):
        for j in range(n_per_class):
            labels.append(c)
    labels = np.array(labels)
    if shuffle_labels:
        labels = rng.permutation(labels)
    k = 0
    for c in range(n_classes):
        for j in range(n_per_class):
            lab = int(labels[k])
            noise = lambda key: (centers[key][c] + scale * rng.normal(size=DIMS[key]))
            bundles.append(FeatureBundle(
                label=lab, user_id=j % 4, session=0, index=k,
                f_spec=noise("spec"), f_amp=np.abs(noise("amp")),
                f_mfcc_dist=np.abs(noise("dist")),
                f_ultra_spec=noise("uspec"), f_ultra_stats=noise("ustats"),
                f_imu=noise("imu"),
            ))
            k += 1
    return bundles


FAST = TrainConfig(hidden=(32, 32), max_epochs=60, min_epochs=4,
                   early_stop_patience=2, early_stop_loss=0.05)


@pytest.mark.parametrize("selector", ["V", "U", "I", "V+U", "ALL-L", "ALL-F"])
def test_training_reaches_full_accuracy_on_separable_data(selector):
    rng = np.random.default_rng(100)
    bundles = make_bundles(8, 3, rng)
    m = gm.train_fusion(bundles, "ALL-6ch", selector, FAST, seed=0, n_classes=3)
    acc, _ = gm.evaluate(m, bundles)
    assert m.history["final_train_acc"] == 1.0
    assert acc == 1.0


def test_heldout_generalizes_on_separable_clusters():
    rng = np.random.default_rng(200)
    train = make_bundles(10, 3, rng)
    m = gm.train_fusion(train, "ALL-6ch", "ALL-F", FAST, seed=1, n_classes=3)
    # fresh draws from the same clusters
    rng2 = np.random.default_rng(200)  # same centers
    test = make_bundles(5, 3, rng2)
    acc, _ = gm.evaluate(m, test)
    assert acc >= 0.9


def test_fusion_weights_learned():
    rng = np.random.default_rng(300)
    bundles = make_bundles(8, 3, rng)
    m = gm.train_fusion(bundles, "ALL-6ch", "ALL-L", FAST, seed=2, n_classes=3)
    assert m.fusion is not None
    assert m.fusion.value.shape == (3,)
    assert not np.allclose(m.fusion.value, 1.0 / 3.0)


def test_vu_fusion_has_two_weights():
    rng = np.random.default_rng(301)
    bundles = make_bundles(6, 2, rng)
    m = gm.train_fusion(bundles, "LE+RE+W", "V+U", FAST, seed=3, n_classes=2)
    assert m.fusion.value.shape == (2,)
    assert set(m.heads) == {"v", "u"}


def test_tau_is_train_fold_median():
    rng = np.random.default_rng(400)
    bundles = make_bundles(5, 2, rng)
    expected = float(np.median(np.concatenate([b.f_mfcc_dist for b in bundles])))
    assert gm.fit_tau(bundles) == expected
    m = gm.train_fusion(bundles, "RE", "V", FAST, seed=4, n_classes=2)
    assert m.tau == expected


def test_norm_stats_match_training_matrix():
    rng = np.random.default_rng(500)
    bundles = make_bundles(6, 2, rng)
    m = gm.train_fusion(bundles, "ALL-6ch", "I", FAST, seed=5, n_classes=2)
    mat = np.stack([b.f_imu for b in bundles])
    np.testing.assert_allclose(m.norm["i"][0], mat.mean(axis=0), rtol=1e-5)


def test_empty_train_set_rejected():
    with pytest.raises(PipelineError, match="empty-train-set"):
        gm.train_fusion([], "RE", "V", FAST, seed=0)


def test_training_divergence_detected():
    rng = np.random.default_rng(600)
    bundles = make_bundles(6, 2, rng)
    crazy = TrainConfig(hidden=(16, 16), lr0=1e18, max_epochs=8, warmup=False)
    with np.errstate(all="ignore"), pytest.raises(PipelineError, match="training-diverged"):
        gm.train_fusion(bundles, "RE", "V", crazy, seed=0, n_classes=2)


def test_predict_tie_breaks_to_lowest_label():
    rng = np.random.default_rng(700)
    bundles = make_bundles(4, 2, rng)
    m = gm.train_fusion(bundles, "RE", "V", FAST, seed=6, n_classes=2)
    # zero out the output layer: all logits equal, argmax picks label 0
    out = m.heads["v"].layers[-1]
    out.w.value[...] = 0.0
    out.b.value[...] = 0.0
    label, logits = m.predict(bundles[0])
    assert label == 0
    np.testing.assert_array_equal(logits, np.zeros(2, dtype=np.float32))


def test_model_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(800)
    bundles = make_bundles(6, 3, rng)
    m = gm.train_fusion(bundles, "ALL-6ch", "ALL-L", FAST, seed=7, n_classes=3)
    path = tmp_path / "model.ckpt"
    m.save(path)
    back = gm.FusionModel.load(path)
    for b in bundles[:5]:
        la, loga = m.predict(b)
        lb, logb = back.predict(b)
        assert la == lb
        np.testing.assert_allclose(loga, logb, atol=1e-6)
    assert back.tau == m.tau
    assert back.combo == "ALL-6ch"


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(PipelineError, match="bad-checkpoint"):
        gm.FusionModel.load(p)


def test_checkpoint_kind_mismatch(tmp_path):
    rng = np.random.default_rng(900)
    maps = rng.normal(size=(8, 64, 50)).astype(np.float32)
    ext = gm.fit_extractor(maps, EXT_CFG, seed=1, pretrain=False)
    p = tmp_path / "ext.ckpt"
    ext.save(p)
    with pytest.raises(PipelineError, match="bad-checkpoint"):
        gm.FusionModel.load(p)
