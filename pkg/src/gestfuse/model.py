"""Gesture classifiers: shared CNN extractor, per-channel MLP heads and the
two sensor-fusion strategies.

A model is trained for one (sensor combo, model selector) cell. Selectors:

  V / U / I   single-modality heads (vocal, ultrasonic, inertial)
  V+U         decision-level fusion of two heads with learned scalar weights
  ALL-L       decision-level fusion of all three heads (logit weighting)
  ALL-F       feature-level fusion: one head on the concatenated vectors

Inputs come from FeatureBundle vectors; z-normalization statistics and the
DTW similarity temperature tau are fitted on the training fold only and
stored with the model.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExtractorConfig, TrainConfig
from .types import FeatureBundle, PipelineError

SELECTORS = ("V", "U", "I", "V+U", "ALL-L", "ALL-F")
MODALITIES = ("v", "u", "i")

_SELECTOR_MODS = {
    "V": ("v",),
    "U": ("u",),
    "I": ("i",),
    "V+U": ("v", "u"),
    "ALL-L": ("v", "u", "i"),
    "ALL-F": ("v", "u", "i"),
}


def selector_modalities(selector: str) -> tuple[str, ...]:
    if selector not in _SELECTOR_MODS:
        raise PipelineError(f"unknown-selector: {selector!r}")
    return _SELECTOR_MODS[selector]


def lr_at(epoch: int, lr0: float = 0.01, warmup: bool = True) -> float:
    """Learning rate for a 1-based epoch: linear warm-up over the first ten
    epochs, then 0.97 decay per epoch."""
    if epoch < 1:
        raise PipelineError(f"bad-epoch: {epoch}")
    if epoch <= 10:
        return 0.1 * epoch * lr0 if warmup else lr0
    return (0.97 ** (epoch - 10)) * lr0


# ---------------------------------------------------------------------------
# extractor
# ---------------------------------------------------------------------------

def _standardize_maps(maps: np.ndarray, dtype) -> np.ndarray:
    maps = np.asarray(maps)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise PipelineError("bad-map: expected (n, h, w) or (h, w)")
    m = maps.astype(np.float64)
    mean = m.mean(axis=(1, 2), keepdims=True)
    std = m.std(axis=(1, 2), keepdims=True)
    return ((m - mean) / (std + 1e-6)).astype(dtype)


def adaptive_avg_pool(maps: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Block-mean pooling of (n, h, w) maps to a fixed (th, tw) grid."""
    n, h, w = maps.shape
    th, tw = out_hw
    rows = np.array_split(np.arange(h), th)
    cols = np.array_split(np.arange(w), tw)
    out = np.empty((n, th, tw), dtype=maps.dtype)
    for i, r in enumerate(rows):
        band = maps[:, r[0]: r[-1] + 1]
        for j, c in enumerate(cols):
            out[:, i, j] = band[:, :, c[0]: c[-1] + 1].mean(axis=(1, 2))
    return out


class Extractor:
    """Stacked conv-BN-ReLU-pool feature extractor ending in an embedding.

    Input maps are standardized per map, so the same architecture serves any
    stack height (the number of stacked channel planes varies by combo).
    """

    def __init__(self, cfg: ExtractorConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        layers: list[nn.Layer] = [nn.AvgPool2d(*cfg.input_pool)]
        prev = 1
        for width in cfg.widths:
            layers += [
                nn.Conv2d(prev, width, rng, dtype=dtype),
                nn.BatchNorm2d(width, dtype=dtype),
                nn.ReLU(),
                nn.AvgPool2d(2),
            ]
            prev = width
        layers += [nn.GlobalAvgPool(), nn.Linear(prev, cfg.embed_dim, rng, dtype=dtype)]
        self.net = nn.Sequential(layers)

    def params(self):
        return self.net.params()

    def forward(self, maps: np.ndarray, train: bool = False) -> np.ndarray:
        x = _standardize_maps(maps, self.dtype)[:, None, :, :]
        return self.net.forward(x, train=train)

    def embed(self, maps: np.ndarray, batch: int = 32) -> np.ndarray:
        """Eval-mode embeddings, batched to bound memory."""
        maps = np.asarray(maps)
        if maps.ndim == 2:
            maps = maps[None]
        chunks = [
            self.forward(maps[i: i + batch], train=False)
            for i in range(0, len(maps), batch)
        ]
        return np.concatenate(chunks, axis=0)

    # -- persistence ------------------------------------------------------
    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return _layer_state("net", self.net)

    def save(self, path) -> None:
        meta = {
            "widths": list(self.cfg.widths),
            "embed_dim": self.cfg.embed_dim,
            "input_pool": list(self.cfg.input_pool),
        }
        save_checkpoint(path, "extractor", meta, self.state_arrays())

    @classmethod
    def load(cls, path) -> "Extractor":
        kind, meta, arrays = load_checkpoint(path)
        if kind != "extractor":
            raise PipelineError(f"bad-checkpoint: expected extractor, got {kind}")
        cfg = ExtractorConfig(
            widths=tuple(meta["widths"]),
            embed_dim=meta["embed_dim"],
            input_pool=tuple(meta["input_pool"]),
        )
        ext = cls(cfg, np.random.default_rng(0))
        _load_layer_state("net", ext.net, arrays)
        return ext


def _layer_state(prefix: str, seq: nn.Sequential) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(seq.layers):
        base = f"{prefix}.{i}"
        if isinstance(layer, nn.Linear):
            out += [(f"{base}.w", layer.w.value), (f"{base}.b", layer.b.value)]
        elif isinstance(layer, nn.Conv2d):
            out += [(f"{base}.w", layer.w.value), (f"{base}.b", layer.b.value)]
        elif isinstance(layer, nn.BatchNorm2d):
            out += [
                (f"{base}.gamma", layer.gamma.value),
                (f"{base}.beta", layer.beta.value),
                (f"{base}.rmean", layer.running_mean),
                (f"{base}.rvar", layer.running_var),
            ]
    return out


def _load_layer_state(prefix: str, seq: nn.Sequential, arrays: dict) -> None:
    for i, layer in enumerate(seq.layers):
        base = f"{prefix}.{i}"
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            layer.w.value = arrays[f"{base}.w"].astype(layer.w.value.dtype)
            layer.b.value = arrays[f"{base}.b"].astype(layer.b.value.dtype)
            layer.w.grad = np.zeros_like(layer.w.value)
            layer.b.grad = np.zeros_like(layer.b.value)
        elif isinstance(layer, nn.BatchNorm2d):
            layer.gamma.value = arrays[f"{base}.gamma"].astype(layer.gamma.value.dtype)
            layer.beta.value = arrays[f"{base}.beta"].astype(layer.beta.value.dtype)
            layer.running_mean = arrays[f"{base}.rmean"].astype(layer.running_mean.dtype)
            layer.running_var = arrays[f"{base}.rvar"].astype(layer.running_var.dtype)
            layer.gamma.grad = np.zeros_like(layer.gamma.value)
            layer.beta.grad = np.zeros_like(layer.beta.value)


def fit_extractor(maps: np.ndarray, cfg: ExtractorConfig, seed: int,
                  pretrain: bool = True) -> Extractor:
    """Build an extractor; optionally warm-start it by self-supervised
    reconstruction (decode the embedding back to a coarsely pooled map).

    Runs on unlabeled maps. Without pretraining the weights stay at their
    random init, but batch-norm running statistics are still calibrated with
    a few forward passes so eval-mode embeddings are sane.
    """
    maps = np.asarray(maps)
    if maps.ndim != 3 or len(maps) == 0:
        raise PipelineError("bad-map: need a non-empty (n, h, w) stack")
    rng = np.random.default_rng(seed)
    ext = Extractor(cfg, rng)
    pick = rng.permutation(len(maps))[: cfg.warm_cap]
    sub = maps[np.sort(pick)]

    if not pretrain:
        for i in range(0, len(sub), cfg.warm_batch):
            ext.forward(sub[i: i + cfg.warm_batch], train=True)
        return ext

    th, tw = cfg.target_pool
    decoder = nn.Linear(cfg.embed_dim, th * tw, rng, dtype=np.float32)
    opt = nn.SGD(ext.params() + decoder.params(), momentum=0.9)
    std = _standardize_maps(sub, np.float32)
    targets = adaptive_avg_pool(std, (th, tw)).reshape(len(sub), -1)
    for _ in range(cfg.warm_epochs):
        order = rng.permutation(len(sub))
        for i in range(0, len(order), cfg.warm_batch):
            idx = order[i: i + cfg.warm_batch]
            emb = ext.forward(sub[idx], train=True)
            pred = decoder.forward(emb, train=True)
            loss, grad = nn.mse_loss(pred, targets[idx])
            if not np.isfinite(loss):
                raise PipelineError("training-diverged: warm-start loss is not finite")
            ext.net.backward(decoder.backward(grad), need_input_grad=False)
            opt.step(cfg.warm_lr)
    return ext


# ---------------------------------------------------------------------------
# fusion model
# ---------------------------------------------------------------------------

def _make_head(n_in: int, hidden: tuple[int, int], n_classes: int, p_drop: float,
               rng: np.random.Generator, dtype=np.float32) -> nn.Sequential:
    h1, h2 = hidden
    return nn.Sequential([
        nn.Dropout(p_drop, np.random.default_rng(rng.integers(2 ** 63))),
        nn.Linear(n_in, h1, rng, dtype=dtype),
        nn.ReLU(),
        nn.Linear(h1, h2, rng, dtype=dtype),
        nn.ReLU(),
        nn.Linear(h2, n_classes, rng, dtype=dtype),
    ])


def bundle_vector(bundle: FeatureBundle, modality: str, tau: float) -> np.ndarray:
    if modality == "v":
        return bundle.vocal_vector(tau)
    if modality == "u":
        return bundle.ultra_vector()
    if modality == "i":
        return bundle.imu_vector()
    raise PipelineError(f"unknown-modality: {modality!r}")


class FusionModel:
    def __init__(self, combo: str, selector: str, n_classes: int, tau: float,
                 input_dims: dict[str, int], hidden: tuple[int, int],
                 dropout: float, rng: np.random.Generator):
        self.combo = combo
        self.selector = selector
        self.n_classes = n_classes
        self.tau = tau
        self.active = selector_modalities(selector)
        self.input_dims = dict(input_dims)
        self.hidden = tuple(hidden)
        self.dropout = dropout
        self.norm: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.heads: dict[str, nn.Sequential] = {}
        self.fusion: nn.Param | None = None
        self.history: dict = {}

        if selector == "ALL-F":
            total = sum(input_dims[m] for m in self.active)
            self.heads["fuse"] = _make_head(total, hidden, n_classes, dropout, rng)
        else:
            for m in self.active:
                self.heads[m] = _make_head(input_dims[m], hidden, n_classes, dropout, rng)
            if len(self.active) > 1:
                init = 1.0 / len(self.active)
                self.fusion = nn.Param(np.full(len(self.active), init, dtype=np.float32))

    # -- parameters --------------------------------------------------------
    def params(self) -> list[nn.Param]:
        out = []
        for key in sorted(self.heads):
            out.extend(self.heads[key].params())
        if self.fusion is not None:
            out.append(self.fusion)
        return out

    # -- forward/backward on prepared matrices ------------------------------
    def forward_mats(self, mats: dict[str, np.ndarray], train: bool = False) -> np.ndarray:
        if self.selector == "ALL-F":
            x = np.concatenate([mats[m] for m in self.active], axis=1)
            return self.heads["fuse"].forward(x, train=train)
        if self.fusion is None:
            m = self.active[0]
            return self.heads[m].forward(mats[m], train=train)
        self._branch_out = {}
        logits = None
        for k, m in enumerate(self.active):
            y = self.heads[m].forward(mats[m], train=train)
            self._branch_out[m] = y
            term = self.fusion.value[k] * y
            logits = term if logits is None else logits + term
        return logits

    def backward(self, grad: np.ndarray) -> None:
        if self.selector == "ALL-F":
            self.heads["fuse"].backward(grad, need_input_grad=False)
            return
        if self.fusion is None:
            self.heads[self.active[0]].backward(grad, need_input_grad=False)
            return
        self.fusion.grad[...] = 0.0
        for k, m in enumerate(self.active):
            self.fusion.grad[k] += float(np.sum(grad * self._branch_out[m]))
            self.heads[m].backward(self.fusion.value[k] * grad, need_input_grad=False)

    # -- bundle interface ----------------------------------------------------
    def vectors(self, bundle: FeatureBundle) -> dict[str, np.ndarray]:
        mats = {}
        for m in self.active:
            v = bundle_vector(bundle, m, self.tau)
            if v.shape[0] != self.input_dims[m]:
                raise PipelineError(
                    f"dimension-mismatch: {m} vector {v.shape[0]} != {self.input_dims[m]}"
                )
            mu, sd = self.norm[m]
            mats[m] = ((v - mu) / sd)[None, :].astype(np.float32)
        return mats

    def predict(self, bundle: FeatureBundle) -> tuple[int, np.ndarray]:
        logits = self.forward_mats(self.vectors(bundle), train=False)[0]
        return int(np.argmax(logits)), logits

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> None:
        meta = {
            "combo": self.combo,
            "selector": self.selector,
            "n_classes": self.n_classes,
            "tau": self.tau,
            "input_dims": self.input_dims,
            "hidden": list(self.hidden),
            "dropout": self.dropout,
            "history": self.history,
        }
        arrays = []
        for m in self.active:
            mu, sd = self.norm[m]
            arrays += [(f"norm.{m}.mu", mu), (f"norm.{m}.sd", sd)]
        for key in sorted(self.heads):
            arrays += _layer_state(f"head.{key}", self.heads[key])
        if self.fusion is not None:
            arrays.append(("fusion.w", self.fusion.value))
        save_checkpoint(path, "fusion-model", meta, arrays)

    @classmethod
    def load(cls, path) -> "FusionModel":
        kind, meta, arrays = load_checkpoint(path)
        if kind != "fusion-model":
            raise PipelineError(f"bad-checkpoint: expected fusion-model, got {kind}")
        model = cls(
            meta["combo"], meta["selector"], meta["n_classes"], meta["tau"],
            meta["input_dims"], tuple(meta["hidden"]), meta["dropout"],
            np.random.default_rng(0),
        )
        for m in model.active:
            model.norm[m] = (arrays[f"norm.{m}.mu"], arrays[f"norm.{m}.sd"])
        for key in sorted(model.heads):
            _load_layer_state(f"head.{key}", model.heads[key], arrays)
        if model.fusion is not None:
            model.fusion = nn.Param(arrays["fusion.w"].astype(np.float32))
        model.history = meta.get("history", {})
        return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def fit_tau(bundles: list[FeatureBundle]) -> float:
    """Similarity temperature: median DTW distance over the training fold."""
    dists = [b.f_mfcc_dist for b in bundles if b.f_mfcc_dist is not None]
    if not dists:
        raise PipelineError("missing-modality: no DTW distances to fit tau")
    med = float(np.median(np.concatenate(dists)))
    return med if med > 1e-12 else 1.0


def train_fusion(bundles: list[FeatureBundle], combo: str, selector: str,
                 cfg: TrainConfig, seed: int, n_classes: int = 9) -> FusionModel:
    """Train one (combo, selector) cell on pre-extracted feature bundles."""
    if not bundles:
        raise PipelineError("empty-train-set")
    active = selector_modalities(selector)
    labels = np.array([b.label for b in bundles], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise PipelineError(f"bad-label: outside [0, {n_classes})")

    tau = fit_tau(bundles) if "v" in active else 1.0
    raw = {
        m: np.stack([bundle_vector(b, m, tau) for b in bundles]).astype(np.float64)
        for m in active
    }
    rng = np.random.default_rng(seed)
    norm = {}
    mats = {}
    for m in active:
        mu = raw[m].mean(axis=0)
        sd = raw[m].std(axis=0)
        sd = np.where(sd < 1e-6, 1.0, sd)
        norm[m] = (mu.astype(np.float32), sd.astype(np.float32))
        mats[m] = ((raw[m] - mu) / sd).astype(np.float32)

    model = FusionModel(
        combo, selector, n_classes, tau,
        {m: mats[m].shape[1] for m in active},
        cfg.hidden, cfg.dropout, rng,
    )
    model.norm = norm
    opt = nn.SGD(model.params(), momentum=cfg.momentum)

    n = len(bundles)
    streak = 0
    epochs_run = 0
    epoch_loss = float("nan")
    epoch_acc = 0.0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at(epoch, cfg.lr0, cfg.warmup)
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i: i + cfg.batch_size]
            xb = {m: mats[m][idx] for m in active}
            yb = labels[idx]
            logits = model.forward_mats(xb, train=True)
            loss, grad = nn.softmax_cross_entropy(logits, yb)
            model.backward(grad)
            opt.step(lr)
            total_loss += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == yb).sum())
        epoch_loss = total_loss / n
        epoch_acc = correct / n
        epochs_run = epoch
        if not np.isfinite(epoch_loss):
            raise PipelineError(f"training-diverged: loss {epoch_loss} at epoch {epoch}")
        if cfg.early_stop:
            streak = streak + 1 if (epoch_acc == 1.0 and epoch_loss < cfg.early_stop_loss) else 0
            if streak >= cfg.early_stop_patience and epoch >= cfg.min_epochs:
                break

    model.history = {
        "epochs": epochs_run,
        "final_loss": float(epoch_loss),
        "final_train_acc": float(epoch_acc),
    }
    return model


def evaluate(model: FusionModel, bundles: list[FeatureBundle]) -> tuple[float, np.ndarray]:
    """Accuracy and predictions of a trained model on held-out bundles."""
    if not bundles:
        raise PipelineError("empty-eval-set")
    preds = np.array([model.predict(b)[0] for b in bundles], dtype=np.int64)
    truth = np.array([b.label for b in bundles], dtype=np.int64)
    return float((preds == truth).mean()), preds
