"""Non-intrusive speech quality predictor.

Log-mel front-end + small transformer + learned-query attention pooling +
sigmoid output in (0, 1). Trained on proxy-MOS labels with squared error
and early stopping on the validation split; the trained model is frozen
before it is ever used inside an enhancer loss.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError
from .layers import Dense, LayerNorm, Module, MultiHeadAttention, PositionalEncoding
from .optim import Adam, LrSchedule, lr_at


@dataclass(frozen=True)
class MosLabel:
    """Raw MOS q in [1, 5] and its normalized form q/5 in [0.2, 1]."""

    q: float
    q_norm: float

    def __post_init__(self) -> None:
        if not (1.0 <= self.q <= 5.0):
            raise DataError(f"MOS must be in [1, 5], got {self.q}")
        if abs(self.q_norm - self.q / 5.0) > 1e-12:
            raise DataError(f"q_norm {self.q_norm} != q/5 = {self.q / 5.0}")

    @classmethod
    def from_raw(cls, q: float) -> "MosLabel":
        return cls(q=float(q), q_norm=float(q) / 5.0)


def normalize_mos(q: float) -> float:
    """Map raw MOS in [1, 5] onto [0.2, 1]."""
    if not (1.0 <= q <= 5.0):
        raise DataError(f"MOS must be in [1, 5], got {q}")
    return q / 5.0


def predictor_loss(score: float, q_norm: float) -> float:
    """Squared error between predicted and true normalized quality."""
    return (score - q_norm) ** 2


@dataclass(frozen=True)
class PredictorConfig:
    n_mels: int = 40
    width: int = 64
    layers: int = 2
    heads: int = 2
    ffn_width: int = 128
    patience: int = 20
    max_epochs: int = 100
    batch_size: int = 16
    dtype: str = "float32"
    window_length: int = 512
    hop: int = 256
    peak_lr: float = 1e-3
    warmup_updates: int = 100
    decay_per_epoch: float = 0.98

    def __post_init__(self) -> None:
        if self.width % self.heads != 0:
            raise DataError(f"heads {self.heads} must divide width {self.width}")
        if self.patience < 1:
            raise DataError(f"patience must be >= 1, got {self.patience}")

    @property
    def stft(self) -> dsp.StftConfig:
        return dsp.StftConfig(self.window_length, self.hop)

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, self.warmup_updates, self.decay_per_epoch)


_DFT_CACHE: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}


def dft_matrices(window_length: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """(window, F) cos/-sin matrices so frames @ C + j * frames @ S == rfft."""
    key = (window_length, np.dtype(dtype).str)
    if key not in _DFT_CACHE:
        n = np.arange(window_length)[:, None]
        k = np.arange(window_length // 2 + 1)[None, :]
        angle = 2.0 * np.pi * n * k / window_length
        _DFT_CACHE[key] = (np.cos(angle).astype(dtype), (-np.sin(angle)).astype(dtype))
    return _DFT_CACHE[key]


class TransformerLayer(Module):
    """Post-norm transformer encoder layer: attention then dense FFN."""

    def __init__(self, dim: int, heads: int, ffn_width: int, rng, dtype, name: str = "xfmr"):
        self.name = name
        self.attn = MultiHeadAttention(dim, heads, rng, dtype, name=f"{name}.attn")
        self.norm1 = LayerNorm(dim, dtype, name=f"{name}.norm1")
        self.ffn_in = Dense(dim, ffn_width, rng, dtype, name=f"{name}.ffn_in")
        self.ffn_out = Dense(ffn_width, dim, rng, dtype, name=f"{name}.ffn_out")
        self.norm2 = LayerNorm(dim, dtype, name=f"{name}.norm2")

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1.forward(ad.add(x, self.attn.forward(x)))
        h = self.ffn_out.forward(ad.relu(self.ffn_in.forward(x)))
        return self.norm2.forward(ad.add(x, h))


class QualityPredictor(Module):
    """Maps a waveform to a quality score in (0, 1)."""

    def __init__(self, config: PredictorConfig, seed: int = 0):
        self.name = "quality_predictor"
        self.config = config
        self.frozen = False
        dtype = config.np_dtype()
        rng = np.random.default_rng(seed)
        self.proj = Dense(config.n_mels, config.width, rng, dtype, name="proj")
        self.pos = PositionalEncoding(config.width, dtype)
        self.blocks = [
            TransformerLayer(config.width, config.heads, config.ffn_width, rng, dtype, name=f"block{i}")
            for i in range(config.layers)
        ]
        self.pool_query = Tensor(
            rng.uniform(-1, 1, size=(config.width, 1)).astype(dtype) / np.sqrt(config.width),
            requires_grad=True,
        )
        self.head = Dense(config.width, 1, rng, dtype, name="head")
        self._mel_fb = dsp.mel_filterbank(
            config.n_mels, config.stft.n_bins, 16000, config.window_length
        ).astype(dtype)
        self._window = config.stft.window_samples().astype(dtype)

    # ---- feature path (differentiable) ---------------------------------
    def features_on_tape(self, waves: Tensor) -> Tensor:
        """(N, L) waveform tensor -> (N, T, n_mels) log-mel tensor."""
        cfg = self.config.stft
        if waves.shape[-1] < cfg.window_length:
            raise DataError(
                f"input too short: {waves.shape[-1]} samples < one window ({cfg.window_length})"
            )
        cos_m, sin_m = dft_matrices(cfg.window_length, self.config.np_dtype())
        frames = ad.frame_op(waves, cfg.window_length, cfg.hop)
        frames = ad.mul(frames, Tensor(self._window))
        re = ad.matmul(frames, Tensor(cos_m))
        im = ad.matmul(frames, Tensor(sin_m))
        power = ad.add(ad.mul(re, re), ad.mul(im, im))
        mel = ad.matmul(power, Tensor(self._mel_fb.T))
        return ad.log(ad.add(mel, Tensor(np.asarray(dsp.MEL_LOG_EPS, dtype=self.config.np_dtype()))))

    def features(self, wave: dsp.Waveform) -> np.ndarray:
        """Plain numpy feature path for precomputation."""
        spec = dsp.stft(wave, self.config.stft)
        power = spec.power().astype(self.config.np_dtype())
        return np.log(power @ self._mel_fb.T + dsp.MEL_LOG_EPS)

    # ---- model body -----------------------------------------------------
    def forward_features(self, feats: Tensor) -> Tensor:
        """(N, T, n_mels) -> (N,) scores in (0, 1)."""
        x = self.proj.forward(feats)
        x = self.pos.forward(x)
        for block in self.blocks:
            x = block.forward(x)
        logits = ad.matmul(x, self.pool_query)  # (N, T, 1)
        n, length, _ = logits.shape
        weights = ad.softmax(ad.reshape(logits, (n, length)), axis=-1)
        pooled = ad.matmul(ad.reshape(weights, (n, 1, length)), x)  # (N, 1, width)
        pooled = ad.reshape(pooled, (n, self.config.width))
        out = self.head.forward(pooled)  # (N, 1)
        return ad.reshape(ad.sigmoid(out), (n,))

    def predict(self, wave: dsp.Waveform) -> float:
        feats = self.features(wave)
        with ad.no_grad():
            score = self.forward_features(Tensor(feats[None, :, :]))
        return float(score.data[0])

    def predict_batch(self, feats: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward_features(Tensor(feats)).data.copy()

    def freeze(self) -> None:
        for p in self.params():
            p.requires_grad = False
        self.frozen = True

    # ---- persistence ------------------------------------------------------
    def save(self, path: str | Path, extra_meta: dict | None = None) -> Path:
        meta = {"kind": "quality_predictor", "config": asdict(self.config), "frozen": self.frozen}
        meta.update(extra_meta or {})
        return save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "QualityPredictor":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "quality_predictor":
            raise DataError(f"{path}: not a predictor checkpoint")
        model = cls(PredictorConfig(**meta["config"]), seed=seed)
        model.load_state(arrays)
        if meta.get("frozen"):
            model.freeze()
        return model


def predict_quality(model: QualityPredictor, wave: dsp.Waveform) -> float:
    """Score one waveform; strictly inside (0, 1) by construction."""
    return model.predict(wave)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    seconds: float = 0.0


class EarlyStopper:
    """Halt after `patience` epochs without strict validation improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise DataError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.waited = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.waited = 0
            return False
        self.waited += 1
        return self.waited >= self.patience


def _load_features(records: list[dict], model: QualityPredictor) -> tuple[np.ndarray, np.ndarray]:
    from .synthdata import load_waveform

    feats, labels = [], []
    for rec in records:
        wave = load_waveform(rec["wav_path"])
        feats.append(model.features(wave))
        labels.append(normalize_mos(rec["mos_raw"]))
    return np.stack(feats), np.asarray(labels, dtype=model.config.np_dtype())


def train_predictor(
    records: list[dict],
    config: PredictorConfig | None = None,
    seed: int = 0,
) -> tuple[QualityPredictor, TrainingHistory]:
    """Train on the 'train' split with early stopping on 'val'.

    Returns the parameters of the best-validation epoch. Deterministic for
    a fixed (records, config, seed).
    """
    config = config or PredictorConfig()
    train_recs = [r for r in records if r.get("split") == "train"]
    val_recs = [r for r in records if r.get("split") == "val"]
    if not train_recs or not val_recs:
        raise DataError(
            f"need non-empty train and val splits, got {len(train_recs)}/{len(val_recs)}"
        )
    model = QualityPredictor(config, seed=seed)
    x_train, y_train = _load_features(train_recs, model)
    x_val, y_val = _load_features(val_recs, model)

    optimizer = Adam(model.params())
    schedule = config.schedule()
    history = TrainingHistory()
    stopper = EarlyStopper(config.patience)
    best_state = model.state_dict()
    t0 = time.time()
    update = 0
    n = len(train_recs)
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            scores = model.forward_features(Tensor(x_train[idx]))
            err = ad.sub(scores, Tensor(y_train[idx]))
            loss = ad.tmean(ad.mul(err, err))
            optimizer.zero_grad()
            loss.backward()
            lr = lr_at(schedule, update, epoch - 1)
            optimizer.step(lr)
            update += 1
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= n

        val_scores = model.predict_batch(x_val)
        val_loss = float(np.mean((val_scores - y_val) ** 2))
        history.epochs.append(EpochRecord(epoch, epoch_loss, val_loss, lr))
        improved = val_loss < stopper.best
        should_stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = model.state_dict()
        if should_stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best
    model.load_state(best_state)
    history.seconds = time.time() - t0
    return model, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise DataError(f"length mismatch {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise DataError("correlation undefined for fewer than 2 items")
    ra, rb = average_ranks(a), average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra**2) * np.sum(rb**2))
    if denom == 0.0:
        raise DataError("correlation undefined for constant inputs")
    return float(np.sum(ra * rb) / denom)


def evaluate_predictor(model: QualityPredictor, records: list[dict]) -> dict:
    """Per-set Spearman r and raw-scale RMSE, plus their unweighted means."""
    labelled = [r for r in records if "mos_raw" in r]
    if len(labelled) < 2:
        raise DataError(f"need at least 2 labelled items, got {len(labelled)}")
    feats, _ = _load_features(labelled, model)
    preds_raw = model.predict_batch(feats).astype(np.float64) * 5.0
    truth_raw = np.array([float(r["mos_raw"]) for r in labelled], dtype=np.float64)
    sets: dict[str, list[int]] = {}
    for i, rec in enumerate(labelled):
        sets.setdefault(rec.get("set_name", "all"), []).append(i)
    per_set = {}
    for set_name, idxs in sorted(sets.items()):
        if len(idxs) < 2:
            continue
        idx = np.asarray(idxs)
        per_set[set_name] = {
            "spearman_r": spearman(preds_raw[idx], truth_raw[idx]),
            "rmse": float(np.sqrt(np.mean((preds_raw[idx] - truth_raw[idx]) ** 2))),
        }
    result = {"per_set": per_set}
    if per_set:
        result["mean"] = {
            "spearman_r": float(np.mean([v["spearman_r"] for v in per_set.values()])),
            "rmse": float(np.mean([v["rmse"] for v in per_set.values()])),
        }
    result["overall"] = {
        "spearman_r": spearman(preds_raw, truth_raw),
        "rmse": float(np.sqrt(np.mean((preds_raw - truth_raw) ** 2))),
    }
    return result


def write_predictor_report(report: dict, path: str | Path) -> Path:
    """CSV with columns set_name, spearman_r, rmse (per set plus mean row)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["set_name", "spearman_r", "rmse"])
        for set_name, vals in report["per_set"].items():
            writer.writerow([set_name, f"{vals['spearman_r']:.6f}", f"{vals['rmse']:.6f}"])
        if "mean" in report:
            writer.writerow(["MEAN", f"{report['mean']['spearman_r']:.6f}", f"{report['mean']['rmse']:.6f}"])
    return path
