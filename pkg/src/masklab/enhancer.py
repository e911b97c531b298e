"""Mask-estimating speech enhancer and its training losses.

Pipeline: STFT -> frequency conv encoder with a dilated-dense block ->
dual-path transformer blocks (attention+GRU over frequency, then over
time) -> mirrored decoder -> real/imag mask pair -> complex mask applied
to the noisy spectrogram -> inverse STFT.

The joint training objective mixes a reference-based spectrogram distance
with the score of a frozen quality predictor:
    total = alpha * spectral + (1 - alpha) * quality.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, NumericalError, ShapeError
from .layers import GRU, Conv1d, Dense, LayerNorm, Module, MultiHeadAttention, PReLU
from .optim import Adam, LrSchedule, lr_at
from .predictor import QualityPredictor, dft_matrices

DENSE_DILATIONS = (1, 2, 4, 8)
SPEC_LOSS_VARIANTS = ("as_printed", "sum_of_abs")


@dataclass(frozen=True)
class EnhancerConfig:
    channels: int = 16  # 64 at paper scale
    blocks: int = 2  # 4 at paper scale
    heads: int = 2
    kernel: int = 3
    gru_hidden: int = 0  # 0 -> channels
    mask_mode: str = "complex"  # or "elementwise"
    window_length: int = 512
    hop: int = 256
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.channels < 2 or self.channels % 2 != 0:
            raise DataError(f"channels must be even and >= 2, got {self.channels}")
        if self.blocks < 1:
            raise DataError(f"blocks must be >= 1, got {self.blocks}")
        if self.mask_mode not in ("complex", "elementwise"):
            raise DataError(f"mask_mode must be 'complex' or 'elementwise', got {self.mask_mode!r}")

    @property
    def stft(self) -> dsp.StftConfig:
        return dsp.StftConfig(self.window_length, self.hop)

    @property
    def hidden(self) -> int:
        return self.gru_hidden or self.channels

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class MaskPair:
    """Real/imag mask planes matching the input spectrogram shape."""

    m_real: np.ndarray
    m_imag: np.ndarray

    def __post_init__(self) -> None:
        self.m_real = np.asarray(self.m_real, dtype=np.float64)
        self.m_imag = np.asarray(self.m_imag, dtype=np.float64)
        if self.m_real.shape != self.m_imag.shape:
            raise ShapeError(f"mask shapes differ: {self.m_real.shape} vs {self.m_imag.shape}")
        if not (np.all(np.isfinite(self.m_real)) and np.all(np.isfinite(self.m_imag))):
            raise DataError("mask contains non-finite entries")


@dataclass(frozen=True)
class JointLossConfig:
    alpha: float = 1.0
    spec_loss_variant: str = "as_printed"

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise DataError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.spec_loss_variant not in SPEC_LOSS_VARIANTS:
            raise DataError(f"unknown spec_loss_variant {self.spec_loss_variant!r}")


class DilatedDenseBlock(Module):
    """Four dilated frequency convolutions with dense (concat) connectivity.

    PReLU after each conv; one layer norm at the block output (norming every
    layer roughly doubles the block's memory traffic for no visible gain at
    this scale)."""

    def __init__(self, channels: int, kernel: int, rng, dtype, name: str):
        self.name = name
        self.convs = [
            Conv1d(channels * (i + 1), channels, kernel, d, rng, dtype, name=f"{name}.conv{i}")
            for i, d in enumerate(DENSE_DILATIONS)
        ]
        self.acts = [PReLU(channels, dtype, name=f"{name}.act{i}") for i in range(len(DENSE_DILATIONS))]
        self.norm = LayerNorm(channels, dtype, name=f"{name}.norm")

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        out = x
        for conv, act in zip(self.convs, self.acts):
            inp = feats[0] if len(feats) == 1 else ad.concat(feats, axis=-1)
            out = act.forward(conv.forward(inp))
            feats.append(out)
        return self.norm.forward(out)


class PathUnit(Module):
    """One transformer pass along a sequence axis: attention, then a
    GRU-based feed-forward stage, both with residual + layer norm."""

    def __init__(self, channels: int, heads: int, hidden: int, rng, dtype, name: str):
        self.name = name
        self.attn = MultiHeadAttention(channels, heads, rng, dtype, name=f"{name}.attn")
        self.norm1 = LayerNorm(channels, dtype, name=f"{name}.norm1")
        self.gru = GRU(channels, hidden, rng, dtype, name=f"{name}.gru")
        self.ffn_out = Dense(hidden, channels, rng, dtype, name=f"{name}.ffn_out")
        self.norm2 = LayerNorm(channels, dtype, name=f"{name}.norm2")

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1.forward(ad.add(x, self.attn.forward(x)))
        h = self.ffn_out.forward(ad.relu(self.gru.forward(x)))
        return self.norm2.forward(ad.add(x, h))


class DualPathBlock(Module):
    """Sequence modeling along frequency per frame, then along time per bin."""

    def __init__(self, channels: int, heads: int, hidden: int, rng, dtype, name: str):
        self.name = name
        self.intra = PathUnit(channels, heads, hidden, rng, dtype, name=f"{name}.intra")
        self.inter = PathUnit(channels, heads, hidden, rng, dtype, name=f"{name}.inter")

    def forward(self, z: Tensor) -> Tensor:
        b, t, f, c = z.shape
        x = ad.reshape(z, (b * t, f, c))
        x = self.intra.forward(x)
        z = ad.reshape(x, (b, t, f, c))
        y = ad.reshape(ad.transpose(z, (0, 2, 1, 3)), (b * f, t, c))
        y = self.inter.forward(y)
        return ad.transpose(ad.reshape(y, (b, f, t, c)), (0, 2, 1, 3))


class MaskEnhancer(Module):
    """Estimates real/imag masks from the noisy real/imag spectrogram."""

    def __init__(self, config: EnhancerConfig, seed: int = 0):
        self.name = "mask_enhancer"
        self.config = config
        dtype = config.np_dtype()
        rng = np.random.default_rng(seed)
        c = config.channels
        self.conv_in = Conv1d(2, c, config.kernel, 1, rng, dtype, name="conv_in")
        self.norm_in = LayerNorm(c, dtype, name="norm_in")
        self.act_in = PReLU(c, dtype, name="act_in")
        self.encoder = DilatedDenseBlock(c, config.kernel, rng, dtype, name="encoder")
        self.blocks = [
            DualPathBlock(c, config.heads, config.hidden, rng, dtype, name=f"dual{i}")
            for i in range(config.blocks)
        ]
        self.decoder = DilatedDenseBlock(c, config.kernel, rng, dtype, name="decoder")
        self.conv_out = Conv1d(c, 2, config.kernel, 1, rng, dtype, name="conv_out")
        # start near the identity mask (passthrough) so early training is
        # anchored at the noisy input rather than random resynthesis
        self.conv_out.weight.data *= 0.1
        identity = (1.0, 0.0) if config.mask_mode == "complex" else (1.0, 1.0)
        self.conv_out.bias.data[:] = identity

    def forward(self, x_ri: Tensor) -> Tensor:
        """(B, T, F, 2) noisy real/imag -> (B, T, F, 2) mask planes."""
        if x_ri.ndim != 4 or x_ri.shape[-1] != 2:
            raise ShapeError(f"{self.name}: expected (B, T, F, 2), got {x_ri.shape}")
        z = self.act_in.forward(self.norm_in.forward(self.conv_in.forward(x_ri)))
        z = self.encoder.forward(z)
        for block in self.blocks:
            z = block.forward(z)
        z = self.decoder.forward(z)
        return self.conv_out.forward(z)  # linear, unbounded masks

    def predict_masks(self, spec: dsp.ComplexSpectrogram) -> MaskPair:
        x = np.stack([spec.real, spec.imag], axis=-1).astype(self.config.np_dtype())
        with ad.no_grad():
            masks = self.forward(Tensor(x[None]))
        m = masks.data[0].astype(np.float64)
        return MaskPair(m[..., 0], m[..., 1])

    def save(self, path: str | Path, extra_meta: dict | None = None) -> Path:
        meta = {"kind": "mask_enhancer", "config": asdict(self.config)}
        meta.update(extra_meta or {})
        return save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "MaskEnhancer":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "mask_enhancer":
            raise DataError(f"{path}: not an enhancer checkpoint")
        model = cls(EnhancerConfig(**meta["config"]), seed=seed)
        model.load_state(arrays)
        return model


# ---------------------------------------------------------------------------
# mask application and inverse transform
# ---------------------------------------------------------------------------

def apply_mask(spec: dsp.ComplexSpectrogram, masks: MaskPair, mode: str = "complex") -> dsp.ComplexSpectrogram:
    """Apply a mask pair to a spectrogram (numpy path)."""
    if masks.m_real.shape != spec.shape:
        raise ShapeError(f"mask shape {masks.m_real.shape} != spectrogram shape {spec.shape}")
    if mode == "complex":
        est_r = spec.real * masks.m_real - spec.imag * masks.m_imag
        est_i = spec.real * masks.m_imag + spec.imag * masks.m_real
    elif mode == "elementwise":
        est_r = spec.real * masks.m_real
        est_i = spec.imag * masks.m_imag
    else:
        raise DataError(f"unknown mask mode {mode!r}")
    return dsp.ComplexSpectrogram(est_r, est_i, spec.config, spec.sample_rate)


def enhance(model: MaskEnhancer, noisy: dsp.Waveform) -> tuple[dsp.Waveform, MaskPair]:
    """Enhance one waveform; returns the output and the estimated masks."""
    spec = dsp.stft(noisy, model.config.stft)
    masks = model.predict_masks(spec)
    est = apply_mask(spec, masks, model.config.mask_mode)
    return dsp.istft(est), masks


_IDFT_CACHE: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}


def idft_matrices(window_length: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """(F, window) matrices inverting the one-sided DFT of a real frame."""
    key = (window_length, np.dtype(dtype).str)
    if key not in _IDFT_CACHE:
        f = window_length // 2 + 1
        k = np.arange(f)[:, None]
        n = np.arange(window_length)[None, :]
        angle = 2.0 * np.pi * k * n / window_length
        weight = np.full((f, 1), 2.0)
        weight[0, 0] = 1.0
        weight[-1, 0] = 1.0
        a = weight * np.cos(angle) / window_length
        b = -weight * np.sin(angle) / window_length
        _IDFT_CACHE[key] = (a.astype(dtype), b.astype(dtype))
    return _IDFT_CACHE[key]


def istft_on_tape(est_r: Tensor, est_i: Tensor, cfg: dsp.StftConfig) -> Tensor:
    """(B, T, F) real/imag tensors -> (B, L) waveform, differentiable."""
    dtype = est_r.data.dtype
    a, b = idft_matrices(cfg.window_length, dtype)
    frames = ad.add(ad.matmul(est_r, Tensor(a)), ad.matmul(est_i, Tensor(b)))
    num = ad.overlap_add_op(frames, cfg.hop)
    den = dsp.ola_window_envelope(cfg.window_samples(), est_r.shape[-2], cfg.hop)
    inv = np.where(den > 1e-8, 1.0 / np.where(den > 1e-8, den, 1.0), 0.0).astype(dtype)
    return ad.mul(num, Tensor(inv))


def batch_stft_arrays(waves: np.ndarray, cfg: dsp.StftConfig, dtype) -> tuple[np.ndarray, np.ndarray]:
    """(B, L) samples -> (B, T, F) real and imag planes (numpy path)."""
    frames = dsp.frame_signal(waves, cfg.window_length, cfg.hop)
    frames = frames * cfg.window_samples()
    spec = np.fft.rfft(frames, axis=-1)
    return spec.real.astype(dtype), spec.imag.astype(dtype)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def spectral_loss_values(
    ref_real: np.ndarray,
    ref_imag: np.ndarray,
    est_real: np.ndarray,
    est_imag: np.ndarray,
    variant: str = "as_printed",
) -> float:
    """Mean distance between real/imag magnitudes of two T x F planes.

    "as_printed" keeps the two magnitude differences inside one absolute
    value, so opposite-signed real/imag errors can cancel; "sum_of_abs"
    takes the absolute value of each difference separately.
    """
    if ref_real.shape != est_real.shape:
        raise ShapeError(f"spectral_loss shapes differ: {ref_real.shape} vs {est_real.shape}")
    if variant not in SPEC_LOSS_VARIANTS:
        raise DataError(f"unknown variant {variant!r}")
    d_r = np.abs(ref_real) - np.abs(est_real)
    d_i = np.abs(ref_imag) - np.abs(est_imag)
    if variant == "as_printed":
        return float(np.mean(np.abs(d_r + d_i)))
    return float(np.mean(np.abs(d_r) + np.abs(d_i)))


def spectral_loss(
    ref: dsp.ComplexSpectrogram, est: dsp.ComplexSpectrogram, variant: str = "as_printed"
) -> float:
    """`spectral_loss_values` over two spectrogram objects."""
    return spectral_loss_values(ref.real, ref.imag, est.real, est.imag, variant)


def spectral_loss_on_tape(
    ref_abs_r: np.ndarray, ref_abs_i: np.ndarray, est_r: Tensor, est_i: Tensor, variant: str
) -> Tensor:
    if variant not in SPEC_LOSS_VARIANTS:
        raise DataError(f"unknown variant {variant!r}")
    if ref_abs_r.shape != est_r.shape:
        raise ShapeError(f"spectral_loss shapes differ: {ref_abs_r.shape} vs {est_r.shape}")
    d_r = ad.sub(Tensor(ref_abs_r), ad.absolute(est_r))
    d_i = ad.sub(Tensor(ref_abs_i), ad.absolute(est_i))
    if variant == "as_printed":
        return ad.tmean(ad.absolute(ad.add(d_r, d_i)))
    return ad.tmean(ad.add(ad.absolute(d_r), ad.absolute(d_i)))


def quality_loss(predictor: QualityPredictor, waves: Tensor) -> tuple[Tensor, np.ndarray]:
    """(1 - score)^2 averaged over the batch; returns (loss, scores).

    The predictor must be frozen: gradients flow into the waveform (and
    through it into the enhancer), never into predictor parameters.
    """
    if not predictor.frozen:
        raise DataError("quality_loss requires a frozen predictor")
    feats = predictor.features_on_tape(waves)
    scores = predictor.forward_features(feats)
    err = ad.sub(1.0, scores)
    return ad.tmean(ad.mul(err, err)), scores.data.copy()


def joint_loss(alpha: float, loss_spec, loss_quality):
    """alpha * spectral + (1 - alpha) * quality; endpoints return the term
    itself so the alpha = 1 / alpha = 0 runs log identical values."""
    if not (0.0 <= alpha <= 1.0):
        raise DataError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return loss_spec
    if alpha == 0.0:
        return loss_quality
    if isinstance(loss_spec, Tensor) or isinstance(loss_quality, Tensor):
        return ad.add(ad.mul(loss_spec, alpha), ad.mul(loss_quality, 1.0 - alpha))
    return alpha * loss_spec + (1.0 - alpha) * loss_quality


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnhancerTrainConfig:
    epochs: int = 30
    batch_size: int = 4
    crop_seconds: float = 1.0
    peak_lr: float = 1e-3
    warmup_updates: int = 100
    decay_per_epoch: float = 0.98
    loss_variant: str = "as_printed"
    val_clips_per_epoch: int = 8

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_variant not in SPEC_LOSS_VARIANTS:
            raise DataError(f"unknown loss_variant {self.loss_variant!r}")

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, self.warmup_updates, self.decay_per_epoch)


@dataclass
class StepRecord:
    step: int
    loss: float
    loss_spec: float
    loss_quality: float


@dataclass
class EnhancerEpochRecord:
    epoch: int
    loss: float
    loss_spec: float
    loss_quality: float
    val_predictor_score: float
    lr: float


@dataclass
class EnhancerHistory:
    alpha: float
    epochs: list[EnhancerEpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    seconds: float = 0.0


def _load_pairs(records: list[dict], need_clean: bool) -> tuple[list[np.ndarray], list[np.ndarray | None]]:
    from .synthdata import load_waveform

    noisy, clean = [], []
    for rec in records:
        noisy.append(load_waveform(rec["wav_path"]).samples)
        if need_clean:
            if not rec.get("clean_path"):
                raise DataError(f"record {rec.get('id', '?')} lacks a clean reference (required for alpha > 0)")
            clean.append(load_waveform(rec["clean_path"]).samples)
        else:
            clean.append(None)
    return noisy, clean


def train_enhancer(
    alpha: float,
    records: list[dict],
    predictor: QualityPredictor | None,
    config: EnhancerConfig | None = None,
    train_config: EnhancerTrainConfig | None = None,
    seed: int = 0,
    val_records: list[dict] | None = None,
) -> tuple[MaskEnhancer, EnhancerHistory]:
    """Train one enhancer at a fixed loss mix.

    alpha = 0 permits clean-free training (records may omit references);
    alpha < 1 requires a frozen predictor. Fully deterministic per seed.
    """
    if not (0.0 <= alpha <= 1.0):
        raise DataError(f"alpha must be in [0, 1], got {alpha}")
    config = config or EnhancerConfig()
    train_config = train_config or EnhancerTrainConfig()
    if alpha < 1.0:
        if predictor is None:
            raise DataError("alpha < 1 requires a quality predictor")
        if not predictor.frozen:
            raise DataError("predictor must be frozen before enhancer training")
    if not records:
        raise DataError("empty training manifest")

    cfg = config.stft
    dtype = config.np_dtype()
    noisy_clips, clean_clips = _load_pairs(records, need_clean=alpha > 0.0)
    crop_len = int(round(train_config.crop_seconds * 16000))
    crop_len = max(crop_len, cfg.window_length)
    min_len = min(len(x) for x in noisy_clips)
    if crop_len > min_len:
        raise DataError(f"crop of {crop_len} samples exceeds shortest clip ({min_len})")

    model = MaskEnhancer(config, seed=seed)
    pred_frozen_before = None
    if predictor is not None:
        pred_frozen_before = predictor.state_dict()
    optimizer = Adam(model.params())
    schedule = train_config.schedule()
    history = EnhancerHistory(alpha=alpha)
    n = len(noisy_clips)
    t0 = time.time()
    update = 0
    for epoch in range(1, train_config.epochs + 1):
        rng = np.random.default_rng([seed, 1000 + epoch])
        order = rng.permutation(n)
        offsets = rng.integers(0, np.array([len(noisy_clips[i]) for i in order]) - crop_len + 1)
        sum_l = sum_ls = sum_lq = 0.0
        n_steps = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            offs = offsets[start : start + train_config.batch_size]
            noisy = np.stack(
                [noisy_clips[i][o : o + crop_len] for i, o in zip(idx, offs)]
            ).astype(dtype)
            x_r, x_i = batch_stft_arrays(noisy, cfg, dtype)
            masks = model.forward(Tensor(np.stack([x_r, x_i], axis=-1)))
            b, t, f, _ = masks.shape
            m_r = ad.reshape(ad.slice_axis(masks, -1, 0, 1), (b, t, f))
            m_i = ad.reshape(ad.slice_axis(masks, -1, 1, 2), (b, t, f))
            xr_t, xi_t = Tensor(x_r), Tensor(x_i)
            if config.mask_mode == "complex":
                est_r = ad.sub(ad.mul(m_r, xr_t), ad.mul(m_i, xi_t))
                est_i = ad.add(ad.mul(m_r, xi_t), ad.mul(m_i, xr_t))
            else:
                est_r = ad.mul(m_r, xr_t)
                est_i = ad.mul(m_i, xi_t)

            loss_spec = None
            if alpha > 0.0:
                clean = np.stack(
                    [clean_clips[i][o : o + crop_len] for i, o in zip(idx, offs)]
                ).astype(dtype)
                s_r, s_i = batch_stft_arrays(clean, cfg, dtype)
                loss_spec = spectral_loss_on_tape(
                    np.abs(s_r), np.abs(s_i), est_r, est_i, train_config.loss_variant
                )
            loss_quality = None
            if alpha < 1.0:
                est_wave = istft_on_tape(est_r, est_i, cfg)
                loss_quality, _ = quality_loss(predictor, est_wave)

            loss = joint_loss(alpha, loss_spec, loss_quality)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {n_steps}")
            optimizer.zero_grad()
            loss.backward()
            lr = lr_at(schedule, update, epoch - 1)
            optimizer.step(lr)
            update += 1
            l_val = loss.item()
            ls_val = loss_spec.item() if loss_spec is not None else float("nan")
            lq_val = loss_quality.item() if loss_quality is not None else float("nan")
            history.steps.append(StepRecord(update, l_val, ls_val, lq_val))
            sum_l += l_val
            sum_ls += ls_val
            sum_lq += lq_val
            n_steps += 1

        val_score = float("nan")
        if val_records and predictor is not None:
            val_score = _mean_val_score(
                model, predictor, val_records[: train_config.val_clips_per_epoch]
            )
        history.epochs.append(
            EnhancerEpochRecord(
                epoch, sum_l / n_steps, sum_ls / n_steps, sum_lq / n_steps, val_score, lr
            )
        )
    if predictor is not None:
        after = predictor.state_dict()
        if any(not np.array_equal(pred_frozen_before[k], after[k]) for k in after):
            raise NumericalError("frozen predictor parameters changed during enhancer training")
    history.seconds = time.time() - t0
    return model, history


def _mean_val_score(model: MaskEnhancer, predictor: QualityPredictor, records: list[dict]) -> float:
    from .synthdata import load_waveform

    scores = []
    for rec in records:
        wave = load_waveform(rec["wav_path"])
        out, _ = enhance(model, wave)
        scores.append(predictor.predict(out))
    return float(np.mean(scores)) if scores else float("nan")


def write_history_csv(history: EnhancerHistory, path: str | Path) -> Path:
    """Per-epoch history: epoch, L, L_spec, L_SQ, val_predictor_score."""
    import csv

    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "L", "L_spec", "L_SQ", "val_predictor_score"])
        for rec in history.epochs:
            writer.writerow(
                [
                    rec.epoch,
                    f"{rec.loss:.8f}",
                    f"{rec.loss_spec:.8f}",
                    f"{rec.loss_quality:.8f}",
                    f"{rec.val_predictor_score:.6f}",
                ]
            )
    return path
