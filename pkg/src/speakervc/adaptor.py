"""Mel adaptor: maps decoder-parameterised log-mel onto the speaker encoder's parameterisation.

The trained path is a fixed frame-rate resampler followed by a three-layer
time-delay network. When source and destination parameterisations coincide
the adaptor is an exact identity bypass.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .audio import DECODER_MEL, SPK_MEL, MelConfig, MelSpectrogram, Waveform, mel_filterbank, mel_spectrogram, \
    resample, triangular_filters
from .data import UtteranceRecord, load_record
from .nn_utils import freeze, generator, randint, randperm, seeded

logger = logging.getLogger(__name__)

CHANNELS = 128
CROP_FRAMES = 200


def resample_frames(x: torch.Tensor, n_out: int, ratio: float) -> torch.Tensor:
    """Linear interpolation along time of (B, T, D); output frame j sits at input position j / ratio."""
    t_in = x.shape[1]
    if n_out == t_in and ratio == 1.0:
        return x
    pos = torch.arange(n_out, dtype=torch.float64) / ratio
    pos = pos.clamp(0, t_in - 1)
    lo = pos.floor().long()
    hi = (lo + 1).clamp(max=t_in - 1)
    w = (pos - lo.double()).to(x.dtype)[None, :, None]
    return x[:, lo] * (1 - w) + x[:, hi] * w


class MelAdaptor(nn.Module):
    def __init__(self, src_config: MelConfig = DECODER_MEL, dst_config: MelConfig = SPK_MEL,
                 channels: int = CHANNELS):
        super().__init__()
        self.src_config = src_config
        self.dst_config = dst_config
        self.bypass = src_config == dst_config
        self.ratio = src_config.hop_s / dst_config.hop_s
        if self.bypass:
            self.net = None
            return
        self.net = nn.Sequential(
            nn.Conv1d(src_config.n_mels, channels, 5, padding=2), nn.ReLU(),
            nn.Conv1d(channels, channels, 3, dilation=2, padding=2), nn.ReLU(),
            nn.Conv1d(channels, dst_config.n_mels, 3, dilation=3, padding=3),
        )
        # fixed standardisation, set from training data
        self.register_buffer("in_mean", torch.zeros(src_config.n_mels))
        self.register_buffer("in_std", torch.ones(src_config.n_mels))
        self.register_buffer("out_mean", torch.zeros(dst_config.n_mels))
        self.register_buffer("out_std", torch.ones(dst_config.n_mels))

    @classmethod
    def identity(cls, config: MelConfig) -> "MelAdaptor":
        return cls(config, config)

    def n_out(self, n_frames: int) -> int:
        return int(round(n_frames * self.ratio))

    def forward(self, logmel: torch.Tensor) -> torch.Tensor:
        """(B, T, src mels) -> (B, round(T * ratio), dst mels), clamped at the destination floor."""
        if self.bypass:
            return logmel
        x = resample_frames(logmel, self.n_out(logmel.shape[1]), self.ratio)
        x = (x - self.in_mean) / self.in_std
        y = self.net(x.transpose(1, 2)).transpose(1, 2) * self.out_std + self.out_mean
        return y.clamp_min(self.dst_config.log_floor)


MelAdaptorModel = MelAdaptor


@torch.no_grad()
def adapt(m: MelSpectrogram, a: MelAdaptor) -> MelSpectrogram:
    if m.config != a.src_config:
        raise ValueError(f"mel config mismatch: adaptor expects {a.src_config}, got {m.config}")
    if a.bypass:
        return m
    y = a(torch.as_tensor(m.values[None].copy(), dtype=torch.float32))[0]
    return MelSpectrogram(y.double().numpy(), a.dst_config)


def mel_pair(w: Waveform, src: MelConfig, dst: MelConfig) -> tuple[np.ndarray, np.ndarray]:
    ws = w if w.sample_rate_hz == src.sample_rate_hz else resample(w, src.sample_rate_hz)
    wd = w if w.sample_rate_hz == dst.sample_rate_hz else resample(w, dst.sample_rate_hz)
    return mel_spectrogram(ws, src).values, mel_spectrogram(wd, dst).values


def _pairs(records, src, dst, pairs):
    if pairs is not None:
        return pairs
    return [mel_pair(load_record(r), src, dst) for r in records]


def train_mel_adaptor(records: list[UtteranceRecord], src: MelConfig = DECODER_MEL, dst: MelConfig = SPK_MEL,
                      epochs: int = 20, seed: int = 0, batch_size: int = 16, lr: float = 2e-3,
                      crops_per_utt: int = 2, pairs: list | None = None) -> MelAdaptor:
    """Per-bin L1 regression of directly extracted destination mel from source mel."""
    if src == dst:
        raise ValueError("identical mel configs: use MelAdaptor.identity instead of training")
    if not records and not pairs:
        raise ValueError("empty manifest")
    pairs = _pairs(records, src, dst, pairs)
    with seeded(seed):
        model = MelAdaptor(src, dst)
    xs = np.concatenate([p[0] for p in pairs])
    ys = np.concatenate([p[1] for p in pairs])
    model.in_mean.copy_(torch.as_tensor(xs.mean(0)))
    model.in_std.copy_(torch.as_tensor(xs.std(0) + 1e-3))
    model.out_mean.copy_(torch.as_tensor(ys.mean(0)))
    model.out_std.copy_(torch.as_tensor(ys.std(0) + 1e-3))
    model.loss_history = []
    opt = torch.optim.Adam(model.net.parameters(), lr=lr)
    g = generator(seed + 1)
    crop = min(CROP_FRAMES, min(p[0].shape[0] for p in pairs))
    crop_out = model.n_out(crop)
    for epoch in range(epochs):
        order = [i for _ in range(crops_per_utt) for i in randperm(len(pairs), g)]
        total = 0.0
        for s in range(0, len(order), batch_size):
            xb, yb = [], []
            for i in order[s:s + batch_size]:
                x, y = pairs[i]
                start = randint(0, x.shape[0] - crop + 1, g)
                d0 = min(model.n_out(start), y.shape[0] - crop_out)
                xb.append(x[start:start + crop])
                yb.append(y[d0:d0 + crop_out])
            xt = torch.as_tensor(np.stack(xb), dtype=torch.float32)
            yt = torch.as_tensor(np.stack(yb), dtype=torch.float32)
            loss = F.l1_loss(model(xt), yt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(xb)
        model.loss_history.append(total / len(order))
        logger.info("adaptor epoch %d L1 %.4f", epoch, model.loss_history[-1])
    return freeze(model)


# ---------------------------------------------------------------------------
# analytic baseline


class BaselineAdaptor:
    """Frame-rate linear interpolation plus a mel-basis least-squares remap in the power domain.

    The remap is ``M_dst(f_src) @ pinv(M_src)``, i.e. destination triangles
    sampled on the source frequency grid applied to the least-squares
    spectrum behind the source mel. A scalar log offset absorbs window-energy
    differences and is fitted on training data.
    """

    def __init__(self, src: MelConfig = DECODER_MEL, dst: MelConfig = SPK_MEL, offset: float = 0.0):
        self.src_config, self.dst_config = src, dst
        self.ratio = src.hop_s / dst.hop_s
        freqs = np.fft.rfftfreq(src.n_fft, 1.0 / src.sample_rate_hz)
        self.remap = triangular_filters(dst, freqs) @ np.linalg.pinv(mel_filterbank(src))
        self.offset = offset

    def _raw(self, values: np.ndarray) -> np.ndarray:
        x = resample_frames(torch.as_tensor(values[None].copy()), int(round(values.shape[0] * self.ratio)),
                            self.ratio)[0].numpy()
        power = np.maximum(np.exp(x) @ self.remap.T, 1e-12)
        return np.log(power)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return np.maximum(self._raw(values) + self.offset, self.dst_config.log_floor)

    def fit(self, pairs) -> "BaselineAdaptor":
        res = np.concatenate([(y - self._raw(x)).ravel() for x, y in pairs])
        self.offset = float(np.median(res))
        return self


def fit_baseline(records, src: MelConfig = DECODER_MEL, dst: MelConfig = SPK_MEL, pairs=None) -> BaselineAdaptor:
    return BaselineAdaptor(src, dst).fit(_pairs(records, src, dst, pairs))


def adaptor_l1(fn, pairs) -> float:
    """Mean per-bin L1 of ``fn(src_values)`` against destination mel over all frames of ``pairs``."""
    err, n = 0.0, 0
    for x, y in pairs:
        pred = fn(x)
        t = min(pred.shape[0], y.shape[0])
        err += float(np.abs(pred[:t] - y[:t]).sum())
        n += t * y.shape[1]
    return err / n


def model_fn(a: MelAdaptor):
    return lambda x: adapt(MelSpectrogram(x, a.src_config), a).values
