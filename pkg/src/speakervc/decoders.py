"""Recurrent mel decoders, prosody targets, acoustic style encoder and staged training.

Two variants share one skeleton (unit encoder LSTM, prosody predictors, decoder
LSTM, frame-synchronous output). An L1-trained decoder smooths away the
harmonic ripple of voiced frames, and phase reconstruction from a smooth mel
sounds whispered, so a fixed harmonic comb at the frame's f0, scaled by a
learned per-bin gain, is added to the output:

* ``fastspeech``: the speaker embedding is concatenated to every unit frame.
* ``speakervc``: a style vector pooled from reference mel, optionally joined by
  the speaker embedding, modulates decoder features with a learned scale and
  shift (before and after the decoder LSTM).

Training runs in stages: 1 reconstruction with teacher-forced prosody,
2 prosody predictors only, 3 reconstruction plus the cosine speaker loss on
embeddings of adapted decoder output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .adaptor import MelAdaptor
from .audio import DECODER_MEL, FLOOR_TOL, VOICED_THRESHOLD, MelSpectrogram, Waveform, frame_pitch, \
    mel_filterbank, mel_spectrogram, resample
from .data import UtteranceRecord, load_record
from .nn_utils import freeze, generator, randint, randperm, state_hash
from .speaker import SpeakerEncoder, speaker_logmel, speaker_loss_torch
from .units import UnitCodebook, UnitProjection, extract_frontend, extract_soft_units

logger = logging.getLogger(__name__)

VARIANTS = ("fastspeech", "speakervc")
STYLE_DIM = 32
HIDDEN = 128
LAYERS = 2
CROP_MAX_S = 4.0
MIN_STYLE_FRAMES = 10
LOG_F0_REF = 5.0          # ~148 Hz, centres the pitch input
HARMONIC_WIDTH_HZ = 18.75  # 0.8 of an FFT bin
HARMONIC_FLOOR = 1e-3


class StageOrderError(RuntimeError):
    pass


class FrozenComponentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# prosody targets


@dataclass(frozen=True)
class ProsodyTargets:
    pitch: np.ndarray     # log-f0, 0 on unvoiced frames
    energy: np.ndarray    # log of the mel frame sum

    def __post_init__(self):
        if self.pitch.shape != self.energy.shape:
            raise ValueError("pitch and energy lengths differ")

    @property
    def n_frames(self) -> int:
        return self.pitch.shape[0]

    @property
    def voiced(self) -> np.ndarray:
        return self.pitch > 0


def mel_energy(values: np.ndarray, floor: float = DECODER_MEL.log_floor) -> np.ndarray:
    live = values > floor + FLOOR_TOL
    total = np.where(live, np.exp(values), 0.0).sum(axis=1)
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(total), floor)


def extract_prosody_targets(w: Waveform, mel: MelSpectrogram | None = None) -> ProsodyTargets:
    """Log-f0 (autocorrelation of the LPC residual, 60-400 Hz) and log energy, on the decoder frame grid."""
    cfg = DECODER_MEL
    if w.sample_rate_hz != cfg.sample_rate_hz:
        w = resample(w, cfg.sample_rate_hz)
    if len(w) < 2 * cfg.hop_length:
        raise ValueError(f"input too short for prosody extraction: {len(w)} samples")
    mel = mel if mel is not None else mel_spectrogram(w, cfg)
    # analysis at 16 kHz with a 10 ms hop yields the same frame centres
    w16 = resample(w, 16000)
    f0, scores, active = frame_pitch(w16, int(round(cfg.hop_s * 16000)))
    n = mel.n_frames
    f0, scores, active = f0[:n], scores[:n], active[:n]
    voiced = (scores >= VOICED_THRESHOLD) & active & (f0 > 0)
    pitch = np.where(voiced, np.log(np.maximum(f0, 1e-9)), 0.0)
    return ProsodyTargets(pitch, mel_energy(mel.values, cfg.log_floor))


# ---------------------------------------------------------------------------
# model


class StyleEncoder(nn.Module):
    """Two convolutions then a temporal mean and a linear map to the style vector."""

    def __init__(self, n_mels: int = DECODER_MEL.n_mels, channels: int = 128, style_dim: int = STYLE_DIM):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv1d(n_mels, channels, 5, padding=2), nn.ReLU(),
            nn.Conv1d(channels, channels, 5, padding=2), nn.ReLU(),
        )
        self.out = nn.Linear(channels, style_dim)

    def forward(self, mel_norm: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels) standardised mel -> (B, style_dim)."""
        return self.out(self.convs(mel_norm.transpose(1, 2)).mean(dim=2))


class FiLM(nn.Module):
    def __init__(self, cond_dim: int, hidden: int):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * hidden)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.proj(cond)[:, None, :].chunk(2, dim=-1)
        return h * (1 + gamma) + beta


class DecoderModel(nn.Module):
    def __init__(self, variant: str = "speakervc", k: int = 64, spk_dim: int = 64, use_spk: bool = True,
                 hidden: int = HIDDEN, layers: int = LAYERS, style_dim: int = STYLE_DIM,
                 n_mels: int = DECODER_MEL.n_mels):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown decoder variant {variant!r}")
        if variant == "fastspeech" and not use_spk:
            raise ValueError("the fastspeech variant is conditioned on the speaker embedding")
        self.variant = variant
        self.use_spk = use_spk
        self.k, self.spk_dim, self.style_dim, self.hidden, self.layers = k, spk_dim, style_dim, hidden, layers
        self.n_mels = n_mels
        self.stages_done: list[int] = []
        self.history: dict[int, list[dict]] = {}
        if variant == "fastspeech":
            cond_dim, enc_in = spk_dim, k + spk_dim
            self.style = None
        else:
            cond_dim, enc_in = style_dim + (spk_dim if use_spk else 0), k
            self.style = StyleEncoder(n_mels, style_dim=style_dim)
            self.film_in = FiLM(cond_dim, hidden)
            self.film_out = FiLM(cond_dim, hidden)
        self.cond_dim = cond_dim
        self.encoder = nn.LSTM(enc_in, hidden, layers, batch_first=True)
        self.predictor = nn.LSTM(hidden + cond_dim, 64, 1, batch_first=True)
        self.predictor_out = nn.Linear(64, 3)       # log-f0, voicing logit, energy
        self.prosody_in = nn.Linear(3, hidden)
        self.decoder = nn.LSTM(hidden, hidden, layers, batch_first=True)
        self.mel_out = nn.Linear(hidden, n_mels)
        self.harmonic_gain = nn.Linear(hidden, n_mels)
        nn.init.zeros_(self.harmonic_gain.weight)
        nn.init.ones_(self.harmonic_gain.bias)
        fb = torch.tensor(np.array(mel_filterbank(DECODER_MEL)), dtype=torch.float32)
        self.register_buffer("fb", fb, persistent=False)
        self.register_buffer("fb_flat", torch.log(fb.sum(1)), persistent=False)
        self.register_buffer("bin_hz", torch.arange(fb.shape[1], dtype=torch.float32)
                             * (DECODER_MEL.sample_rate_hz / DECODER_MEL.n_fft), persistent=False)
        for name, dim in (("unit", k), ("mel", n_mels), ("energy", 1)):
            self.register_buffer(f"{name}_mean", torch.zeros(dim))
            self.register_buffer(f"{name}_std", torch.ones(dim))
        self.register_buffer("normalised", torch.zeros(1))

    # -- groups of parameters trained in each stage
    def predictor_parameters(self):
        return list(self.predictor.parameters()) + list(self.predictor_out.parameters())

    def main_parameters(self):
        pred = {id(p) for p in self.predictor_parameters()}
        return [p for p in self.parameters() if id(p) not in pred]

    def set_normalisation(self, items: list["DecoderItem"]) -> None:
        units = np.concatenate([it.units for it in items])
        mels = np.concatenate([it.mel for it in items])
        energy = np.concatenate([it.energy for it in items])
        self.unit_mean.copy_(torch.as_tensor(units.mean(0)))
        self.unit_std.copy_(torch.as_tensor(units.std(0) + 1e-3))
        self.mel_mean.copy_(torch.as_tensor(mels.mean(0)))
        self.mel_std.copy_(torch.as_tensor(mels.std(0) + 1e-3))
        self.energy_mean.fill_(float(energy.mean()))
        self.energy_std.fill_(float(energy.std() + 1e-3))
        self.normalised.fill_(1.0)

    # -- conditioning
    def style_vector(self, mel: torch.Tensor) -> torch.Tensor:
        if self.style is None:
            raise ValueError("the fastspeech variant has no style encoder")
        if mel.shape[1] < MIN_STYLE_FRAMES:
            raise ValueError(f"style encoder needs at least {MIN_STYLE_FRAMES} frames, got {mel.shape[1]}")
        return self.style((mel - self.mel_mean) / self.mel_std)

    def condition(self, spk: torch.Tensor | None, style: torch.Tensor | None) -> torch.Tensor:
        if self.variant == "fastspeech":
            if spk is None or style is not None:
                raise ValueError("fastspeech needs a speaker embedding and no style vector")
            return F.normalize(spk, dim=-1)
        if style is None:
            raise ValueError("speakervc needs a style vector")
        if self.use_spk != (spk is not None):
            raise ValueError("speaker embedding presence does not match the model's configuration")
        return torch.cat([style, F.normalize(spk, dim=-1)], dim=-1) if self.use_spk else style

    # -- forward pieces
    def encode(self, units: torch.Tensor, cond: torch.Tensor, state=None):
        x = (units - self.unit_mean) / self.unit_std
        if self.variant == "fastspeech":
            x = torch.cat([x, cond[:, None, :].expand(-1, x.shape[1], -1)], dim=-1)
        return self.encoder(x, state)

    def predict_prosody(self, enc: torch.Tensor, cond: torch.Tensor, state=None):
        x = torch.cat([enc.detach(), cond[:, None, :].expand(-1, enc.shape[1], -1)], dim=-1)
        h, state = self.predictor(x, state)
        return self.predictor_out(h), state

    def prosody_features(self, pitch: torch.Tensor, energy: torch.Tensor) -> torch.Tensor:
        voiced = (pitch > 0).to(pitch.dtype)
        return torch.stack([voiced, (pitch - LOG_F0_REF) * voiced,
                            (energy - self.energy_mean) / self.energy_std], dim=-1)

    def predicted_prosody_features(self, raw: torch.Tensor) -> torch.Tensor:
        voiced = (raw[..., 1] > 0).to(raw.dtype)
        return torch.stack([voiced, raw[..., 0] * voiced, raw[..., 2]], dim=-1)

    def harmonic_template(self, prosody: torch.Tensor) -> torch.Tensor:
        """Log-mel ripple of a harmonic comb at each voiced frame's f0, relative to a flat spectrum."""
        voiced = prosody[..., 0]
        f0 = torch.exp(prosody[..., 1] + LOG_F0_REF)[..., None]
        d = self.bin_hz / f0
        d = (d - torch.round(d)) * f0
        comb = torch.exp(-0.5 * (d / HARMONIC_WIDTH_HZ) ** 2) + HARMONIC_FLOOR
        return (torch.log(comb @ self.fb.T) - self.fb_flat) * voiced[..., None]

    def decode(self, enc: torch.Tensor, prosody: torch.Tensor, cond: torch.Tensor, state=None):
        template = self.harmonic_template(prosody)
        h = enc + self.prosody_in(prosody)
        if self.variant == "speakervc":
            h = self.film_in(h, cond)
        h, state = self.decoder(h, state)
        if self.variant == "speakervc":
            h = self.film_out(h, cond)
        mel = self.mel_out(h) * self.mel_std + self.mel_mean + self.harmonic_gain(h) * template
        return mel, state

    def forward(self, units: torch.Tensor, cond: torch.Tensor, pitch: torch.Tensor | None = None,
                energy: torch.Tensor | None = None) -> torch.Tensor:
        enc, _ = self.encode(units, cond)
        if pitch is None:
            raw, _ = self.predict_prosody(enc, cond)
            pros = self.predicted_prosody_features(raw)
        else:
            pros = self.prosody_features(pitch, energy)
        mel, _ = self.decode(enc, pros, cond)
        return mel.clamp_min(DECODER_MEL.log_floor)


def as_batch(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32)[None].copy())


@torch.no_grad()
def acoustic_style_encode(m: MelSpectrogram, model: DecoderModel) -> np.ndarray:
    if m.config != DECODER_MEL:
        raise ValueError("style encoder expects decoder-parameterised mel")
    return model.style_vector(as_batch(m.values))[0].double().numpy()


@torch.no_grad()
def decoder_forward(units, spk: np.ndarray | None, style: np.ndarray | None, model: DecoderModel,
                    prosody: ProsodyTargets | None = None) -> MelSpectrogram:
    """Frame-synchronous inference: one mel frame per unit frame."""
    logits = units.logits if hasattr(units, "logits") else np.asarray(units)
    if logits.shape[1] != model.k:
        raise ValueError(f"unit dimension {logits.shape[1]} does not match model k={model.k}")
    cond = model.condition(None if spk is None else as_batch(spk), None if style is None else as_batch(style))
    pitch = energy = None
    if prosody is not None:
        if prosody.n_frames != logits.shape[0]:
            raise ValueError(f"frame-count mismatch: {logits.shape[0]} unit frames, {prosody.n_frames} prosody frames")
        pitch, energy = as_batch(prosody.pitch), as_batch(prosody.energy)
    model.eval()
    mel = model(as_batch(logits), cond, pitch, energy)[0]
    return MelSpectrogram(mel.double().numpy(), DECODER_MEL)


# ---------------------------------------------------------------------------
# training data


@dataclass
class DecoderItem:
    utt_id: str
    speaker_id: str
    units: np.ndarray                 # (T, k) soft-unit logits of the voiced utterance
    mel: np.ndarray                   # (T, n_mels) decoder mel
    pitch: np.ndarray
    energy: np.ndarray
    spk: np.ndarray                   # speaker embedding of the utterance
    whisper_units: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def prepare_items(records: list[UtteranceRecord], projection: UnitProjection, spk_encoder: SpeakerEncoder,
                  whisper_records: list[UtteranceRecord] | None = None,
                  codebook: UnitCodebook | None = None) -> list[DecoderItem]:
    """Precompute units, mel, prosody targets and speaker embeddings for decoder training."""
    from .speaker import embed_logmel

    siblings = {}
    for r in whisper_records or []:
        siblings[r.utt_id.removesuffix("_whisp")] = r
    items = []
    for r in records:
        w = load_record(r)
        w24 = w if w.sample_rate_hz == DECODER_MEL.sample_rate_hz else resample(w, DECODER_MEL.sample_rate_hz)
        mel = mel_spectrogram(w24, DECODER_MEL)
        units = extract_soft_units(extract_frontend(w24), projection, codebook).logits
        pros = extract_prosody_targets(w24, mel)
        spk = embed_logmel(speaker_logmel(w, spk_encoder.mel_config), spk_encoder)
        wu = None
        if r.utt_id in siblings:
            wu = extract_soft_units(extract_frontend(load_record(siblings[r.utt_id])), projection, codebook).logits
            if wu.shape != units.shape:
                raise ValueError(f"{r.utt_id}: whispered sibling has {wu.shape[0]} frames, expected {units.shape[0]}")
        items.append(DecoderItem(r.utt_id, r.speaker_id, units.astype(np.float32), mel.values.astype(np.float32),
                                 pros.pitch.astype(np.float32), pros.energy.astype(np.float32),
                                 spk.astype(np.float32), None if wu is None else wu.astype(np.float32)))
    return items


@dataclass
class TrainPlan:
    stage: int
    epochs: int
    seed: int = 0
    sl_weight: float = 1.0
    crop_max_s: float = CROP_MAX_S
    batch_size: int = 16
    lr: float = 2e-3
    whisper_prob: float = 0.5

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.crop_max_s:
            raise ValueError("crop_max_s must be positive")


@dataclass
class Batch:
    units: torch.Tensor
    mel: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    spk: torch.Tensor
    mask: torch.Tensor
    lengths: list[int] = field(default_factory=list)


def _sample_batch(items: list[DecoderItem], idx: list[int], crop: int, whisper_prob: float,
                  g: torch.Generator) -> Batch:
    chunks = []
    for i in idx:
        it = items[i]
        length = min(crop, it.n_frames)
        start = randint(0, it.n_frames - length + 1, g)
        whisper = float(torch.rand(1, generator=g)) < whisper_prob
        src = it.whisper_units if whisper and it.whisper_units is not None else it.units
        sl = slice(start, start + length)
        chunks.append((src[sl], it.mel[sl], it.pitch[sl], it.energy[sl], length))
    t = max(c[4] for c in chunks)

    def pad(a):
        return np.pad(a, [(0, t - a.shape[0])] + [(0, 0)] * (a.ndim - 1))

    mask = np.zeros((len(chunks), t), dtype=np.float32)
    for j, c in enumerate(chunks):
        mask[j, :c[4]] = 1.0
    return Batch(
        units=torch.as_tensor(np.stack([pad(c[0]) for c in chunks])),
        mel=torch.as_tensor(np.stack([pad(c[1]) for c in chunks])),
        pitch=torch.as_tensor(np.stack([pad(c[2]) for c in chunks])),
        energy=torch.as_tensor(np.stack([pad(c[3]) for c in chunks])),
        spk=torch.as_tensor(np.stack([items[i].spk for i in idx])),
        mask=torch.as_tensor(mask),
        lengths=[c[4] for c in chunks],
    )


def _masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask[..., None] if pred.dim() == 3 else mask
    width = pred.shape[-1] if pred.dim() == 3 else 1
    return ((pred - target).abs() * m).sum() / (m.sum() * width)


def _styles(model: DecoderModel, mel: torch.Tensor, lengths: list[int]) -> torch.Tensor | None:
    if model.style is None:
        return None
    # per item, so padding never leaks into the pooled statistics
    return torch.cat([model.style_vector(mel[j:j + 1, :n]) for j, n in enumerate(lengths)])


def _embeddings(mel: torch.Tensor, lengths: list[int], adaptor: MelAdaptor, spk: SpeakerEncoder) -> torch.Tensor:
    return torch.cat([spk(adaptor(mel[j:j + 1, :n])) for j, n in enumerate(lengths)])


def _check_frozen(module: nn.Module, name: str) -> None:
    if any(p.requires_grad for p in module.parameters()) or module.training:
        raise FrozenComponentError(f"{name} is not frozen")


def train_stage(model: DecoderModel, plan: TrainPlan, items: list[DecoderItem],
                adaptor: MelAdaptor | None = None, spk_encoder: SpeakerEncoder | None = None,
                on_step=None) -> DecoderModel:
    """Run one training stage in place and return the model.

    ``on_step``, when given, receives each step's loss terms as floats.

    A stage may only run once every earlier stage has completed at least once.
    Stages 1 and 3 draw identical random streams, so stage 3 with
    ``sl_weight = 0`` continues exactly like more stage-1 training.
    """
    missing = [s for s in range(1, plan.stage) if s not in model.stages_done]
    if missing:
        raise StageOrderError(f"stage order violation: stage {plan.stage} requires stage {missing[0]}")
    if not items:
        raise ValueError("empty training corpus")
    if plan.stage == 3 and (adaptor is None or spk_encoder is None):
        raise ValueError("stage 3 needs the mel adaptor and the speaker encoder")
    hashes = {}
    for name, comp in (("adaptor", adaptor), ("speaker encoder", spk_encoder)):
        if comp is not None:
            _check_frozen(comp, name)
            hashes[name] = state_hash(comp)
    if not bool(model.normalised):
        model.set_normalisation(items)

    params = model.predictor_parameters() if plan.stage == 2 else model.main_parameters()
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=plan.lr)
    g = generator(plan.seed)
    crop = int(round(plan.crop_max_s / DECODER_MEL.hop_s))
    history = model.history.setdefault(plan.stage, [])
    model.train()
    for epoch in range(plan.epochs):
        order = randperm(len(items), g)
        sums: dict[str, float] = {}
        for s in range(0, len(order), plan.batch_size):
            idx = order[s:s + plan.batch_size]
            b = _sample_batch(items, idx, crop, plan.whisper_prob, g)
            if plan.stage == 2:
                terms = _prosody_loss(model, b)
            else:
                terms = _reconstruction_loss(model, b, plan, adaptor, spk_encoder)
            opt.zero_grad()
            terms["loss"].backward()
            opt.step()
            step = {key: float(v.detach()) for key, v in terms.items()}
            if on_step is not None:
                on_step(step)
            for key, v in step.items():
                sums[key] = sums.get(key, 0.0) + v * len(idx)
        row = {key: v / len(items) for key, v in sums.items()}
        history.append(row)
        logger.info("decoder %s stage %d epoch %d %s", model.variant, plan.stage, epoch, row)
    freeze(model)
    for name, comp in (("adaptor", adaptor), ("speaker encoder", spk_encoder)):
        if comp is not None and state_hash(comp) != hashes[name]:
            raise FrozenComponentError(f"{name} parameters changed during decoder training")
    if plan.stage not in model.stages_done:
        model.stages_done.append(plan.stage)
    return model


def _reconstruction_loss(model, b: Batch, plan: TrainPlan, adaptor, spk_encoder) -> dict:
    style = _styles(model, b.mel, b.lengths)
    cond = model.condition(b.spk if model.variant == "fastspeech" or model.use_spk else None, style)
    enc, _ = model.encode(b.units, cond)
    mel, _ = model.decode(enc, model.prosody_features(b.pitch, b.energy), cond)
    mel = mel.clamp_min(DECODER_MEL.log_floor)
    l1 = _masked_l1(mel, b.mel, b.mask)
    if plan.stage == 1:
        return {"loss": l1, "l1": l1, "sl": torch.zeros(())}
    # speaker loss on the reconstruction and on conversions toward the next item's conditioning
    rec = speaker_loss_torch(b.spk, _embeddings(mel, b.lengths, adaptor, spk_encoder))
    roll = torch.roll(torch.arange(len(b.lengths)), -1)
    cond_conv = cond[roll]
    enc_conv, _ = model.encode(b.units, cond_conv)
    with torch.no_grad():
        raw, _ = model.predict_prosody(enc_conv, cond_conv)
    mel_conv, _ = model.decode(enc_conv, model.predicted_prosody_features(raw), cond_conv)
    mel_conv = mel_conv.clamp_min(DECODER_MEL.log_floor)
    conv = speaker_loss_torch(b.spk[roll], _embeddings(mel_conv, b.lengths, adaptor, spk_encoder))
    sl = 0.5 * (rec + conv)
    # summed in float64 so the reported total decomposes exactly; gradients are unchanged
    return {"loss": l1.double() + plan.sl_weight * sl.double(), "l1": l1, "sl": sl}


def _prosody_loss(model, b: Batch) -> dict:
    with torch.no_grad():
        style = _styles(model, b.mel, b.lengths)
        cond = model.condition(b.spk if model.variant == "fastspeech" or model.use_spk else None, style)
        enc, _ = model.encode(b.units, cond)
    raw, _ = model.predict_prosody(enc, cond)
    voiced = (b.pitch > 0).float() * b.mask
    pitch_l1 = ((raw[..., 0] - (b.pitch - LOG_F0_REF)).abs() * voiced).sum() / voiced.sum().clamp_min(1.0)
    energy_l1 = _masked_l1(raw[..., 2], (b.energy - model.energy_mean) / model.energy_std, b.mask)
    vuv = (F.binary_cross_entropy_with_logits(raw[..., 1], (b.pitch > 0).float(), reduction="none")
           * b.mask).sum() / b.mask.sum()
    return {"loss": pitch_l1 + energy_l1 + vuv, "pitch": pitch_l1, "energy": energy_l1, "vuv": vuv}


# ---------------------------------------------------------------------------
# conversion


@dataclass
class VCSystem:
    """Every trained component needed for conversion."""

    codebook: UnitCodebook
    projection: UnitProjection
    spk_encoder: SpeakerEncoder
    adaptor: MelAdaptor
    decoder: DecoderModel

    def __post_init__(self):
        for name in ("codebook", "projection", "spk_encoder", "adaptor", "decoder"):
            if getattr(self, name) is None:
                raise ValueError(f"missing model component: {name}")


def reference_conditioning(reference: Waveform, system: VCSystem) -> tuple[np.ndarray | None, np.ndarray | None]:
    from .speaker import embed

    if reference.duration_s < 0.5:
        raise ValueError(f"reference must be at least 0.5 s, got {reference.duration_s:.3f} s")
    dec = system.decoder
    spk = embed(reference, system.spk_encoder) if dec.variant == "fastspeech" or dec.use_spk else None
    style = None
    if dec.variant == "speakervc":
        ref24 = reference if reference.sample_rate_hz == DECODER_MEL.sample_rate_hz \
            else resample(reference, DECODER_MEL.sample_rate_hz)
        style = acoustic_style_encode(mel_spectrogram(ref24, DECODER_MEL), dec)
    return spk, style


def convert_mel(source: Waveform, reference: Waveform, system: VCSystem) -> MelSpectrogram:
    if source.duration_s < 1.0:
        raise ValueError(f"source must be at least 1 s, got {source.duration_s:.3f} s")
    src = source if source.sample_rate_hz == DECODER_MEL.sample_rate_hz \
        else resample(source, DECODER_MEL.sample_rate_hz)
    units = extract_soft_units(extract_frontend(src), system.projection, system.codebook)
    spk, style = reference_conditioning(reference, system)
    return decoder_forward(units, spk, style, system.decoder)


def convert(source: Waveform, reference: Waveform, system: VCSystem, gl_iterations: int = 32) -> Waveform:
    """Voice conversion of ``source`` toward the speaker of ``reference``; output at the decoder rate."""
    from .audio import invert_mel

    mel = convert_mel(source, reference, system)
    out = invert_mel(mel, iterations=gl_iterations)
    n = int(round(source.duration_s * DECODER_MEL.sample_rate_hz))
    return Waveform(out.samples[:n], out.sample_rate_hz)
