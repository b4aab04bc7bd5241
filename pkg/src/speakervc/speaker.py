"""Speaker embedding network, its classification pretraining, and the cosine speaker loss."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .audio import SPK_MEL, MelConfig, Waveform, mel_spectrogram, resample
from .data import UtteranceRecord, load_record
from .nn_utils import freeze, generator, randint, randperm, seeded

logger = logging.getLogger(__name__)

EMBED_DIM = 64
CROP_S = 2.0


class SpeakerEncoder(nn.Module):
    """Three dilated time-delay layers, mean+std pooling, linear bottleneck.

    Layer normalisation is per example (GroupNorm with one group), so an
    embedding never depends on what else is in the batch.
    """

    def __init__(self, n_mels: int = SPK_MEL.n_mels, channels: int = 128, embed_dim: int = EMBED_DIM,
                 n_speakers: int = 0, mel_config: MelConfig = SPK_MEL):
        super().__init__()
        self.mel_config = mel_config
        self.frames = nn.Sequential(
            nn.Conv1d(n_mels, channels, 5, dilation=1, padding=2), nn.ReLU(), nn.GroupNorm(1, channels),
            nn.Conv1d(channels, channels, 3, dilation=2, padding=2), nn.ReLU(), nn.GroupNorm(1, channels),
            nn.Conv1d(channels, channels, 3, dilation=3, padding=3), nn.ReLU(), nn.GroupNorm(1, channels),
        )
        self.bottleneck = nn.Linear(2 * channels, embed_dim)
        self.head = nn.Linear(embed_dim, n_speakers, bias=False) if n_speakers else None
        self.speakers: list[str] = []
        self.accuracy_history: list[float] = []
        self.loss_history: list[float] = []

    @property
    def embed_dim(self) -> int:
        return self.bottleneck.out_features

    def forward(self, logmel: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels) log-mel -> (B, embed_dim) unnormalised embeddings."""
        # loudest frame's total energy -> 0 nats, then re-floor: the floor becomes relative,
        # so a gain change leaves the input untouched
        ref = torch.logsumexp(logmel, dim=2, keepdim=True).amax(dim=1, keepdim=True)
        floor = self.mel_config.log_floor
        x = torch.clamp(logmel - ref, min=floor) / -floor + 0.5
        h = self.frames(x.transpose(1, 2))
        stats = torch.cat([h.mean(dim=2), torch.sqrt(h.var(dim=2, unbiased=False) + 1e-5)], dim=1)
        return self.bottleneck(stats)

    def logits(self, logmel: torch.Tensor, scale: float = 30.0) -> torch.Tensor:
        e = F.normalize(self(logmel), dim=1)
        return scale * e @ F.normalize(self.head.weight, dim=1).T


SpeakerEncoderModel = SpeakerEncoder


def speaker_logmel(w: Waveform, cfg: MelConfig = SPK_MEL) -> np.ndarray:
    if w.sample_rate_hz != cfg.sample_rate_hz:
        w = resample(w, cfg.sample_rate_hz)
    return mel_spectrogram(w, cfg).values


def _crop_batch(mels: list[np.ndarray], idx: list[int], crop: int, g: torch.Generator) -> torch.Tensor:
    """Random fixed-length crops; utterances shorter than the crop are wrapped around."""
    out = []
    for i in idx:
        m = mels[i]
        if m.shape[0] < crop:
            m = np.tile(m, (crop // m.shape[0] + 1, 1))
        start = randint(0, m.shape[0] - crop + 1, g)
        out.append(m[start:start + crop])
    return torch.as_tensor(np.stack(out), dtype=torch.float32)


def train_speaker_encoder(records: list[UtteranceRecord], epochs: int = 30, seed: int = 0,
                          batch_size: int = 32, lr: float = 2e-3, crop_s: float = CROP_S,
                          crops_per_utt: int = 4, embed_dim: int = EMBED_DIM, mel_config: MelConfig = SPK_MEL,
                          mels: dict[str, np.ndarray] | None = None) -> SpeakerEncoder:
    """Speaker classification on random crops; the head is kept for diagnostics only.

    An epoch draws ``crops_per_utt`` random crops of every utterance. The
    per-epoch accuracy in ``accuracy_history`` is measured on those crops.
    """
    speakers = sorted({r.speaker_id for r in records})
    if len(speakers) < 2:
        raise ValueError("speaker encoder training needs at least 2 speakers")
    counts = {s: sum(r.speaker_id == s for r in records) for s in speakers}
    if min(counts.values()) < 2:
        raise ValueError("every speaker needs at least 2 utterances")
    feats = [mels[r.utt_id] if mels is not None else speaker_logmel(load_record(r), mel_config) for r in records]
    labels = torch.as_tensor([speakers.index(r.speaker_id) for r in records])
    with seeded(seed):
        model = SpeakerEncoder(mel_config.n_mels, embed_dim=embed_dim, n_speakers=len(speakers),
                               mel_config=mel_config)
    model.speakers = speakers
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = generator(seed + 1)
    crop = int(round(crop_s / mel_config.hop_s))
    for epoch in range(epochs):
        model.train()
        order = [i for _ in range(crops_per_utt) for i in randperm(len(records), g)]
        total, correct = 0.0, 0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            x = _crop_batch(feats, idx, crop, g)
            logits = model.logits(x)
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == labels[idx]).sum())
        model.loss_history.append(total / len(order))
        model.accuracy_history.append(correct / len(order))
        logger.info("speaker epoch %d loss %.4f acc %.3f", epoch, model.loss_history[-1], model.accuracy_history[-1])
    return freeze(model)


@torch.no_grad()
def classification_accuracy(model: SpeakerEncoder, records: list[UtteranceRecord],
                            mels: dict[str, np.ndarray] | None = None) -> float:
    """Full-utterance accuracy of the training head on records of known speakers."""
    if model.head is None:
        raise ValueError("model has no classification head")
    hits = 0
    for r in records:
        m = mels[r.utt_id] if mels is not None else speaker_logmel(load_record(r), model.mel_config)
        pred = int(model.logits(torch.as_tensor(m[None].copy(), dtype=torch.float32)).argmax(1))
        hits += model.speakers[pred] == r.speaker_id
    return hits / len(records)


@torch.no_grad()
def embed_logmel(logmel: np.ndarray, model: SpeakerEncoder) -> np.ndarray:
    e = model(torch.as_tensor(logmel[None].copy(), dtype=torch.float32))[0].double().numpy()
    return e / np.linalg.norm(e)


def embed(w: Waveform, model: SpeakerEncoder) -> np.ndarray:
    """Unit-norm speaker embedding of a waveform (at least 0.5 s)."""
    if w.duration_s < 0.5:
        raise ValueError(f"need at least 0.5 s of audio for an embedding, got {w.duration_s:.3f} s")
    return embed_logmel(speaker_logmel(w, model.mel_config), model)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# speaker loss


def cosine_speaker_loss(X, Y) -> tuple[float, np.ndarray]:
    """Mean cosine distance between paired embeddings and its gradient w.r.t. ``Y``.

    loss = 1/N * sum_i (1 - X_i . Y_i / (|X_i| |Y_i|))
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape != Y.shape or X.shape[0] < 1:
        raise ValueError(f"batch size mismatch: {X.shape} vs {Y.shape}")
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise ValueError("zero-norm embedding in speaker loss")
    n = X.shape[0]
    dots = np.einsum("ij,ij->i", X, Y)
    cos = dots / (nx * ny)
    loss = float(np.mean(1.0 - cos))
    xhat = X / nx[:, None]
    grad = -(xhat / ny[:, None] - (dots / (nx * ny ** 3))[:, None] * Y) / n
    return loss, grad


def speaker_loss_torch(X: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of :func:`cosine_speaker_loss` used during decoder training."""
    if X.shape != Y.shape:
        raise ValueError(f"batch size mismatch: {tuple(X.shape)} vs {tuple(Y.shape)}")
    return torch.mean(1.0 - F.cosine_similarity(X, Y, dim=1, eps=1e-12))


# ---------------------------------------------------------------------------
# embedding export


def save_embeddings(path, vectors) -> None:
    v = np.atleast_2d(np.asarray(vectors, dtype="<f4"))
    with open(path, "wb") as f:
        f.write(f"{v.shape[1]}\n".encode())
        f.write(v.tobytes())


def load_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header, _, body = raw.partition(b"\n")
    d = int(header)
    return np.frombuffer(body, dtype="<f4").reshape(-1, d).astype(np.float64)
