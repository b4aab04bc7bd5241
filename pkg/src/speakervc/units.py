"""Content representation: cepstral frontend, k-means unit codebook and soft-unit projection."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.fft import dct

from .audio import DECODER_MEL, MelConfig, Waveform, mel_spectrogram, resample
from .nn_utils import generator, randperm, seeded

N_CEPS = 13
LIFTER = 22
DELTA_WIDTH = 2
FRONTEND_DIM = 2 * N_CEPS
DEFAULT_K = 64


@dataclass(frozen=True)
class FrontendConfig:
    mel: MelConfig = DECODER_MEL
    n_ceps: int = N_CEPS
    lifter: int = LIFTER
    delta_width: int = DELTA_WIDTH

    def digest(self) -> str:
        payload = json.dumps({"mel": self.mel.to_dict(), "n_ceps": self.n_ceps, "lifter": self.lifter,
                              "delta_width": self.delta_width}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


FRONTEND = FrontendConfig()


@dataclass(frozen=True)
class FrontendFeatures:
    values: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("frontend features must be a finite frames x dim matrix")
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def cepstra_from_logmel(logmel: np.ndarray, cfg: FrontendConfig = FRONTEND) -> np.ndarray:
    """Liftered cepstra c1..c_n (c0, the level term, is dropped)."""
    c = dct(logmel, type=2, norm="ortho", axis=1)[:, 1:cfg.n_ceps + 1]
    n = np.arange(1, cfg.n_ceps + 1)
    return c * (1.0 + (cfg.lifter / 2.0) * np.sin(np.pi * n / cfg.lifter))


def deltas(x: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas with edge replication."""
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    n = x.shape[0]
    num = np.zeros_like(x)
    for k in range(1, width + 1):
        num += k * (padded[width + k:width + k + n] - padded[width - k:width - k + n])
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def features_from_logmel(logmel: np.ndarray, cfg: FrontendConfig = FRONTEND) -> np.ndarray:
    c = cepstra_from_logmel(logmel, cfg)
    return np.concatenate([c, deltas(c, cfg.delta_width)], axis=1)


def extract_frontend(w: Waveform, cfg: FrontendConfig = FRONTEND) -> FrontendFeatures:
    if w.sample_rate_hz != cfg.mel.sample_rate_hz:
        w = resample(w, cfg.mel.sample_rate_hz)
    if len(w) < 2 * cfg.mel.hop_length:
        raise ValueError(f"need at least two hops of audio, got {len(w)} samples")
    logmel = mel_spectrogram(w, cfg.mel).values
    return FrontendFeatures(features_from_logmel(logmel, cfg), 1.0 / cfg.mel.hop_s)


# ---------------------------------------------------------------------------
# k-means


@dataclass(frozen=True)
class UnitCodebook:
    centroids: np.ndarray
    inertia_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("codebook needs k >= 2 centroids")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite centroids")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise ValueError("codebook contains identical centroids")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_distances(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        d = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", d, d)
    return out


def _nearest(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_distances(x, c)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(x.shape[0]), idx]


def _nearest_fast(x: np.ndarray, c: np.ndarray, x_sq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """BLAS distance expansion for the Lloyd loop; exact errors are recomputed for the winners."""
    d = x_sq[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    idx = np.argmin(d, axis=1)
    diff = x - c[idx]
    return idx, np.einsum("ij,ij->i", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.einsum("ij,ij->i", x - centers[0], x - centers[0])
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError(f"fewer than k={k} distinct points")
        i = int(rng.choice(n, p=d2 / total))
        centers.append(x[i])
        diff = x - x[i]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return np.array(centers)


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _stack(features) -> np.ndarray:
    if isinstance(features, FrontendFeatures):
        features = [features]
    arrays = [f.values if isinstance(f, FrontendFeatures) else np.asarray(f, dtype=np.float64) for f in features]
    return np.concatenate(arrays, axis=0) if arrays else np.zeros((0, FRONTEND_DIM))


def fit_kmeans(features, k: int = DEFAULT_K, seed: int = 0, max_iter: int = 100,
               tol: float = 1e-6) -> UnitCodebook:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the largest centroid move drops below ``tol`` or after ``max_iter``
    iterations. Empty clusters are re-seeded at the point with the largest
    current error, which never increases inertia.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    x = _stack(features)
    if x.shape[0] < 10 * k:
        raise ValueError(f"insufficient frames: {x.shape[0]} < 10*k = {10 * k}")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    x_sq = np.einsum("ij,ij->i", x, x)
    idx, d = _nearest_fast(x, c, x_sq)
    history = [float(d.sum())]
    for _ in range(max_iter):
        new = np.empty_like(c)
        counts = np.bincount(idx, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, idx, x)
        for j in range(k):
            if counts[j] > 0:
                new[j] = sums[j] / counts[j]
            else:
                far = int(np.argmax(d))
                new[j] = x[far]
                d[far] = 0.0
        move = float(np.max(np.linalg.norm(new - c, axis=1)))
        c = new
        idx, d = _nearest_fast(x, c, x_sq)
        history.append(float(d.sum()))
        if move < tol:
            break
    # stored as float32 in checkpoints; round now so reloaded codebooks assign identically
    return UnitCodebook(_f32(c), tuple(history))


def inertia(features, cb: UnitCodebook) -> float:
    x = _stack(features)
    return float(_nearest(x, cb.centroids)[1].sum())


def assign_units(f, cb: UnitCodebook) -> np.ndarray:
    """Nearest centroid by squared Euclidean distance; ties go to the lowest index."""
    x = f.values if isinstance(f, FrontendFeatures) else np.asarray(f, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise ValueError(f"dimension mismatch: features {x.shape}, codebook dim {cb.dim}")
    return _nearest(x, cb.centroids)[0]


# ---------------------------------------------------------------------------
# soft units


@dataclass(frozen=True)
class UnitProjection:
    """Linear map features -> k logits: ``logits = x @ weight.T + bias``."""

    weight: np.ndarray
    bias: np.ndarray
    frontend_digest: str = FRONTEND.digest()
    loss_history: tuple = field(default=(), compare=False)
    accuracy_history: tuple = field(default=(), compare=False)

    @property
    def k(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: features dim {x.shape[1]}, projection dim {self.dim}")
        return x @ self.weight.T + self.bias


@dataclass(frozen=True)
class SoftUnits:
    logits: np.ndarray
    discrete: np.ndarray

    def __post_init__(self):
        if self.logits.shape[0] == 0:
            raise ValueError("soft units need at least one frame")
        if self.discrete.shape[0] != self.logits.shape[0]:
            raise ValueError("logits and discrete units disagree on frame count")

    @property
    def n_frames(self) -> int:
        return self.logits.shape[0]

    @property
    def k(self) -> int:
        return self.logits.shape[1]


def train_unit_projection(features, units, epochs: int = 20, seed: int = 0, k: int | None = None,
                          batch_size: int = 256, lr: float = 1e-2,
                          frontend_digest: str = FRONTEND.digest()) -> UnitProjection:
    """Cross-entropy training of a single linear layer onto the discrete units.

    Features are standardised internally for conditioning; the scaling is folded
    into the returned weights, so the projection stays one affine map.
    """
    x = _stack(features)
    y = np.concatenate([np.asarray(u) for u in units]) if not isinstance(units, np.ndarray) else units
    if x.shape[0] == 0:
        raise ValueError("empty training data")
    if y.shape[0] != x.shape[0]:
        raise ValueError("features and units disagree on frame count")
    k = int(k if k is not None else y.max() + 1)
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-8
    xt = torch.as_tensor((x - mu) / sd, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.long)
    with seeded(seed):
        layer = torch.nn.Linear(x.shape[1], k)
    opt = torch.optim.Adam(layer.parameters(), lr=lr)
    g = generator(seed + 1)
    losses, accs = [], []
    for _ in range(epochs):
        order = torch.as_tensor(randperm(x.shape[0], g))
        total, correct = 0.0, 0
        for s in range(0, x.shape[0], batch_size):
            b = order[s:s + batch_size]
            logits = layer(xt[b])
            loss = torch.nn.functional.cross_entropy(logits, yt[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * b.shape[0]
            correct += int((logits.argmax(1) == yt[b]).sum())
        losses.append(total / x.shape[0])
        accs.append(correct / x.shape[0])
    w = layer.weight.detach().double().numpy() / sd[None, :]
    b = layer.bias.detach().double().numpy() - w @ mu
    return UnitProjection(_f32(w), _f32(b), frontend_digest, tuple(losses), tuple(accs))


def extract_soft_units(f: FrontendFeatures, proj: UnitProjection, cb: UnitCodebook | None = None) -> SoftUnits:
    x = f.values if isinstance(f, FrontendFeatures) else np.asarray(f, dtype=np.float64)
    logits = proj(x)
    discrete = assign_units(x, cb) if cb is not None else np.argmax(logits, axis=1)
    return SoftUnits(logits, discrete)
