"""Residual vector quantization codec over log-mel frames.

The codec has three layers:

* a log-mel analysis/synthesis front end (``wave_to_frames`` / ``frames_to_wave``),
* a trainable multi-level residual quantizer (``train_rvq`` / ``rvq_encode`` /
  ``rvq_decode``) whose level-0 codeword of every level is pinned to the zero
  vector, and
* the delay-pattern interleaving used by the autoregressive speech LM
  (``apply_delay`` / ``revert_delay``), where code level ``l`` is emitted ``l``
  steps after level 0.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError

PAD_DELAY = -1

CODEBOOK_FORMAT_VERSION = 1
CODEGRID_HEADER = struct.Struct("<HIH")  # L (u16), T (u32), K (u16) -> 8 bytes


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 320  # 50 frames/s at 16 kHz
    n_mels: int = 40
    fmin: float = 40.0
    fmax: float = 8000.0
    log_eps: float = 1e-5
    griffin_lim_iters: int = 32

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def log_floor(self) -> float:
        return float(np.log(self.log_eps))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InputError("waveform must be 1-D")
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AudioFrames:
    frames: np.ndarray  # T x F
    frame_rate: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InputError("frames must be a T x F matrix with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise InputError("frames contain non-finite values")


@dataclass
class Codebooks:
    entries: np.ndarray  # L x K x F

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 3:
            raise InputError("codebooks must be L x K x F")
        L, K, _ = self.entries.shape
        if L < 1 or K < 2:
            raise InputError("need L >= 1 and K >= 2")
        if not np.allclose(self.entries[:, 0, :], 0.0):
            raise InputError("codeword 0 of every level must be the zero vector")

    @property
    def levels(self) -> int:
        return self.entries.shape[0]

    @property
    def size(self) -> int:
        return self.entries.shape[1]

    @property
    def dim(self) -> int:
        return self.entries.shape[2]


@dataclass
class CodeGrid:
    codes: np.ndarray  # L x T ints in [0, K)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise InputError("code grid must be L x T")
        if np.any(self.codes < 0):
            raise InputError("code grid entries must be non-negative")

    @property
    def levels(self) -> int:
        return self.codes.shape[0]

    @property
    def length(self) -> int:
        return self.codes.shape[1]


@dataclass
class DelayedGrid:
    codes: np.ndarray  # L x (T + L - 1), PAD_DELAY marks shifted-out cells

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise InputError("delayed grid must be 2-D")
        L = self.codes.shape[0]
        if self.codes.shape[1] < L:
            raise InputError("delayed grid is too short for its level count")
        for l in range(L):
            row = self.codes[l]
            lead = L - 1 - l
            if np.any(row[:l] != PAD_DELAY) or np.any(row[len(row) - lead:] != PAD_DELAY):
                raise InputError(f"row {l} pad layout violates the delay pattern")
            if np.any(row[l:len(row) - lead] == PAD_DELAY):
                raise InputError(f"row {l} has interior padding")


@dataclass(frozen=True)
class RVQTrainConfig:
    iters: int = 25
    seed: int = 0
    max_points: int = 100_000  # deterministic subsample cap for k-means


# ---------------------------------------------------------------------------
# mel front end
# ---------------------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft // 2 + 1)."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-9)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-9)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def _stft(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    window = np.hanning(cfg.n_fft)
    pad = cfg.n_fft // 2
    xp = np.pad(x, pad, mode="reflect") if len(x) > 1 else np.pad(x, pad)
    n_frames = 1 + (len(xp) - cfg.n_fft) // cfg.hop
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * window, axis=1)


def _istft(spec: np.ndarray, cfg: MelConfig, out_len: int) -> np.ndarray:
    window = np.hanning(cfg.n_fft)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * window
    n_frames = frames.shape[0]
    total = cfg.n_fft + cfg.hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = window ** 2
    for t in range(n_frames):
        s = t * cfg.hop
        out[s:s + cfg.n_fft] += frames[t]
        norm[s:s + cfg.n_fft] += w2
    out = out / np.maximum(norm, 1e-10)
    pad = cfg.n_fft // 2
    return out[pad:pad + out_len]


def wave_to_frames(w: Waveform, cfg: MelConfig = MelConfig()) -> AudioFrames:
    """Log-mel analysis at a fixed hop; T = ceil(len / hop) frames (centered)."""
    if len(w.samples) == 0:
        raise InputError("empty waveform")
    if w.sample_rate != cfg.sample_rate:
        raise InputError(f"sample rate {w.sample_rate} != configured {cfg.sample_rate}")
    spec = _stft(w.samples, cfg)
    power = np.abs(spec) ** 2
    mel = power @ mel_filterbank(cfg).T
    return AudioFrames(np.log(mel + cfg.log_eps), cfg.frame_rate)


def mel_centers(cfg: MelConfig) -> np.ndarray:
    pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return _mel_to_hz(pts)[1:-1]


def _mel_power_to_spectrum(mel: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Reassignment inversion: each mel band's power becomes a spectral line at
    the energy centroid of the band and its neighbors.

    For a single sinusoid inside one filter-overlap region the centroid is the
    exact line frequency, so tonal content survives the round trip with pitch
    fidelity far beyond the mel grid spacing.
    """
    centers = mel_centers(cfg)
    n_bins = cfg.n_fft // 2 + 1
    T = mel.shape[0]
    padded = np.pad(mel, ((0, 0), (1, 1)))
    cpad = np.concatenate([[centers[0]], centers, [centers[-1]]])
    num = (
        padded[:, :-2] * cpad[:-2]
        + padded[:, 1:-1] * cpad[1:-1]
        + padded[:, 2:] * cpad[2:]
    )
    den = padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]
    fhat = np.where(den > 1e-12, num / np.maximum(den, 1e-12), centers[None, :])
    pos = np.clip(fhat / (cfg.sample_rate / cfg.n_fft), 0, n_bins - 2)
    k = np.floor(pos).astype(int)
    frac = pos - k
    power = np.zeros((T, n_bins))
    rows = np.arange(T)
    for i in range(cfg.n_mels):
        np.add.at(power, (rows, k[:, i]), mel[:, i] * (1.0 - frac[:, i]))
        np.add.at(power, (rows, k[:, i] + 1), mel[:, i] * frac[:, i])
    return power


def frames_to_wave(f: AudioFrames, cfg: MelConfig = MelConfig()) -> Waveform:
    """Invert log-mel frames: reassignment spectrum + Griffin-Lim phase recovery."""
    if abs(f.frame_rate - cfg.frame_rate) > 1e-6:
        raise InputError("frame rate does not match config")
    mel = np.clip(np.exp(f.frames) - cfg.log_eps, 0.0, None)
    mag = np.sqrt(_mel_power_to_spectrum(mel, cfg))
    out_len = f.frames.shape[0] * cfg.hop
    spec = mag.astype(complex)  # zero-phase init, deterministic
    x = _istft(spec, cfg, out_len)
    for _ in range(cfg.griffin_lim_iters):
        phase = np.angle(_stft(x, cfg))
        x = _istft(mag[: phase.shape[0]] * np.exp(1j * phase[: mag.shape[0]]), cfg, out_len)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return Waveform(x, cfg.sample_rate)


# ---------------------------------------------------------------------------
# residual vector quantization
# ---------------------------------------------------------------------------

def _nearest(points: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Index of nearest codeword per point; ties break toward the lowest index."""
    d = (
        np.sum(points ** 2, axis=1, keepdims=True)
        - 2.0 * points @ codewords.T
        + np.sum(codewords ** 2, axis=1)[None, :]
    )
    return np.argmin(d, axis=1)


def _farthest_point_init(points: np.ndarray, k_free: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++-style farthest-point seeding; the pinned zero vector counts as chosen."""
    F = points.shape[1]
    d2 = np.sum(points ** 2, axis=1)  # distance to the pinned zero codeword
    out = []
    for _ in range(k_free):
        if np.max(d2) <= 0:
            out.append(points[rng.integers(len(points))].copy())
            continue
        i = int(np.argmax(d2))
        out.append(points[i].copy())
        d2 = np.minimum(d2, np.sum((points - points[i]) ** 2, axis=1))
    return np.stack(out) if out else np.zeros((0, F))


def train_rvq(corpus, L: int, K: int, config: RVQTrainConfig = RVQTrainConfig()) -> Codebooks:
    """Fit per-level codebooks by k-means on the residuals of previous levels.

    Codeword 0 of every level is pinned to zero and excluded from centroid
    updates, which guarantees residual norms never grow with depth.
    """
    frames = [af.frames for af in corpus]
    if not frames:
        raise InputError("empty corpus")
    data = np.concatenate(frames, axis=0)
    if not np.all(np.isfinite(data)):
        raise InputError("corpus contains non-finite frames")
    rng = np.random.default_rng(config.seed)
    if len(data) > config.max_points:
        sel = rng.choice(len(data), size=config.max_points, replace=False)
        data = data[np.sort(sel)]
    F = data.shape[1]
    residual = data.copy()
    books = np.zeros((L, K, F))
    for l in range(L):
        free = _farthest_point_init(residual, K - 1, rng)
        cb = np.concatenate([np.zeros((1, F)), free], axis=0)
        for _ in range(config.iters):
            assign = _nearest(residual, cb)
            for j in range(1, K):
                mask = assign == j
                if np.any(mask):
                    cb[j] = residual[mask].mean(axis=0)
        books[l] = cb
        residual = residual - cb[_nearest(residual, cb)]
    return Codebooks(books)


def rvq_encode(frames: AudioFrames, cb: Codebooks) -> CodeGrid:
    """Greedy residual quantization: each level quantizes what previous levels left."""
    if frames.frames.shape[1] != cb.dim:
        raise InputError(f"frame dim {frames.frames.shape[1]} != codebook dim {cb.dim}")
    residual = frames.frames.copy()
    codes = np.zeros((cb.levels, frames.frames.shape[0]), dtype=np.int64)
    for l in range(cb.levels):
        idx = _nearest(residual, cb.entries[l])
        codes[l] = idx
        residual -= cb.entries[l][idx]
    return CodeGrid(codes)


def rvq_decode(codes: CodeGrid, cb: Codebooks, frame_rate: float = 50.0) -> AudioFrames:
    if codes.levels != cb.levels:
        raise InputError("level count mismatch")
    if np.any(codes.codes >= cb.size):
        raise InputError("code index out of range")
    recon = np.zeros((codes.length, cb.dim))
    for l in range(cb.levels):
        recon += cb.entries[l][codes.codes[l]]
    return AudioFrames(recon, frame_rate)


def apply_delay(grid: CodeGrid) -> DelayedGrid:
    """Shift row l right by l; vacated cells become PAD_DELAY."""
    L, T = grid.codes.shape
    out = np.full((L, T + L - 1), PAD_DELAY, dtype=np.int64)
    for l in range(L):
        out[l, l:l + T] = grid.codes[l]
    return DelayedGrid(out)


def revert_delay(d: DelayedGrid) -> CodeGrid:
    L = d.codes.shape[0]
    T = d.codes.shape[1] - (L - 1)
    out = np.zeros((L, T), dtype=np.int64)
    for l in range(L):
        out[l] = d.codes[l, l:l + T]
    return CodeGrid(out)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_codebooks(path, cb: Codebooks) -> None:
    L, K, F = cb.entries.shape
    np.savez(path, version=CODEBOOK_FORMAT_VERSION, L=L, K=K, F=F, entries=cb.entries)


def load_codebooks(path) -> Codebooks:
    with np.load(path) as z:
        if int(z["version"]) != CODEBOOK_FORMAT_VERSION:
            raise InputError("unsupported codebook file version")
        return Codebooks(z["entries"])


def codegrid_to_bytes(grid: CodeGrid, K: int) -> bytes:
    L, T = grid.codes.shape
    if np.any(grid.codes >= K):
        raise InputError("codes exceed stated codebook size")
    body = grid.codes.astype("<u2").tobytes()
    return CODEGRID_HEADER.pack(L, T, K) + body


def codegrid_from_bytes(blob: bytes) -> CodeGrid:
    if len(blob) < CODEGRID_HEADER.size:
        raise InputError("code grid blob is too short for its header")
    L, T, K = CODEGRID_HEADER.unpack(blob[: CODEGRID_HEADER.size])
    body = blob[CODEGRID_HEADER.size:]
    if len(body) != 2 * L * T:
        raise InputError("code grid payload size mismatch")
    codes = np.frombuffer(body, dtype="<u2").astype(np.int64)
    if codes.size != L * T:
        raise InputError("code grid payload size mismatch")
    codes = codes.reshape(L, T)
    if np.any(codes >= K):
        raise InputError("code grid contains out-of-range indices")
    return CodeGrid(codes)
