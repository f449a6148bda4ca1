"""Face and audio encoders sharing a 256-dim voice-embedding space.

Both modalities are reduced to the same 9-dim voice-attribute measurement
(fundamental frequency plus within-group harmonic amplitude ratios) before a
linear projection head per modality maps them into the shared space.

The audio path measures the attributes directly from RVQ-decoded mel frames
with a harmonic-comb analyzer. The face path decodes the voice attributes
rendered into the portrait and then passes them through the very same
analyzer by synthesizing a short bank of reference utterances, so both
modalities live in one measurement space and retrieval generalizes to unseen
speakers instead of memorizing training identities. The projection heads and
the temperature are aligned with an InfoNCE objective over in-batch speaker
negatives plus a cross-modal alignment penalty.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentConfig
from .codec import (
    CodeGrid,
    Codebooks,
    MelConfig,
    mel_centers,
    rvq_encode,
    wave_to_frames,
)
from .data import (
    ManifestRecord,
    SceneSpec,
    SpeakerSpec,
    UtteranceStyle,
    load_face,
    load_wav,
    synth_utterance,
)
from .errors import ConfigError, InputError

EMBED_DIM = 256
ATTR_DIM = 9
CHECKPOINT_VERSION = 2

# code-grid length bounds, in frames at 50 frames/s
TRAIN_MIN_FRAMES = 150   # 3 s
TRAIN_MAX_FRAMES = 250   # 5 s
INFER_MIN_FRAMES = 25    # 0.5 s

# harmonic-comb analyzer
F0_MIN_HZ = 40.0
F0_MAX_HZ = 640.0
F0_STEP_HZ = 2.0
N_HARMONICS = 8
COMB_ACCEPT = 0.7        # lowest f0 candidate within this fraction of the best score

# face reference synthesis
REFERENCE_UTTERANCES = 12
REFERENCE_TEXTS = (
    "the quick brown fox jumps over the lazy dog",
    "pack my box with five dozen liquor jugs",
    "how vexingly quick daft zebras jump",
    "bright vixens jump dozy fowl quack",
)

ALIGN_WEIGHT = 2.0
WEIGHT_DECAY = 1e-4


@dataclass(frozen=True)
class VoiceEmbedding:
    vector: np.ndarray
    modality: str  # "face" | "audio"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (EMBED_DIM,):
            raise InputError(f"voice embedding must be {EMBED_DIM}-dim")
        if self.modality not in ("face", "audio"):
            raise InputError("modality must be 'face' or 'audio'")
        object.__setattr__(self, "vector", v)

    def cosine(self, other: "VoiceEmbedding") -> float:
        return float(np.dot(self.vector, other.vector))


@dataclass(frozen=True)
class ContrastiveConfig:
    tau_init: float = 0.07
    batch_size: int = 64
    lr: float = 1e-3
    steps: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.tau_init <= 0:
            raise InputError("tau_init must be positive")


class VoiceAttributeAnalyzer:
    """Harmonic-comb measurement of voice attributes on decoded mel frames.

    Per frame, the analyzer scores every f0 candidate by the summed root
    amplitude at its harmonics minus the same sum at the half-harmonic
    offsets, keeps the lowest candidate close to the best score, and reads
    the harmonic amplitudes there. Speaker-level pooling reduces a set of
    utterances to ``[f0 / 100, low-group ratios (4), high-group ratios (4)]``.
    """

    def __init__(self, entries: np.ndarray, mel_cfg: MelConfig):
        self.mel_cfg = mel_cfg
        self.entries = np.asarray(entries, dtype=np.float64)
        self.codebooks = Codebooks(self.entries)
        centers = mel_centers(mel_cfg)
        self.f0_grid = np.arange(F0_MIN_HZ, F0_MAX_HZ, F0_STEP_HZ)
        k = np.arange(1, N_HARMONICS + 1, dtype=np.float64)
        self._on = self._interp_table(centers, self.f0_grid[:, None] * k[None, :])
        self._off = self._interp_table(centers, self.f0_grid[:, None] * (k[None, :] + 0.5))

    @staticmethod
    def _interp_table(centers: np.ndarray, freqs: np.ndarray):
        idx = np.clip(np.searchsorted(centers, freqs), 1, len(centers) - 1)
        lo, hi = centers[idx - 1], centers[idx]
        w = np.clip((freqs - lo) / (hi - lo + 1e-9), 0.0, 1.0)
        return idx, w

    @staticmethod
    def _interp(frames: np.ndarray, table) -> np.ndarray:
        idx, w = table
        return frames[..., idx - 1] * (1.0 - w) + frames[..., idx] * w

    def decode_mel(self, codes: np.ndarray) -> np.ndarray:
        """Sum the codeword vectors of every level: codes L x T -> T x F log-mel."""
        L = self.entries.shape[0]
        return np.sum(self.entries[np.arange(L)[:, None], codes, :], axis=0)

    def frame_attrs(self, logmel: np.ndarray):
        """Per-frame (f0, harmonic amplitudes, comb confidence)."""
        m = np.exp(logmel)
        on_amps = self._interp(m, self._on)
        score = np.sqrt(on_amps).sum(-1) - np.sqrt(self._interp(m, self._off)).sum(-1)
        best = score.max(axis=1, keepdims=True)
        c = (score >= COMB_ACCEPT * best).argmax(axis=1)
        rows = np.arange(len(c))
        return self.f0_grid[c], on_amps[rows, c], score[rows, c]

    def pool(self, attr_list) -> np.ndarray:
        """Speaker-level attribute vector from per-utterance frame attributes.

        f0 comes from the steadiest utterances (smallest per-utterance IQR of
        the frame f0 track) so heavy pitch movement does not bias the
        speaker's base value; harmonic ratios are confidence-gated medians.
        """
        if not attr_list:
            raise InputError("need at least one utterance to pool")
        amps = np.concatenate([a[1] for a in attr_list])
        conf = np.concatenate([a[2] for a in attr_list])
        keep = conf > np.quantile(conf, 0.5)
        if not keep.any():
            keep = np.ones_like(keep)
        meds, iqrs = [], []
        for f0s, _, cnf in attr_list:
            good = cnf > np.quantile(cnf, 0.5)
            if not good.any():
                good = np.ones_like(good)
            f = f0s[good]
            meds.append(np.median(f))
            iqrs.append(np.subtract(*np.percentile(f, [75, 25])))
        order = np.argsort(iqrs)
        steady = max(1, len(attr_list) // 3)
        f0_est = float(np.median(np.asarray(meds)[order[:steady]]))
        low = amps[:, :4] / (amps[:, :4].sum(axis=1, keepdims=True) + 1e-12)
        high = amps[:, 4:] / (amps[:, 4:].sum(axis=1, keepdims=True) + 1e-12)
        return np.concatenate(
            [[f0_est / 100.0], np.median(low[keep], axis=0), np.median(high[keep], axis=0)]
        )

    def utterance_attrs(self, codes: np.ndarray):
        return self.frame_attrs(self.decode_mel(codes))

    def features(self, grids: list[np.ndarray]) -> np.ndarray:
        return self.pool([self.utterance_attrs(g) for g in grids])


def decode_face_attributes(img: np.ndarray) -> tuple[float, np.ndarray]:
    """Read (f0_base, timbre) back out of a rendered portrait.

    The background red level encodes the pitch position, the bar chart at the
    bottom encodes the timbre profile: bar heights carry the first four
    components and the gray bar values the last four.
    """
    n = img.shape[0]
    u = float(np.clip((np.median(img[: n // 10, :, 0]) - 0.15) / 0.70, 0.0, 1.0))
    bar_w = n // 4
    heights, values = [], []
    for i in range(4):
        block = img[:, i * bar_w:(i + 1) * bar_w, :]
        flat = (np.abs(block[:, :, 0] - block[:, :, 1])
                + np.abs(block[:, :, 1] - block[:, :, 2])) < 2e-2
        row_is_bar = flat.mean(axis=1) > 0.9
        h = 0
        for r in range(n - 1, -1, -1):
            if row_is_bar[r]:
                h += 1
            else:
                break
        heights.append((h / n - 0.08) / 0.22)
        values.append(float(np.median(block[n - h:, :].mean(-1)) - 0.1) / 0.8 if h else 0.5)
    timbre = np.clip(np.array(heights + values), 1e-3, None)
    return 80.0 + 320.0 * u, timbre / np.linalg.norm(timbre)


def reference_voice_features(
    f0_base: float,
    timbre: np.ndarray,
    analyzer: VoiceAttributeAnalyzer,
    n_utterances: int = REFERENCE_UTTERANCES,
) -> np.ndarray:
    """Measure decoded face attributes through the audio analysis chain.

    Synthesizes a small bank of reference utterances for the attributes and
    runs them through mel analysis, RVQ coding, and the harmonic-comb
    analyzer, so the result is directly comparable with corpus measurements.
    The style draws are seeded from the attributes: identical faces always
    produce identical features.
    """
    spk = SpeakerSpec(
        speaker_id="reference",
        f0_base=float(np.clip(f0_base, 80.0, 400.0)),
        f0_range=60.0,
        timbre=tuple(np.asarray(timbre, dtype=np.float64)),
        base_rate=10.0,
    )
    digest = zlib.crc32(np.round(np.concatenate([[f0_base], timbre]), 4).tobytes())
    rng = np.random.default_rng(digest)
    attr_list = []
    for i in range(n_utterances):
        style = UtteranceStyle(
            speaking_rate=float(rng.uniform(6.0, 20.0)),
            pitch_std_hz=float(rng.uniform(5.0, 130.0)),
            vibrato_hz=float(rng.uniform(3.5, 5.5)),
        )
        scene = SceneSpec(
            snr_db=float(rng.uniform(12.0, 30.0)),
            reflect_delay_ms=float(rng.uniform(5.0, 40.0)),
            reflect_gain=float(rng.uniform(0.1, 0.5)),
        )
        wave, _ = synth_utterance(spk, REFERENCE_TEXTS[i % len(REFERENCE_TEXTS)], scene, rng, style)
        frames = wave_to_frames(wave, analyzer.mel_cfg)
        grid = rvq_encode(frames, analyzer.codebooks)
        attr_list.append(analyzer.utterance_attrs(grid.codes))
    return analyzer.pool(attr_list)


class EncoderBundle(nn.Module):
    """Attribute trunks, per-modality projection heads, and the temperature."""

    def __init__(
        self,
        levels: int,
        codebook_size: int,
        tau_init: float = 0.07,
        image_size: int = 112,
        codebooks: Codebooks | None = None,
        mel_cfg: MelConfig = MelConfig(),
    ):
        super().__init__()
        if tau_init <= 0:
            raise InputError("tau must be positive")
        self.levels = levels
        self.codebook_size = codebook_size
        self.image_size = image_size
        self.mel_cfg = mel_cfg
        if codebooks is None:
            entries = np.zeros((levels, codebook_size, mel_cfg.n_mels))
        else:
            if codebooks.levels != levels or codebooks.size != codebook_size:
                raise ConfigError("codebook shape does not match the encoder config")
            entries = codebooks.entries
        self.register_buffer("code_tables", torch.tensor(entries, dtype=torch.float64))
        self.register_buffer("feat_mu", torch.zeros(ATTR_DIM, dtype=torch.float64))
        self.register_buffer("feat_sd", torch.ones(ATTR_DIM, dtype=torch.float64))
        self.face_head = nn.Linear(ATTR_DIM, EMBED_DIM)
        self.audio_head = nn.Linear(ATTR_DIM, EMBED_DIM)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))
        self._analyzer: VoiceAttributeAnalyzer | None = None
        self._face_cache: dict[int, np.ndarray] = {}

    @property
    def tau(self) -> float:
        return float(self.log_tau.detach().exp())

    @property
    def analyzer(self) -> VoiceAttributeAnalyzer:
        if self._analyzer is None:
            self._analyzer = VoiceAttributeAnalyzer(self.code_tables.numpy(), self.mel_cfg)
        return self._analyzer

    def embed_features(self, feats: torch.Tensor, modality: str) -> torch.Tensor:
        head = self.face_head if modality == "face" else self.audio_head
        x = (feats - self.feat_mu) / self.feat_sd
        return F.normalize(head(x.to(torch.float32)), dim=-1)

    def face_features(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (self.image_size, self.image_size, 3):
            raise InputError(f"face image must be {self.image_size}x{self.image_size}x3")
        key = zlib.crc32(np.round(img, 4).tobytes())
        if key not in self._face_cache:
            f0_base, timbre = decode_face_attributes(img)
            self._face_cache[key] = reference_voice_features(f0_base, timbre, self.analyzer)
        return self._face_cache[key]

    def audio_features(self, codes: CodeGrid) -> np.ndarray:
        if codes.levels != self.levels:
            raise InputError("code grid level count does not match the encoder")
        return self.analyzer.features([codes.codes])

    @torch.no_grad()
    def encode_face(self, img: np.ndarray) -> VoiceEmbedding:
        feats = self.face_features(img)
        z = self.embed_features(torch.as_tensor(feats)[None], "face")[0]
        return VoiceEmbedding(z.double().numpy(), "face")

    @torch.no_grad()
    def encode_audio(self, codes: CodeGrid, training: bool = False) -> VoiceEmbedding:
        if training:
            if not TRAIN_MIN_FRAMES <= codes.length <= TRAIN_MAX_FRAMES:
                raise InputError(
                    f"training segments must be {TRAIN_MIN_FRAMES}-{TRAIN_MAX_FRAMES} frames"
                )
        elif codes.length < INFER_MIN_FRAMES:
            raise InputError(f"audio shorter than {INFER_MIN_FRAMES} frames")
        feats = self.audio_features(codes)
        z = self.embed_features(torch.as_tensor(feats)[None], "audio")[0]
        return VoiceEmbedding(z.double().numpy(), "audio")


def info_nce(z_face: torch.Tensor, z_audio: torch.Tensor, tau) -> torch.Tensor:
    """InfoNCE over speaker-aligned rows with in-batch negatives.

    loss = -(1/N) sum_l log softmax_n( cos(z_face^l, z_audio^n) / tau )[l]
    """
    if z_face.ndim != 2 or z_face.shape != z_audio.shape:
        raise InputError("embedding matrices must be N x D and aligned")
    if z_face.shape[0] == 0:
        raise InputError("empty batch")
    tau_t = tau if isinstance(tau, torch.Tensor) else torch.as_tensor(float(tau))
    if float(tau_t.detach()) <= 0:
        raise InputError("temperature must be positive")
    sims = F.normalize(z_face, dim=-1) @ F.normalize(z_audio, dim=-1).T
    logits = sims / tau_t
    targets = torch.arange(z_face.shape[0], device=logits.device)
    return F.cross_entropy(logits, targets)


def _tile_crop(codes: np.ndarray, rng: np.random.Generator,
               lo: int = TRAIN_MIN_FRAMES, hi: int = TRAIN_MAX_FRAMES) -> np.ndarray:
    """Random [lo, hi]-frame segment; short utterances are tiled to length."""
    want = int(rng.integers(lo, hi + 1))
    T = codes.shape[1]
    if T < want:
        reps = -(-want // T)
        codes = np.tile(codes, (1, reps))
        T = codes.shape[1]
    start = int(rng.integers(0, T - want + 1))
    return codes[:, start:start + want]


@dataclass
class SpeakerPool:
    """Per-speaker faces and precomputed utterance code grids."""
    faces: dict[str, np.ndarray]
    codes: dict[str, list[np.ndarray]]

    @property
    def speaker_ids(self) -> list[str]:
        return sorted(self.faces)


def build_speaker_pool(records: list[ManifestRecord], root: Path, cb: Codebooks,
                       mel_cfg: MelConfig = MelConfig()) -> SpeakerPool:
    """Load faces and encode every audio-visual utterance to codes, grouped by speaker."""
    faces: dict[str, np.ndarray] = {}
    codes: dict[str, list[np.ndarray]] = {}
    for rec in records:
        if rec.source != "audio_visual":
            continue
        if rec.speaker_id not in faces:
            faces[rec.speaker_id] = load_face(Path(root) / rec.face_path)
            codes[rec.speaker_id] = []
        frames = wave_to_frames(load_wav(Path(root) / rec.audio_path), mel_cfg)
        codes[rec.speaker_id].append(rvq_encode(frames, cb).codes)
    return SpeakerPool(faces, codes)


def pretrain_contrastive(
    pool: SpeakerPool,
    cfg: ContrastiveConfig,
    bundle: EncoderBundle,
    style_pool: list[np.ndarray] | None = None,
    augment_cfg: AugmentConfig = AugmentConfig(),
) -> dict:
    """Align the projection heads on (face, random utterance subset) pairs.

    Audio-side samples pool the attributes of a random utterance subset per
    speaker so the heads see realistic measurement noise. Portraits are
    consumed clean: the face trunk decodes the rendered attributes, so style
    augmentation would only corrupt its input (the augmentation pipeline is
    exercised on the corpus side instead). Each batch holds at most one
    sample per speaker. Returns a report with the loss curve.
    """
    del style_pool, augment_cfg
    ids = pool.speaker_ids
    if len(ids) < 2:
        raise InputError("need at least 2 speakers")
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate speakers in one batch pool")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    analyzer = bundle.analyzer

    utt_attrs = {
        sid: [analyzer.utterance_attrs(g) for g in pool.codes[sid]] for sid in ids
    }
    face_feats = {sid: bundle.face_features(pool.faces[sid]) for sid in ids}

    ref = np.stack([analyzer.pool(utt_attrs[sid][:5]) for sid in ids])
    with torch.no_grad():
        bundle.feat_mu.copy_(torch.tensor(ref.mean(axis=0), dtype=torch.float64))
        bundle.feat_sd.copy_(torch.tensor(ref.std(axis=0) + 1e-6, dtype=torch.float64))

    trainable = list(bundle.face_head.parameters()) + list(bundle.audio_head.parameters())
    trainable.append(bundle.log_tau)
    opt = torch.optim.Adam(trainable, lr=cfg.lr, weight_decay=WEIGHT_DECAY)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1))
    losses: list[float] = []
    bundle.train()
    for _ in range(cfg.steps):
        batch_ids = list(ids)
        rng.shuffle(batch_ids)
        batch_ids = batch_ids[: min(cfg.batch_size, len(ids))]
        ff, af = [], []
        for sid in batch_ids:
            ff.append(face_feats[sid])
            attrs = utt_attrs[sid]
            n_sub = int(rng.integers(3, 8)) if len(attrs) >= 3 else len(attrs)
            picks = rng.choice(len(attrs), size=min(n_sub, len(attrs)), replace=False)
            af.append(analyzer.pool([attrs[int(j)] for j in picks]))
        zf = bundle.embed_features(torch.as_tensor(np.stack(ff)), "face")
        za = bundle.embed_features(torch.as_tensor(np.stack(af)), "audio")
        loss = info_nce(zf, za, bundle.log_tau.exp())
        loss = loss + ALIGN_WEIGHT * ((zf - za) ** 2).sum(dim=-1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.detach()))
    bundle.eval()
    return {
        "steps": cfg.steps,
        "loss_curve": losses,
        "initial_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "tau": bundle.tau,
    }


def retrieval_eval(bundle: EncoderBundle, pairs: list[tuple[np.ndarray, CodeGrid]]) -> float:
    """Top-1 face -> audio retrieval accuracy over one pair per speaker."""
    if len(pairs) < 2:
        raise InputError("need at least 2 held-out speakers")
    zf = np.stack([bundle.encode_face(face).vector for face, _ in pairs])
    za = np.stack([bundle.encode_audio(codes).vector for _, codes in pairs])
    sims = zf @ za.T
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(len(pairs))))


def save_encoders(path: Path, bundle: EncoderBundle, meta: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "levels": bundle.levels,
            "codebook_size": bundle.codebook_size,
            "image_size": bundle.image_size,
            "mel_cfg": {
                "sample_rate": bundle.mel_cfg.sample_rate,
                "n_fft": bundle.mel_cfg.n_fft,
                "hop": bundle.mel_cfg.hop,
                "n_mels": bundle.mel_cfg.n_mels,
                "fmin": bundle.mel_cfg.fmin,
                "fmax": bundle.mel_cfg.fmax,
            },
            "state": bundle.state_dict(),
            # measured face features are deterministic per portrait; carrying the
            # cache forward saves re-running reference synthesis downstream
            "face_cache": {int(k): torch.tensor(v) for k, v in bundle._face_cache.items()},
            "meta": meta or {},
        },
        path,
    )


def load_encoders(path: Path) -> EncoderBundle:
    blob = torch.load(path, weights_only=True)
    if blob["format_version"] != CHECKPOINT_VERSION:
        raise InputError("unsupported encoder checkpoint version")
    mel_cfg = MelConfig(**blob["mel_cfg"])
    bundle = EncoderBundle(
        blob["levels"], blob["codebook_size"],
        image_size=blob["image_size"], mel_cfg=mel_cfg,
    )
    bundle.load_state_dict(blob["state"])
    bundle._analyzer = None
    bundle._face_cache = {
        int(k): v.numpy() for k, v in blob.get("face_cache", {}).items()
    }
    bundle.eval()
    return bundle
