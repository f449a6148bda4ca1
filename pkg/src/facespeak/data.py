"""Synthetic correlated face/voice corpus and manifest I/O.

Each speaker is a harmonic voice (base pitch + 8-harmonic timbre profile) paired
with a procedurally rendered 112x112 portrait whose colors and geometry are
smooth functions of the voice parameters, so the face-to-voice mapping is
learnable and analytically checkable. Scenes add a single-reflection room
response and white noise at a known SNR, keeping exact ground truth for every
metric.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

from .codec import Waveform
from .conditioning import BinEdges, SpeechAttributes, attributes_to_text
from .errors import ConfigError, DataError, InputError

SCHEMA_VERSION = 1
FACE_SIZE = 112
SAMPLE_RATE = 16000
FRAME_RATE = 50.0

_WORDS = (
    "time way year work life day world hand part child eye place case fact "
    "group point number house water room mother area money story month lot "
    "right study book job word business issue side kind head far house light "
    "power hour game line end member law car city name team minute idea body"
).split()


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: str
    f0_base: float          # Hz, in [80, 400]
    f0_range: float         # Hz, speaker's typical pitch-swing scale
    timbre: tuple[float, ...]  # 8 harmonic amplitudes, unit norm
    base_rate: float        # phonemes / s

    def __post_init__(self):
        if not 80.0 <= self.f0_base <= 400.0:
            raise InputError("f0_base outside [80, 400] Hz")
        if len(self.timbre) != 8:
            raise InputError("timbre must have 8 components")


@dataclass(frozen=True)
class SceneSpec:
    snr_db: float
    reflect_delay_ms: float
    reflect_gain: float
    public_speech: bool = False

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise InputError("snr_db must be finite")
        if self.reflect_delay_ms < 0:
            raise InputError("reflection delay must be >= 0")


@dataclass(frozen=True)
class UtteranceStyle:
    speaking_rate: float    # phonemes / s
    pitch_std_hz: float     # target std of the f0 contour
    vibrato_hz: float = 4.5


@dataclass
class ManifestRecord:
    schema_version: int
    utt_id: str
    source: str             # "audio_visual" | "audio_only"
    speaker_id: str
    input_text: str
    description: str
    audio_path: str
    face_path: str | None
    speaker: dict
    scene: dict
    phoneme_count: int
    duration: float
    speaking_rate: float
    pitch_std_hz: float
    snr_db: float
    c50_db: float
    synth_seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        obj = json.loads(line)
        rec = cls(**obj)
        if rec.schema_version != SCHEMA_VERSION:
            raise DataError(f"schema version {rec.schema_version} != {SCHEMA_VERSION}")
        if rec.source not in ("audio_visual", "audio_only"):
            raise DataError(f"unknown source {rec.source!r}")
        if rec.source == "audio_visual" and not rec.face_path:
            raise DataError("audio_visual record is missing its face path")
        return rec

    def speaker_spec(self) -> SpeakerSpec:
        return SpeakerSpec(
            speaker_id=self.speaker["speaker_id"],
            f0_base=self.speaker["f0_base"],
            f0_range=self.speaker["f0_range"],
            timbre=tuple(self.speaker["timbre"]),
            base_rate=self.speaker["base_rate"],
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(**self.scene)


@dataclass(frozen=True)
class CorpusConfig:
    root_seed: int = 2024
    train_speakers: int = 64
    val_speakers: int = 16
    test_speakers: int = 32
    train_av_speakers: int = 44   # remainder of train is audio-only
    val_av_speakers: int = 11
    utterances_per_speaker: int = 20
    duration_range: tuple[float, float] = (2.0, 6.0)
    phoneme_range: tuple[int, int] = (14, 44)
    rate_range: tuple[float, float] = (6.0, 20.0)
    pitch_std_range: tuple[float, float] = (5.0, 130.0)
    av_snr_range: tuple[float, float] = (12.0, 30.0)
    ao_snr_range: tuple[float, float] = (40.0, 100.0)
    style_pool_size: int = 8


# ---------------------------------------------------------------------------
# speaker + face
# ---------------------------------------------------------------------------

def make_speaker(seed: int) -> tuple[SpeakerSpec, np.ndarray]:
    """Deterministic speaker spec plus rendered portrait.

    The portrait encodes f0_base in the background red channel and the timbre
    profile in the ellipse geometry/color and the bar chart at the bottom, so a
    face encoder can recover the voice parameters. f0_range and base_rate are
    deliberately NOT rendered: pace and tone stay controllable by description
    wording alone.
    """
    rng = np.random.default_rng(seed)
    f0_base = 80.0 + 320.0 * rng.random()
    timbre_raw = 0.15 + rng.random(8)
    timbre = tuple((timbre_raw / np.linalg.norm(timbre_raw)).tolist())
    f0_range = 20.0 + 120.0 * rng.random()
    base_rate = 7.0 + 10.0 * rng.random()
    spec = SpeakerSpec(
        speaker_id=f"spk{seed:06d}",
        f0_base=f0_base,
        f0_range=f0_range,
        timbre=timbre,
        base_rate=base_rate,
    )
    return spec, render_face(spec)


def render_face(spec: SpeakerSpec) -> np.ndarray:
    u = (spec.f0_base - 80.0) / 320.0
    t = np.asarray(spec.timbre)
    n = FACE_SIZE
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    img = np.zeros((n, n, 3))
    img[:, :, 0] = 0.15 + 0.70 * u
    img[:, :, 1] = 0.20 + 0.50 * t[0] + 0.15 * yy
    img[:, :, 2] = 0.20 + 0.50 * t[1] + 0.15 * xx
    # central ellipse: radius and color track timbre
    cx, cy = 0.5 + 0.12 * (t[2] - 0.35), 0.42 + 0.12 * (t[3] - 0.35)
    rx, ry = 0.18 + 0.18 * t[4], 0.22 + 0.16 * t[5]
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    ellipse_color = np.array([0.25 + 0.6 * u, 0.3 + 0.6 * t[6], 0.3 + 0.6 * t[7]])
    img[mask] = ellipse_color
    # bar chart along the bottom: first four timbre components
    bar_w = n // 4
    for i in range(4):
        h = int((0.08 + 0.22 * t[i]) * n)
        img[n - h:, i * bar_w:(i + 1) * bar_w, :] = 0.1 + 0.8 * t[i + 4]
    return np.clip(img, 0.0, 1.0)


def make_style_pool(n: int, seed: int = 99) -> list[np.ndarray]:
    """Procedural stand-ins for painting/photograph style images."""
    rng = np.random.default_rng(seed)
    pool = []
    size = FACE_SIZE
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    for _ in range(n):
        base = rng.random(3)
        tilt = rng.standard_normal(3) * 0.3
        img = np.stack([base[c] + tilt[c] * (xx + yy) / 2 for c in range(3)], axis=2)
        img += 0.08 * rng.standard_normal((size, size, 3))
        pool.append(np.clip(img, 0.0, 1.0))
    return pool


# ---------------------------------------------------------------------------
# utterance synthesis
# ---------------------------------------------------------------------------

def phonemes_of(text: str) -> list[str]:
    """Synthetic phoneme slots: one per alphanumeric character."""
    return [c for c in text.lower() if c.isalnum()]


def _char_param(c: str, salt: str) -> float:
    """Stable per-character value in [0, 1)."""
    h = hashlib.blake2s(f"{salt}:{c}".encode(), digest_size=4).digest()
    return int.from_bytes(h, "little") / 2 ** 32


@dataclass
class UtteranceGroundTruth:
    phoneme_count: int
    duration: float
    speaking_rate: float
    f0_frames: np.ndarray       # realized f0 at the codec frame rate
    pitch_std_hz: float
    snr_db: float
    c50_db: float
    clean: np.ndarray           # dry harmonic component
    reverberant: np.ndarray     # clean convolved with the scene RIR
    noise: np.ndarray
    rir: np.ndarray


def scene_rir(scene: SceneSpec, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    delay = int(round(scene.reflect_delay_ms * 1e-3 * sample_rate))
    rir = np.zeros(max(delay + 1, 1))
    rir[0] = 1.0
    if delay > 0 and scene.reflect_gain != 0.0:
        rir[delay] = scene.reflect_gain
    return rir


def analytic_c50(scene: SceneSpec) -> float:
    early = 1.0
    late = 0.0
    if scene.reflect_delay_ms <= 50.0:
        early += scene.reflect_gain ** 2
    else:
        late += scene.reflect_gain ** 2
    if late <= 0.0:
        return 100.0
    return min(100.0, 10.0 * np.log10(early / late))


def synth_utterance(
    spk: SpeakerSpec,
    text: str,
    scene: SceneSpec,
    rng: np.random.Generator,
    style: UtteranceStyle | None = None,
    sample_rate: int = SAMPLE_RATE,
) -> tuple[Waveform, UtteranceGroundTruth]:
    """Harmonic-source synthesis with exact ground truth for every metric."""
    phonemes = phonemes_of(text)
    if not phonemes:
        raise InputError("empty text")
    if style is None:
        style = UtteranceStyle(
            speaking_rate=spk.base_rate,
            pitch_std_hz=min(spk.f0_range / np.sqrt(2.0), 0.55 * spk.f0_base),
        )
    rate = max(style.speaking_rate, 1e-3)
    slot = 1.0 / rate
    duration = len(phonemes) * slot + 0.05
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    # f0 contour: sinusoidal vibrato with amplitude set by the target std
    amp = min(style.pitch_std_hz * np.sqrt(2.0), 0.8 * spk.f0_base)
    phase0 = rng.uniform(0, 2 * np.pi)
    f0 = spk.f0_base + amp * np.sin(2 * np.pi * style.vibrato_hz * t + phase0)

    # per-phoneme amplitude envelope and high-harmonic mix
    env = np.zeros(n)
    hi_mix = np.zeros(n)
    for i, ph in enumerate(phonemes):
        s = int(i * slot * sample_rate)
        e = min(int((i + 1) * slot * sample_rate), n)
        if e <= s:
            continue
        seg = np.arange(e - s) / max(e - s - 1, 1)
        shape = np.clip(np.minimum(seg / 0.2, (1.0 - seg) / 0.2), 0.0, 1.0)
        level = 0.45 + 0.5 * _char_param(ph, "level")
        env[s:e] = level * shape
        hi_mix[s:e] = 0.2 + 0.6 * _char_param(ph, "mix")

    timbre = np.asarray(spk.timbre)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    low = np.zeros(n)
    high = np.zeros(n)
    for k in range(1, 9):
        h = timbre[k - 1] / k ** 0.3 * np.sin(k * phase)
        if k <= 4:
            low += h
        else:
            high += h
    clean = env * ((1.0 - hi_mix) * low + hi_mix * high)
    peak = np.max(np.abs(clean))
    if peak > 0:
        clean = clean * (0.5 / peak)

    rir = scene_rir(scene, sample_rate)
    reverb = np.convolve(clean, rir)[:n]
    if scene.snr_db >= 100.0:
        noise = np.zeros(n)
    else:
        sig_pow = np.mean(reverb ** 2)
        noise = rng.standard_normal(n)
        noise *= np.sqrt(sig_pow / 10 ** (scene.snr_db / 10.0) / np.mean(noise ** 2))
    mix = np.clip(reverb + noise, -1.0, 1.0)

    hop = int(round(sample_rate / FRAME_RATE))
    f0_frames = f0[::hop]
    gt = UtteranceGroundTruth(
        phoneme_count=len(phonemes),
        duration=n / sample_rate,
        speaking_rate=len(phonemes) / (n / sample_rate),
        f0_frames=f0_frames,
        pitch_std_hz=float(np.std(f0_frames)),
        snr_db=scene.snr_db,
        c50_db=analytic_c50(scene),
        clean=clean,
        reverberant=reverb,
        noise=noise,
        rir=rir,
    )
    return Waveform(mix, sample_rate), gt


# ---------------------------------------------------------------------------
# corpus build + manifests
# ---------------------------------------------------------------------------

def _draw_text_style(rng: np.random.Generator, cfg: CorpusConfig) -> tuple[str, UtteranceStyle]:
    """Draw the phoneme budget first, then a rate whose implied duration fits.

    Duration is budget over rate, so a slow delivery of a given text genuinely
    lasts longer than a fast one. Drawing rate and duration independently
    instead would strip the duration signal out of the pace description,
    leaving nothing for the speech LM's stopping decision to condition on.
    The rate window is computed from the realized phoneme count, so durations
    land exactly inside cfg.duration_range (the 2 to 6 s corpus contract) and
    rates inside cfg.rate_range."""
    need = int(rng.integers(cfg.phoneme_range[0], cfg.phoneme_range[1] + 1))
    words: list[str] = []
    count = 0
    while count < need:
        w = _WORDS[int(rng.integers(len(_WORDS)))]
        words.append(w)
        count += len(phonemes_of(w))
    lo_r = max(cfg.rate_range[0], count / cfg.duration_range[1])
    hi_r = min(cfg.rate_range[1], count / cfg.duration_range[0])
    # pick a pace bucket uniformly among those feasible for this text, then a
    # rate within it; a plain uniform rate leaves fast-paced speech rare (long
    # texts dominate the high-rate region) and the pace description undertrained
    pace = BinEdges()
    segments = [
        (a, b)
        for a, b in (
            (lo_r, min(hi_r, pace.rate_slow)),
            (max(lo_r, pace.rate_slow), min(hi_r, pace.rate_fast)),
            (max(lo_r, pace.rate_fast), hi_r),
        )
        if b > a
    ]
    seg = segments[int(rng.integers(len(segments)))]
    style = UtteranceStyle(
        speaking_rate=float(rng.uniform(*seg)),
        pitch_std_hz=float(rng.uniform(*cfg.pitch_std_range)),
        vibrato_hz=float(rng.uniform(3.5, 5.5)),
    )
    return " ".join(words), style


def _draw_scene(rng: np.random.Generator, cfg: CorpusConfig, source: str) -> SceneSpec:
    if source == "audio_visual":
        return SceneSpec(
            snr_db=float(rng.uniform(*cfg.av_snr_range)),
            reflect_delay_ms=float(rng.uniform(10.0, 90.0)),
            reflect_gain=float(rng.uniform(0.15, 0.55)),
            public_speech=True,
        )
    return SceneSpec(
        snr_db=float(rng.uniform(*cfg.ao_snr_range)),
        reflect_delay_ms=0.0,
        reflect_gain=0.0,
        public_speech=False,
    )


def save_wav(path: Path, w: Waveform) -> None:
    pcm = np.clip(w.samples, -1.0, 1.0)
    wavfile.write(path, w.sample_rate, (pcm * 32767.0).astype(np.int16))


def load_wav(path: Path) -> Waveform:
    sr, pcm = wavfile.read(path)
    return Waveform(pcm.astype(np.float64) / 32767.0, sr)


def save_face(path: Path, img: np.ndarray) -> None:
    Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def load_face(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _build_record(
    root: Path,
    spk: SpeakerSpec,
    face_path: str | None,
    source: str,
    utt_index: int,
    synth_seed: int,
    cfg: CorpusConfig,
    edges: BinEdges | None,
) -> ManifestRecord:
    rng = np.random.default_rng(synth_seed)
    text, style = _draw_text_style(rng, cfg)
    scene = _draw_scene(rng, cfg, source)
    wave, gt = synth_utterance(spk, text, scene, rng, style)
    utt_id = f"{spk.speaker_id}_u{utt_index:03d}"
    audio_rel = f"audio/{utt_id}.wav"
    save_wav(root / audio_rel, wave)
    attrs = SpeechAttributes(
        speaking_rate=gt.speaking_rate,
        snr_db=gt.snr_db,
        c50_db=gt.c50_db,
        pitch_std_hz=gt.pitch_std_hz,
        public_speech=scene.public_speech,
    )
    desc = attributes_to_text(attrs, rng, edges or BinEdges())
    return ManifestRecord(
        schema_version=SCHEMA_VERSION,
        utt_id=utt_id,
        source=source,
        speaker_id=spk.speaker_id,
        input_text=text,
        description=desc.text,
        audio_path=audio_rel,
        face_path=face_path,
        speaker=asdict(spk),
        scene=asdict(scene),
        phoneme_count=gt.phoneme_count,
        duration=gt.duration,
        speaking_rate=gt.speaking_rate,
        pitch_std_hz=gt.pitch_std_hz,
        snr_db=gt.snr_db,
        c50_db=gt.c50_db,
        synth_seed=synth_seed,
    )


def regenerate_ground_truth(
    rec: ManifestRecord, cfg: CorpusConfig | None = None
) -> tuple[Waveform, UtteranceGroundTruth]:
    """Re-synthesize an utterance bit-exactly from its stored seed.

    ``cfg`` must match the config the corpus was built with (defaults match
    a default build); the rng draw order replays _build_record exactly.
    """
    cfg = cfg or CorpusConfig()
    rng = np.random.default_rng(rec.synth_seed)
    text, style = _draw_text_style(rng, cfg)
    _draw_scene(rng, cfg, rec.source)  # consume the scene draws in order
    return synth_utterance(rec.speaker_spec(), text, rec.scene_spec(), rng, style)


def build_corpus(root: Path, cfg: CorpusConfig = CorpusConfig()) -> dict[str, Path]:
    """Generate the full corpus under ``root``; reproducible from cfg.root_seed.

    Splits use disjoint speaker seed ranges; within train/val, the first
    ``*_av_speakers`` speakers are audio-visual (noisy public scenes) and the
    rest audio-only (clean). The test split is fully audio-visual so held-out
    faces exist for retrieval and generation.
    """
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "faces").mkdir(exist_ok=True)
    (root / "manifests").mkdir(exist_ok=True)
    (root / "styles").mkdir(exist_ok=True)

    base = cfg.root_seed * 1_000_003
    split_plan = {
        "train": (0, cfg.train_speakers, cfg.train_av_speakers),
        "val": (cfg.train_speakers, cfg.val_speakers, cfg.val_av_speakers),
        "test": (cfg.train_speakers + cfg.val_speakers, cfg.test_speakers, cfg.test_speakers),
    }
    seen: set[str] = set()
    manifests: dict[str, Path] = {}
    records_by_split: dict[str, list[ManifestRecord]] = {}
    for split, (offset, count, n_av) in split_plan.items():
        records: list[ManifestRecord] = []
        for i in range(count):
            seed = base + offset + i
            spk, face = make_speaker(seed)
            if spk.speaker_id in seen:
                raise ConfigError(f"speaker id collision across splits: {spk.speaker_id}")
            seen.add(spk.speaker_id)
            source = "audio_visual" if i < n_av else "audio_only"
            face_rel = None
            if source == "audio_visual":
                face_rel = f"faces/{spk.speaker_id}.png"
                save_face(root / face_rel, face)
            for u in range(cfg.utterances_per_speaker):
                records.append(
                    _build_record(root, spk, face_rel, source, u, seed * 1000 + u, cfg, None)
                )
        records_by_split[split] = records

    # freeze SNR / C50 bin edges at the train-split terciles, then re-label
    train = records_by_split["train"]
    snrs = np.array([r.snr_db for r in train])
    c50s = np.array([r.c50_db for r in train])
    edges = BinEdges(
        snr_lo=float(np.quantile(snrs, 1 / 3)),
        snr_hi=float(np.quantile(snrs, 2 / 3)),
        c50_lo=float(np.quantile(c50s, 1 / 3)),
        c50_hi=float(np.quantile(c50s, 2 / 3)),
    )
    for split, records in records_by_split.items():
        for rec in records:
            rng = np.random.default_rng(rec.synth_seed + 7)
            attrs = SpeechAttributes(
                speaking_rate=rec.speaking_rate,
                snr_db=rec.snr_db,
                c50_db=rec.c50_db,
                pitch_std_hz=rec.pitch_std_hz,
                public_speech=rec.scene["public_speech"],
            )
            rec.description = attributes_to_text(attrs, rng, edges).text
        path = root / "manifests" / f"{split}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
        manifests[split] = path

    for i, style in enumerate(make_style_pool(cfg.style_pool_size, cfg.root_seed + 5)):
        save_face(root / "styles" / f"style{i:02d}.png", style)

    meta = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(cfg),
        "bin_edges": asdict(edges),
    }
    with open(root / "corpus_config.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return manifests


def load_bin_edges(root: Path) -> BinEdges:
    with open(Path(root) / "corpus_config.json", encoding="utf-8") as fh:
        return BinEdges(**json.load(fh)["bin_edges"])


def load_manifest(path: Path) -> list[ManifestRecord]:
    records = []
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(ManifestRecord.from_json(line))
            except (DataError, TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def load_style_pool(root: Path) -> list[np.ndarray]:
    return [load_face(p) for p in sorted(Path(root, "styles").glob("*.png"))]
