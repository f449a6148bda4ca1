"""Descriptive-text processing and conditioning-sequence assembly.

Covers gender neutralization of description strings, rule-based labeling of
speech attributes into descriptive sentences, a small trainable text encoder,
and construction of the cross-attention conditioning sequence with the voice
embedding inserted after the fixed prefix
"The speaker's voice characteristic is".
"""
from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass
from importlib import resources as importlib_resources

import numpy as np
import torch
from torch import nn

from .errors import DataError, InputError

VOICE_PREFIX = "The speaker's voice characteristic is"


def _load_resource(name: str) -> dict:
    ref = importlib_resources.files("facespeak.resources").joinpath(name)
    return json.loads(ref.read_text(encoding="utf-8"))


GENDER_TABLE = _load_resource("gender_table.json")
PHRASE_BANK = _load_resource("phrase_bank.json")


@dataclass(frozen=True)
class DescriptiveText:
    text: str
    neutralized: bool = False


@dataclass(frozen=True)
class SpeechAttributes:
    speaking_rate: float  # phonemes / s
    snr_db: float
    c50_db: float
    pitch_std_hz: float
    public_speech: bool = False


@dataclass(frozen=True)
class BinEdges:
    """Bin boundaries for the attribute labeler.

    Rate and pitch edges are fixed; SNR and C50 edges default to placeholder
    values and are normally replaced by corpus terciles frozen at build time.
    """
    rate_slow: float = 10.0   # < slow edge -> slow; > fast edge -> fast
    rate_fast: float = 15.0
    pitch_expressive: float = 60.0
    snr_lo: float = 20.0
    snr_hi: float = 40.0
    c50_lo: float = 15.0
    c50_hi: float = 40.0


def _match_case(repl: str, original: str) -> str:
    if original[:1].isupper():
        return repl[:1].upper() + repl[1:]
    return repl


def _gendered_keys() -> list[str]:
    keys: set[str] = set()
    for cat, table in GENDER_TABLE.items():
        if cat == "format_version":
            continue
        keys.update(table.keys())
    return sorted(keys, key=len, reverse=True)


GENDERED_WORD_RE = re.compile(
    r"\b(" + "|".join(_gendered_keys()) + r")\b", re.IGNORECASE
)


def neutralize_gender(text: str) -> DescriptiveText:
    """Replace gendered words with speaker-neutral wording; idempotent.

    "her"/"his" followed by another word are treated as determiners and map to
    "the speaker's"; in other positions they map to the object / standalone
    possessive replacements.
    """
    subject = GENDER_TABLE["subject"]
    poss_det = GENDER_TABLE["possessive_determiner"]
    objects = GENDER_TABLE["object"]
    standalone = GENDER_TABLE["standalone_possessive"]
    nouns = GENDER_TABLE["nouns"]

    def sub(m: re.Match) -> str:
        word = m.group(1)
        low = word.lower()
        rest = m.string[m.end():]
        followed_by_word = re.match(r"\s+[A-Za-z]", rest) is not None
        if low in subject and low not in ("her", "his"):
            repl = subject[low]
        elif low in ("her", "his"):
            if followed_by_word:
                repl = poss_det[low]
            elif low in objects:
                repl = objects[low]
            else:
                repl = standalone[low]
        elif low in objects:
            repl = objects[low]
        elif low in standalone:
            repl = standalone[low]
        else:
            repl = nouns[low]
        return _match_case(repl, word)

    return DescriptiveText(GENDERED_WORD_RE.sub(sub, text), neutralized=True)


def attribute_bins(a: SpeechAttributes, edges: BinEdges = BinEdges()) -> dict[str, str]:
    """Deterministic bin label per attribute; phrase wording is sampled elsewhere."""
    for name in ("speaking_rate", "snr_db", "c50_db", "pitch_std_hz"):
        if not math.isfinite(getattr(a, name)):
            raise InputError(f"attribute {name} is not finite")
    if a.speaking_rate < edges.rate_slow:
        pace = "slow"
    elif a.speaking_rate > edges.rate_fast:
        pace = "fast"
    else:
        pace = "moderate"
    tone = "expressive" if a.pitch_std_hz >= edges.pitch_expressive else "monotone"
    if a.snr_db < edges.snr_lo:
        noise = "very_noisy"
    elif a.snr_db < edges.snr_hi:
        noise = "slight_noise"
    else:
        noise = "almost_noiseless"
    if a.c50_db < edges.c50_lo:
        distance = "very_distant"
    elif a.c50_db < edges.c50_hi:
        distance = "moderate_distant"
    else:
        distance = "very_close"
    return {"pace": pace, "tone": tone, "noise": noise, "distance": distance}


def attributes_to_text(
    a: SpeechAttributes,
    rng: np.random.Generator | None = None,
    edges: BinEdges = BinEdges(),
) -> DescriptiveText:
    """Render attributes into a neutral descriptive sentence per fixed bins."""
    bins = attribute_bins(a, edges)
    parts = []
    for feature in ("pace", "tone", "noise", "distance"):
        phrases = PHRASE_BANK[feature][bins[feature]]
        pick = 0 if rng is None else int(rng.integers(len(phrases)))
        parts.append(phrases[pick])
    if a.public_speech:
        parts.append(PHRASE_BANK["public"][0])
    return DescriptiveText(" ".join(parts), neutralized=True)


# ---------------------------------------------------------------------------
# text encoder and conditioning assembly
# ---------------------------------------------------------------------------

class CharTokenizer:
    """Fixed character-level tokenizer used by the LM's input-text prefix."""

    ALPHABET = (
        "abcdefghijklmnopqrstuvwxyz"
        "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
        "0123456789 .,'?!-:;()&"
    )

    def __init__(self):
        self._index = {c: i + 1 for i, c in enumerate(self.ALPHABET)}  # 0 = UNK

    @property
    def vocab_size(self) -> int:
        return len(self.ALPHABET) + 1

    def encode(self, text: str) -> list[int]:
        if not text:
            raise InputError("empty text")
        return [self._index.get(c, 0) for c in text]


class WordTokenizer:
    """Hashed word-level tokenizer for descriptions.

    Words are lowercased and CRC32-bucketed, so the vocabulary is open but
    every occurrence of the same word shares one embedding. A style word like
    "slow" then carries its meaning in a single frame that cross-attention can
    pick out, which matters for attributes supervised by few targets (the
    stopping decision sees one EOS per utterance)."""

    BUCKETS = 2048
    _WORD_RE = re.compile(r"[a-z0-9']+")

    @property
    def vocab_size(self) -> int:
        return self.BUCKETS

    def encode(self, text: str) -> list[int]:
        """Bucket ids for the words of `text`; empty input is rejected.

        Text containing no word characters yields an empty list."""
        if not text:
            raise InputError("empty text")
        return [
            zlib.crc32(w.encode("utf-8")) % self.BUCKETS
            for w in self._WORD_RE.findall(text.lower())
        ]


@dataclass
class ConditioningSequence:
    frames: torch.Tensor  # M x d_model
    prefix_len: int       # voice frame sits at index prefix_len

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise InputError("conditioning frames must be M x d_model")
        if not 0 <= self.prefix_len < self.frames.shape[0]:
            raise InputError("voice-frame index out of range")


class TextConditioner(nn.Module):
    """Trainable description encoder plus voice-embedding projection.

    Hashed word embeddings feed a bidirectional GRU; one output frame per
    word. The 256-dim voice embedding is projected to d_model and inserted
    as a single frame between the fixed prefix and the description.
    """

    def __init__(self, d_model: int, voice_dim: int = 256):
        super().__init__()
        self.tokenizer = WordTokenizer()
        self.d_model = d_model
        self.word_embed = nn.Embedding(self.tokenizer.vocab_size, d_model)
        self.rnn = nn.GRU(
            d_model, d_model // 2, num_layers=1, bidirectional=True, batch_first=True
        )
        self.voice_proj = nn.Linear(voice_dim, d_model)

    def embed_description(self, text: str) -> torch.Tensor:
        """One embedding frame per word; deterministic in eval mode."""
        ids = self.tokenizer.encode(text)
        if not ids:
            raise InputError("text contains no word characters")
        x = self.word_embed(torch.tensor(ids, dtype=torch.long))[None]
        out, _ = self.rnn(x)
        # residual keeps each word's own embedding dominant in its frame
        return out[0] + x[0]

    def build_conditioning(
        self,
        desc: DescriptiveText,
        voice: torch.Tensor,
        training: bool = False,
    ) -> ConditioningSequence:
        if training and not desc.neutralized:
            raise DataError("training descriptions must be gender-neutralized")
        if voice.shape != (self.voice_proj.in_features,):
            raise InputError("voice embedding has the wrong dimension")
        prefix = self.embed_description(VOICE_PREFIX)
        voice_frame = self.voice_proj(voice)[None]
        if desc.text and self.tokenizer.encode(desc.text):
            body = self.embed_description(desc.text)
            frames = torch.cat([prefix, voice_frame, body], dim=0)
        else:
            # description-free conditioning: voice only, used for description
            # dropout in training and classifier-free guidance at decode time
            frames = torch.cat([prefix, voice_frame], dim=0)
        return ConditioningSequence(frames, prefix_len=prefix.shape[0])
