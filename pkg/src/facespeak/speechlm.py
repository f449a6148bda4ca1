"""Autoregressive transformer over delay-patterned RVQ codes.

The decoder stream is [input-text characters | BOS column | delayed code
columns]; every step embeds one full column (all levels summed) and per-level
output heads predict the next column. Conditioning (description embeddings with
the voice embedding inserted after the fixed prefix) enters through
cross-attention only. Training alternates face-driven and audio-driven voice
embeddings by data source.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentConfig
from .codec import (
    PAD_DELAY,
    CodeGrid,
    Codebooks,
    MelConfig,
    apply_delay,
    rvq_encode,
    wave_to_frames,
)
from .conditioning import (
    CharTokenizer,
    ConditioningSequence,
    DescriptiveText,
    TextConditioner,
    WordTokenizer,
)
from .data import ManifestRecord, load_face, load_wav, phonemes_of
from .encoders import EncoderBundle, VoiceEmbedding, _tile_crop
from .errors import ConfigError, DataError, InputError

LM_CHECKPOINT_VERSION = 2


@dataclass(frozen=True)
class LMConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    levels: int = 4
    codebook_size: int = 64
    dropout: float = 0.1
    max_positions: int = 640

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError("d_model must be divisible by heads")

    @property
    def bos_id(self) -> int:
        return self.codebook_size

    @property
    def pad_id(self) -> int:
        return self.codebook_size + 1

    @property
    def eos_id(self) -> int:
        return self.codebook_size + 2

    @property
    def vocab(self) -> int:
        return self.codebook_size + 3


DESK_LM = LMConfig()
# hyperparameters reported for the full-scale system; kept as a preset only
PAPER_LM = LMConfig(
    layers=24, heads=16, d_model=1024, d_ff=4096, levels=9, codebook_size=1024,
    max_positions=4096,
)


@dataclass
class TrainingSample:
    source: str                     # "audio_visual" | "audio_only"
    input_text: str
    codes: CodeGrid
    description: str
    face: np.ndarray | None = None  # required iff audio_visual
    sample_codes: CodeGrid | None = None  # audio for the audio-driven embedding

    def __post_init__(self):
        if self.source == "audio_visual" and self.face is None:
            raise DataError("audio_visual sample is missing its face")


class DecoderLayer(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(
            cfg.d_model, cfg.heads, dropout=cfg.dropout, batch_first=True
        )
        self.cross_attn = nn.MultiheadAttention(
            cfg.d_model, cfg.heads, dropout=cfg.dropout, batch_first=True
        )
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, causal_mask, memory, memory_mask):
        h = self.norm1(x)
        a, _ = self.self_attn(h, h, h, attn_mask=causal_mask, need_weights=False)
        x = x + self.drop(a)
        h = self.norm2(x)
        c, _ = self.cross_attn(
            h, memory, memory, key_padding_mask=memory_mask, need_weights=False
        )
        x = x + self.drop(c)
        return x + self.drop(self.ff(self.norm3(x)))


class DurationPredictor(nn.Module):
    """Regresses log utterance length (frames) from text size and description.

    The LM's own EOS hazard sees one positive label per utterance, which is
    far too sparse at desk scale for style words like "slow" to move the
    stopping time reliably. This head sees the same description but a dense
    regression target, and at decode time its prediction sets the stopping
    window that EOS sampling operates in. Speaker identity is deliberately
    not an input: pace is a per-utterance style, not a voice trait.
    """

    def __init__(self, d: int = 64):
        super().__init__()
        self.tokenizer = WordTokenizer()
        # one extra bucket stands in for the empty description
        self.empty_id = self.tokenizer.vocab_size
        self.word_bag = nn.EmbeddingBag(
            self.tokenizer.vocab_size + 1, d, mode="mean"
        )
        self.mlp = nn.Sequential(nn.Linear(d + 1, d), nn.GELU(), nn.Linear(d, 1))

    def index(self, descriptions: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Flattened word ids + per-description offsets for the embedding bag."""
        flat: list[int] = []
        offsets: list[int] = []
        for text in descriptions:
            offsets.append(len(flat))
            ids = self.tokenizer.encode(text) if text else []
            flat.extend(ids if ids else [self.empty_id])
        return torch.tensor(flat), torch.tensor(offsets)

    def from_index(
        self, n_phonemes: torch.Tensor, flat: torch.Tensor, offsets: torch.Tensor
    ) -> torch.Tensor:
        pool = self.word_bag(flat, offsets)
        x = torch.cat(
            [pool, torch.log(n_phonemes.float().clamp(min=1.0))[:, None]], dim=1
        )
        return self.mlp(x)[:, 0]

    def forward(
        self,
        n_phonemes: torch.Tensor,   # B
        descriptions: list[str],
    ) -> torch.Tensor:
        """Predicted log frame counts, one per sample."""
        return self.from_index(n_phonemes, *self.index(descriptions))

    def predict_frames(self, n_phonemes: int, description: str) -> int:
        with torch.no_grad():
            out = self.forward(torch.tensor([n_phonemes]), [description])
        return max(1, int(round(float(out.exp()[0]))))


def fit_duration(
    head: DurationPredictor,
    samples: list[TrainingSample],
    seed: int = 0,
    steps: int = 1200,
    lr: float = 1e-2,
) -> float:
    """Full-batch fit of the duration head; returns the final MSE (log frames).

    Every sample contributes its full description, each single sentence, and
    the empty description as rows with the same target, matching the forms
    the head sees at decode time.
    """
    torch.manual_seed(seed)
    n_ph: list[int] = []
    descs: list[str] = []
    targets: list[float] = []
    for s in samples:
        n = len(phonemes_of(s.input_text))
        y = math.log(max(s.codes.length, 1))
        sentences = [t.strip() + "." for t in s.description.split(".") if t.strip()]
        for d in ["", s.description, *sentences]:
            n_ph.append(n)
            descs.append(d)
            targets.append(y)
    n_t = torch.tensor(n_ph)
    y_t = torch.tensor(targets)
    flat, offsets = head.index(descs)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    loss = torch.tensor(0.0)
    for _ in range(steps):
        loss = F.mse_loss(head.from_index(n_t, flat, offsets), y_t)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    return float(loss.detach())


class SpeechLM(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = CharTokenizer()
        self.text_embed = nn.Embedding(self.tokenizer.vocab_size, cfg.d_model)
        self.code_embeds = nn.ModuleList(
            [nn.Embedding(cfg.vocab, cfg.d_model) for _ in range(cfg.levels)]
        )
        self.level_scale = 1.0 / math.sqrt(cfg.levels)
        self.pos_embed = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.conditioner = TextConditioner(cfg.d_model)
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.layers)])
        self.out_norm = nn.LayerNorm(cfg.d_model)
        self.heads = nn.ModuleList(
            [nn.Linear(cfg.d_model, cfg.vocab) for _ in range(cfg.levels)]
        )
        self.duration = DurationPredictor()

    # -- stream assembly ----------------------------------------------------

    def embed_columns(self, cols: torch.Tensor) -> torch.Tensor:
        """cols: B x L x S -> B x S x d (sum of per-level embeddings)."""
        out = 0
        for l in range(self.cfg.levels):
            out = out + self.code_embeds[l](cols[:, l, :])
        return out * self.level_scale

    def forward_stream(
        self,
        stream: torch.Tensor,          # B x S x d, already position-free
        memory: torch.Tensor,          # B x M x d
        memory_mask: torch.Tensor | None = None,  # B x M, True = pad
    ) -> torch.Tensor:
        B, S, _ = stream.shape
        if S > self.cfg.max_positions:
            raise InputError(f"sequence length {S} exceeds max_positions")
        pos = self.pos_embed(torch.arange(S, device=stream.device))[None]
        x = stream + pos
        causal = torch.triu(
            torch.full((S, S), float("-inf"), device=stream.device), diagonal=1
        )
        for layer in self.layers:
            x = layer(x, causal, memory, memory_mask)
        return self.out_norm(x)

    def lm_forward(
        self,
        text_ids: torch.Tensor,        # B x S_text (right-padded with 0)
        input_cols: torch.Tensor,      # B x L x S_code
        cond: torch.Tensor,            # B x M x d
        cond_mask: torch.Tensor | None = None,
        text_lens: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Per-level logits for every code step: B x L x S_code x V."""
        B, L, S_code = input_cols.shape
        if L != self.cfg.levels:
            raise InputError("level count mismatch")
        text_emb = self.text_embed(text_ids)
        code_emb = self.embed_columns(input_cols)
        if text_lens is None:
            text_lens = torch.full((B,), text_ids.shape[1], dtype=torch.long)
        S_text = text_ids.shape[1]
        # pack per sample: [text (text_len) | code region], right-padded
        total = S_text + S_code
        stream = torch.zeros(B, total, text_emb.shape[-1], device=text_emb.device,
                             dtype=text_emb.dtype)
        for b in range(B):
            tl = int(text_lens[b])
            stream[b, :tl] = text_emb[b, :tl]
            stream[b, tl:tl + S_code] = code_emb[b]
        h = self.forward_stream(stream, cond, cond_mask)
        out = torch.zeros(B, L, S_code, self.cfg.vocab, device=h.device, dtype=h.dtype)
        for b in range(B):
            tl = int(text_lens[b])
            region = h[b, tl:tl + S_code]
            for l in range(L):
                out[b, l] = self.heads[l](region)
        return out

    def encode_text(self, text: str) -> torch.Tensor:
        return torch.tensor(self.tokenizer.encode(text), dtype=torch.long)

    def conditioning_for(
        self, desc: DescriptiveText, voice: VoiceEmbedding, training: bool = False
    ) -> ConditioningSequence:
        z = torch.as_tensor(voice.vector, dtype=self.conditioner.voice_proj.weight.dtype)
        return self.conditioner.build_conditioning(desc, z, training=training)

    def predict_duration(self, desc: DescriptiveText, n_phonemes: int) -> int:
        """Predicted frame count for a text/description combination."""
        return self.duration.predict_frames(n_phonemes, desc.text)


def lm_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    pad_id: int,
    eos_id: int | None = None,
    eos_weight: float = 1.0,
) -> torch.Tensor:
    """Cross-entropy over non-pad targets, uniform across levels and positions.

    logits: B x L x S x V (or L x S x V), targets likewise without V.
    Delay-pad cells are masked structurally: level l of a delayed grid is only
    valid in columns l .. T+l-1 (plus the EOS cell closing level 0), with T
    recovered from the column count, so a pad cell contributes zero whatever
    value its target holds. The value mask on pad_id handles the extra
    right-padding that batch collation appends to shorter sequences.
    EOS is one target in roughly 150, so duration calibration can optionally
    upweight it; the default keeps the loss plain and unweighted.
    """
    if logits.ndim == 3:
        logits = logits[None]
        targets = targets[None]
    if logits.shape[:3] != targets.shape:
        raise InputError("logits and targets are misaligned")
    mask = targets != pad_id
    levels, span = targets.shape[1], targets.shape[2]
    t_max = span - levels
    if t_max >= 1:
        cols = torch.arange(span, device=targets.device)
        lev = torch.arange(levels, device=targets.device)[:, None]
        struct = (cols >= lev) & (cols < t_max + lev)
        struct[0, t_max] = True
        mask = mask & struct[None]
    if not bool(mask.any()):
        raise InputError("all target positions are padded")
    flat_logits = logits[mask]
    flat_targets = targets[mask]
    if eos_id is None or eos_weight == 1.0:
        return F.cross_entropy(flat_logits, flat_targets)
    per_token = F.cross_entropy(flat_logits, flat_targets, reduction="none")
    weights = torch.where(
        flat_targets == eos_id,
        torch.full_like(per_token, eos_weight),
        torch.ones_like(per_token),
    )
    return (per_token * weights).sum() / weights.sum()


def build_target_columns(grid: CodeGrid, cfg: LMConfig) -> np.ndarray:
    """Delayed grid with specials: PAD at shifted-out cells, EOS closing level 0.

    Shape L x (T + L): the extra final column carries EOS on level 0.
    """
    delayed = apply_delay(grid).codes
    out = np.concatenate(
        [delayed, np.full((cfg.levels, 1), PAD_DELAY, dtype=np.int64)], axis=1
    )
    out = np.where(out == PAD_DELAY, cfg.pad_id, out)
    out[0, grid.length] = cfg.eos_id
    return out


def build_input_columns(targets: np.ndarray, cfg: LMConfig) -> np.ndarray:
    """Teacher-forcing inputs: a BOS column followed by the shifted targets."""
    bos = np.full((cfg.levels, 1), cfg.bos_id, dtype=np.int64)
    return np.concatenate([bos, targets[:, :-1]], axis=1)


def select_condition(
    sample: TrainingSample,
    bundle: EncoderBundle,
    style_pool: list[np.ndarray] | None,
    rng: np.random.Generator,
    augment_cfg: AugmentConfig = AugmentConfig(),
) -> VoiceEmbedding:
    """Face-driven embedding for audio-visual data, audio-driven otherwise.

    Portraits are encoded as-is: the face encoder reads the rendered voice
    attributes, which style augmentation would destroy, and a stable portrait
    keeps the face-embedding cache hot across training steps.
    """
    del style_pool, augment_cfg
    if sample.source == "audio_visual":
        return bundle.encode_face(sample.face)
    seg = _tile_crop(
        (sample.sample_codes or sample.codes).codes, rng
    )
    return bundle.encode_audio(CodeGrid(seg), training=True)


@dataclass(frozen=True)
class TrainLMConfig:
    steps: int = 750
    batch_size: int = 4
    lr: float = 5e-4
    warmup: int = 100
    seed: int = 0
    report_every: int = 50
    alternation: bool = True
    eos_weight: float = 8.0
    # description and cross-attention parameters see a boosted learning rate:
    # the relevant words are a tiny slice of the conditioning memory, and
    # attention to them is the slowest thing to emerge at desk-scale budgets
    cond_lr_mult: float = 3.0


def samples_from_records(
    records: list[ManifestRecord],
    root: Path,
    cb: Codebooks,
    mel_cfg: MelConfig = MelConfig(),
) -> list[TrainingSample]:
    """Encode every manifest record into an in-memory training sample."""
    samples = []
    faces: dict[str, np.ndarray] = {}
    for rec in records:
        wav = load_wav(Path(root) / rec.audio_path)
        codes = rvq_encode(wave_to_frames(wav, mel_cfg), cb)
        face = None
        if rec.source == "audio_visual":
            if rec.speaker_id not in faces:
                faces[rec.speaker_id] = load_face(Path(root) / rec.face_path)
            face = faces[rec.speaker_id]
        samples.append(
            TrainingSample(
                source=rec.source,
                input_text=rec.input_text,
                codes=codes,
                description=rec.description,
                face=face,
            )
        )
    return samples


def _lr_at(step: int, cfg: TrainLMConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    progress = (step - cfg.warmup) / max(cfg.steps - cfg.warmup, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# description dropout: corpus descriptions always carry one sentence per
# feature, but users give partial (often single-sentence) descriptions, and
# classifier-free guidance needs a description-free mode
DESC_DROP_P = 0.1
DESC_SINGLE_P = 0.25


def _train_description(desc: str, rng: np.random.Generator) -> str:
    u = rng.random()
    if u < DESC_DROP_P:
        return ""
    sentences = [s.strip() for s in desc.split(".") if s.strip()]
    if u < DESC_DROP_P + DESC_SINGLE_P and sentences:
        return sentences[int(rng.integers(len(sentences)))] + "."
    return desc


def _collate(
    batch: list[TrainingSample],
    model: SpeechLM,
    bundle: EncoderBundle,
    style_pool: list[np.ndarray] | None,
    rng: np.random.Generator,
):
    cfg = model.cfg
    text_ids = [model.encode_text(s.input_text) for s in batch]
    targets = [build_target_columns(s.codes, cfg) for s in batch]
    inputs = [build_input_columns(t, cfg) for t in targets]
    conds = []
    for s in batch:
        voice = select_condition(s, bundle, style_pool, rng)
        desc = _train_description(s.description, rng)
        conds.append(
            model.conditioning_for(
                DescriptiveText(desc, neutralized=True), voice, training=True
            ).frames
        )
    B = len(batch)
    S_text = max(t.shape[0] for t in text_ids)
    S_code = max(t.shape[1] for t in targets)
    M = max(c.shape[0] for c in conds)
    text_mat = torch.zeros(B, S_text, dtype=torch.long)
    text_lens = torch.zeros(B, dtype=torch.long)
    tgt = torch.full((B, cfg.levels, S_code), cfg.pad_id, dtype=torch.long)
    inp = torch.full((B, cfg.levels, S_code), cfg.pad_id, dtype=torch.long)
    cond = torch.zeros(B, M, cfg.d_model)
    cond_mask = torch.ones(B, M, dtype=torch.bool)
    for b in range(B):
        text_mat[b, : len(text_ids[b])] = text_ids[b]
        text_lens[b] = len(text_ids[b])
        tgt[b, :, : targets[b].shape[1]] = torch.from_numpy(targets[b])
        inp[b, :, : inputs[b].shape[1]] = torch.from_numpy(inputs[b])
        cond[b, : conds[b].shape[0]] = conds[b]
        cond_mask[b, : conds[b].shape[0]] = False
    return text_mat, text_lens, inp, tgt, cond, cond_mask


def train_lm(
    samples: list[TrainingSample],
    cfg: LMConfig,
    train_cfg: TrainLMConfig,
    bundle: EncoderBundle,
    style_pool: list[np.ndarray] | None = None,
    model: SpeechLM | None = None,
) -> tuple[SpeechLM, dict]:
    """Optimize next-column prediction over mixed-source batches."""
    sources = {s.source for s in samples}
    if train_cfg.alternation and sources != {"audio_visual", "audio_only"}:
        raise ConfigError(
            "alternating conditioning requires both audio_visual and audio_only data"
        )
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    if model is None:
        model = SpeechLM(cfg)
    cond_params = list(model.conditioner.parameters())
    for layer in model.layers:
        cond_params.extend(layer.cross_attn.parameters())
    cond_ids = {id(p) for p in cond_params}
    base_params = [p for p in model.parameters() if id(p) not in cond_ids]
    opt = torch.optim.Adam(
        [
            {"params": base_params, "lr_mult": 1.0},
            {"params": cond_params, "lr_mult": train_cfg.cond_lr_mult},
        ],
        lr=train_cfg.lr,
    )
    curve: list[tuple[int, float]] = []
    per_source: dict[str, list[float]] = {"audio_visual": [], "audio_only": []}
    model.train()
    for step in range(train_cfg.steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, train_cfg) * group["lr_mult"]
        idx = rng.integers(len(samples), size=train_cfg.batch_size)
        batch = [samples[int(i)] for i in idx]
        text_mat, text_lens, inp, tgt, cond, cond_mask = _collate(
            batch, model, bundle, style_pool, rng
        )
        logits = model.lm_forward(text_mat, inp, cond, cond_mask, text_lens)
        loss = lm_loss(logits, tgt, cfg.pad_id, cfg.eos_id, train_cfg.eos_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        # log the unweighted objective so the curve compares against ln V
        with torch.no_grad():
            loss_val = float(lm_loss(logits.detach(), tgt, cfg.pad_id))
        if step % train_cfg.report_every == 0 or step == train_cfg.steps - 1:
            curve.append((step, loss_val))
        src = batch[0].source
        per_source[src].append(loss_val)
    model.eval()
    duration_mse = (
        fit_duration(model.duration, samples, seed=train_cfg.seed)
        if train_cfg.steps > 0
        else None
    )

    def tail_mean(values: list[float]) -> float | None:
        return float(np.mean(values[-20:])) if values else None

    report = {
        "steps": train_cfg.steps,
        "loss_curve": curve,
        "final_loss": curve[-1][1] if curve else None,
        "per_source_final": {k: tail_mean(v) for k, v in per_source.items()},
        "duration_mse": duration_mse,
        "ln_vocab": math.log(cfg.vocab),
    }
    return model, report


def eval_loss_per_source(
    samples: list[TrainingSample],
    model: SpeechLM,
    bundle: EncoderBundle,
    seed: int = 0,
    max_per_source: int = 16,
) -> dict[str, float]:
    """Mean lm_loss per data source at eval time (no augmentation)."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}
    model.eval()
    for source in ("audio_visual", "audio_only"):
        subset = [s for s in samples if s.source == source][:max_per_source]
        if not subset:
            continue
        losses = []
        with torch.no_grad():
            for s in subset:
                text_mat, text_lens, inp, tgt, cond, cond_mask = _collate(
                    [s], model, bundle, None, rng
                )
                logits = model.lm_forward(text_mat, inp, cond, cond_mask, text_lens)
                losses.append(float(lm_loss(logits, tgt, model.cfg.pad_id)))
        out[source] = float(np.mean(losses))
    return out


def save_lm(path: Path, model: SpeechLM, meta: dict | None = None) -> None:
    from dataclasses import asdict

    torch.save(
        {
            "format_version": LM_CHECKPOINT_VERSION,
            "config": asdict(model.cfg),
            "state": model.state_dict(),
            "meta": meta or {},
        },
        path,
    )


def load_lm(path: Path) -> SpeechLM:
    blob = torch.load(path, weights_only=True)
    if blob["format_version"] != LM_CHECKPOINT_VERSION:
        raise InputError("unsupported LM checkpoint version")
    model = SpeechLM(LMConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model
