"""Sampling-based generation with repetition penalty and voice prompting.

A generation continues the delayed code stream column by column: per level,
specials are masked out of sampling (EOS is only reachable on level 0), the
level's own generated history is penalized, and top-k sampling draws the next
token. Providing a previously generated code grid as a prompt prepends its
delayed columns to the stream, which keeps the continuation's voice consistent.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import (
    PAD_DELAY,
    CodeGrid,
    Codebooks,
    MelConfig,
    Waveform,
    apply_delay,
    frames_to_wave,
    rvq_decode,
)
from .conditioning import DescriptiveText
from .data import phonemes_of
from .encoders import EncoderBundle
from .errors import GenerationError, InputError, StateError
from .speechlm import SpeechLM

MAX_SEED = 2 ** 64

# corpus speaking-rate contract, phonemes per second
RATE_MIN = 6.0
RATE_MAX = 20.0


def length_bounds(n_phonemes: int, frame_rate: float,
                  opts: DecodeOptions) -> tuple[int, int]:
    """Frame-count window for a text, intersected with the decode options.

    Speech in this corpus runs at 6-20 phonemes/s by construction, so a text
    with P phonemes must occupy between P/20 and P/6 seconds of frames. EOS
    outside that window can only be sampling noise; bounding the free-running
    length to it keeps measured speaking rates physical. The user's explicit
    min_steps/max_steps stay hard limits.
    """
    if n_phonemes <= 0:
        return opts.min_steps, opts.max_steps
    lo_text = math.ceil(n_phonemes / RATE_MAX * frame_rate)
    hi_text = math.ceil(n_phonemes / RATE_MIN * frame_rate)
    eff_max = min(opts.max_steps, max(hi_text, opts.min_steps))
    eff_min = max(opts.min_steps, min(lo_text, eff_max))
    return eff_min, eff_max


@dataclass(frozen=True)
class DecodeOptions:
    top_k: int = 8
    repetition_penalty: float = 1.2
    temperature: float = 0.8
    max_steps: int = 250
    min_steps: int = 10
    seed: int = 0
    # classifier-free guidance on the description: 1.0 = off, > 1.0 amplifies
    # the description's effect by contrasting against description-free logits
    guidance: float = 1.0

    def __post_init__(self):
        if self.top_k < 1:
            raise InputError("top_k must be >= 1")
        if self.min_steps < 1:
            raise InputError("min_steps must be >= 1")
        if self.repetition_penalty < 1.0:
            raise InputError("repetition penalty must be >= 1")
        if self.temperature <= 0:
            raise InputError("temperature must be positive")
        if self.guidance <= 0:
            raise InputError("guidance must be positive")


@dataclass
class VoicePrompt:
    codes: CodeGrid
    face: np.ndarray


@dataclass
class GenerationResult:
    codes: CodeGrid
    waveform: Waveform
    seed: int
    prompted: bool
    steps: int


def apply_repetition_penalty(logits: np.ndarray, history, rho: float) -> np.ndarray:
    """CTRL-style penalty: divide positive logits, multiply negative ones."""
    if rho < 1.0:
        raise InputError("repetition penalty must be >= 1")
    out = np.array(logits, dtype=np.float64, copy=True)
    if rho == 1.0:
        return out
    for tok in set(history):
        if 0 <= tok < len(out):
            out[tok] = out[tok] / rho if out[tok] > 0 else out[tok] * rho
    return out


def top_k_sample(logits: np.ndarray, k: int, temperature: float,
                 rng: np.random.Generator) -> int:
    """Sample from the renormalized softmax over the k highest logits.

    Ties at the cut break toward the lowest index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise InputError("non-finite logits")
    if k < 1:
        raise InputError("k must be >= 1")
    k = min(k, len(logits))
    order = np.argsort(-logits, kind="stable")
    keep = order[:k]
    z = logits[keep] / temperature
    z -= np.max(z)
    p = np.exp(z)
    p /= p.sum()
    return int(keep[rng.choice(k, p=p)])


def derive_seed(request_seed: int, index: int) -> int:
    return (request_seed * 1_000_003 + 7919 * index + 1) % MAX_SEED


@dataclass
class SynthesisStack:
    """Everything generation needs: LM, encoders, and the codec."""
    model: SpeechLM
    bundle: EncoderBundle
    codebooks: Codebooks
    mel_cfg: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        if self.model is None or self.bundle is None or self.codebooks is None:
            raise StateError("model, encoders, and codebooks must all be loaded")


def generate(
    stack: SynthesisStack,
    input_text: str,
    face: np.ndarray,
    desc: DescriptiveText,
    opts: DecodeOptions = DecodeOptions(),
    prompt: VoicePrompt | None = None,
) -> GenerationResult:
    """Sample a code grid conditioned on (face, description), optionally prompted.

    The prompt region is excluded from the returned codes and audio.
    """
    if opts.max_steps <= 0:
        raise GenerationError("max_steps must allow at least one step")
    model = stack.model
    cfg = model.cfg
    model.eval()
    rng = np.random.default_rng(opts.seed)

    voice = stack.bundle.encode_face(face)
    cond = model.conditioning_for(desc, voice)
    cond_free = None
    if opts.guidance != 1.0:
        cond_free = model.conditioning_for(
            DescriptiveText("", neutralized=True), voice
        )
    text_ids = model.encode_text(input_text)
    n_phonemes = len(phonemes_of(input_text))
    min_len, max_len = length_bounds(n_phonemes, stack.mel_cfg.frame_rate, opts)
    # the duration head turns the description into a stopping window; EOS
    # sampling picks the exact stop inside it. The text-rate bounds and the
    # user's explicit step limits stay authoritative.
    pred = model.predict_duration(desc, n_phonemes)
    min_len = min(max(min_len, int(math.floor(0.9 * pred))), max_len)
    max_len = max(min(max_len, int(math.ceil(1.1 * pred))), min_len)

    cols: list[np.ndarray] = [np.full(cfg.levels, cfg.bos_id, dtype=np.int64)]
    prompt_len = 0
    if prompt is not None:
        delayed = apply_delay(prompt.codes).codes[:, : prompt.codes.length]
        delayed = np.where(delayed == PAD_DELAY, cfg.pad_id, delayed)
        cols.extend(delayed.T)
        prompt_len = prompt.codes.length

    history: list[Counter] = [Counter() for _ in range(cfg.levels)]
    level0_len: int | None = None
    generated: list[np.ndarray] = []
    t = prompt_len  # index of the delayed column being predicted

    with torch.no_grad():
        cond_frames = cond.frames[None]
        text_mat = text_ids[None]
        while True:
            if level0_len is None and t >= prompt_len + max_len:
                level0_len = t
            if level0_len is not None and t > level0_len + cfg.levels - 2:
                break
            inp = torch.from_numpy(np.stack(cols, axis=1))[None]
            logits = model.lm_forward(text_mat, inp, cond_frames)[0, :, -1, :].numpy()
            if cond_free is not None:
                free = model.lm_forward(
                    text_mat, inp, cond_free.frames[None]
                )[0, :, -1, :].numpy()
                logits = free + opts.guidance * (logits - free)
            col = np.full(cfg.levels, cfg.pad_id, dtype=np.int64)
            for l in range(cfg.levels):
                time = t - l
                if time < 0:
                    continue
                if time < prompt_len:
                    # the delayed stream still carries prompt codes at upper levels
                    col[l] = prompt.codes.codes[l, time]
                    continue
                if level0_len is not None and time >= level0_len:
                    continue
                if l == 0 and level0_len is not None:
                    continue
                if l == 0 and time - prompt_len >= min_len:
                    # EOS only becomes reachable after the length floor
                    cand = np.arange(cfg.codebook_size + 1)
                    cand[cfg.codebook_size] = cfg.eos_id
                else:
                    cand = np.arange(cfg.codebook_size)
                # code tokens index identically into the candidate slice
                lg = apply_repetition_penalty(
                    logits[l][cand],
                    [h for h in history[l] if h < cfg.codebook_size],
                    opts.repetition_penalty,
                )
                tok = int(cand[top_k_sample(lg, opts.top_k, opts.temperature, rng)])
                if l == 0 and tok == cfg.eos_id:
                    level0_len = time
                    continue
                col[l] = tok
                history[l][tok] += 1
            generated.append(col)
            cols.append(col)
            t += 1

    total_len = level0_len
    gen_len = total_len - prompt_len
    if gen_len <= 0:
        raise GenerationError("generation ended before producing any codes")

    # assemble the full delayed grid (prompt + generated), revert, strip prompt
    delayed_len = total_len + cfg.levels - 1
    full = np.full((cfg.levels, delayed_len), PAD_DELAY, dtype=np.int64)
    all_cols = cols[1:]  # drop BOS
    for tt in range(delayed_len):
        col = all_cols[tt]
        for l in range(cfg.levels):
            time = tt - l
            if 0 <= time < total_len:
                full[l, tt] = col[l]
    from .codec import DelayedGrid, revert_delay

    grid = revert_delay(DelayedGrid(full))
    out_codes = CodeGrid(grid.codes[:, prompt_len:])
    frames = rvq_decode(out_codes, stack.codebooks, stack.mel_cfg.frame_rate)
    wav = frames_to_wave(frames, stack.mel_cfg)
    return GenerationResult(
        codes=out_codes,
        waveform=wav,
        seed=opts.seed,
        prompted=prompt is not None,
        steps=gen_len,
    )


DEFAULT_CANDIDATE_TEXT = "voice candidate"


def generate_candidates(
    stack: SynthesisStack,
    face: np.ndarray,
    desc: DescriptiveText,
    n: int,
    opts: DecodeOptions = DecodeOptions(),
    input_text: str = DEFAULT_CANDIDATE_TEXT,
) -> list[GenerationResult]:
    """n independent generations under per-candidate seeds derived from opts.seed."""
    if n < 1:
        raise InputError("candidate count must be >= 1")
    results = []
    for i in range(n):
        opts_i = DecodeOptions(
            top_k=opts.top_k,
            repetition_penalty=opts.repetition_penalty,
            temperature=opts.temperature,
            max_steps=opts.max_steps,
            min_steps=opts.min_steps,
            seed=derive_seed(opts.seed, i),
            guidance=opts.guidance,
        )
        results.append(generate(stack, input_text, face, desc, opts_i))
    return results
