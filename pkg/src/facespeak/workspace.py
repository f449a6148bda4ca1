"""Workdir layout and the pipeline stages that fill it.

A workdir holds everything one run produces:

    workdir/
      corpus/           synthetic corpus (audio, faces, manifests, styles)
      codebooks.npz     trained RVQ codebooks
      encoders.pt       contrastively pretrained face/audio encoders
      lm.pt             trained speech language model
      reports/          training and evaluation reports (JSON)
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec
from .config import RunConfig
from .data import (
    build_corpus,
    load_bin_edges,
    load_manifest,
    load_style_pool,
    load_wav,
)
from .decoding import SynthesisStack
from .encoders import (
    EncoderBundle,
    build_speaker_pool,
    load_encoders,
    pretrain_contrastive,
    retrieval_eval,
    save_encoders,
)
from .errors import ConfigError, StateError
from .speechlm import (
    SpeechLM,
    load_lm,
    samples_from_records,
    save_lm,
    train_lm,
)


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def codebook_path(self) -> Path:
        return self.root / "codebooks.npz"

    @property
    def encoders_path(self) -> Path:
        return self.root / "encoders.pt"

    @property
    def lm_path(self) -> Path:
        return self.root / "lm.pt"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def manifest(self, split: str) -> Path:
        return self.corpus_dir / "manifests" / f"{split}.jsonl"

    def write_report(self, name: str, payload: dict) -> Path:
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        path = self.reports_dir / f"{name}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        return path

    # -- pipeline stages ----------------------------------------------------

    def stage_corpus(self, cfg: RunConfig) -> None:
        build_corpus(self.corpus_dir, cfg.corpus)

    def stage_rvq(self, cfg: RunConfig, max_utterances: int = 300) -> codec.Codebooks:
        records = load_manifest(self.manifest("train"))
        rng = np.random.default_rng(cfg.rvq.train.seed)
        picks = rng.choice(len(records), size=min(max_utterances, len(records)), replace=False)
        frames = [
            codec.wave_to_frames(load_wav(self.corpus_dir / records[int(i)].audio_path), cfg.mel)
            for i in np.sort(picks)
        ]
        cb = codec.train_rvq(frames, cfg.rvq.levels, cfg.rvq.size, cfg.rvq.train)
        codec.save_codebooks(self.codebook_path, cb)
        return cb

    def stage_encoders(self, cfg: RunConfig) -> tuple[EncoderBundle, dict]:
        cb = self.load_codebooks()
        records = load_manifest(self.manifest("train")) + load_manifest(self.manifest("val"))
        pool = build_speaker_pool(records, self.corpus_dir, cb, cfg.mel)
        styles = load_style_pool(self.corpus_dir)
        bundle = EncoderBundle(
            cfg.rvq.levels, cfg.rvq.size, cfg.contrastive.tau_init,
            codebooks=cb, mel_cfg=cfg.mel,
        )
        report = pretrain_contrastive(pool, cfg.contrastive, bundle, styles)
        test_records = load_manifest(self.manifest("test"))
        test_pool = build_speaker_pool(test_records, self.corpus_dir, cb, cfg.mel)
        # speaker-level audio: the speaker's utterances concatenated along time
        pairs = [
            (
                test_pool.faces[sid],
                codec.CodeGrid(np.concatenate(test_pool.codes[sid][:20], axis=1)),
            )
            for sid in test_pool.speaker_ids
        ]
        report["retrieval_top1"] = retrieval_eval(bundle, pairs)
        save_encoders(self.encoders_path, bundle, meta={"retrieval_top1": report["retrieval_top1"]})
        self.write_report("contrastive", report)
        return bundle, report

    def stage_lm(self, cfg: RunConfig) -> tuple[SpeechLM, dict]:
        if not self.encoders_path.exists():
            raise ConfigError("encoder checkpoint missing; run pretrain-encoders first")
        cb = self.load_codebooks()
        bundle = load_encoders(self.encoders_path)
        records = load_manifest(self.manifest("train"))
        samples = samples_from_records(records, self.corpus_dir, cb, cfg.mel)
        styles = load_style_pool(self.corpus_dir)
        model, report = train_lm(samples, cfg.lm, cfg.lm_train, bundle, styles)
        save_lm(self.lm_path, model, meta={"final_loss": report["final_loss"]})
        self.write_report("lm_train", report)
        return model, report

    # -- artifact loading ---------------------------------------------------

    def load_codebooks(self) -> codec.Codebooks:
        if not self.codebook_path.exists():
            raise ConfigError("codebooks missing; run train-rvq first")
        return codec.load_codebooks(self.codebook_path)

    def load_stack(self, cfg: RunConfig | None = None) -> SynthesisStack:
        mel = cfg.mel if cfg is not None else codec.MelConfig()
        if not (self.codebook_path.exists() and self.encoders_path.exists()
                and self.lm_path.exists()):
            raise StateError("workdir is missing trained artifacts")
        return SynthesisStack(
            model=load_lm(self.lm_path),
            bundle=load_encoders(self.encoders_path),
            codebooks=self.load_codebooks(),
            mel_cfg=mel,
        )

    def bin_edges(self):
        return load_bin_edges(self.corpus_dir)
