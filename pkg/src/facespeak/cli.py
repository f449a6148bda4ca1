"""Command-line interface for the full pipeline.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .conditioning import DescriptiveText, PHRASE_BANK, neutralize_gender
from .config import load_run_config
from .data import load_face, load_manifest, regenerate_ground_truth, save_wav
from .decoding import DecodeOptions, generate
from .errors import ConfigError, FacespeakError
from .evalmetrics import (
    MetricReport,
    controllability_report,
    c50_from_rir,
    format_report,
    si_sdr,
    speaking_rate,
)
from .workspace import Workspace


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workdir", required=True, type=Path)
    p.add_argument("--config", type=Path, default=None, help="run-config YAML")
    p.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override one run-config value",
    )


def _overrides(items: list[str]) -> dict:
    out: dict = {}
    for item in items:
        try:
            key, value = item.split("=", 1)
            section, field = key.split(".", 1)
        except ValueError as exc:
            raise ConfigError(f"bad --set {item!r}; expected SECTION.KEY=VALUE") from exc
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        out.setdefault(section, {})[field] = parsed
    return out


def cmd_build_corpus(args) -> int:
    cfg = load_run_config(args.config, _overrides(args.set))
    ws = Workspace(args.workdir)
    ws.stage_corpus(cfg)
    print(f"corpus written to {ws.corpus_dir}")
    return 0


def cmd_train_rvq(args) -> int:
    cfg = load_run_config(args.config, _overrides(args.set))
    ws = Workspace(args.workdir)
    cb = ws.stage_rvq(cfg)
    print(f"codebooks L={cb.levels} K={cb.size} F={cb.dim} -> {ws.codebook_path}")
    return 0


def cmd_pretrain_encoders(args) -> int:
    cfg = load_run_config(args.config, _overrides(args.set))
    ws = Workspace(args.workdir)
    _, report = ws.stage_encoders(cfg)
    print(
        f"contrastive: loss {report['initial_loss']:.4f} -> {report['final_loss']:.4f}, "
        f"held-out retrieval top-1 {report['retrieval_top1']:.3f}"
    )
    return 0


def cmd_train_lm(args) -> int:
    cfg = load_run_config(args.config, _overrides(args.set))
    ws = Workspace(args.workdir)
    _, report = ws.stage_lm(cfg)
    print(f"lm: final loss {report['final_loss']:.4f} (ln V = {report['ln_vocab']:.4f})")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, _overrides(args.set))
    ws = Workspace(args.workdir)
    ws.load_stack(cfg)  # fails with exit 3 if artifacts are missing
    records = load_manifest(ws.manifest("test"))[: args.limit]
    rows = []
    for rec in records:
        wav, gt = regenerate_ground_truth(rec)
        from .codec import Waveform

        rows.append(
            {
                "utt_id": rec.utt_id,
                "speaking_rate": speaking_rate(gt.phoneme_count, gt.duration),
                "pitch_std_hz": gt.pitch_std_hz,
                "si_sdr_db": si_sdr(wav, Waveform(gt.reverberant, wav.sample_rate)),
                "c50_db": c50_from_rir(Waveform(gt.rir, wav.sample_rate)),
                "snr_db": gt.snr_db,
            }
        )
    header = ["utt_id", "speaking_rate", "pitch_std_hz", "si_sdr_db", "c50_db", "snr_db"]
    print("  ".join(f"{h:>14}" for h in header))
    for row in rows:
        print(
            "  ".join(
                f"{row[h]:>14.2f}" if isinstance(row[h], float) else f"{row[h]:>14}"
                for h in header
            )
        )
    ws.write_report("eval", {"rows": rows})
    return 0


def _pace_tone_sweeps(public: bool = False) -> dict:
    suffix = " " + PHRASE_BANK["public"][0] if public else ""
    return {
        "pace": {
            "fast": PHRASE_BANK["pace"]["fast"][0] + suffix,
            "moderate": PHRASE_BANK["pace"]["moderate"][0] + suffix,
            "slow": PHRASE_BANK["pace"]["slow"][0] + suffix,
        },
        "tone": {
            "expressive": PHRASE_BANK["tone"]["expressive"][0] + suffix,
            "monotone": PHRASE_BANK["tone"]["monotone"][0] + suffix,
        },
    }


def run_controllability(
    ws: Workspace,
    cfg,
    faces: list[np.ndarray],
    eval_text: str = "the quick brown fox jumps over the lazy dog",
    seeds_per_cell: int = 2,
    base_seed: int = 77,
) -> MetricReport:
    from .data import phonemes_of

    stack = ws.load_stack(cfg)
    n_phonemes = len(phonemes_of(eval_text))

    def synthesize(face, description, seed):
        res = generate(
            stack,
            eval_text,
            face,
            DescriptiveText(description, neutralized=True),
            # strong guidance: the report probes the description's effect, so
            # amplify it rather than measure it through sampling noise
            DecodeOptions(seed=seed, max_steps=cfg.decode.max_steps, guidance=3.0),
        )
        return {
            "waveform": res.waveform,
            "phoneme_count": n_phonemes,
            "duration": res.waveform.duration,
        }

    return controllability_report(
        synthesize, faces, _pace_tone_sweeps(), seeds_per_cell=seeds_per_cell,
        base_seed=base_seed,
    )


def cmd_report_controllability(args) -> int:
    cfg = load_run_config(args.config, _overrides(args.set))
    ws = Workspace(args.workdir)
    records = load_manifest(ws.manifest("test"))
    faces = []
    seen = set()
    for rec in records:
        if rec.face_path and rec.speaker_id not in seen:
            faces.append(load_face(ws.corpus_dir / rec.face_path))
            seen.add(rec.speaker_id)
        if len(faces) >= args.faces:
            break
    report = run_controllability(ws, cfg, faces, seeds_per_cell=args.seeds_per_cell)
    print(format_report(report))
    ws.write_report("controllability", report.to_dict())
    return 0


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config, _overrides(args.set))
    ws = Workspace(args.workdir)
    stack = ws.load_stack(cfg)
    face = load_face(Path(args.face))
    desc = neutralize_gender(args.description)
    res = generate(
        stack, args.text, face, desc,
        DecodeOptions(seed=args.seed, max_steps=cfg.decode.max_steps),
    )
    save_wav(Path(args.out), res.waveform)
    print(f"wrote {args.out} ({res.steps} code steps, seed {res.seed})")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.workdir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facespeak")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in [
        ("build-corpus", cmd_build_corpus),
        ("train-rvq", cmd_train_rvq),
        ("pretrain-encoders", cmd_pretrain_encoders),
        ("train-lm", cmd_train_lm),
    ]:
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval")
    _add_common(p)
    p.add_argument("--limit", type=int, default=16)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report-controllability")
    _add_common(p)
    p.add_argument("--faces", type=int, default=4)
    p.add_argument("--seeds-per-cell", type=int, default=2)
    p.set_defaults(fn=cmd_report_controllability)

    p = sub.add_parser("gen")
    _add_common(p)
    p.add_argument("--text", required=True)
    p.add_argument("--face", required=True)
    p.add_argument("--description", default="The voice is monotone.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out.wav")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("serve")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FacespeakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
