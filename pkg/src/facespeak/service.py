"""HTTP service exposing the candidate / select / synthesize workflow.

Sessions are file-backed JSON under the workdir, so the service can restart
without losing state. Every response echoes the seed that produced it, which
makes any result replayable byte for byte.
"""
from __future__ import annotations

import base64
import io
import json
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from .codec import codegrid_from_bytes, codegrid_to_bytes
from .conditioning import PHRASE_BANK, neutralize_gender
from .data import load_face, save_wav
from .decoding import DecodeOptions, SynthesisStack, VoicePrompt, generate, generate_candidates
from .errors import FacespeakError, GenerationError, StateError
from .evalmetrics import speaker_sim
from .workspace import Workspace


class CandidatesRequest(BaseModel):
    face_id: str | None = None
    face_b64: str | None = None  # base64 PNG, alternative to face_id
    description: str
    n: int = 3
    seed: int = 0


class SelectRequest(BaseModel):
    session_id: str
    candidate_id: str


class SynthesizeRequest(BaseModel):
    session_id: str
    input_text: str
    description: str | None = None
    seed: int = 0
    max_steps: int = Field(default=250, ge=1)


def _session_path(workdir: Path, session_id: str) -> Path:
    return workdir / "sessions" / f"{session_id}.json"


def _load_session(workdir: Path, session_id: str) -> dict:
    path = _session_path(workdir, session_id)
    if not path.exists():
        raise HTTPException(404, f"unknown session {session_id}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _save_session(workdir: Path, session: dict) -> None:
    path = _session_path(workdir, session["session_id"])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(session, fh)


def create_app(workdir: Path, stack: SynthesisStack | None = None) -> FastAPI:
    workdir = Path(workdir)
    ws = Workspace(workdir)
    app = FastAPI(title="facespeak")
    app.state.stack = stack
    audio_dir = workdir / "serve_audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    def get_stack() -> SynthesisStack:
        if app.state.stack is None:
            try:
                app.state.stack = ws.load_stack()
            except (StateError, FacespeakError) as exc:
                raise HTTPException(503, f"model not loaded: {exc}") from exc
        return app.state.stack

    def resolve_face(req: CandidatesRequest) -> np.ndarray:
        if req.face_b64:
            from PIL import Image

            raw = base64.b64decode(req.face_b64)
            img = Image.open(io.BytesIO(raw)).convert("RGB").resize((112, 112))
            return np.asarray(img, dtype=np.float64) / 255.0
        if req.face_id:
            path = ws.corpus_dir / req.face_id
            if not path.exists() or not path.resolve().is_relative_to(ws.corpus_dir.resolve()):
                raise HTTPException(400, f"unknown face_id {req.face_id}")
            return load_face(path)
        raise HTTPException(400, "either face_id or face_b64 is required")

    def store_audio(name: str, result) -> str:
        save_wav(audio_dir / f"{name}.wav", result.waveform)
        return f"/audio/{name}.wav"

    @app.get("/phrases")
    def phrases() -> dict:
        return PHRASE_BANK

    @app.get("/audio/{name}")
    def audio(name: str):
        path = (audio_dir / name).resolve()
        if path.parent != audio_dir.resolve() or not path.exists():
            raise HTTPException(404, "no such audio")
        return FileResponse(path, media_type="audio/wav")

    @app.post("/candidates")
    def candidates(req: CandidatesRequest) -> dict:
        if req.n <= 0:
            raise HTTPException(400, "n must be >= 1")
        face = resolve_face(req)
        desc = neutralize_gender(req.description)
        stack = get_stack()
        opts = DecodeOptions(seed=req.seed)
        try:
            results = generate_candidates(stack, face, desc, req.n, opts)
        except GenerationError as exc:
            raise HTTPException(500, str(exc)) from exc
        session_id = uuid.uuid4().hex[:12]
        cands = []
        K = stack.model.cfg.codebook_size
        for i, res in enumerate(results):
            cand_id = f"c{i}"
            url = store_audio(f"{session_id}_{cand_id}", res)
            cands.append(
                {
                    "id": cand_id,
                    "audio_url": url,
                    "seed": res.seed,
                    "codes_b64": base64.b64encode(codegrid_to_bytes(res.codes, K)).decode(),
                }
            )
        face_path = workdir / "sessions" / f"{session_id}_face.npy"
        face_path.parent.mkdir(parents=True, exist_ok=True)
        np.save(face_path, face)
        session = {
            "session_id": session_id,
            "face_npy": str(face_path),
            "description": desc.text,
            "candidates": cands,
            "selected": None,
            "seed": req.seed,
        }
        _save_session(workdir, session)
        return {
            "session_id": session_id,
            "seed": req.seed,
            "candidates": [
                {"id": c["id"], "audio_url": c["audio_url"], "seed": c["seed"]} for c in cands
            ],
        }

    @app.post("/select")
    def select(req: SelectRequest) -> dict:
        session = _load_session(workdir, req.session_id)
        ids = [c["id"] for c in session["candidates"]]
        if req.candidate_id not in ids:
            raise HTTPException(404, f"unknown candidate {req.candidate_id}")
        session["selected"] = req.candidate_id
        _save_session(workdir, session)
        return {"ok": True, "session_id": req.session_id, "selected": req.candidate_id}

    @app.post("/synthesize")
    def synthesize(req: SynthesizeRequest) -> dict:
        if not req.input_text.strip():
            raise HTTPException(400, "input_text must be non-empty")
        session = _load_session(workdir, req.session_id)
        stack = get_stack()
        face = np.load(session["face_npy"])
        desc_text = req.description if req.description is not None else session["description"]
        desc = neutralize_gender(desc_text)
        prompt = None
        warning = None
        ref_codes = None
        if session["selected"] is not None:
            cand = next(c for c in session["candidates"] if c["id"] == session["selected"])
            ref_codes = codegrid_from_bytes(base64.b64decode(cand["codes_b64"]))
            prompt = VoicePrompt(codes=ref_codes, face=face)
        else:
            warning = "no candidate selected; synthesizing without a voice prompt"
        opts = DecodeOptions(seed=req.seed, max_steps=req.max_steps)
        try:
            result = generate(stack, req.input_text, face, desc, opts, prompt)
        except GenerationError as exc:
            raise HTTPException(500, str(exc)) from exc
        name = f"{req.session_id}_synth_{uuid.uuid4().hex[:8]}"
        url = store_audio(name, result)
        sim = None
        if ref_codes is not None:
            sim = speaker_sim(result.codes, ref_codes, stack.bundle, stack.codebooks, stack.mel_cfg)
        out = {
            "audio_url": url,
            "seed": req.seed,
            "prompted": result.prompted,
            "metrics": {"speaker_sim": sim},
        }
        if warning:
            out["warning"] = warning
        return out

    return app
