"""HTTP API over a frozen checkpoint: captioning, tag prediction, sessions.

The model never changes after startup, so every response is a pure
function of the checkpoint and the request; edit sessions are the one
piece of state, held in memory with an idle TTL and recreated cheaply.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .corpus import load_dataset
from .errors import DomainError
from .inference import ControlSession, caption_clip
from .model import check_data_compat, load_model
from .posgen import POS_TAGS

DEFAULT_SESSION_TTL = 30 * 60.0


class ClipRequest(BaseModel):
    clip_id: str
    checkpoint_hash: str | None = None


class OverrideOp(BaseModel):
    op: str
    position: int
    tag: str


class CaptionRequest(BaseModel):
    clip_id: str
    beam_width: int = 1
    overrides: list[OverrideOp] | None = None
    checkpoint_hash: str | None = None


class SessionRequest(BaseModel):
    clip_id: str
    beam_width: int = 1
    checkpoint_hash: str | None = None


class EditRequest(BaseModel):
    op: str
    position: int
    tag: str


def _json_bytes(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def _json_response(payload: dict, status_code: int = 200) -> Response:
    return Response(content=_json_bytes(payload), status_code=status_code,
                    media_type="application/json")


def _invalid(message: str) -> HTTPException:
    return HTTPException(status_code=422, detail={
        "message": message, "valid_tags": list(POS_TAGS)})


def _caption_body(cap) -> dict:
    return {
        "tokens": list(cap.tokens),
        "text": " ".join(cap.tokens),
        "tags_used": list(cap.tags.tags),
        "logprob": float(cap.score),
        "per_step_attention": [[float(v) for v in row]
                               for row in cap.attention],
        "edited": bool(cap.edited),
        "unused_overrides": list(cap.unused_overrides),
    }


@dataclass
class _SessionEntry:
    session: ControlSession
    last_used: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock)


def build_app(ckpt_path, data_dir, session_ttl: float = DEFAULT_SESSION_TTL,
              clock=time.monotonic) -> FastAPI:
    """Assemble the service around one checkpoint and its corpus."""
    model, meta = load_model(ckpt_path)
    dataset = load_dataset(data_dir)
    check_data_compat(model, meta, dataset)
    ckpt_hash = hashlib.sha256(open(ckpt_path, "rb").read()).hexdigest()[:16]

    clips = {}
    clip_rows = []
    for split in sorted(dataset.splits):
        for ex in dataset.splits[split]:
            clips[ex.clip.clip_id] = ex
            clip_rows.append({"clip_id": ex.clip.clip_id, "split": split})

    sessions: dict[str, _SessionEntry] = {}
    registry_lock = threading.Lock()
    ids = itertools.count(1)

    app = FastAPI(
        title="caplab service",
        version="1.0",
        description="Caption clips of a synthetic corpus with a frozen "
                    "model; predict tag sequences; run tag-editing "
                    "sessions whose captions update after every edit.")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    def check_hash(sent: str | None) -> None:
        if sent is not None and sent != ckpt_hash:
            raise HTTPException(status_code=409, detail={
                "message": "checkpoint mismatch: the service runs "
                           f"{ckpt_hash}, the request expected {sent}",
                "checkpoint_hash": ckpt_hash})

    def get_clip(clip_id: str):
        if clip_id not in clips:
            raise HTTPException(status_code=404,
                                detail={"message": f"unknown clip {clip_id!r}"})
        return clips[clip_id]

    def purge(now: float) -> None:
        dead = [sid for sid, e in sessions.items()
                if now - e.last_used >= session_ttl]
        for sid in dead:
            del sessions[sid]

    def get_session(session_id: str) -> _SessionEntry:
        with registry_lock:
            purge(clock())
            if session_id not in sessions:
                raise HTTPException(
                    status_code=404,
                    detail={"message": f"unknown session {session_id!r}"})
            entry = sessions[session_id]
            entry.last_used = clock()
            return entry

    def session_body(session_id: str, sess: ControlSession) -> dict:
        return {
            "session_id": session_id,
            "tags": list(sess.current.tags.tags),
            "caption": _caption_body(sess.current),
            "history": [dict(e.to_dict(), index=i)
                        for i, e in enumerate(sess.history)],
        }

    @app.get("/v1/health")
    def health():
        return _json_response({"status": "ok", "checkpoint_hash": ckpt_hash,
                               "model_config": model.config.to_dict()})

    @app.get("/v1/clips")
    def list_clips():
        return _json_response({"clips": clip_rows})

    @app.post("/v1/pos")
    def predict_tags(req: ClipRequest):
        check_hash(req.checkpoint_hash)
        ex = get_clip(req.clip_id)
        cap = caption_clip(model, ex.clip, dataset.vocab)
        return _json_response({
            "tags": list(cap.tags.tags),
            "per_step_attention": [[float(v) for v in row]
                                   for row in cap.tag_attention],
        })

    @app.post("/v1/caption")
    def caption(req: CaptionRequest):
        check_hash(req.checkpoint_hash)
        ex = get_clip(req.clip_id)
        if req.beam_width < 1:
            raise _invalid(f"beam_width must be positive, got {req.beam_width}")
        try:
            sess = ControlSession(model, ex.clip, dataset.vocab,
                                  beam_width=req.beam_width)
            for ov in req.overrides or []:
                sess.apply(ov.op, ov.position, ov.tag)
        except DomainError as exc:
            raise _invalid(str(exc))
        return _json_response(_caption_body(sess.current))

    @app.post("/v1/sessions")
    def create_session(req: SessionRequest):
        check_hash(req.checkpoint_hash)
        ex = get_clip(req.clip_id)
        if req.beam_width < 1:
            raise _invalid(f"beam_width must be positive, got {req.beam_width}")
        sess = ControlSession(model, ex.clip, dataset.vocab,
                              beam_width=req.beam_width)
        with registry_lock:
            purge(clock())
            session_id = f"s{next(ids):06d}"
            sessions[session_id] = _SessionEntry(session=sess,
                                                 last_used=clock())
        return _json_response(session_body(session_id, sess), 201)

    @app.post("/v1/sessions/{session_id}/edits")
    def apply_edit(session_id: str, req: EditRequest):
        entry = get_session(session_id)
        with entry.lock:
            try:
                entry.session.apply(req.op, req.position, req.tag)
            except DomainError as exc:
                raise _invalid(str(exc))
            return _json_response(session_body(session_id, entry.session))

    @app.post("/v1/sessions/{session_id}/reset")
    def reset_session(session_id: str):
        entry = get_session(session_id)
        with entry.lock:
            entry.session.reset()
            return _json_response(session_body(session_id, entry.session))

    @app.delete("/v1/sessions/{session_id}")
    def delete_session(session_id: str):
        get_session(session_id)
        with registry_lock:
            sessions.pop(session_id, None)
        return _json_response({"deleted": session_id})

    return app
