"""Listening-test backend: session assignment, stimulus delivery, rating
collection, and aggregation into per-condition mean/std tables.

Persistence is append-only JSON lines (one schema-versioned object per
line), fsynced before acknowledging, so every acknowledged rating survives
a restart and aggregates exactly once. Ratings are keyed by (session,
stimulus); duplicates are rejected.
"""
from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from .errors import DataError, MaskLabError

SCHEMA_VERSION = 1
SCALES = ("sig", "bak", "ovrl")


class NotFoundError(MaskLabError):
    pass


class ConflictError(MaskLabError):
    pass


class ValidationError(MaskLabError):
    pass


class RatingStore:
    """File-backed store for stimuli, sessions, and ratings."""

    def __init__(self, data_dir: str | Path, seed: int = 0):
        self.data_dir = Path(data_dir)
        self.seed = seed
        stimuli_path = self.data_dir / "stimuli.json"
        if not stimuli_path.exists():
            raise DataError(f"stimulus manifest not found: {stimuli_path}")
        stimuli = json.loads(stimuli_path.read_text())
        self.stimuli: dict[str, dict] = {}
        for s in stimuli:
            sid = s["id"]
            if sid in self.stimuli:
                raise DataError(f"duplicate stimulus id {sid!r}")
            wav = self.data_dir / s["wav_path"]
            if not wav.exists():
                raise DataError(f"stimulus file missing: {wav}")
            self.stimuli[sid] = {**s, "wav_path": str(wav)}
        if not self.stimuli:
            raise DataError("stimulus set is empty")

        self._lock = threading.Lock()
        self.sessions: dict[str, list[str]] = {}
        self.ratings: list[dict] = []
        self._seen: set[tuple[str, str]] = set()
        self._sessions_path = self.data_dir / "sessions.jsonl"
        self._ratings_path = self.data_dir / "ratings.jsonl"
        self._load_log(self._sessions_path, self._apply_session)
        self._load_log(self._ratings_path, self._apply_rating)

    def _load_log(self, path: Path, apply) -> None:
        if not path.exists():
            return
        for line in path.read_text().splitlines():
            if line.strip():
                apply(json.loads(line))

    def _apply_session(self, rec: dict) -> None:
        self.sessions[rec["session_id"]] = rec["order"]

    def _apply_rating(self, rec: dict) -> None:
        key = (rec["session_id"], rec["stimulus_id"])
        self._seen.add(key)
        self.ratings.append(rec)

    @staticmethod
    def _append(path: Path, rec: dict) -> None:
        line = json.dumps(rec, sort_keys=True)
        with open(path, "a") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())

    # ---- operations -----------------------------------------------------
    def create_session(self) -> dict:
        with self._lock:
            counter = len(self.sessions) + 1
            session_id = f"s{counter:06d}"
            rng = np.random.default_rng([self.seed, counter])
            order = [list(self.stimuli)[i] for i in rng.permutation(len(self.stimuli))]
            rec = {
                "v": SCHEMA_VERSION,
                "session_id": session_id,
                "order": order,
                "created": time.time(),
            }
            self._append(self._sessions_path, rec)
            self.sessions[session_id] = order
            return {"session_id": session_id, "stimuli": order}

    def stimulus_path(self, stimulus_id: str) -> str:
        if stimulus_id not in self.stimuli:
            raise NotFoundError(f"unknown stimulus {stimulus_id!r}")
        return self.stimuli[stimulus_id]["wav_path"]

    def submit_rating(self, session_id: str, stimulus_id: str, sig: int, bak: int, ovrl: int) -> dict:
        for name, value in (("sig", sig), ("bak", bak), ("ovrl", ovrl)):
            if not isinstance(value, int) or isinstance(value, bool) or not (1 <= value <= 5):
                raise ValidationError(f"{name} must be an integer in 1..5, got {value!r}")
        with self._lock:
            if session_id not in self.sessions:
                raise NotFoundError(f"unknown session {session_id!r}")
            if stimulus_id not in self.stimuli:
                raise NotFoundError(f"unknown stimulus {stimulus_id!r}")
            key = (session_id, stimulus_id)
            if key in self._seen:
                raise ConflictError(f"rating already recorded for {key}")
            rec = {
                "v": SCHEMA_VERSION,
                "session_id": session_id,
                "stimulus_id": stimulus_id,
                "sig": sig,
                "bak": bak,
                "ovrl": ovrl,
                "timestamp": time.time(),
            }
            self._append(self._ratings_path, rec)  # durable before ack
            self._apply_rating(rec)
            return {"status": "ok", "count": len(self.ratings)}

    def aggregate_results(self) -> dict:
        """Per-condition MEAN and population STD for each scale."""
        with self._lock:
            ratings = list(self.ratings)
        by_condition: dict[str, list[dict]] = {}
        for rec in ratings:
            cond = self.stimuli[rec["stimulus_id"]]["condition"]
            by_condition.setdefault(cond, []).append(rec)
        conditions = []
        for cond in sorted(by_condition, key=_condition_sort_key):
            rows = by_condition[cond]
            entry = {"condition": cond, "count": len(rows)}
            for scale in SCALES:
                vals = np.array([r[scale] for r in rows], dtype=np.float64)
                entry[scale] = {"mean": float(vals.mean()), "std": float(vals.std())}
            conditions.append(entry)
        return {"conditions": conditions, "total_ratings": len(ratings), "scales": list(SCALES)}


def _condition_sort_key(cond: str):
    # noisy first, then alpha descending, anything else after
    if cond == "noisy":
        return (0, 0.0)
    if cond.startswith("alpha="):
        try:
            return (1, -float(cond.split("=", 1)[1]))
        except ValueError:
            return (2, 0.0)
    return (2, 0.0)


class RatingBody(BaseModel):
    session_id: str
    stimulus_id: str
    sig: int = Field(ge=1, le=5)
    bak: int = Field(ge=1, le=5)
    ovrl: int = Field(ge=1, le=5)


def create_app(data_dir: str | Path, ui_dir: str | Path | None = None, seed: int = 0):
    """Build the FastAPI app around a RatingStore."""
    store = RatingStore(data_dir, seed=seed)
    app = FastAPI(title="masklab listening test")
    app.state.store = store

    @app.get("/api/session")
    def new_session():
        return store.create_session()

    @app.get("/api/stimulus/{stimulus_id}")
    def get_stimulus(stimulus_id: str):
        try:
            path = store.stimulus_path(stimulus_id)
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return FileResponse(path, media_type="audio/wav")

    @app.post("/api/rating")
    def post_rating(body: RatingBody):
        try:
            return store.submit_rating(body.session_id, body.stimulus_id, body.sig, body.bak, body.ovrl)
        except ValidationError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.get("/api/results")
    def results():
        return store.aggregate_results()

    if ui_dir is not None and Path(ui_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app


def serve(data_dir: str | Path, host: str = "127.0.0.1", port: int = 8000,
          ui_dir: str | Path | None = None, seed: int = 0) -> None:
    """Run the rating service until interrupted."""
    import uvicorn

    app = create_app(data_dir, ui_dir=ui_dir, seed=seed)
    uvicorn.run(app, host=host, port=port, log_level="info")
