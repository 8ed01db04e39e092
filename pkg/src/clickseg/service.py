"""Network boundary: serves images and live interactive sessions over
HTTP + WebSocket.

Wire protocol (JSON, ``type`` discriminator):

* client -> server: ``begin{image_id}``, ``click{polarity,x,y}``,
  ``move{click_id,x,y}``, ``delete{click_id}``, ``undo``, ``reset``
* server -> client: ``mask{rle,width,height,latency_ms,click_ids,session_id,acked}``
  or ``error{code,message,acked}``

Every client message is covered by exactly one response; consecutive
pending ``move`` events for the same click are coalesced and share one
response, whose ``acked`` field counts the messages it covers (so a client
can match responses to sends under drag floods). Error codes:
``bad_request``, ``not_found``, ``busy``, ``internal``.
"""

from __future__ import annotations

import asyncio
import io
import json
import logging
import os
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, Response
from PIL import Image

from . import engine, rle
from .data import Sample, load_dataset, load_manifest, read_sample, write_sample
from .grid import Grid2D
from .model import checkpoint_load

log = logging.getLogger(__name__)

ENV_PREFIX = "CLICKSEG_"
# display window for z-scored intensities, mapped linearly to 8-bit
DISPLAY_WINDOW = (-2.5, 2.5)


@dataclass(frozen=True)
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8008
    checkpoint: str = ""
    dataset_root: str = ""
    max_sessions: int = 8
    click_sigma: float = 2.0
    export_dir: Optional[str] = None
    num_threads: Optional[int] = None


def apply_env_overrides(cfg: ServeConfig, env=os.environ) -> ServeConfig:
    """Apply CLICKSEG_* environment overrides onto a config."""
    mapping = {
        "HOST": ("host", str),
        "PORT": ("port", int),
        "CHECKPOINT": ("checkpoint", str),
        "DATASET": ("dataset_root", str),
        "MAX_SESSIONS": ("max_sessions", int),
        "CLICK_SIGMA": ("click_sigma", float),
        "EXPORT_DIR": ("export_dir", str),
        "NUM_THREADS": ("num_threads", int),
    }
    updates = {}
    for key, (attr, cast) in mapping.items():
        raw = env.get(ENV_PREFIX + key)
        if raw is not None:
            updates[attr] = cast(raw)
    return replace(cfg, **updates) if updates else cfg


class _Inbox:
    """Per-session message buffer that coalesces runs of moves on one click."""

    def __init__(self) -> None:
        self.items: deque = deque()
        self.wakeup = asyncio.Event()
        self.closed = False

    def put(self, msg: dict) -> None:
        self.items.append(msg)
        self.wakeup.set()

    def close(self) -> None:
        self.closed = True
        self.wakeup.set()

    async def next_group(self) -> Optional[tuple[dict, int]]:
        """Next message plus the count of queued messages it supersedes."""
        while not self.items:
            if self.closed:
                return None
            self.wakeup.clear()
            await self.wakeup.wait()
        msg = self.items.popleft()
        acked = 1
        if msg.get("type") == "move":
            while (
                self.items
                and self.items[0].get("type") == "move"
                and self.items[0].get("click_id") == msg.get("click_id")
            ):
                msg = self.items.popleft()
                acked += 1
        return msg, acked


def _image_id(sample: Sample) -> str:
    return f"{sample.case_id}/{sample.slice_index:04d}"


def _render_png(image: Grid2D) -> bytes:
    from .data import normalize_intensities

    z = normalize_intensities(image).values.astype(np.float64)
    lo, hi = DISPLAY_WINDOW
    u8 = np.clip((z - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def create_app(cfg: ServeConfig) -> FastAPI:
    if cfg.num_threads:
        import torch

        torch.set_num_threads(cfg.num_threads)
    model_state = checkpoint_load(cfg.checkpoint)  # bad checkpoint -> refuse to start
    manifest = load_manifest(cfg.dataset_root)
    root = Path(cfg.dataset_root)
    index: dict[str, Path] = {}
    for case in manifest["cases"]:
        for sidecar in sorted((root / case).glob("*.json")):
            index[f"{case}/{sidecar.stem}"] = sidecar

    app = FastAPI(title="clickseg")
    app.state.model = model_state
    app.state.sessions: dict[str, engine.Session] = {}
    app.state.active = 0
    app.state.counter = 0
    app.state.cfg = cfg

    def _http_error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse({"code": code, "message": message}, status_code=status)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/images")
    def images():
        out = []
        for image_id, sidecar in index.items():
            meta = json.loads(sidecar.read_text())
            out.append(
                {
                    "id": image_id,
                    "width": meta["width"],
                    "height": meta["height"],
                    "case_id": meta["case_id"],
                    "slice_index": meta["slice_index"],
                }
            )
        return out

    @app.get("/images/{image_id:path}")
    def image_png(image_id: str):
        if image_id not in index:
            return _http_error(404, "not_found", f"unknown image {image_id}")
        sample = read_sample(index[image_id])
        return Response(content=_render_png(sample.image), media_type="image/png")

    @app.post("/sessions/{session_id}/export")
    def export_session(session_id: str):
        session = app.state.sessions.get(session_id)
        if session is None:
            return _http_error(404, "not_found", f"unknown session {session_id}")
        export_dir = Path(cfg.export_dir or (root / "exports"))
        sample = Sample(
            image=session.raw_image,
            label=session.latest_mask.bits.astype(np.uint8),
            spacing=session.raw_image.spacing,
            case_id=f"export_{session_id}",
            slice_index=0,
            structures={1: "annotation"},
        )
        stem = write_sample(sample, export_dir)
        sidecar = stem.with_suffix(".json")
        meta = json.loads(sidecar.read_text())
        meta["clicks"] = [
            {"id": c.id, "polarity": c.polarity, "x": c.x, "y": c.y} for c in session.clicks
        ]
        sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True))
        return {"path": str(stem)}

    async def _process(ws: WebSocket, session_box: list, msg: dict, acked: int) -> None:
        async def send_error(code: str, message: str) -> None:
            await ws.send_json({"type": "error", "code": code, "message": message, "acked": acked})

        mtype = msg.get("type")
        if mtype == "__malformed__":
            await send_error("bad_request", msg.get("detail", "malformed message"))
            return
        try:
            if mtype == "begin":
                if session_box:
                    await send_error("bad_request", "session already started")
                    return
                image_id = msg.get("image_id")
                if image_id not in index:
                    await send_error("not_found", f"unknown image {image_id}")
                    return
                if app.state.active >= cfg.max_sessions:
                    await send_error("busy", "maximum concurrent sessions reached")
                    return
                sample = read_sample(index[image_id])
                app.state.counter += 1
                session = engine.begin_session(
                    sample.image,
                    app.state.model,
                    session_id=f"s{app.state.counter:06d}",
                    click_sigma=cfg.click_sigma,
                )
                session_box.append(session)
                app.state.sessions[session.session_id] = session
                app.state.active += 1
            else:
                if not session_box:
                    await send_error("bad_request", "no session; send begin first")
                    return
                session = session_box[0]
                event = _parse_event(msg)
                await asyncio.to_thread(engine.apply_event, session, event)
            session = session_box[0]
            await ws.send_json(
                {
                    "type": "mask",
                    "session_id": session.session_id,
                    "rle": rle.encode(session.latest_mask),
                    "width": session.width,
                    "height": session.height,
                    "latency_ms": round(session.last_latency_ms, 3),
                    "click_ids": [c.id for c in session.clicks],
                    "acked": acked,
                }
            )
        except engine.EngineError as e:
            await send_error("bad_request", str(e))
        except Exception as e:  # pragma: no cover - defensive
            log.exception("internal error")
            await send_error("internal", str(e))

    @app.websocket("/session")
    async def session_ws(ws: WebSocket):
        await ws.accept()
        inbox = _Inbox()
        session_box: list[engine.Session] = []

        async def reader():
            try:
                while True:
                    text = await ws.receive_text()
                    try:
                        msg = json.loads(text)
                        if not isinstance(msg, dict) or "type" not in msg:
                            raise ValueError("message must be an object with a 'type'")
                    except (json.JSONDecodeError, ValueError) as e:
                        msg = {"type": "__malformed__", "detail": str(e)}
                    inbox.put(msg)
            except WebSocketDisconnect:
                inbox.close()

        reader_task = asyncio.create_task(reader())
        try:
            while True:
                group = await inbox.next_group()
                if group is None:
                    break
                msg, acked = group
                await _process(ws, session_box, msg, acked)
        except WebSocketDisconnect:
            pass
        finally:
            reader_task.cancel()
            if session_box:
                app.state.active -= 1

    return app


def _parse_event(msg: dict) -> engine.Event:
    mtype = msg.get("type")
    try:
        if mtype == "click":
            return engine.AddClick(polarity=msg["polarity"], x=int(msg["x"]), y=int(msg["y"]))
        if mtype == "move":
            return engine.MoveClick(click_id=int(msg["click_id"]), x=int(msg["x"]), y=int(msg["y"]))
        if mtype == "delete":
            return engine.DeleteClick(click_id=int(msg["click_id"]))
        if mtype == "undo":
            return engine.Undo()
        if mtype == "reset":
            return engine.Reset()
    except (KeyError, TypeError, ValueError) as e:
        raise engine.EngineError(f"bad {mtype} message: {e}") from e
    raise engine.EngineError(f"unknown message type {mtype!r}")


def serve(cfg: ServeConfig) -> None:
    import uvicorn

    app = create_app(cfg)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="info")
