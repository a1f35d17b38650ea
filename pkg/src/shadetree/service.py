"""HTTP facade for the interactive editor UI.

Endpoints (all under /api/v1, JSON unless noted):

    GET  /health                          liveness + version
    POST /sessions                        -> {session_id}
    POST /render                          tree JSON -> PNG bytes
    POST /decompose                       PNG upload -> report JSON
    GET  /progress/{job_id}               polled decomposition events
    POST /edit                            subtree/param edit -> new tree id
    GET  /sessions/{sid}/trees/{tid}      tree JSON
    GET  /sessions/{sid}/images/{iid}.png node/render images

Trees are immutable and versioned: every edit mints a new tree id, so any
previously returned id keeps re-rendering identically (undo is just
rendering an older id).  Decomposition runs are bounded by the server
config's budgets; a budget overrun returns 504 with the partial report.
"""

from __future__ import annotations

import dataclasses
import io
import json
import threading
from collections import OrderedDict

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import __version__
from .config import apply_overrides
from .dsl import print_tree
from .envmap import EnvLibrary, default_library
from .errors import (ArityError, DecompositionFailed, ParamRangeError, PathError,
                     ShadeTreeError)
from .image import ShadingImage, from_uint8, normal_field, png_bytes, sphere_mask
from .pipeline import DecompositionReport, PipelineConfig, decompose
from .render import render_tree
from .tree import (Leaf, ShadeTree, normalize_path, params_from_json,
                   substitute_subtree, subtree_at, tree_from_json, tree_to_json)

MAX_RENDER_SIZE = 512
MAX_DECOMPOSE_SIZE = 256
API = "/api/v1"


class Session:
    def __init__(self, session_id: str):
        self.session_id = session_id
        self.trees: dict[str, ShadeTree] = {}
        self.images: dict[str, bytes] = {}
        self.reports: dict[str, dict] = {}
        self._counter = 0

    def next_id(self, prefix: str) -> str:
        self._counter += 1
        return f"{prefix}{self._counter}"


class SessionStore:
    """Bounded LRU of sessions; entries are immutable once written."""

    def __init__(self, capacity: int = 32):
        self.capacity = capacity
        self._sessions: OrderedDict[str, Session] = OrderedDict()
        self._lock = threading.Lock()
        self._counter = 0

    def create(self) -> Session:
        with self._lock:
            self._counter += 1
            session = Session(f"s{self._counter}")
            self._sessions[session.session_id] = session
            while len(self._sessions) > self.capacity:
                self._sessions.popitem(last=False)
            return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            if session_id not in self._sessions:
                raise HTTPException(404, detail=f"unknown session {session_id!r}")
            self._sessions.move_to_end(session_id)
            return self._sessions[session_id]


class EditRequest(BaseModel):
    session_id: str
    tree_id: str
    path: list[str] | str = []
    replacement: dict | None = None
    params_patch: dict | None = None


def _parse_tree_json(data: dict) -> ShadeTree:
    try:
        return tree_from_json(data)
    except (ParamRangeError, ArityError, KeyError, TypeError, ValueError) as exc:
        raise HTTPException(400, detail={"error": "invalid tree JSON",
                                         "message": str(exc)})


def _image_from_upload(data: bytes) -> ShadingImage:
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(data)).convert("RGB")
    except UnidentifiedImageError:
        raise HTTPException(400, detail="upload is not a decodable image")
    if img.width != img.height:
        raise HTTPException(422, detail="shading images must be square")
    if img.width > MAX_DECOMPOSE_SIZE:
        raise HTTPException(422, detail=f"image too large (max {MAX_DECOMPOSE_SIZE})")
    arr = np.asarray(img)
    mask = sphere_mask(img.width, img.height)
    outside = arr[~mask]
    if outside.size and outside.mean() > 12.0:
        raise HTTPException(422, detail="no sphere silhouette detected "
                                        "(background is not black)")
    return ShadingImage(from_uint8(arr))


def create_app(config: PipelineConfig | None = None,
               envlib: EnvLibrary | None = None,
               session_capacity: int = 32) -> FastAPI:
    config = config or PipelineConfig()
    envlib = envlib or default_library()
    app = FastAPI(title="shadetree service", version=__version__)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    store = SessionStore(session_capacity)
    jobs: dict[str, dict] = {}
    jobs_lock = threading.Lock()

    def render_to_png(tree: ShadeTree, size: int) -> bytes:
        image = render_tree(tree, normal_field(size, size), envlib)
        return png_bytes(image)

    def register_tree(session: Session, tree: ShadeTree, size: int = 128) -> dict:
        tree_id = session.next_id("t")
        image_id = session.next_id("i")
        session.trees[tree_id] = tree
        session.images[image_id] = render_to_png(tree, size)
        return {
            "tree_id": tree_id,
            "tree": tree_to_json(tree),
            "tree_text": print_tree(tree),
            "image_url": f"{API}/sessions/{session.session_id}/images/{image_id}.png",
        }

    @app.get(f"{API}/health")
    def health():
        return {"status": "ok", "version": __version__,
                "env_maps": len(envlib)}

    @app.post(f"{API}/sessions")
    def create_session():
        session = store.create()
        return {"session_id": session.session_id}

    @app.post(f"{API}/render")
    def render_endpoint(body: dict):
        if "tree" not in body:
            raise HTTPException(400, detail={"error": "missing field",
                                             "field": "tree"})
        size = int(body.get("size", 128))
        if size > MAX_RENDER_SIZE:
            raise HTTPException(413, detail=f"size {size} exceeds {MAX_RENDER_SIZE}")
        if size < 8:
            raise HTTPException(400, detail="size must be at least 8")
        tree = _parse_tree_json(body["tree"])
        return Response(content=render_to_png(tree, size), media_type="image/png")

    @app.post(f"{API}/decompose")
    def decompose_endpoint(file: bytes = File(...),
                           session_id: str | None = Form(None),
                           job_id: str | None = Form(None),
                           overrides: str | None = Form(None)):
        image = _image_from_upload(file)
        run_config = dataclasses.replace(config)
        if overrides:
            try:
                apply_overrides(run_config, json.loads(overrides))
            except (ValueError, KeyError) as exc:
                raise HTTPException(400, detail=f"bad config overrides: {exc}")
        session = store.get(session_id) if session_id else store.create()
        job = job_id or session.next_id("job")
        with jobs_lock:
            jobs[job] = {"events": [], "done": False}

        def on_progress(event: dict):
            jobs[job]["events"].append(event)

        failed = False
        try:
            report = decompose(image, run_config, envlib, progress=on_progress)
        except DecompositionFailed as exc:
            report = exc.report
            failed = True
        finally:
            jobs[job]["done"] = True

        payload = _report_payload(report, session, register_tree)
        payload["job_id"] = job
        payload["session_id"] = session.session_id
        session.reports[job] = payload
        if failed:
            return Response(content=json.dumps(payload), status_code=504,
                            media_type="application/json")
        return payload

    @app.get(f"{API}/progress/{{job_id}}")
    def progress_endpoint(job_id: str):
        with jobs_lock:
            if job_id not in jobs:
                raise HTTPException(404, detail=f"unknown job {job_id!r}")
            job = jobs[job_id]
            return {"events": list(job["events"]), "done": job["done"]}

    @app.post(f"{API}/edit")
    def edit_endpoint(body: EditRequest):
        session = store.get(body.session_id)
        if body.tree_id not in session.trees:
            raise HTTPException(404, detail=f"unknown tree {body.tree_id!r}")
        tree = session.trees[body.tree_id]
        raw_path = body.path
        if isinstance(raw_path, str):
            raw_path = [s for s in raw_path.split(".") if s]
        try:
            path = normalize_path(raw_path)
        except PathError as exc:
            raise HTTPException(400, detail=str(exc))
        if (body.replacement is None) == (body.params_patch is None):
            raise HTTPException(400, detail="provide exactly one of replacement "
                                            "or params_patch")
        try:
            if body.replacement is not None:
                new_tree = substitute_subtree(tree, path,
                                              _parse_tree_json(body.replacement))
            else:
                target = subtree_at(tree, path)
                if not isinstance(target, Leaf):
                    raise HTTPException(400, detail="params_patch targets a leaf")
                merged = tree_to_json(target)["params"] | body.params_patch
                new_leaf = Leaf(target.family,
                                params_from_json(target.family, merged))
                new_tree = substitute_subtree(tree, path, new_leaf)
        except PathError as exc:
            raise HTTPException(400, detail=str(exc))
        except (ParamRangeError, ArityError, TypeError, KeyError) as exc:
            raise HTTPException(400, detail=f"invalid edit: {exc}")
        return register_tree(session, new_tree)

    @app.get(f"{API}/sessions/{{session_id}}/trees/{{tree_id}}")
    def get_tree(session_id: str, tree_id: str):
        session = store.get(session_id)
        if tree_id not in session.trees:
            raise HTTPException(404, detail=f"unknown tree {tree_id!r}")
        tree = session.trees[tree_id]
        return {"tree_id": tree_id, "tree": tree_to_json(tree),
                "tree_text": print_tree(tree)}

    @app.get(f"{API}/sessions/{{session_id}}/images/{{image_id}}.png")
    def get_image(session_id: str, image_id: str):
        session = store.get(session_id)
        if image_id not in session.images:
            raise HTTPException(404, detail=f"unknown image {image_id!r}")
        return Response(content=session.images[image_id], media_type="image/png")

    return app


def _report_payload(report: DecompositionReport, session, register_tree) -> dict:
    entry = register_tree(session, report.tree)
    nodes = []
    for node_id, record in sorted(report.pool.nodes.items()):
        image_id = session.next_id("i")
        session.images[image_id] = png_bytes(record.image)
        nodes.append({
            "node_id": node_id,
            "depth": record.depth,
            "status": record.status.value,
            "image_url": f"{API}/sessions/{session.session_id}/images/{image_id}.png",
        })
    return {
        "tree_id": entry["tree_id"],
        "tree": entry["tree"],
        "tree_text": entry["tree_text"],
        "image_url": entry["image_url"],
        "metrics": {"psnr_db": report.psnr, "ssim": report.ssim,
                    "seconds": report.seconds},
        "nodes": nodes,
        "stage2": report.stage2,
        "partial": report.failed,
    }
