"""Annotation sessions: durable storage, a local HTTP API, and export.

One JSON document per session, written with an atomic rename so a write is
either fully visible or absent after a crash. The HTTP layer serves the
same session operations the oracle annotator uses directly, plus static
assets for the browser annotation tool.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cf_gen import CandidateSet, candidate_set_from_doc, candidate_set_to_doc
from .errors import ConflictError, EmptyExportError, ValidationError
from .grid_mdp import Trajectory
from .synth_world import Scene

API_VERSION = 1


@dataclass
class AnnotationSession:
    session_id: str
    scene_id: str
    status: str  # "open" | "complete"
    cell_size: float
    terrain_names: tuple[str, ...]
    terrain_index: np.ndarray  # (H, W) class indices, rendered context
    elevation: np.ndarray
    forbidden_mask: np.ndarray
    expert: Trajectory
    candidates: CandidateSet
    labels: dict[int, bool] = field(default_factory=dict)

    def candidate_ids(self) -> set[int]:
        return {c.id for c in self.candidates.candidates}

    def to_doc(self) -> dict:
        return {
            "version": API_VERSION,
            "session_id": self.session_id,
            "scene_id": self.scene_id,
            "status": self.status,
            "context": {
                "height": int(self.terrain_index.shape[0]),
                "width": int(self.terrain_index.shape[1]),
                "cell_size": self.cell_size,
                "terrain_names": list(self.terrain_names),
                "terrain_index": self.terrain_index.ravel().tolist(),
                "elevation": [float(np.float32(v)) for v in self.elevation.ravel()],
                "forbidden_mask": self.forbidden_mask.ravel().astype(int).tolist(),
            },
            "expert": [list(s) for s in self.expert.states],
            "candidates": candidate_set_to_doc(self.candidates),
            "labels": {str(k): bool(v) for k, v in sorted(self.labels.items())},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "AnnotationSession":
        ctx = doc["context"]
        h, w = ctx["height"], ctx["width"]
        return cls(
            session_id=doc["session_id"],
            scene_id=doc["scene_id"],
            status=doc["status"],
            cell_size=ctx["cell_size"],
            terrain_names=tuple(ctx["terrain_names"]),
            terrain_index=np.asarray(ctx["terrain_index"], dtype=np.int64).reshape(h, w),
            elevation=np.asarray(ctx["elevation"], dtype=np.float64).reshape(h, w),
            forbidden_mask=np.asarray(ctx["forbidden_mask"], dtype=bool).reshape(h, w),
            expert=Trajectory(tuple(tuple(s) for s in doc["expert"]), kind="expert"),
            candidates=candidate_set_from_doc(doc["candidates"]),
            labels={int(k): bool(v) for k, v in doc.get("labels", {}).items()},
        )


class SessionStore:
    """Durable session storage: one JSON file per session, atomic writes."""

    def __init__(self, root) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.json"

    def _write(self, session: AnnotationSession) -> None:
        tmp = self.root / f".tmp-{session.session_id}"
        data = json.dumps(session.to_doc(), sort_keys=True, separators=(",", ":"))
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(data)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._path(session.session_id))

    def list_sessions(self) -> list[dict]:
        rows = []
        for path in sorted(self.root.glob("*.json")):
            doc = json.loads(path.read_text())
            rows.append({"session_id": doc["session_id"], "scene_id": doc["scene_id"],
                         "status": doc["status"]})
        return rows

    def get(self, session_id: str) -> AnnotationSession:
        path = self._path(session_id)
        if not path.exists():
            raise KeyError(session_id)
        return AnnotationSession.from_doc(json.loads(path.read_text()))

    def create_sessions(
        self,
        scene_ids: Sequence[str],
        scenes: dict[str, Scene],
        candidate_sets: dict[str, CandidateSet],
    ) -> list[str]:
        """One open session per scene, persisted before returning."""
        if len(set(scene_ids)) != len(scene_ids):
            raise ValidationError("duplicate scene ids in session creation")
        created = []
        with self._lock:
            for sid in scene_ids:
                scene = scenes[sid]
                session_id = f"sess-{sid}"
                if self._path(session_id).exists():
                    raise ValidationError(f"session {session_id} already exists")
                session = AnnotationSession(
                    session_id=session_id,
                    scene_id=sid,
                    status="open",
                    cell_size=scene.grid.cell_size,
                    terrain_names=scene.terrain_names,
                    terrain_index=scene.terrain_index,
                    elevation=scene.grid.elevation,
                    forbidden_mask=scene.oracle.forbidden_mask,
                    expert=scene.expert,
                    candidates=candidate_sets[sid],
                )
                self._write(session)
                created.append(session_id)
        return created

    def submit_labels(self, session_id: str, labels: dict[int, bool]) -> AnnotationSession:
        """Merge labels; identical resubmission is a no-op, conflicting
        labels on a complete session are rejected."""
        with self._lock:
            session = self.get(session_id)
            valid = session.candidate_ids()
            unknown = set(labels) - valid
            if unknown:
                raise ValidationError(f"unknown candidate ids {sorted(unknown)}")
            if session.status == "complete":
                if all(session.labels.get(k) == v for k, v in labels.items()):
                    return session
                raise ConflictError(f"session {session_id} is complete")
            session.labels.update(labels)
            if set(session.labels) == valid:
                session.status = "complete"
            self._write(session)
            return session

    def export_dataset(self, status: str = "complete") -> dict:
        """Bundle of labeled scenes; raises when nothing is complete."""
        sessions = [self.get(r["session_id"]) for r in self.list_sessions()]
        complete = [s for s in sessions if s.status == "complete"]
        if status == "complete" and not complete:
            raise EmptyExportError("no complete annotation sessions to export")
        items = [
            {
                "scene_id": s.scene_id,
                "session_id": s.session_id,
                "labels": {str(k): bool(v) for k, v in sorted(s.labels.items())},
                "candidates": candidate_set_to_doc(s.candidates),
            }
            for s in complete
        ]
        return {
            "version": API_VERSION,
            "total_sessions": len(sessions),
            "annotated_sessions": len(complete),
            "counterfactual_count": int(sum(sum(s.labels.values()) for s in complete)),
            "items": items,
        }

    def apply_export(self, scenes: Sequence[Scene], bundle: Optional[dict] = None) -> int:
        """Merge exported labels into scenes in place; returns scenes updated."""
        bundle = bundle or self.export_dataset()
        by_id = {s.id: s for s in scenes}
        updated = 0
        for item in bundle["items"]:
            scene = by_id.get(item["scene_id"])
            if scene is None:
                continue
            scene.candidates = candidate_set_from_doc(item["candidates"])
            scene.counterfactual_labels = {int(k): bool(v) for k, v in item["labels"].items()}
            updated += 1
        return updated


LABEL_PAYLOAD_FIELDS = {"labels"}
LABEL_ENTRY_FIELDS = {"candidate_id", "counterfactual"}


class _Handler(BaseHTTPRequestHandler):
    store: SessionStore
    static_dir: Optional[Path] = None

    def log_message(self, fmt, *args):  # quiet server
        pass

    def _send_json(self, payload, code=200) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, code: int, message: str) -> None:
        self._send_json({"error": message}, code=code)

    def do_GET(self) -> None:  # noqa: N802 (stdlib naming)
        try:
            if self.path == "/api/v1/sessions":
                self._send_json({"version": API_VERSION, "sessions": self.store.list_sessions()})
            elif self.path.startswith("/api/v1/sessions/"):
                session_id = self.path.rsplit("/", 1)[1]
                self._send_json(self.store.get(session_id).to_doc())
            elif self.path == "/api/v1/export":
                self._send_json(self.store.export_dataset())
            elif self.static_dir is not None:
                self._serve_static()
            else:
                self._error(404, "not found")
        except KeyError as exc:
            self._error(404, f"unknown session {exc}")
        except EmptyExportError as exc:
            self._error(409, str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            self._error(500, str(exc))

    def _serve_static(self) -> None:
        rel = self.path.lstrip("/") or "index.html"
        target = (self.static_dir / rel).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            self._error(404, "not found")
            return
        body = target.read_bytes()
        ctype = {
            ".html": "text/html", ".js": "text/javascript",
            ".css": "text/css", ".map": "application/json",
        }.get(target.suffix, "application/octet-stream")
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:  # noqa: N802
        try:
            if not self.path.startswith("/api/v1/sessions/") or not self.path.endswith("/labels"):
                self._error(404, "not found")
                return
            session_id = self.path.split("/")[-2]
            length = int(self.headers.get("Content-Length", 0))
            payload = json.loads(self.rfile.read(length) or b"{}")
            unknown = set(payload) - LABEL_PAYLOAD_FIELDS
            if unknown:
                self._error(400, f"unknown fields {sorted(unknown)}")
                return
            labels = {}
            for entry in payload.get("labels", []):
                bad = set(entry) - LABEL_ENTRY_FIELDS
                if bad:
                    self._error(400, f"unknown fields {sorted(bad)}")
                    return
                labels[int(entry["candidate_id"])] = bool(entry["counterfactual"])
            session = self.store.submit_labels(session_id, labels)
            self._send_json(session.to_doc())
        except KeyError as exc:
            self._error(404, f"unknown session {exc}")
        except ConflictError as exc:
            self._error(409, str(exc))
        except ValidationError as exc:
            self._error(400, str(exc))
        except json.JSONDecodeError:
            self._error(400, "invalid json")


class AnnotationServer:
    """Threaded local HTTP server over a SessionStore."""

    def __init__(self, store: SessionStore, host: str = "127.0.0.1", port: int = 0,
                 static_dir=None) -> None:
        handler = type("BoundHandler", (_Handler,), {
            "store": store,
            "static_dir": Path(static_dir) if static_dir else None,
        })
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.httpd.server_close()
