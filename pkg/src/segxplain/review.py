"""Human mask-review service.

A review store is a directory with ``images/``, revisioned mask files
(``masks/<id>.r<k>.pgm``) and an ``index.json`` catalog -- exactly the layout
``seg-predict`` emits. Writes follow the write-then-rename discipline: a new
mask lands in a fresh revisioned file, then the index is atomically replaced,
so a crash between the two never corrupts what the index references.

The HTTP layer is a thin JSON wrapper: base64 PGM payloads, revision-checked
optimistic concurrency (the losing writer of a race gets 409 plus the current
revision), and the status machine pending -> accepted|edited|rejected with
edited -> edited re-edits.
"""

import base64
import json
import os
import shutil
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from segxplain import dataio

STATUSES = ("pending", "accepted", "edited", "rejected")
LEGAL_TRANSITIONS = {
    ("pending", "accepted"),
    ("pending", "edited"),
    ("pending", "rejected"),
    ("edited", "edited"),
}


class StoreNotInitialized(RuntimeError):
    pass


class UnknownItem(KeyError):
    pass


class Conflict(RuntimeError):
    """Illegal transition or stale revision."""

    def __init__(self, message, revision=None):
        super().__init__(message)
        self.revision = revision


class Unprocessable(ValueError):
    """Malformed payload: bad mask dimensions, non-binary mask, missing
    fields."""


class ReviewStore:
    def __init__(self, root):
        self.root = root
        self._lock = threading.Lock()
        index_path = os.path.join(root, "index.json")
        if not os.path.exists(index_path):
            raise StoreNotInitialized(
                f"{root}: no index.json (point --store at a seg-predict "
                f"output directory)")
        with open(index_path, encoding="utf-8") as fh:
            self._index = json.load(fh)
        if "items" not in self._index:
            raise StoreNotInitialized(f"{root}: malformed index.json")

    # -- reads ---------------------------------------------------------------

    def list_items(self, status=None):
        if status is not None and status not in STATUSES:
            raise ValueError(f"unknown status filter {status!r}")
        out = []
        with self._lock:
            for image_id in sorted(self._index["items"]):
                entry = self._index["items"][image_id]
                if status is None or entry["status"] == status:
                    out.append({"image_id": image_id,
                                "status": entry["status"],
                                "revision": entry["revision"]})
        return out

    def _entry(self, image_id):
        try:
            return self._index["items"][image_id]
        except KeyError:
            raise UnknownItem(image_id)

    def get_item(self, image_id):
        with self._lock:
            entry = dict(self._entry(image_id))
        image_bytes = self._read_file(entry["image"])
        mask_bytes = self._read_file(entry["mask"])
        return {
            "image_id": image_id,
            "image": base64.b64encode(image_bytes).decode("ascii"),
            "mask": base64.b64encode(mask_bytes).decode("ascii"),
            "status": entry["status"],
            "revision": entry["revision"],
        }

    def _read_file(self, rel):
        with open(os.path.join(self.root, rel), "rb") as fh:
            return fh.read()

    # -- writes --------------------------------------------------------------

    def put_item(self, image_id, status, revision, mask_b64=None):
        if status not in STATUSES:
            raise Unprocessable(f"unknown status {status!r}")
        if revision is None:
            raise Unprocessable("revision is required for updates")
        mask = None
        if mask_b64 is not None:
            mask = self._decode_mask(mask_b64)
        if status == "edited" and mask is None:
            raise Unprocessable("status 'edited' requires a mask payload")
        with self._lock:
            entry = self._entry(image_id)
            if revision != entry["revision"]:
                raise Conflict(
                    f"stale revision {revision}, current is {entry['revision']}",
                    revision=entry["revision"])
            if (entry["status"], status) not in LEGAL_TRANSITIONS:
                raise Conflict(
                    f"illegal transition {entry['status']} -> {status}",
                    revision=entry["revision"])
            if mask is not None:
                image = dataio.load_pgm_bytes(
                    os.path.join(self.root, entry["image"]))
                if mask.shape != image.shape:
                    raise Unprocessable(
                        f"mask dimensions {mask.shape} do not match image "
                        f"{image.shape}")
                new_rev = entry["revision"] + 1
                old_mask = entry["mask"]
                rel = f"masks/{image_id}.r{new_rev}.pgm"
                self._write_mask_file(rel, mask)
                entry["mask"] = rel
                entry["revision"] = new_rev
                entry["status"] = status
                self._write_index()
                if old_mask != rel:  # superseded revision, best-effort cleanup
                    try:
                        os.remove(os.path.join(self.root, old_mask))
                    except OSError:
                        pass
            else:
                entry["status"] = status
                self._write_index()
            return entry["revision"]

    def _decode_mask(self, mask_b64):
        try:
            raw = base64.b64decode(mask_b64, validate=True)
        except Exception:
            raise Unprocessable("mask is not valid base64")
        try:
            data = dataio.decode_pgm(raw, "<mask payload>")
        except dataio.FormatError as exc:
            raise Unprocessable(f"mask is not a valid PGM: {exc}")
        if not np.all((data == 0) | (data == 255)):
            raise Unprocessable("mask is not binary (values must be 0 or 255)")
        return data

    def _write_mask_file(self, rel, mask):
        """Step 1 of the two-step write; a crash after this leaves the index
        pointing at the previous (intact) revision file."""
        path = os.path.join(self.root, rel)
        tmp = path + ".tmp"
        dataio.save_pgm(tmp, mask)
        os.replace(tmp, path)

    def _write_index(self):
        path = os.path.join(self.root, "index.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self._index, fh, sort_keys=True, indent=2)
        os.replace(tmp, path)

    def export_corrections(self, out_dir):
        """Copy the masks of all edited items (the next training round's
        corrected ground truth). Returns the exported image ids."""
        os.makedirs(out_dir, exist_ok=True)
        exported = []
        with self._lock:
            items = {k: dict(v) for k, v in self._index["items"].items()}
        for image_id in sorted(items):
            entry = items[image_id]
            if entry["status"] != "edited":
                continue
            shutil.copyfile(os.path.join(self.root, entry["mask"]),
                            os.path.join(out_dir, f"{image_id}.pgm"))
            exported.append(image_id)
        return exported


# ---------------------------------------------------------------------------
# HTTP layer


def _make_handler(store_box, static_dir=None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _reply(self, code, payload):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods",
                             "GET, PUT, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()
            self.wfile.write(body)

        def _store(self):
            with store_box["init_lock"]:
                if store_box.get("store") is None:
                    try:
                        store_box["store"] = ReviewStore(store_box["root"])
                    except StoreNotInitialized as exc:
                        self._reply(503, {"error": str(exc)})
                        return None
            return store_box["store"]

        def do_OPTIONS(self):
            self._reply(204, {})

        def do_GET(self):
            path, _, query = self.path.partition("?")
            if path == "/api/items":
                store = self._store()
                if store is None:
                    return
                params = dict(kv.split("=", 1) for kv in query.split("&")
                              if "=" in kv)
                status = params.get("status")
                try:
                    self._reply(200, {"items": store.list_items(status)})
                except ValueError as exc:
                    self._reply(400, {"error": str(exc)})
                return
            if path.startswith("/api/items/"):
                store = self._store()
                if store is None:
                    return
                image_id = path[len("/api/items/"):]
                try:
                    self._reply(200, store.get_item(image_id))
                except UnknownItem:
                    self._reply(404, {"error": f"unknown item {image_id!r}"})
                return
            if static_dir is not None and not path.startswith("/api/"):
                self._serve_static(path)
                return
            self._reply(404, {"error": f"unknown path {path!r}"})

        def _serve_static(self, path):
            rel = path.lstrip("/") or "index.html"
            full = os.path.normpath(os.path.join(static_dir, rel))
            if not full.startswith(os.path.abspath(static_dir)) \
                    or not os.path.isfile(full):
                self._reply(404, {"error": "not found"})
                return
            ctype = {"html": "text/html", "js": "text/javascript",
                     "css": "text/css"}.get(full.rsplit(".", 1)[-1],
                                            "application/octet-stream")
            with open(full, "rb") as fh:
                body = fh.read()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_PUT(self):
            if not self.path.startswith("/api/items/"):
                self._reply(404, {"error": f"unknown path {self.path!r}"})
                return
            store = self._store()
            if store is None:
                return
            image_id = self.path[len("/api/items/"):]
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, json.JSONDecodeError):
                self._reply(400, {"error": "body must be valid JSON"})
                return
            try:
                revision = store.put_item(image_id,
                                          body.get("status"),
                                          body.get("revision"),
                                          body.get("mask"))
                self._reply(200, {"revision": revision})
            except UnknownItem:
                self._reply(404, {"error": f"unknown item {image_id!r}"})
            except Conflict as exc:
                self._reply(409, {"error": str(exc),
                                  "revision": exc.revision})
            except Unprocessable as exc:
                self._reply(422, {"error": str(exc)})

    return Handler


def make_server(store_root, port=0, static_dir=None) -> ThreadingHTTPServer:
    """Bind a server (port 0 picks an ephemeral port). The store is opened
    lazily so an uninitialized directory reports 503 rather than crashing."""
    box = {"root": store_root, "store": None, "init_lock": threading.Lock()}
    handler = _make_handler(box, static_dir=static_dir)
    return ThreadingHTTPServer(("127.0.0.1", port), handler)


def serve(store_root, port, static_dir=None):
    server = make_server(store_root, port, static_dir)
    host, bound_port = server.server_address
    print(f"review service on http://{host}:{bound_port}/ "
          f"(store: {store_root})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
