"""
Flask API for scene inference.

Exposes `/api/infer` for POST requests with JSON payload:
    { "pixels": [[...], ...] }   # H x W intensities matching the model canvas

Returns the inferred count and per-object poses of the run in AIR_CHECKPOINT_DIR.
"""

from __future__ import annotations

import argparse
import os
import threading
from typing import Optional, Tuple

import numpy as np
from flask import Flask, jsonify, request
from flask_cors import CORS

from app.checkpoint import CheckpointMismatch
from app.config import CHECKPOINT_DIR, ConfigError, RunConfig
from app.runs import ImageShapeMismatch, infer_image, load_run
from app.trainer import Model

app = Flask(__name__)
CORS(app, resources={r"/api/*": {"origins": "*"}})

_run: Optional[Tuple[RunConfig, Model]] = None
_lock = threading.Lock()


def get_run() -> Tuple[RunConfig, Model]:
    """Lazily load the configured run."""
    global _run
    with _lock:
        if _run is None:
            _run = load_run(app.config.get("RUN_DIR", CHECKPOINT_DIR))
    return _run


@app.get("/health")
def healthcheck():
    """Simple health endpoint."""
    return jsonify({"status": "ok"})


@app.post("/api/infer")
def infer():
    payload = request.get_json(silent=True) or {}
    pixels = payload.get("pixels")
    if pixels is None:
        return jsonify({"error": "pixels is required"}), 400
    try:
        image = np.asarray(pixels, dtype=np.float64)
    except (TypeError, ValueError):
        return jsonify({"error": "pixels must be a rectangular array of numbers"}), 400
    if image.ndim != 2 or not np.all(np.isfinite(image)):
        return jsonify({"error": "pixels must be a finite 2-D array"}), 400

    try:
        config, model = get_run()
    except (ConfigError, CheckpointMismatch, FileNotFoundError) as exc:
        return jsonify({"error": f"model unavailable: {exc}"}), 500

    try:
        result = infer_image(model, image)
    except ImageShapeMismatch as exc:
        return jsonify({"error": str(exc)}), 400

    return jsonify(
        {
            "mode": config.mode,
            "count": result["count"],
            "objects": result["objects"],
            "ms": result["ms"],
        }
    )


def main() -> None:
    """Run the Flask development server."""
    parser = argparse.ArgumentParser(description="Run the scene inference API server.")
    parser.add_argument(
        "--host",
        default=os.environ.get("FLASK_RUN_HOST", "127.0.0.1"),
        help="Host/IP to bind (default: 127.0.0.1)",
    )
    parser.add_argument(
        "--port",
        type=int,
        default=int(os.environ.get("FLASK_RUN_PORT", 5000)),
        help="Port to listen on (default: 5000)",
    )
    parser.add_argument(
        "--run-dir",
        default=CHECKPOINT_DIR,
        help="Trained run directory to serve (default: AIR_CHECKPOINT_DIR)",
    )
    parser.add_argument(
        "--debug",
        action="store_true",
        help="Enable Flask debug mode",
    )
    args = parser.parse_args()
    app.config["RUN_DIR"] = args.run_dir

    print(f"🚀 Starting Flask server on {args.host}:{args.port}")
    print(f"   Serving run: {args.run_dir}")

    app.run(host=args.host, port=args.port, debug=args.debug, threaded=True)


if __name__ == "__main__":  # pragma: no cover
    main()
