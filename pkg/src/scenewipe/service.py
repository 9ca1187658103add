"""HTTP annotation service: point prompts in, propagated prompts out.

The service wraps an immutable dataset. All endpoints are stateless;
the only write is prompt export, confined to a configured directory.
Status mapping: 400 malformed request, 404 unknown view, 422 no sparse
correspondence under the mask, 502 external predictor failure.
"""

import time
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse, Response

from .dataset import Dataset
from .errors import DataError, ExternalToolError, NoSparseCorrespondenceError
from .masks import mask_to_png_bytes
from .propagation import PointPrompt, propagate_points, save_prompts


class _BadRequest(Exception):
    pass


def _parse_points(body):
    points = body.get("points")
    if not isinstance(points, list) or not points:
        raise _BadRequest("points must be a non-empty list")
    out = []
    for p in points:
        try:
            out.append((float(p["x"]), float(p["y"])))
        except (TypeError, KeyError, ValueError):
            raise _BadRequest(f"malformed point {p!r}") from None
    return out


def _parse_view_id(body):
    try:
        return int(body["view_id"])
    except (TypeError, KeyError, ValueError):
        raise _BadRequest("view_id must be an integer") from None


def build_app(dataset: Dataset, predictor, export_dir=None) -> FastAPI:
    """Assemble the service over a loaded dataset and a mask predictor."""
    export_root = Path(export_dir) if export_dir else dataset.root / "exports"
    app = FastAPI(title="scenewipe annotation service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    async def _json_body(request: Request):
        try:
            body = await request.json()
        except Exception:
            raise _BadRequest("request body is not valid JSON") from None
        if not isinstance(body, dict):
            raise _BadRequest("request body must be a JSON object")
        return body

    def _view_or_none(view_id):
        return dataset.images.get(view_id)

    def _check_points_in_bounds(image, points):
        for x, y in points:
            if not (0 <= x < image.width and 0 <= y < image.height):
                raise _BadRequest(
                    f"point ({x}, {y}) outside {image.width}x{image.height} view"
                )

    def _propagate(view_id, points):
        image = dataset.images[view_id]
        initial = PointPrompt(view_id, points)
        initial_mask = predictor.predict(image, points)
        return propagate_points(dataset.model, initial, initial_mask)

    @app.exception_handler(_BadRequest)
    async def _bad_request_handler(request, exc):
        return JSONResponse({"error": str(exc)}, status_code=400)

    @app.exception_handler(NoSparseCorrespondenceError)
    async def _no_corr_handler(request, exc):
        return JSONResponse({"error": str(exc)}, status_code=422)

    @app.exception_handler(ExternalToolError)
    async def _tool_handler(request, exc):
        return JSONResponse({"error": str(exc)}, status_code=502)

    @app.exception_handler(DataError)
    async def _data_handler(request, exc):
        return JSONResponse({"error": str(exc)}, status_code=400)

    @app.get("/api/views")
    async def views():
        return [
            {
                "view_id": v,
                "name": dataset.images[v].name,
                "width": dataset.images[v].width,
                "height": dataset.images[v].height,
            }
            for v in dataset.view_ids()
        ]

    @app.get("/api/image/{view_id}")
    async def image(view_id: str):
        try:
            vid = int(view_id)
        except ValueError:
            return JSONResponse({"error": f"unknown view {view_id!r}"}, status_code=404)
        img = _view_or_none(vid)
        if img is None or img.path is None:
            return JSONResponse({"error": f"unknown view {vid}"}, status_code=404)
        return FileResponse(img.path, media_type="image/png")

    @app.post("/api/propagate")
    async def propagate(request: Request):
        body = await _json_body(request)
        view_id = _parse_view_id(body)
        img = _view_or_none(view_id)
        if img is None:
            return JSONResponse({"error": f"unknown view {view_id}"}, status_code=404)
        points = _parse_points(body)
        _check_points_in_bounds(img, points)
        start = time.perf_counter()
        result = _propagate(view_id, points)
        elapsed_ms = 1000.0 * (time.perf_counter() - start)
        return {
            "views": [
                {
                    "view_id": v,
                    "points": [{"x": x, "y": y} for x, y in prompt.points],
                }
                for v, prompt in result.prompts.items()
            ],
            "dropped": [
                {"view_id": v, "reason": reason} for v, reason in result.dropped.items()
            ],
            "timing_ms": elapsed_ms,
        }

    @app.post("/api/mask")
    async def mask(request: Request):
        body = await _json_body(request)
        view_id = _parse_view_id(body)
        img = _view_or_none(view_id)
        if img is None:
            return JSONResponse({"error": f"unknown view {view_id}"}, status_code=404)
        points = _parse_points(body)
        _check_points_in_bounds(img, points)
        predicted = predictor.predict(img, points)
        return Response(content=mask_to_png_bytes(predicted), media_type="image/png")

    @app.post("/api/export")
    async def export(request: Request):
        body = await _json_body(request)
        view_id = _parse_view_id(body)
        img = _view_or_none(view_id)
        if img is None:
            return JSONResponse({"error": f"unknown view {view_id}"}, status_code=404)
        points = _parse_points(body)
        _check_points_in_bounds(img, points)
        rel = body.get("path", "prompts.json")
        if not isinstance(rel, str) or not rel:
            raise _BadRequest("path must be a non-empty string")
        target = (export_root / rel).resolve()
        if export_root.resolve() not in target.parents and target != export_root.resolve():
            raise _BadRequest(f"export path {rel!r} escapes the export directory")
        result = _propagate(view_id, points)
        target.parent.mkdir(parents=True, exist_ok=True)
        save_prompts(result, target)
        return {"ok": True, "path": str(target)}

    return app


def serve(dataset: Dataset, predictor, host="127.0.0.1", port=8000, export_dir=None):
    import uvicorn

    app = build_app(dataset, predictor, export_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
