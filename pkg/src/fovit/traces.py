"""Episode trace files and SVG overlays.

A trace is a JSON document.  Floats are written with ``repr`` precision and
keys in a fixed order, so emit -> parse -> emit reproduces the text exactly.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .episode import EpisodeTrace, softmax_np
from .geometry import FoveaLayout, active_regions

TRACE_FORMAT = "fovit-trace"
TRACE_VERSION = 1


@dataclass
class FixationRecord:
    x: int
    y: int
    predicted: int
    probability: float
    logits: list[float]


@dataclass
class TraceFile:
    capacity: int
    cost: int
    stop_index: int | None
    fixations: list[FixationRecord]
    confidence_maps: list[list[list[float]]] | None = None
    ior_maps: list[list[list[float]]] | None = None
    label: int | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_episode(cls, trace: EpisodeTrace, meta: dict | None = None) -> "TraceFile":
        probs = softmax_np(trace.logits)
        records = [
            FixationRecord(
                x=int(x),
                y=int(y),
                predicted=int(p.argmax()),
                probability=float(p.max()),
                logits=[float(v) for v in lg],
            )
            for (x, y), p, lg in zip(trace.fixations, probs, trace.logits)
        ]
        as_list = lambda maps: None if maps is None else [[[float(v) for v in row] for row in m] for m in maps]
        return cls(
            capacity=int(trace.capacity),
            cost=int(trace.cost),
            stop_index=trace.stop_index,
            fixations=records,
            confidence_maps=as_list(trace.confidence_maps),
            ior_maps=as_list(trace.ior_maps),
            label=None if trace.label is None else int(trace.label),
            meta=dict(meta or {}),
        )

    def to_dict(self) -> dict:
        return {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "meta": self.meta,
            "label": self.label,
            "capacity": self.capacity,
            "cost": self.cost,
            "stop_index": self.stop_index,
            "fixations": [
                {"x": f.x, "y": f.y, "predicted": f.predicted, "probability": f.probability, "logits": f.logits}
                for f in self.fixations
            ],
            "confidence_maps": self.confidence_maps,
            "ior_maps": self.ior_maps,
        }


def emit_trace(trace: TraceFile) -> str:
    return json.dumps(trace.to_dict(), indent=1, allow_nan=False) + "\n"


def parse_trace(text: str) -> TraceFile:
    d = json.loads(text)
    if d.get("format") != TRACE_FORMAT or d.get("version") != TRACE_VERSION:
        raise ValueError("not a trace file of a supported version")
    side = None
    fixations = []
    for f in d["fixations"]:
        rec = FixationRecord(int(f["x"]), int(f["y"]), int(f["predicted"]), float(f["probability"]), [float(v) for v in f["logits"]])
        fixations.append(rec)
    for maps in (d["confidence_maps"], d["ior_maps"]):
        if maps:
            side = len(maps[0])
    side = side or 14
    for f in fixations:
        if not (0 <= f.x < side and 0 <= f.y < side):
            raise ValueError(f"fixation ({f.x}, {f.y}) outside the {side}x{side} grid")
    return TraceFile(
        capacity=int(d["capacity"]),
        cost=int(d["cost"]),
        stop_index=d["stop_index"],
        fixations=fixations,
        confidence_maps=d["confidence_maps"],
        ior_maps=d["ior_maps"],
        label=d["label"],
        meta=d["meta"],
    )


def write_trace(path, trace: TraceFile) -> None:
    Path(path).write_text(emit_trace(trace))


def read_trace(path) -> TraceFile:
    return parse_trace(Path(path).read_text())


# --- overlays --------------------------------------------------------------


def block_center(v: int, patch_side: int):
    """Block coordinate to the pixel coordinate of the block's center."""
    c = v * patch_side + patch_side / 2
    return int(c) if float(c).is_integer() else c


def _png_data_uri(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def pooled_view(image: np.ndarray, layout: FoveaLayout, fixation, patch_side: int) -> np.ndarray:
    """What one fixation sees: every active region painted with its pooled content.

    A region's content is the mean of the image blocks inside its footprint,
    tiled back over that footprint.  Coarse regions are painted first so
    finer ones stay on top.
    """
    img = np.asarray(image, dtype=np.float64)
    side = layout.image_side
    blocks = img.reshape(side, patch_side, side, patch_side, -1).transpose(0, 2, 1, 3, 4)
    out = np.full_like(blocks, 0.0)
    fx, fy = fixation
    active = active_regions(layout, (fx, fy))
    order = sorted(active.region_ids, key=lambda rid: -layout.regions[rid].rf)
    for rid in order:
        region = layout.regions[rid]
        cells = [
            (fy + dy, fx + dx)
            for dx, dy in region.footprint()
            if 0 <= fx + dx < side and 0 <= fy + dy < side
        ]
        if not cells:
            continue
        mean = np.mean([blocks[y, x] for y, x in cells], axis=0)
        for y, x in cells:
            out[y, x] = mean
    return out.transpose(0, 2, 1, 3, 4).reshape(img.shape).round().clip(0, 255).astype(np.uint8)


def overlay_svg(
    image: np.ndarray,
    trace: TraceFile,
    patch_side: int,
    layout: FoveaLayout | None = None,
    class_names: list[str] | None = None,
) -> str:
    """Image with fixation circles and arrows, plus one pooled view per fixation.

    Each later fixation gets a bigger circle; arrows join consecutive
    fixations.  Pooled views are drawn to the right when ``layout`` is given.
    """
    h, w = image.shape[:2]
    gap = 8
    panels = 1 + (len(trace.fixations) if layout is not None else 0)
    width, height = panels * w + (panels - 1) * gap, h + 18
    name = lambda c: class_names[c] if class_names and 0 <= c < len(class_names) else str(c)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" markerWidth=\"5\" markerHeight=\"5\" "
        "orient=\"auto-start-reverse\"><path d=\"M 0 0 L 10 5 L 0 10 z\" fill=\"#1f4fd6\"/></marker></defs>",
        f'<image x="0" y="0" width="{w}" height="{h}" href="{_png_data_uri(image)}"/>',
    ]
    centers = [(block_center(f.x, patch_side), block_center(f.y, patch_side)) for f in trace.fixations]
    for k in range(1, len(centers)):
        (x0, y0), (x1, y1) = centers[k - 1], centers[k]
        parts.append(
            f'<line class="saccade" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#1f4fd6" '
            f'stroke-width="1.5" marker-end="url(#arrow)"/>'
        )
    for k, ((cx, cy), f) in enumerate(zip(centers, trace.fixations)):
        r = patch_side * (0.5 + 0.25 * k)
        parts.append(
            f'<circle class="fixation" data-step="{k + 1}" cx="{cx}" cy="{cy}" r="{r:g}" fill="none" '
            f'stroke="#1f4fd6" stroke-width="1.5"><title>fixation {k + 1}: {name(f.predicted)} '
            f"({f.probability:.3f})</title></circle>"
        )
    last = trace.fixations[-1] if trace.fixations else None
    if last is not None:
        parts.append(
            f'<text x="2" y="{h + 13}" font-size="11" font-family="sans-serif">'
            f"{name(last.predicted)} {last.probability:.2f}</text>"
        )
    if layout is not None:
        for k, f in enumerate(trace.fixations):
            x_off = (k + 1) * (w + gap)
            view = pooled_view(image, layout, (f.x, f.y), patch_side)
            parts.append(f'<image x="{x_off}" y="0" width="{w}" height="{h}" href="{_png_data_uri(view)}"/>')
            parts.append(
                f'<text x="{x_off + 2}" y="{h + 13}" font-size="11" font-family="sans-serif">'
                f"{k + 1}: {name(f.predicted)} {f.probability:.2f}</text>"
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
