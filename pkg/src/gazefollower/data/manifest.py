"""Annotation manifest: one JSON record per line, one line per annotated person.

Record fields::

    image_path   str                          image file, relative to a root dir
    head_bbox    [x_min, y_min, x_max, y_max] normalized to [0, 1]
    gaze_points  [[x, y], ...]                normalized; >=1 when inside
    inside       0/1 or bool                  gaze target inside the frame
    split        str                          "train" or "test"

Several records may reference the same image (several people); the loader
groups them so each sample also knows every annotated head in its frame,
which feeds the head-occurrence supervision and background masking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class ManifestError(ValueError):
    """Malformed or invalid manifest record; message names the line."""


@dataclass(frozen=True)
class HeadBox:
    """Axis-aligned head bounding box in image-relative [0, 1] coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"head box coordinate {v} outside [0, 1]: {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate or inverted head box: {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class GazeSample:
    """One annotated person: head box, gaze point(s), and in/out-of-frame flag.

    ``all_heads`` lists every annotated head in the same frame (including this
    sample's own) and defaults to just the sample's head.
    """

    image_ref: str
    head: HeadBox
    gaze_points: list[tuple[float, float]]
    inside: bool
    split: str = "train"
    all_heads: list[HeadBox] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.inside:
            if not self.gaze_points:
                raise ValueError("inside sample must carry at least one gaze point")
            for x, y in self.gaze_points:
                if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                    raise ValueError(f"gaze point ({x}, {y}) outside [0, 1]^2")
        if not self.all_heads:
            self.all_heads = [self.head]


def _parse_record(obj: dict) -> GazeSample:
    try:
        image_path = str(obj["image_path"])
        bbox = obj["head_bbox"]
        inside = bool(obj["inside"])
    except KeyError as exc:
        raise ValueError(f"missing field {exc.args[0]!r}") from exc
    if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
        raise ValueError(f"head_bbox must be 4 floats, got {bbox!r}")
    head = HeadBox(*(float(v) for v in bbox))
    raw_points = obj.get("gaze_points") or []
    points = []
    for p in raw_points:
        if not (isinstance(p, (list, tuple)) and len(p) == 2):
            raise ValueError(f"gaze point must be [x, y], got {p!r}")
        points.append((float(p[0]), float(p[1])))
    return GazeSample(
        image_ref=image_path,
        head=head,
        gaze_points=points,
        inside=inside,
        split=str(obj.get("split", "train")),
    )


def load_manifest(path: str | Path) -> list[GazeSample]:
    """Parse a JSONL manifest into validated samples.

    Any malformed or invariant-violating record raises :class:`ManifestError`
    naming the offending line number.
    """
    path = Path(path)
    samples: list[GazeSample] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
            try:
                samples.append(_parse_record(obj))
            except ValueError as exc:
                raise ManifestError(f"{path}: line {lineno}: {exc}") from exc
    _attach_frame_heads(samples)
    return samples


def _attach_frame_heads(samples: list[GazeSample]) -> None:
    by_image: dict[str, list[HeadBox]] = {}
    for s in samples:
        by_image.setdefault(s.image_ref, []).append(s.head)
    for s in samples:
        s.all_heads = list(by_image[s.image_ref])


def save_manifest(samples: list[GazeSample], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "image_path": s.image_ref,
                        "head_bbox": s.head.to_list(),
                        "gaze_points": [[x, y] for x, y in s.gaze_points],
                        "inside": int(s.inside),
                        "split": s.split,
                    }
                )
                + "\n"
            )
