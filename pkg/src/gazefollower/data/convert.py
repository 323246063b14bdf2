"""Converters from public benchmark annotation files to the JSONL manifest.

Supported source layouts:

* ``gazefollow_train`` / ``gazefollow_test``: the comma-separated annotation
  text files distributed with the GazeFollow benchmark (one row per person,
  test rows repeated once per gaze annotation).  Eye/gaze coordinates are
  already normalized; head boxes are in pixels, so the referenced images are
  opened to normalize them.
* ``videoattentiontarget``: a directory tree ``show/clip/person.txt`` with
  rows ``frame,x_min,y_min,x_max,y_max,gaze_x,gaze_y`` in pixels, gaze set to
  -1,-1 when the target is outside the frame.
"""

from __future__ import annotations

from pathlib import Path

from PIL import Image

from gazefollower.data.manifest import GazeSample, HeadBox, ManifestError

_GF_TRAIN_FIELDS = 15  # path,idx,body(4),eye(2),gaze(2),head(4),inout


def _image_size(images_root: Path, rel_path: str, cache: dict) -> tuple[int, int]:
    if rel_path not in cache:
        full = images_root / rel_path
        if not full.exists():
            raise FileNotFoundError(f"referenced image missing: {full}")
        with Image.open(full) as img:
            cache[rel_path] = img.size  # (width, height)
    return cache[rel_path]


def _norm_box(
    x0: float, y0: float, x1: float, y1: float, width: int, height: int
) -> HeadBox | None:
    box = (
        max(0.0, min(1.0, x0 / width)),
        max(0.0, min(1.0, y0 / height)),
        max(0.0, min(1.0, x1 / width)),
        max(0.0, min(1.0, y1 / height)),
    )
    if box[0] < box[2] and box[1] < box[3]:
        return HeadBox(*box)
    return None


def convert_gazefollow(
    annotation_file: str | Path,
    images_root: str | Path,
    split: str,
) -> list[GazeSample]:
    """Parse a GazeFollow annotation text file into manifest samples.

    Test rows sharing (image, person index) are merged into one sample
    carrying all gaze annotations.
    """
    annotation_file = Path(annotation_file)
    images_root = Path(images_root)
    size_cache: dict = {}
    merged: dict[tuple[str, str], dict] = {}
    order: list[tuple[str, str]] = []
    skipped = 0
    with annotation_file.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < _GF_TRAIN_FIELDS - 1:
                raise ManifestError(
                    f"{annotation_file}: line {lineno}: expected >= "
                    f"{_GF_TRAIN_FIELDS - 1} comma-separated fields, got {len(parts)}"
                )
            rel_path, idx = parts[0], parts[1]
            try:
                gaze_x, gaze_y = float(parts[8]), float(parts[9])
                hx0, hy0, hx1, hy1 = (float(v) for v in parts[10:14])
                inout = int(float(parts[14])) if len(parts) > _GF_TRAIN_FIELDS - 1 else 1
            except ValueError as exc:
                raise ManifestError(
                    f"{annotation_file}: line {lineno}: bad numeric field ({exc})"
                ) from exc
            width, height = _image_size(images_root, rel_path, size_cache)
            head = _norm_box(hx0, hy0, hx1, hy1, width, height)
            if head is None:
                skipped += 1
                continue
            key = (rel_path, idx)
            inside = bool(inout) and 0.0 <= gaze_x <= 1.0 and 0.0 <= gaze_y <= 1.0
            if key not in merged:
                merged[key] = {"head": head, "points": [], "inside": inside}
                order.append(key)
            if inside:
                merged[key]["points"].append((gaze_x, gaze_y))
                merged[key]["inside"] = True
    samples = []
    for key in order:
        rec = merged[key]
        if rec["inside"] and not rec["points"]:
            continue
        samples.append(
            GazeSample(
                image_ref=key[0],
                head=rec["head"],
                gaze_points=rec["points"],
                inside=rec["inside"],
                split=split,
            )
        )
    if skipped:
        print(f"convert: skipped {skipped} rows with degenerate head boxes")
    return samples


def convert_videoattentiontarget(
    annotation_root: str | Path,
    images_root: str | Path,
    split: str,
) -> list[GazeSample]:
    """Walk show/clip/person.txt annotation files into manifest samples."""
    annotation_root = Path(annotation_root)
    images_root = Path(images_root)
    size_cache: dict = {}
    samples: list[GazeSample] = []
    txt_files = sorted(annotation_root.rglob("*.txt"))
    if not txt_files:
        raise ManifestError(f"no annotation .txt files under {annotation_root}")
    for txt in txt_files:
        clip_rel = txt.parent.relative_to(annotation_root)
        with txt.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) < 7:
                    raise ManifestError(
                        f"{txt}: line {lineno}: expected 7 fields, got {len(parts)}"
                    )
                frame = parts[0]
                try:
                    hx0, hy0, hx1, hy1, gx, gy = (float(v) for v in parts[1:7])
                except ValueError as exc:
                    raise ManifestError(
                        f"{txt}: line {lineno}: bad numeric field ({exc})"
                    ) from exc
                rel_path = str(clip_rel / frame)
                width, height = _image_size(images_root, rel_path, size_cache)
                head = _norm_box(hx0, hy0, hx1, hy1, width, height)
                if head is None:
                    continue
                inside = gx >= 0 and gy >= 0
                points = []
                if inside:
                    points = [
                        (min(1.0, max(0.0, gx / width)), min(1.0, max(0.0, gy / height)))
                    ]
                samples.append(
                    GazeSample(
                        image_ref=rel_path,
                        head=head,
                        gaze_points=points,
                        inside=inside,
                        split=split,
                    )
                )
    return samples
