"""Annotation parsing, stereo splitting, manifests and surgery-level folds."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SHAPE_POINTS = {"line": 2, "point": 1}
DOMAINS = ("intraop", "simulator")
USAGES = ("cv", "test")
MANIFEST_VERSION = 1


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation document."""


class ManifestError(ValueError):
    pass


@dataclass
class Shape:
    kind: str
    points: list
    label: str = "suture"


@dataclass
class AnnotationFile:
    width: int
    height: int
    shapes: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    image_path: str | None = None

    @property
    def lines(self):
        return [s for s in self.shapes if s.kind == "line"]

    @property
    def points(self):
        return [s for s in self.shapes if s.kind == "point"]

    def landmarks(self):
        """All shape vertices as an ``(n, 2)`` array (monocular frames)."""
        pts = [p for s in self.shapes for p in s.points]
        return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


@dataclass
class Sample:
    image: np.ndarray
    landmarks: np.ndarray
    frame_id: str = ""
    surgery_id: str = ""


@dataclass
class StereoSample:
    left: Sample
    right: Sample
    frame_id: str = ""
    surgery_id: str = ""


# ----------------------------------------------------------------------
# labelme documents


def _require(doc, key, where):
    if key not in doc:
        raise AnnotationError(f"{where}: missing required field {key!r}")
    return doc[key]


def parse_annotation(text, source="<annotation>"):
    """Parse a labelme-style JSON document.

    Only ``line`` and ``point`` shapes are kept; any other shape type is
    skipped and reported in ``warnings``.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise AnnotationError(f"{source}: top level must be an object")
    width = _require(doc, "imageWidth", source)
    height = _require(doc, "imageHeight", source)
    shapes = _require(doc, "shapes", source)
    if not isinstance(width, int) or not isinstance(height, int) or width <= 0 or height <= 0:
        raise AnnotationError(f"{source}: imageWidth/imageHeight must be positive integers")
    if not isinstance(shapes, list):
        raise AnnotationError(f"{source}: 'shapes' must be a list")

    out = AnnotationFile(width=width, height=height, image_path=doc.get("imagePath"))
    for i, s in enumerate(shapes):
        where = f"{source}: shapes[{i}]"
        if not isinstance(s, dict):
            raise AnnotationError(f"{where}: shape must be an object")
        kind = s.get("shape_type", "polygon")
        pts = _require(s, "points", where)
        if kind not in SHAPE_POINTS:
            out.warnings.append(f"{where}: unsupported shape_type {kind!r} skipped")
            continue
        if not isinstance(pts, list) or len(pts) != SHAPE_POINTS[kind]:
            raise AnnotationError(f"{where}.points: a {kind} needs exactly {SHAPE_POINTS[kind]} point(s)")
        coords = []
        for j, p in enumerate(pts):
            if (not isinstance(p, (list, tuple)) or len(p) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)):
                raise AnnotationError(f"{where}.points[{j}]: expected [x, y] numbers")
            x, y = float(p[0]), float(p[1])
            if not (0.0 <= x < width and 0.0 <= y < height):
                raise AnnotationError(f"{where}.points[{j}]: ({x}, {y}) outside the {width}x{height} image")
            coords.append((x, y))
        out.shapes.append(Shape(kind=kind, points=coords, label=str(s.get("label", ""))))
    for w in out.warnings:
        logger.warning(w)
    return out


def serialize_annotation(ann):
    """Render ``ann`` as a labelme-compatible JSON document."""
    doc = {
        "version": "5.0.1",
        "flags": {},
        "shapes": [
            {
                "label": s.label,
                "points": [[float(x), float(y)] for x, y in s.points],
                "group_id": None,
                "shape_type": s.kind,
                "flags": {},
            }
            for s in ann.shapes
        ],
        "imagePath": ann.image_path,
        "imageData": None,
        "imageHeight": int(ann.height),
        "imageWidth": int(ann.width),
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def annotation_from_points(points, width, height, image_path=None, label="suture"):
    shapes = [Shape("point", [(float(x), float(y))], label) for x, y in np.asarray(points).reshape(-1, 2)]
    return AnnotationFile(width=width, height=height, shapes=shapes, image_path=image_path)


# ----------------------------------------------------------------------
# stereo frames


def split_stereo(image, annotation, frame_id="", surgery_id=""):
    """Split a top-down stereo frame (left image on top) into two samples.

    Each line contributes its upper endpoint to the left view and its lower
    endpoint, re-based by ``H/2``, to the right view.  Points go to whichever
    half contains them.
    """
    image = np.asarray(image)
    h = image.shape[0]
    if h % 2:
        raise AnnotationError(f"frame {frame_id}: stereo frame height {h} must be even")
    half = h // 2
    left, right = [], []
    for i, s in enumerate(annotation.shapes):
        if s.kind == "line":
            a, b = sorted(s.points, key=lambda p: p[1])
            if not (a[1] < half <= b[1]):
                raise AnnotationError(
                    f"frame {frame_id}: line shapes[{i}] {s.points} does not cross the midline y={half}"
                )
            left.append(a)
            right.append((b[0], b[1] - half))
        elif s.kind == "point":
            x, y = s.points[0]
            if y < half:
                left.append((x, y))
            else:
                right.append((x, y - half))
    as_arr = lambda pts: np.asarray(pts, dtype=np.float64).reshape(-1, 2)  # noqa: E731
    return StereoSample(
        left=Sample(image[:half], as_arr(left), f"{frame_id}:L", surgery_id),
        right=Sample(image[half:], as_arr(right), f"{frame_id}:R", surgery_id),
        frame_id=frame_id,
        surgery_id=surgery_id,
    )


# ----------------------------------------------------------------------
# images


def load_image(path, access_log=None):
    """Read an 8-bit RGB raster as floats in ``[0, 1]``."""
    from PIL import Image

    if access_log is not None:
        access_log.append(os.path.abspath(path))
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(image, path):
    from PIL import Image

    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def resize_sample(image, landmarks, width, height):
    """Bilinear resize with landmarks mapped on the pixel-centre grid."""
    h, w = image.shape[:2]
    if (w, h) == (width, height):
        return image, np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    from skimage.transform import resize

    out = resize(image, (height, width) + image.shape[2:], order=1, mode="edge", anti_aliasing=False)
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2).copy()
    sx, sy = width / w, height / h
    pts[:, 0] = (pts[:, 0] + 0.5) * sx - 0.5
    pts[:, 1] = (pts[:, 1] + 0.5) * sy - 0.5
    pts[:, 0] = np.clip(pts[:, 0], 0.0, width - 1e-9)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, height - 1e-9)
    return out, pts


# ----------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    frame: str
    annotation: str
    surgery_id: str
    domain: str = "simulator"
    usage: str = "cv"
    stereo: bool = False


@dataclass
class DatasetManifest:
    entries: list
    root: str = "."
    metadata: dict = field(default_factory=dict)

    @property
    def surgery_ids(self):
        return sorted({e.surgery_id for e in self.entries})

    def path(self, rel):
        return os.path.join(self.root, rel)

    def select(self, surgery_ids=None, usage=None):
        keep = None if surgery_ids is None else set(surgery_ids)
        return [
            e for e in self.entries
            if (keep is None or e.surgery_id in keep) and (usage is None or e.usage == usage)
        ]

    def to_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "metadata": self.metadata,
            "entries": [
                {"frame": e.frame, "annotation": e.annotation, "surgery_id": e.surgery_id,
                 "domain": e.domain, "usage": e.usage, "stereo": e.stereo}
                for e in self.entries
            ],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path, check_files=True):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: invalid JSON: {exc}") from None
        if doc.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
        entries = []
        for i, e in enumerate(doc.get("entries", [])):
            try:
                entry = ManifestEntry(
                    frame=e["frame"], annotation=e["annotation"], surgery_id=str(e["surgery_id"]),
                    domain=e.get("domain", "simulator"), usage=e.get("usage", "cv"),
                    stereo=bool(e.get("stereo", False)),
                )
            except KeyError as exc:
                raise ManifestError(f"{path}: entries[{i}] missing field {exc}") from None
            if not entry.surgery_id:
                raise ManifestError(f"{path}: entries[{i}] has an empty surgery_id")
            if entry.domain not in DOMAINS or entry.usage not in USAGES:
                raise ManifestError(f"{path}: entries[{i}] has invalid domain/usage {entry.domain}/{entry.usage}")
            entries.append(entry)
        m = cls(entries=entries, root=os.path.dirname(os.path.abspath(path)), metadata=doc.get("metadata", {}))
        if check_files:
            for e in entries:
                for rel in (e.frame, e.annotation):
                    if not os.path.exists(m.path(rel)):
                        raise ManifestError(f"{path}: referenced file {rel} does not exist")
        return m


def load_samples(manifest, entries, size=None, access_log=None):
    """Load entries as monocular samples; stereo frames yield two samples each.

    ``size`` is an optional ``(width, height)`` target for resizing.
    """
    samples = []
    for e in entries:
        ann_path = manifest.path(e.annotation)
        if access_log is not None:
            access_log.append(os.path.abspath(ann_path))
        with open(ann_path, encoding="utf-8") as fh:
            ann = parse_annotation(fh.read(), source=e.annotation)
        image = load_image(manifest.path(e.frame), access_log)
        if e.stereo:
            st = split_stereo(image, ann, frame_id=e.frame, surgery_id=e.surgery_id)
            views = [st.left, st.right]
        else:
            views = [Sample(image, ann.landmarks(), e.frame, e.surgery_id)]
        for v in views:
            if size is not None:
                v.image, v.landmarks = resize_sample(v.image, v.landmarks, *size)
            samples.append(v)
    return samples


# ----------------------------------------------------------------------
# folds


def make_folds(surgery_ids, k, rng):
    """Partition surgeries into ``k`` validation groups.

    ``surgery_ids`` may be a manifest or an iterable of ids.  Returns a list of
    ``(train_ids, validation_ids)`` tuples of sorted lists.
    """
    if isinstance(surgery_ids, DatasetManifest):
        surgery_ids = surgery_ids.surgery_ids
    ids = sorted(set(surgery_ids))
    if k < 2:
        raise ValueError(f"cross-validation needs k >= 2 folds, got {k}")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} surgeries")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    order = [ids[i] for i in rng.permutation(len(ids))]
    groups = np.array_split(np.arange(len(ids)), k)
    folds = []
    for g in groups:
        val = sorted(order[i] for i in g)
        train = sorted(set(ids) - set(val))
        folds.append((train, val))
    return folds
