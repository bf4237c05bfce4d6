"""Synthetic registration pairs, centroid scan files and dataset splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import _io
from .geometry import PointCloud, RigidTransform, apply_transform, rotation_about_axis
from .seeding import stream
from .trajectory import fit_node_count


class DatasetError(ValueError):
    pass


class ScanParseError(DatasetError):
    """Malformed centroid file row; carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ScanSchemaError(ScanParseError):
    pass


@dataclass(frozen=True)
class RegistrationSample:
    src: PointCloud
    tgt: PointCloud
    gt_transform: RigidTransform
    tag: str


@dataclass
class DatasetSplit:
    train: List[RegistrationSample] = field(default_factory=list)
    eval: List[RegistrationSample] = field(default_factory=list)
    test: List[RegistrationSample] = field(default_factory=list)

    def parts(self) -> Dict[str, List[RegistrationSample]]:
        return {"train": self.train, "eval": self.eval, "test": self.test}


def random_transform(rng: np.random.Generator, max_rot_deg: float, max_trans: float) -> RigidTransform:
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-8:
        axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(0.0, max_rot_deg))
    t = rng.uniform(-max_trans, max_trans, size=3)
    return RigidTransform(rotation_about_axis(axis, angle), t)


def gen_synthetic_pair(n: int, coord_range: float = 40.0, max_rot_deg: float = 45.0,
                       max_trans: float = 20.0, seed: int = 0,
                       tag: Optional[str] = None) -> RegistrationSample:
    """Uniform source cloud and its image under a random rigid transform."""
    if n < 4:
        raise DatasetError("synthetic pairs need n >= 4")
    rng = stream(seed, "synthetic-pair")
    pts = rng.uniform(-coord_range, coord_range, size=(n, 3))
    gt = random_transform(rng, max_rot_deg, max_trans)
    src = PointCloud(pts)
    return RegistrationSample(src, apply_transform(src, gt), gt, tag or f"synthetic-{seed}")


def gen_synthetic_set(count: int, n: int, seed: int, **kwargs) -> List[RegistrationSample]:
    return [gen_synthetic_pair(n, seed=int(stream(seed, "sample", i).integers(2 ** 31)),
                               tag=f"s{seed}-{i:05d}", **kwargs) for i in range(count)]


# -- centroid scans --------------------------------------------------------


@dataclass
class _Scan:
    scan_id: str
    pose: RigidTransform
    points: list = field(default_factory=list)
    extra: list = field(default_factory=list)
    line: int = 0


def _floats(tokens, lineno, what):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ScanParseError(f"{what}: {exc}", lineno) from None


def parse_centroid_scans(text: str) -> Tuple[List[_Scan], Optional[int]]:
    scans: List[_Scan] = []
    classes = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tok = line[1:].split()
            if tok and tok[0] == "scan":
                if len(tok) < 3 or tok[2] != "pose":
                    raise ScanSchemaError("scan header lacks a pose", lineno)
                vals = _floats(tok[3:], lineno, "pose")
                if len(vals) != 12:
                    raise ScanSchemaError(f"pose needs 12 values, got {len(vals)}", lineno)
                m = np.eye(4)
                m[:3, :] = np.array(vals).reshape(3, 4)
                scans.append(_Scan(tok[1], RigidTransform.from_matrix(m), line=lineno))
            elif tok and tok[0] == "classes":
                if len(tok) != 2 or not tok[1].isdigit() or int(tok[1]) < 1:
                    raise ScanParseError("classes directive needs one positive integer", lineno)
                classes = int(tok[1])
            continue
        if not scans:
            raise ScanSchemaError("data row before any scan header", lineno)
        vals = _floats(line.split(), lineno, "row")
        if len(vals) < 3:
            raise ScanParseError(f"row needs x y z, got {len(vals)} values", lineno)
        scan = scans[-1]
        if scan.extra and len(vals) - 3 != len(scan.extra[0]):
            raise ScanParseError("row width differs from earlier rows of this scan", lineno)
        scan.points.append(vals[:3])
        scan.extra.append(vals[3:])
    for s in scans:
        if not s.points:
            raise ScanParseError(f"scan {s.scan_id} has no rows", s.line)
    return scans, classes


def _scan_cloud(scan: _Scan, classes: Optional[int]) -> PointCloud:
    pts = np.array(scan.points, dtype=np.float64)
    extra = np.array(scan.extra, dtype=np.float64).reshape(len(pts), -1)
    if extra.shape[1] == 0:
        return PointCloud(pts)
    if classes is not None:
        if extra.shape[1] != 1:
            raise ScanParseError(f"scan {scan.scan_id}: label rows must have one label column",
                                 scan.line)
        labels = extra[:, 0]
        if np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= classes:
            raise ScanParseError(f"scan {scan.scan_id}: labels must be integers in [0, {classes})",
                                 scan.line)
        return PointCloud(pts, np.eye(classes)[labels.astype(np.int64)])
    return PointCloud(pts, extra)


def load_centroid_scans(path: Union[str, Path], pair_distance: Optional[float] = None,
                        tolerance: float = 0.5) -> List[RegistrationSample]:
    """Read a centroid file and pair its scans.

    Without ``pair_distance`` consecutive scans are paired; otherwise every
    ordered pair ``(i, j)``, ``i < j``, whose pose origins lie
    ``pair_distance +- tolerance`` apart. The ground truth maps the source
    scan's frame into the target's: ``pose_tgt^-1 * pose_src``.
    """
    path = Path(path)
    scans, classes = parse_centroid_scans(path.read_text())
    clouds = [_scan_cloud(s, classes) for s in scans]
    dims = {c.feature_dim for c in clouds}
    if len(dims) > 1:
        raise ScanParseError(f"feature width differs between scans: {sorted(dims)}")
    if pair_distance is None:
        pairs = [(i, i + 1) for i in range(len(scans) - 1)]
    else:
        pairs = []
        for i in range(len(scans)):
            for j in range(i + 1, len(scans)):
                d = np.linalg.norm(scans[i].pose.translation - scans[j].pose.translation)
                if abs(d - pair_distance) <= tolerance:
                    pairs.append((i, j))
    out = []
    for i, j in pairs:
        gt = scans[j].pose.inverse().compose(scans[i].pose)
        out.append(RegistrationSample(clouds[i], clouds[j], gt,
                                      f"{path.stem}:{scans[i].scan_id}-{scans[j].scan_id}"))
    return out


# -- splits ------------------------------------------------------------------


def _split_sizes(total: int, ratios=None, counts=None) -> Tuple[int, int, int]:
    if counts is not None:
        sizes = tuple(int(c) for c in counts)
        if any(c < 0 for c in sizes):
            raise DatasetError("split counts must be nonnegative")
        if sum(sizes) > total:
            raise DatasetError(f"requested {sum(sizes)} samples but only {total} available")
        return sizes
    ratios = (0.6, 0.2, 0.2) if ratios is None else tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError("ratios must be three nonnegative numbers summing to 1")
    n_train = int(math.floor(ratios[0] * total + 1e-9))
    n_eval = int(math.floor(ratios[1] * total + 1e-9))
    return n_train, n_eval, total - n_train - n_eval


def split_dataset(samples: Sequence[RegistrationSample], ratios=None, counts=None,
                  seed: int = 0) -> DatasetSplit:
    """Shuffled train/eval/test partition by ratios (default 60/20/20) or counts."""
    if counts is None and not samples:
        raise DatasetError("cannot split an empty dataset")
    tags = [s.tag for s in samples]
    if len(set(tags)) != len(tags):
        raise DatasetError("sample tags must be unique")
    n_train, n_eval, n_test = _split_sizes(len(samples), ratios, counts)
    order = stream(seed, "split").permutation(len(samples))
    picked = [samples[i] for i in order]
    return DatasetSplit(picked[:n_train], picked[n_train:n_train + n_eval],
                        picked[n_train + n_eval:n_train + n_eval + n_test])


# -- sample files ------------------------------------------------------------

SAMPLE_TAG = "icp-reasoner-sample"


def _cloud_doc(c: PointCloud):
    return {"points": c.points, "features": c.features, "mask": c.mask.astype(int)}


def _cloud_from(doc) -> PointCloud:
    feats = doc.get("features")
    return PointCloud(np.array(doc["points"], dtype=np.float64).reshape(-1, 3),
                      None if feats is None else np.array(feats, dtype=np.float64),
                      np.array(doc["mask"], dtype=bool))


def serialize_sample(s: RegistrationSample) -> bytes:
    return _io.dumps({
        "format": SAMPLE_TAG,
        "version": 1,
        "tag": s.tag,
        "gt_transform": s.gt_transform.matrix(),
        "src": _cloud_doc(s.src),
        "tgt": _cloud_doc(s.tgt),
    }).encode()


def deserialize_sample(data) -> RegistrationSample:
    text = data.decode() if isinstance(data, (bytes, bytearray)) else str(data)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"sample is not valid JSON: {exc}") from exc
    if doc.get("format") != SAMPLE_TAG:
        raise DatasetError("not a registration sample file")
    try:
        return RegistrationSample(_cloud_from(doc["src"]), _cloud_from(doc["tgt"]),
                                  RigidTransform.from_matrix(np.array(doc["gt_transform"])),
                                  str(doc["tag"]))
    except KeyError as exc:
        raise DatasetError(f"sample file lacks {exc}") from None


def load_sample(path) -> RegistrationSample:
    return deserialize_sample(Path(path).read_bytes())


def fit_pair(sample: RegistrationSample, n: Optional[int], seed: int = 0):
    """Both clouds fitted to ``n`` nodes with a stream keyed by the sample tag."""
    src, tgt = sample.src, sample.tgt
    if n is None or (len(src) == n and len(tgt) == n):
        return src, tgt
    rng = stream(seed, "fit", sample.tag)
    s_seed, t_seed = (int(v) for v in rng.integers(2 ** 31, size=2))
    return fit_node_count(src, n, s_seed), fit_node_count(tgt, n, t_seed)
