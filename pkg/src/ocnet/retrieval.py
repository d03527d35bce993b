"""Fused query/gallery distance, CMC and mAP, ranking export, feature files."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass
class GalleryRecord:
    f_final: np.ndarray
    f_bb: np.ndarray
    identity: int
    camera: int
    path: str = ""


@dataclass
class FeatureSet:
    """Column store of many records; the natural form for batched distances."""
    f_final: np.ndarray
    f_bb: np.ndarray
    ids: np.ndarray
    cams: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.f_final = np.asarray(self.f_final, dtype=np.float64)
        self.f_bb = np.asarray(self.f_bb, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.cams = np.asarray(self.cams, dtype=np.int64)
        n = len(self.ids)
        if self.f_final.ndim != 2 or self.f_bb.ndim != 2:
            raise ValidationError("feature arrays must be 2-D")
        if self.f_final.shape[0] != n or self.f_bb.shape[0] != n or len(self.cams) != n:
            raise ValidationError("feature rows, ids and cameras must have equal length")
        if self.paths and len(self.paths) != n:
            raise ValidationError("paths must be empty or one per record")
        if not (np.isfinite(self.f_final).all() and np.isfinite(self.f_bb).all()):
            raise ValidationError("features contain non-finite values")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_records(cls, records) -> "FeatureSet":
        records = list(records)
        if not records:
            raise ValidationError("empty record set")
        return cls(np.stack([r.f_final for r in records]), np.stack([r.f_bb for r in records]),
                   [r.identity for r in records], [r.camera for r in records],
                   [r.path for r in records])

    def record(self, i) -> GalleryRecord:
        return GalleryRecord(self.f_final[i], self.f_bb[i], int(self.ids[i]), int(self.cams[i]),
                             self.paths[i] if self.paths else "")

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.f_final[idx], self.f_bb[idx], self.ids[idx], self.cams[idx],
                          [self.paths[i] for i in idx] if self.paths else [])


def _check_alpha(alpha):
    if not (alpha >= 0 and np.isfinite(alpha)):
        raise ValidationError(f"alpha must be finite and nonnegative, got {alpha}")


def fused_distance(q: GalleryRecord, g: GalleryRecord, alpha: float = 1.0) -> float:
    _check_alpha(alpha)
    if np.shape(q.f_final) != np.shape(g.f_final) or np.shape(q.f_bb) != np.shape(g.f_bb):
        raise ValidationError("query and gallery feature dimensions differ")
    a = np.asarray(q.f_final, dtype=np.float64) - np.asarray(g.f_final, dtype=np.float64)
    b = np.asarray(q.f_bb, dtype=np.float64) - np.asarray(g.f_bb, dtype=np.float64)
    return float(np.sqrt(a @ a) + alpha * np.sqrt(b @ b))


@dataclass
class DistanceMatrix:
    values: np.ndarray
    alpha: float


def distance_matrix(queries, gallery, alpha: float = 1.0) -> DistanceMatrix:
    _check_alpha(alpha)
    q = queries if isinstance(queries, FeatureSet) else FeatureSet.from_records(queries)
    g = gallery if isinstance(gallery, FeatureSet) else FeatureSet.from_records(gallery)
    if len(q) == 0 or len(g) == 0:
        raise ValidationError("query and gallery sets must be nonempty")
    if q.f_final.shape[1] != g.f_final.shape[1] or q.f_bb.shape[1] != g.f_bb.shape[1]:
        raise ValidationError("query and gallery feature dimensions differ")
    values = kernels.fused_distance_matrix(q.f_final, g.f_final, q.f_bb, g.f_bb, alpha)
    return DistanceMatrix(values, float(alpha))


@dataclass
class EvalResult:
    cmc: np.ndarray
    mAP: float
    ap: np.ndarray
    valid: np.ndarray
    num_skipped: int

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1]) if len(self.cmc) else 0.0

    def summary(self) -> dict[str, float]:
        return {"rank1": self.rank(1), "rank5": self.rank(5), "rank10": self.rank(10),
                "mAP": self.mAP, "num_valid": int(self.valid.sum()), "num_skipped": self.num_skipped}


def cmc_map(dist, q_ids, q_cams, g_ids, g_cams, max_rank: int = 50,
            exclude_junk: bool = True) -> EvalResult:
    """Multi-shot protocol: same-identity same-camera gallery entries are junk.

    Queries left without any positive are skipped and counted. Ties in
    distance keep gallery index order.
    """
    values = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    nq, ng = values.shape
    if len(q_ids) != nq or len(q_cams) != nq or len(g_ids) != ng or len(g_cams) != ng:
        raise ValidationError(f"id/camera arrays do not match distance matrix shape {values.shape}")
    order = np.argsort(values, axis=1, kind="stable")
    first, ap = kernels.rank_stats(order, q_ids, q_cams, g_ids, g_cams, exclude_junk)
    valid = first >= 0
    skipped = int((~valid).sum())
    if skipped:
        log.warning("%d of %d queries have no valid gallery positive; skipped", skipped, nq)
    max_rank = min(max_rank, ng)
    if valid.any():
        f = first[valid]
        cmc = np.array([(f < k).mean() for k in range(1, max_rank + 1)])
        mAP = math.fsum(ap[valid]) / int(valid.sum())  # correctly rounded, order-free
    else:
        cmc, mAP = np.zeros(max_rank), 0.0
    return EvalResult(cmc, mAP, ap, valid, skipped)


def export_ranking(query_index: int, dist, gallery: FeatureSet, k: int, path=None,
                   query_identity: int | None = None):
    """Top-k gallery rows as (rank, path, distance, correct); written as TSV if ``path``."""
    values = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist)
    if not 0 <= query_index < values.shape[0]:
        raise ValidationError(f"query index {query_index} out of range [0, {values.shape[0]})")
    if not 1 <= k <= values.shape[1]:
        raise ValidationError(f"k={k} must be in [1, {values.shape[1]}]")
    row = values[query_index]
    order = np.argsort(row, kind="stable")[:k]
    rows = []
    for r, j in enumerate(order, 1):
        correct = query_identity is not None and int(gallery.ids[j]) == query_identity
        src = gallery.paths[j] if gallery.paths else str(j)
        rows.append((r, src, float(row[j]), bool(correct)))
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("rank\tpath\tdistance\tcorrect\n")
            for r, src, d, c in rows:
                fh.write(f"{r}\t{src}\t{d!r}\t{int(c)}\n")
    return rows


def render_ranking_grid(query_path: str, rows, out_path, tile=(64, 32)):
    """Query plus top-k images side by side; green border = correct, red = wrong."""
    from PIL import Image, ImageOps

    h, w = tile
    pad = 3
    canvas = Image.new("RGB", ((w + 2 * pad) * (len(rows) + 1), h + 2 * pad), "white")
    items = [(query_path, None)] + [(src, c) for _, src, _, c in rows]
    for i, (src, correct) in enumerate(items):
        img = Image.open(src).convert("RGB").resize((w, h))
        color = "gray" if correct is None else ("green" if correct else "red")
        canvas.paste(ImageOps.expand(img, border=pad, fill=color), (i * (w + 2 * pad), 0))
    canvas.save(out_path)


# -- feature file -----------------------------------------------------------
#
# little-endian throughout
#   magic  b"OCNF"            4 bytes
#   version                   uint16 (=1)
#   count, dim_final, dim_bb  uint32 x3
#   alpha                     float64
#   F_final rows              float64[count, dim_final]
#   F_BB rows                 float64[count, dim_bb]
#   ids, cameras              int32[count] each
#   paths                     per record: uint32 byte length + UTF-8 bytes

FEATURE_MAGIC = b"OCNF"
FEATURE_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sHIIId")


def write_features(path, fs: FeatureSet, alpha: float = 1.0) -> None:
    n, df, db = len(fs), fs.f_final.shape[1], fs.f_bb.shape[1]
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, df, db, float(alpha)))
        fh.write(fs.f_final.astype("<f8").tobytes())
        fh.write(fs.f_bb.astype("<f8").tobytes())
        fh.write(fs.ids.astype("<i4").tobytes())
        fh.write(fs.cams.astype("<i4").tobytes())
        paths = fs.paths or [""] * n
        for p in paths:
            raw = p.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def read_features(path) -> tuple[FeatureSet, float]:
    data = Path(path).read_bytes()
    magic, version, n, df, db, alpha = _FEAT_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise ValidationError(f"{path}: not a version-{FEATURE_VERSION} feature file")
    off = _FEAT_HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    f_final = take("<f8", n * df).reshape(n, df)
    f_bb = take("<f8", n * db).reshape(n, db)
    ids, cams = take("<i4", n), take("<i4", n)
    paths = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", data, off)
        off += 4
        paths.append(data[off:off + length].decode("utf-8"))
        off += length
    return FeatureSet(f_final, f_bb, ids, cams, paths), alpha


def write_report(path, values: dict) -> None:
    """``key = value`` lines, same syntax as the run config."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, v in values.items():
            fh.write(f"{key} = {v!r}\n" if isinstance(v, float) else f"{key} = {v}\n")


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
