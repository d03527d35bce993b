"""Synthetic occluded pedestrians, Re-ID directory loading, augmentation, PK sampling.

Seeding rule: identity ``i`` draws its appearance signature from
``SeedSequence([master, 0, i])``; image ``j`` of identity ``i`` draws its
per-image randomness from ``SeedSequence([master, 1, i, j])``; the split and
occlusion assignment draw from ``SeedSequence([master, 2])``. Any subset of
identities can therefore be rendered independently and still match a full
run byte for byte.
"""
from __future__ import annotations

import colorsys
import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
SPLIT_DIR_ALIASES = {"train": ("train", "bounding_box_train"),
                     "query": ("query",),
                     "gallery": ("gallery", "bounding_box_test")}
TAGS = ("none", "object", "PI")
FILENAME_RE = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(jpg|jpeg|png)$", re.IGNORECASE)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class SyntheticConfig:
    num_identities: int = 20
    images_per_identity: int = 40
    image_size: tuple[int, int] = (64, 32)
    occlusion_fraction: float = 0.3
    object_share: float = 0.5
    pi_share: float = 0.5
    train_identities: int = 10
    queries_per_identity: int = 10
    num_cameras: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.num_identities <= 0 or self.images_per_identity <= 0:
            raise ValidationError("need at least one identity and one image per identity")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ValidationError(f"occlusion fraction {self.occlusion_fraction} not in [0, 1]")
        if not (0.0 <= self.object_share <= 1.0 and 0.0 <= self.pi_share <= 1.0):
            raise ValidationError("occlusion mix proportions must lie in [0, 1]")
        if abs(self.object_share + self.pi_share - 1.0) > 1e-9:
            raise ValidationError("occlusion mix proportions must sum to 1")
        if not 0 <= self.train_identities < self.num_identities:
            raise ValidationError("train identities must leave at least one evaluation identity")
        if not 0 < self.queries_per_identity < self.images_per_identity:
            raise ValidationError("queries per identity must be in [1, images_per_identity)")
        if self.num_cameras < 2:
            raise ValidationError("need at least two cameras for cross-camera evaluation")

    @classmethod
    def from_run_config(cls, cfg) -> "SyntheticConfig":
        return cls(cfg.num_identities, cfg.images_per_identity, (cfg.image_height, cfg.image_width),
                   cfg.occlusion_fraction, cfg.occlusion_object_share, cfg.occlusion_pi_share,
                   cfg.train_identities, cfg.queries_per_identity, cfg.num_cameras, cfg.data_seed)


@dataclass
class LabeledSample:
    path: str
    identity: int
    camera: int
    split: str
    occlusion: str = "none"

    @property
    def distractor(self) -> bool:
        return self.identity == -1

    @property
    def junk(self) -> bool:
        return self.identity == 0


@dataclass
class DatasetIndex:
    root: str
    samples: list[LabeledSample] = field(default_factory=list)

    def split(self, name: str) -> list[LabeledSample]:
        return [s for s in self.samples if s.split == name]

    def key(self):
        return sorted((s.path, s.identity, s.camera, s.split, s.occlusion) for s in self.samples)

    def __eq__(self, other):
        return isinstance(other, DatasetIndex) and self.key() == other.key()

    def write_manifest(self, path=None):
        path = Path(path or Path(self.root) / "index.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("path\tid\tcamera\tsplit\tocclusion\n")
            for s in self.samples:
                fh.write(f"{s.path}\t{s.identity}\t{s.camera}\t{s.split}\t{s.occlusion}\n")


def read_manifest(path) -> list[LabeledSample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines[1:]:
        p, pid, cam, split, tag = line.split("\t")
        out.append(LabeledSample(p, int(pid), int(cam), split, tag))
    return out


# -- rendering ----------------------------------------------------------------

def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


@dataclass
class Signature:
    head: np.ndarray
    shirt: np.ndarray
    shirt2: np.ndarray
    pants: np.ndarray
    shoes: np.ndarray
    pattern: int          # 0 solid, 1 horizontal stripes, 2 vertical stripes, 3 split top/bottom
    bag: np.ndarray | None
    width_scale: float
    height_scale: float


def identity_signature(master: int, identity: int) -> Signature:
    r = _rng(master, 0, identity)
    shirt_h = r.random()
    pants_h = r.random()
    return Signature(
        head=_hsv(0.05 + 0.05 * r.random(), 0.3 + 0.3 * r.random(), 0.4 + 0.5 * r.random()),
        shirt=_hsv(shirt_h, 0.6 + 0.4 * r.random(), 0.5 + 0.5 * r.random()),
        shirt2=_hsv(shirt_h + 0.25 + 0.5 * r.random(), 0.6 + 0.4 * r.random(), 0.4 + 0.6 * r.random()),
        pants=_hsv(pants_h, 0.5 + 0.5 * r.random(), 0.2 + 0.7 * r.random()),
        shoes=_hsv(r.random(), 0.5 * r.random(), 0.1 + 0.5 * r.random()),
        pattern=int(r.integers(0, 4)),
        bag=_hsv(r.random(), 0.7 + 0.3 * r.random(), 0.3 + 0.6 * r.random()) if r.random() < 0.5 else None,
        width_scale=0.85 + 0.3 * r.random(),
        height_scale=0.9 + 0.1 * r.random(),
    )


def _figure_layer(sig: Signature, h: int, w: int, cx: float, cy: float, shade: float):
    """RGB layer and coverage mask of one figure centered at (cy, cx)."""
    img = np.zeros((h, w, 3), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    fh = 0.86 * h * sig.height_scale
    fw = 0.42 * w * sig.width_scale
    top = cy - fh / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5

    def rect(y0, y1, x0, x1):
        return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)

    head_r = 0.09 * fh
    head_c = (top + head_r, cx)
    head = ((yy - head_c[0]) / head_r) ** 2 + ((xx - head_c[1]) / (head_r * 0.85)) ** 2 <= 1.0
    t0, t1 = top + 2 * head_r, top + 0.55 * fh
    torso = rect(t0, t1, cx - fw / 2, cx + fw / 2)
    legs = (rect(t1, top + 0.94 * fh, cx - fw * 0.42, cx - fw * 0.04)
            | rect(t1, top + 0.94 * fh, cx + fw * 0.04, cx + fw * 0.42))
    shoes = (rect(top + 0.94 * fh, top + fh, cx - fw * 0.45, cx - fw * 0.02)
             | rect(top + 0.94 * fh, top + fh, cx + fw * 0.02, cx + fw * 0.45))

    img[head] = sig.head
    shirt = np.broadcast_to(sig.shirt, (h, w, 3)).copy()
    if sig.pattern == 1:
        alt = (np.floor((yy - t0) / max(1.0, 0.06 * fh)) % 2 == 1)
        shirt[alt] = sig.shirt2
    elif sig.pattern == 2:
        alt = (np.floor((xx - cx) / max(1.0, 0.12 * fw)) % 2 == 1)
        shirt[alt] = sig.shirt2
    elif sig.pattern == 3:
        shirt[yy >= (t0 + t1) / 2] = sig.shirt2
    img[torso] = shirt[torso]
    img[legs] = sig.pants
    img[shoes] = sig.shoes
    mask |= head | torso | legs | shoes
    if sig.bag is not None:
        bag = rect(t0 + 0.2 * (t1 - t0), t1, cx + fw / 2, cx + fw / 2 + 0.18 * fw)
        img[bag] = sig.bag
        mask |= bag
    return img * shade, mask


def _background(r: np.random.Generator, h: int, w: int, tint: np.ndarray):
    base = _hsv(r.random(), 0.15 * r.random(), 0.35 + 0.4 * r.random())
    grad = np.linspace(-0.08, 0.08, h, dtype=np.float32)[:, None, None] * r.choice([-1.0, 1.0])
    noise = r.normal(0.0, 0.03, size=(h, w, 3)).astype(np.float32)
    return base + grad + noise + tint


def _occluder_texture(r: np.random.Generator, h: int, w: int):
    # low-saturation family, disjoint from the saturated identity palette
    kind = int(r.integers(0, 3))
    c1 = _hsv(0.05 + 0.1 * r.random(), 0.1 * r.random(), 0.2 + 0.6 * r.random())
    c2 = _hsv(0.05 + 0.1 * r.random(), 0.1 * r.random(), 0.2 + 0.6 * r.random())
    tex = np.broadcast_to(c1, (h, w, 3)).copy()
    if kind == 1:
        period = int(r.integers(2, 5))
        rows = (np.arange(h) // period) % 2 == 1
        tex[rows] = c2
    elif kind == 2:
        tex += r.normal(0.0, 0.12, size=(h, w, 1)).astype(np.float32)
    return tex


def _camera_tint(master: int, cam: int) -> np.ndarray:
    r = _rng(master, 3, cam)
    return (r.random(3).astype(np.float32) - 0.5) * 0.12


def render_sample(cfg: SyntheticConfig, identity: int, j: int, tag: str, interferer: int | None = None):
    """Render one image. Returns (uint8 HxWx3, metadata dict)."""
    h, w = cfg.image_size
    r = _rng(cfg.seed, 1, identity, j)
    cam = j % cfg.num_cameras + 1
    tint = _camera_tint(cfg.seed, cam)
    img = _background(r, h, w, tint)
    shade = 0.8 + 0.4 * r.random()
    meta = {"target_dx": 0.0, "interferer_dx": None, "occluded_fraction": 0.0, "figure_box": None}

    sig = identity_signature(cfg.seed, identity)
    jitter = 0.04 * w
    dx = float(r.uniform(-jitter, jitter))
    dy = float(r.uniform(-0.02 * h, 0.02 * h))
    if tag == "PI":
        side = 1.0 if r.random() < 0.5 else -1.0
        dx = -side * float(r.uniform(0.0, 0.08 * w))
        idx = float(side * r.uniform(0.3 * w, 0.45 * w))
    layer, mask = _figure_layer(sig, h, w, w / 2 + dx, h / 2 + dy, shade)
    img[mask] = layer[mask] + tint
    meta["target_dx"] = dx
    flip = r.random() < 0.5

    if tag == "PI":
        other = identity_signature(cfg.seed, interferer)
        o_layer, o_mask = _figure_layer(other, h, w, w / 2 + idx, h / 2 + float(r.uniform(-0.03 * h, 0.03 * h)),
                                        0.8 + 0.4 * r.random())
        img[o_mask] = o_layer[o_mask] + tint
        meta["interferer_dx"] = idx
        meta["occluded_fraction"] = float((mask & o_mask).sum() / max(1, mask.sum()))
    elif tag == "object":
        ys, xs = np.nonzero(mask)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        fig_h, fig_w = y1 - y0, x1 - x0
        frac = float(r.uniform(0.2, 0.5))
        if r.random() < 0.7:
            oh = max(1, int(round(frac * fig_h)))
            oy = int(r.integers(y0, y1 - oh + 1))
            oy0, oy1, ox0, ox1 = oy, oy + oh, 0, w
        else:
            ow = max(1, int(round(frac * fig_w)))
            ox = int(r.integers(x0, x1 - ow + 1))
            oy0, oy1, ox0, ox1 = 0, h, ox, ox + ow
        tex = _occluder_texture(r, oy1 - oy0, ox1 - ox0)
        img[oy0:oy1, ox0:ox1] = tex + tint
        # fraction of the figure's bounding box hidden by the occluder
        inter_h = max(0, min(oy1, y1) - max(oy0, y0))
        inter_w = max(0, min(ox1, x1) - max(ox0, x0))
        meta["occluded_fraction"] = float(inter_h * inter_w / (fig_h * fig_w))
        meta["figure_box"] = (int(fig_h), int(fig_w))

    if flip:
        img = img[:, ::-1]
        meta["target_dx"] = -meta["target_dx"]
        if meta["interferer_dx"] is not None:
            meta["interferer_dx"] = -meta["interferer_dx"]
    out = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return out, meta


def assign_occlusion(cfg: SyntheticConfig) -> dict[tuple[int, int], str]:
    """Exact tag counts: round(fraction * n) occluded, split by the mix."""
    ids = range(1, cfg.num_identities + 1)
    keys = [(i, j) for i in ids for j in range(cfg.images_per_identity)]
    n = len(keys)
    n_occ = int(round(cfg.occlusion_fraction * n))
    n_obj = int(round(cfg.object_share * n_occ))
    r = _rng(cfg.seed, 2)
    perm = r.permutation(n)
    tags = {k: "none" for k in keys}
    for rank, idx in enumerate(perm[:n_occ]):
        tags[keys[idx]] = "object" if rank < n_obj else "PI"
    return tags


def sample_filename(identity: int, camera: int, frame: int, ext="png") -> str:
    return f"{identity:04d}_c{camera}s1_{frame:06d}_00.{ext}"


def generate_synthetic(cfg: SyntheticConfig, root) -> tuple[DatasetIndex, list[dict]]:
    """Render the dataset under ``root`` and write ``index.tsv`` and ``generator_meta.tsv``."""
    root = Path(root)
    for s in SPLITS:
        (root / s).mkdir(parents=True, exist_ok=True)
    tags = assign_occlusion(cfg)
    samples, metas = [], []
    for i in range(1, cfg.num_identities + 1):
        train = i <= cfg.train_identities
        for j in range(cfg.images_per_identity):
            tag = tags[(i, j)]
            interferer = None
            if tag == "PI":
                r = _rng(cfg.seed, 4, i, j)
                interferer = int(r.integers(1, cfg.num_identities))
                interferer += interferer >= i
            img, meta = render_sample(cfg, i, j, tag, interferer)
            cam = j % cfg.num_cameras + 1
            split = "train" if train else ("query" if j < cfg.queries_per_identity else "gallery")
            rel = f"{split}/{sample_filename(i, cam, j)}"
            Image.fromarray(img).save(root / rel, format="PNG", optimize=False)
            samples.append(LabeledSample(rel, i, cam, split, tag))
            metas.append({"path": rel, "interferer": interferer, **meta})
    index = DatasetIndex(str(root), samples)
    index.write_manifest()
    with open(root / "generator_meta.tsv", "w", encoding="utf-8") as fh:
        fh.write("path\tinterferer\ttarget_dx\tinterferer_dx\toccluded_fraction\n")
        for m in metas:
            fh.write(f"{m['path']}\t{m['interferer']}\t{m['target_dx']!r}\t"
                     f"{m['interferer_dx']!r}\t{m['occluded_fraction']!r}\n")
    return index, metas


def parse_filename(name: str) -> tuple[int, int] | None:
    m = FILENAME_RE.match(name)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2))


def load_reid_directory(root) -> DatasetIndex:
    """Index a ``train/query/gallery`` tree (Market-style aliases accepted).

    Occlusion tags come from ``index.tsv`` when present, otherwise ``none``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory")
    tags = {}
    if (root / "index.tsv").exists():
        tags = {s.path: s.occlusion for s in read_manifest(root / "index.tsv")}
    samples = []
    for split in SPLITS:
        folder = next((root / a for a in SPLIT_DIR_ALIASES[split] if (root / a).is_dir()), None)
        if folder is None:
            raise ValidationError(f"missing {split} folder under {root}")
        found = 0
        for f in sorted(folder.iterdir()):
            if f.is_dir():
                continue
            parsed = parse_filename(f.name)
            if parsed is None:
                log.warning("skipping unparseable file %s", f)
                continue
            pid, cam = parsed
            rel = f"{folder.name}/{f.name}"
            samples.append(LabeledSample(rel, pid, cam, split, tags.get(rel, "none")))
            found += 1
        if not found:
            raise ValidationError(f"split {split} under {root} is empty")
    return DatasetIndex(str(root), samples)


def file_hashes(root) -> dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# -- augmentation ---------------------------------------------------------------

def load_image(path, size: tuple[int, int]) -> np.ndarray | None:
    """float32 CHW in [0, 1], resized to (height, width); None if unreadable."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        log.warning("skipping unreadable image %s: %s", path, e)
        return None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def pad_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    if pad <= 0:
        return img.copy()
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    y, x = rng.integers(0, 2 * pad + 1, size=2)
    return padded[:, y:y + h, x:x + w].copy()


def normalize(img: np.ndarray) -> np.ndarray:
    return (img - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def random_erase(img: np.ndarray, rng: np.random.Generator, p: float = 0.5,
                 area=(0.02, 0.4), aspect=(0.3, 3.33)) -> np.ndarray:
    """Overwrite one random rectangle with zeros (the dataset mean after normalisation)."""
    out = img.copy()
    if rng.random() >= p:
        return out
    _, h, w = img.shape
    for _ in range(100):
        target = rng.uniform(*area) * h * w
        ratio = np.exp(rng.uniform(np.log(aspect[0]), np.log(aspect[1])))
        eh = int(round(np.sqrt(target * ratio)))
        ew = int(round(np.sqrt(target / ratio)))
        if 0 < eh < h and 0 < ew < w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            out[:, y:y + eh, x:x + ew] = 0.0
            return out
    return out


def augment(img: np.ndarray, training: bool, rng: np.random.Generator | None = None,
            flip: bool = True, pad: int = 10, erase: bool = True) -> np.ndarray:
    """Training: flip, pad-and-crop, normalise, random erasing. Eval: normalise only.

    ``img`` is already at the target size (see ``load_image``).
    """
    if not training:
        return normalize(img)
    if rng is None:
        raise ValueError("training augmentation needs an rng")
    out = img
    if flip and rng.random() < 0.5:
        out = hflip(out)
    out = pad_crop(out, pad, rng)
    out = normalize(out)
    if erase:
        out = random_erase(out, rng, p=0.5)
    return out


# -- sampling ---------------------------------------------------------------------

class PKSampler:
    """Batches of ``p`` identities x ``k`` images, drawn from one seeded stream."""

    def __init__(self, labels, p: int = 4, k: int = 4, seed: int = 0):
        self.labels = np.asarray(labels)
        self.p, self.k = p, k
        self.by_id = {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}
        self.ids = np.array(sorted(self.by_id))
        if len(self.ids) < p:
            raise ValidationError(f"need at least {p} identities, have {len(self.ids)}")
        self.rng = np.random.default_rng(seed)

    def next_batch(self) -> np.ndarray:
        chosen = self.rng.choice(self.ids, size=self.p, replace=False)
        out = []
        for c in chosen:
            pool = self.by_id[int(c)]
            out.append(self.rng.choice(pool, size=self.k, replace=len(pool) < self.k))
        return np.concatenate(out)
