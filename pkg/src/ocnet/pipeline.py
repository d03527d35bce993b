"""Training, feature extraction, evaluation and ablation on a dataset directory."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import DatasetIndex, PKSampler, augment, load_image, load_reid_directory
from .errors import ValidationError
from .model import OCNet, compute_losses
from .retrieval import FeatureSet, cmc_map, distance_matrix

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("L_ID", "L_Tri", "L_SL", "L_total")
STRATA = {"all": ("none", "object", "PI"), "holistic": ("none",), "occluded": ("object", "PI"),
          "object": ("object",), "PI": ("PI",)}


class TrainingError(RuntimeError):
    pass


def set_determinism(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(max(1, cfg.num_threads))
    torch.use_deterministic_algorithms(True)


@dataclass
class SplitData:
    images: np.ndarray
    ids: np.ndarray
    cams: np.ndarray
    tags: list[str]
    paths: list[str]


def load_split(index: DatasetIndex, split: str, size: tuple[int, int]) -> SplitData:
    imgs, ids, cams, tags, paths = [], [], [], [], []
    for s in index.split(split):
        if s.junk or s.distractor:
            if split == "train":
                continue
        img = load_image(Path(index.root) / s.path, size)
        if img is None:
            continue
        imgs.append(img)
        ids.append(s.identity)
        cams.append(s.camera)
        tags.append(s.occlusion)
        paths.append(str(Path(index.root) / s.path))
    if not imgs:
        raise ValidationError(f"split {split} has no readable images")
    return SplitData(np.stack(imgs), np.array(ids), np.array(cams), tags, paths)


def _lr_lambda(cfg: RunConfig):
    def fn(step):
        if step < cfg.warmup_steps:
            scale = 0.1 + 0.9 * step / cfg.warmup_steps
        else:
            scale = 1.0
        for s in cfg.decay_steps:
            if step >= s:
                scale *= cfg.decay_factor
        return scale
    return fn


@dataclass
class TrainResult:
    model: OCNet
    history: list[dict[str, float]]
    label_map: dict[int, int]


def train(cfg: RunConfig, index: DatasetIndex | None = None, out_dir=None,
          train_data: SplitData | None = None) -> TrainResult:
    """PK-sampled end-to-end training. Writes ``loss_log.tsv`` and
    ``checkpoint.ocn`` into ``out_dir`` when given."""
    cfg.validate()
    set_determinism(cfg)
    size = (cfg.image_height, cfg.image_width)
    if train_data is None:
        index = index or load_reid_directory(cfg.data_root)
        train_data = load_split(index, "train", size)
    label_map = {int(pid): i for i, pid in enumerate(sorted(set(train_data.ids.tolist())))}
    labels = np.array([label_map[int(p)] for p in train_data.ids])

    model = OCNet(cfg, len(label_map))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(cfg))
    sampler = PKSampler(labels, cfg.batch_p, cfg.batch_k, seed=cfg.seed)
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))

    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        config_mod.save(cfg, out / "resolved_config.txt")
        log_fh = open(out / "loss_log.tsv", "w", encoding="utf-8")
        log_fh.write("step\t" + "\t".join(LOSS_COLUMNS) + "\n")

    history = []
    model.train()
    try:
        for step in range(1, cfg.steps + 1):
            idx = sampler.next_batch()
            batch = np.stack([augment(train_data.images[i], True, aug_rng, cfg.aug_flip,
                                      cfg.aug_pad, cfg.aug_erase) for i in idx])
            x = torch.from_numpy(batch)
            y = torch.from_numpy(labels[idx])
            losses = compute_losses(model, model(x), y)
            total = losses["L_total"]
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            row = {k: float(losses[k].detach()) for k in LOSS_COLUMNS}
            history.append(row)
            if log_fh:
                log_fh.write(f"{step}\t" + "\t".join(repr(row[k]) for k in LOSS_COLUMNS) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    if out:
        save_checkpoint(out / "checkpoint.ocn", model)
    return TrainResult(model, history, label_map)


@torch.no_grad()
def extract_features(model: OCNet, data: SplitData, batch_size: int = 64,
                     normalize: bool = False) -> FeatureSet:
    model.eval()
    finals, bbs = [], []
    for s in range(0, len(data.images), batch_size):
        x = torch.from_numpy(np.stack([augment(im, False) for im in data.images[s:s + batch_size]]))
        f_final, f_bb = model.retrieval_features(x)
        if f_final is None:
            f_final = f_bb.new_zeros((f_bb.shape[0], 0))
        finals.append(f_final.double().numpy())
        bbs.append(f_bb.double().numpy())
    f_final, f_bb = np.concatenate(finals), np.concatenate(bbs)
    if normalize:
        f_final = f_final / np.maximum(np.linalg.norm(f_final, axis=1, keepdims=True), 1e-12)
        f_bb = f_bb / np.maximum(np.linalg.norm(f_bb, axis=1, keepdims=True), 1e-12)
    return FeatureSet(f_final, f_bb, data.ids, data.cams, list(data.paths))


@torch.no_grad()
def feature_cosines(model: OCNet, data: SplitData, batch_size: int = 64) -> tuple[float, float]:
    """Mean cos(f_g, f_t) and cos(f_g, f_b) over a split (eval-mode forward)."""
    if model.heads is None:
        raise ValidationError("baseline model has no part features")
    model.eval()
    ct, cb = [], []
    for s in range(0, len(data.images), batch_size):
        x = torch.from_numpy(np.stack([augment(im, False) for im in data.images[s:s + batch_size]]))
        f = model(x).features
        ct.append(torch.nn.functional.cosine_similarity(f.g, f.t, dim=1))
        cb.append(torch.nn.functional.cosine_similarity(f.g, f.b, dim=1))
    return float(torch.cat(ct).mean()), float(torch.cat(cb).mean())


def retrieval_alpha(model: OCNet) -> float:
    # the baseline carries no F_final, so its distance is the F_BB term alone
    return model.cfg.alpha if model.heads is not None else 1.0


def evaluate(model: OCNet, query: SplitData, gallery: SplitData, exclude_junk: bool = True,
             alpha: float | None = None) -> dict:
    cfg = model.cfg
    qf = extract_features(model, query, normalize=cfg.normalize_features)
    gf = extract_features(model, gallery, normalize=cfg.normalize_features)
    a = retrieval_alpha(model) if alpha is None else alpha
    dist = distance_matrix(qf, gf, a)
    report = {"alpha": a}
    tags = np.array(query.tags)
    for name, members in STRATA.items():
        rows = np.flatnonzero(np.isin(tags, members))
        if not len(rows):
            continue
        res = cmc_map(dist.values[rows], qf.ids[rows], qf.cams[rows], gf.ids, gf.cams,
                      exclude_junk=exclude_junk)
        for k, v in res.summary().items():
            report[f"{name}.{k}"] = v
    return {"report": report, "dist": dist, "query": qf, "gallery": gf}


def ablation_grid(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    off = dict(use_cfm=False, use_sl=False, use_ram=False)
    return [
        ("baseline", cfg.replace(use_concat=False, **off)),
        ("+concat", cfg.replace(use_concat=True, **off)),
        ("+CFM", cfg.replace(use_concat=True, **{**off, "use_cfm": True})),
        ("+SL", cfg.replace(use_concat=True, **{**off, "use_sl": True})),
        ("+RAM", cfg.replace(use_concat=True, **{**off, "use_ram": True})),
        ("full", cfg.replace(use_concat=True, use_cfm=True, use_sl=True, use_ram=True)),
    ]


ABLATION_COLUMNS = ("leg", "concat", "cfm", "sl", "ram", "status",
                    "all.rank1", "all.mAP", "holistic.rank1", "holistic.mAP",
                    "occluded.rank1", "occluded.mAP")


def run_ablation(cfg: RunConfig, out_dir, index: DatasetIndex | None = None) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = index or load_reid_directory(cfg.data_root)
    size = (cfg.image_height, cfg.image_width)
    tr, q, g = (load_split(index, s, size) for s in ("train", "query", "gallery"))
    rows = []
    for name, leg_cfg in ablation_grid(cfg):
        row = {"leg": name, "concat": leg_cfg.use_concat, "cfm": leg_cfg.use_cfm,
               "sl": leg_cfg.use_sl, "ram": leg_cfg.use_ram}
        try:
            leg_dir = out / name.replace("+", "plus_")
            result = train(leg_cfg, out_dir=leg_dir, train_data=tr)
            ev = evaluate(result.model, q, g)
            row.update({k: ev["report"].get(k, float("nan")) for k in ABLATION_COLUMNS[6:]})
            row["status"] = "ok"
        except Exception as e:  # one failing leg must not stop the grid
            log.exception("ablation leg %s failed", name)
            row["status"] = f"failed: {type(e).__name__}: {e}"
        rows.append(row)
    with open(out / "ablation.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(ABLATION_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join(_cell(r.get(c, "")) for c in ABLATION_COLUMNS) + "\n")
    return rows


def _cell(v) -> str:
    if isinstance(v, bool):
        return "x" if v else ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)
