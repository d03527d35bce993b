"""The assembled network and the per-step training objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig, extract_feature_map, global_pool
from .config import RunConfig
from .heads import FeatureHeads, PartFeatures
from .losses import (ClassifierHead, LossWeights, aggregate_id_tri, cross_entropy_label_smooth,
                     separation_loss, total_loss, triplet_margin)
from .relation import RelationAdaptive, concat_features, correct


def backbone_config(cfg: RunConfig) -> BackboneConfig:
    return BackboneConfig(tuple(cfg.stage_widths), tuple(cfg.stage_strides),
                          (cfg.image_height, cfg.image_width), seed=cfg.seed)


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4,
                       cfg.effective_gamma, cfg.margin, cfg.label_smooth)


@dataclass
class Outputs:
    fmap: torch.Tensor
    f_bb: torch.Tensor
    features: PartFeatures | None = None
    concat: torch.Tensor | None = None
    weights: torch.Tensor | None = None
    f_final: torch.Tensor | None = None


class OCNet(nn.Module):
    """Backbone + feature heads + RAM + classifier necks.

    ``use_concat=False`` builds the F_BB-only baseline: no feature heads,
    retrieval on the pooled backbone vector alone.
    """

    def __init__(self, cfg: RunConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.backbone = Backbone(backbone_config(cfg))
        c = self.backbone.config.channels
        self.channels = c
        self.head_bb = ClassifierHead(c, num_classes, seed=cfg.seed + 10)
        self.heads = None
        if cfg.use_concat:
            d = cfg.feat_dim or c // 4
            self.dim = d
            self.heads = FeatureHeads(c, d, cfg.groups, cfg.center_size, cfg.num_parts,
                                      cfm=cfg.use_cfm, seed=cfg.seed + 20)
            slots = cfg.num_parts + 2
            self.ram = (RelationAdaptive(slots * d, cfg.ram_hidden or d, seed=cfg.seed + 30)
                        if cfg.use_ram else None)
            self.head_final = ClassifierHead(slots * d, num_classes, seed=cfg.seed + 11)
            self.head_g = ClassifierHead(d, num_classes, seed=cfg.seed + 12)
            self.head_c = ClassifierHead(d, num_classes, seed=cfg.seed + 13)

    def forward(self, images: torch.Tensor) -> Outputs:
        fmap = extract_feature_map(images, self.backbone)
        out = Outputs(fmap=fmap, f_bb=global_pool(fmap))
        if self.heads is None:
            return out
        feats = self.heads(fmap)
        concat = concat_features(feats.g, *feats.parts, feats.c)
        if self.ram is not None:
            weights = self.ram(concat)
            f_final = correct(concat, weights)
        else:
            # RAM off: plain concatenation
            weights = torch.ones_like(concat)
            f_final = concat
        out.features, out.concat, out.weights, out.f_final = feats, concat, weights, f_final
        return out

    def retrieval_features(self, images: torch.Tensor):
        """(F_final or None, F_BB) used by the fused distance."""
        out = self(images)
        return out.f_final, out.f_bb


def compute_losses(model: OCNet, out: Outputs, labels: torch.Tensor) -> dict[str, torch.Tensor]:
    cfg = model.cfg
    w = loss_weights(cfg)

    def terms(emb, head):
        bn, logits = head(emb)
        ce = cross_entropy_label_smooth(logits, labels, w.smoothing)
        tri = triplet_margin(bn if cfg.triplet_on_bn else emb, labels, w.margin)
        return ce, tri

    if model.heads is None:
        ce, tri = terms(out.f_bb, model.head_bb)
        zero = ce.new_zeros(())
        return {"L_ID": ce, "L_Tri": tri, "L_SL": zero, "L_total": ce + tri}

    pairs = [terms(out.f_final, model.head_final), terms(out.f_bb, model.head_bb),
             terms(out.features.g, model.head_g), terms(out.features.c, model.head_c)]
    l_id, l_tri = aggregate_id_tri([p[0] for p in pairs], [p[1] for p in pairs], w)
    l_sl = separation_loss(out.features.g, *out.features.parts)
    return {"L_ID": l_id, "L_Tri": l_tri, "L_SL": l_sl,
            "L_total": total_loss(l_id, l_tri, l_sl, w.gamma)}
