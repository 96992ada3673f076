"""Backbone + CSRA head bundled with their parameters and running statistics."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .backbone import BackboneConfig, forward_features, init_backbone, init_running_stats
from .csra import CsraHeadConfig, csra_logits, init_head


class MultiBreathModel:
    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: CsraHeadConfig, seed: int = 0,
                 dtype=np.float32):
        if head_cfg.feature_dim != backbone_cfg.out_channels:
            raise ValueError(f"head feature_dim {head_cfg.feature_dim} != backbone width "
                             f"{backbone_cfg.out_channels}")
        self.backbone_cfg = backbone_cfg
        self.head_cfg = head_cfg
        self.dtype = np.dtype(dtype)
        seeds = np.random.SeedSequence(seed).spawn(2)
        params = dict(init_backbone(backbone_cfg, int(seeds[0].generate_state(1)[0]), dtype).items())
        params.update(init_head(head_cfg, int(seeds[1].generate_state(1)[0]), dtype).items())
        self.params = ParameterSet(params)
        self.stats = init_running_stats(backbone_cfg, dtype)

    def logits(self, spectrograms, mode: str = "eval") -> Tensor:
        """Spectrograms ``[N, H, W]`` or ``[N, 1, H, W]`` -> logits ``[N, m]``."""
        x = np.asarray(spectrograms, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        feats = forward_features(self.params, Tensor(x), self.backbone_cfg, self.stats, mode)
        return csra_logits(feats, self.params["head.classifier"], self.head_cfg)

    def predict_logits(self, spectrograms, batch_size: int = 64) -> np.ndarray:
        out = []
        with ad.no_grad():
            for lo in range(0, len(spectrograms), batch_size):
                out.append(self.logits(spectrograms[lo:lo + batch_size], mode="eval").data)
        m = self.head_cfg.num_classes
        return np.concatenate(out, axis=0) if out else np.zeros((0, m), dtype=self.dtype)
