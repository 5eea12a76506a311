"""Site adaptation of the federated model by selective fine-tuning.

Mode names:
    FTA  no freezing, encoder and decoder are tuned
    FTB  encoder frozen, only the decoder is tuned
    FTC  decoder frozen, only the encoder is tuned
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from .federation import FedConfig, client_update, make_client
from .losses import LossConfig
from .segnet import ModelParams


class AdaptMode(str, Enum):
    FTA = "FTA"
    FTB = "FTB"
    FTC = "FTC"

    @property
    def frozen_part(self):
        return {"FTA": None, "FTB": "encoder", "FTC": "decoder"}[self.value]


def freeze_mask(params: ModelParams, mode) -> np.ndarray | None:
    part = AdaptMode(mode).frozen_part
    return None if part is None else params.mask(part)


def adapt(fed_weights: ModelParams, site_train, mode, epochs: int, lr: float,
          loss_cfg: LossConfig = LossConfig(), batch_size: int = 2, seed: int = 0) -> ModelParams:
    """Fine-tune ``fed_weights`` on one site's training split.

    Only the site's own data is read. Frozen coordinates are returned
    bit-identical to ``fed_weights``.
    """
    if len(site_train) == 0:
        raise ValueError("site dataset is empty")
    mode = AdaptMode(mode)
    cfg = FedConfig(lr=lr, batch_size=batch_size, seed=seed, global_rounds=0, client_iterations=0)
    state = make_client(site_train.site_id or "site", site_train, loss_cfg, cfg, stream=f"adapt:{site_train.site_id}")
    if fed_weights.spec.num_classes != site_train.scheme.num_classes:
        raise ValueError("layout mismatch: network classes differ from the site's label space")
    iters = epochs * state.sampler.batches_per_epoch
    if iters == 0:
        return fed_weights.copy()
    return client_update(state, fed_weights, cfg, iterations=iters, freeze_mask=freeze_mask(fed_weights, mode))
