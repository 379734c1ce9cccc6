"""The full RGB-thermal segmentation network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .decoder import MaskDecoder, build_aux_head
from .encoder import PATCH_SIZE, EncoderConfig, HierarchicalEncoder
from .losses import LossWeights, total_loss
from .pyramid import ModalityFPN, ModalityFusion


@dataclass
class ModelOutput:
    main: T.Tensor  # N×C×H0×W0
    aux: T.Tensor  # N×C×H0×W0
    fused: object  # FusedPyramid
    stages: dict
    pyramids: list


class SARTM(nn.Module):
    def __init__(
        self,
        encoder_config: EncoderConfig,
        num_classes,
        class_embeddings,
        rng,
        fusion_layers=(0, 1),
        decoder_depth=2,
        decoder_heads=2,
        aux_head="fpn",
    ):
        d = encoder_config.embed_dim
        self._num_classes = num_classes
        self._modalities = encoder_config.modalities
        self.encoder = HierarchicalEncoder(encoder_config, rng)
        self.fpn = {m: ModalityFPN(rng, encoder_config.stage_dims, d, fusion_layers) for m in self._modalities}
        emb = np.asarray(class_embeddings, dtype=T.get_default_dtype())
        self.fusion = ModalityFusion(rng, d, len(self._modalities), emb.shape[1])
        self.decoder = MaskDecoder(rng, d, num_classes, depth=decoder_depth, heads=decoder_heads)
        self.aux_head = build_aux_head(aux_head, rng, d, num_classes)
        self.cr_classifier = nn.uniform(rng, (d, num_classes), 1.0 / np.sqrt(d))
        self.class_embeddings = nn.param(emb, trainable=False)

    @classmethod
    def from_config(cls, cfg, class_embeddings, rng=None):
        rng = rng if rng is not None else init_rng(cfg.seed)
        enc = EncoderConfig(
            in_channels=3,
            embed_dim=cfg.embed_dim,
            num_stages=cfg.num_stages,
            window_size=cfg.window_size,
            num_heads=cfg.num_heads,
            lora_rank=cfg.lora_rank,
            mlp_ratio=cfg.mlp_ratio,
            image_size=(cfg.image_size, cfg.image_size),
        )
        return cls(
            enc,
            cfg.num_classes,
            class_embeddings,
            rng,
            fusion_layers=cfg.fusion_layer_set,
            decoder_depth=cfg.decoder_depth,
            decoder_heads=cfg.decoder_heads,
            aux_head=cfg.aux_head,
        )

    @property
    def num_classes(self):
        return self._num_classes

    @property
    def modalities(self):
        return self._modalities

    def forward(self, inputs, use_language=True):
        """``inputs`` maps modality name to an ``N×C×H×W`` array or tensor."""
        stages = {m: self.encoder.encode(inputs[m], m) for m in self._modalities}
        pyramids = [self.fpn[m](stages[m]) for m in self._modalities]
        fused = self.fusion(pyramids, self.class_embeddings if use_language else None)
        return ModelOutput(
            main=self.decoder(fused),
            aux=self.aux_head(fused),
            fused=fused,
            stages=stages,
            pyramids=pyramids,
        )

    def loss(self, out, labels, weights=None, thresh=0.7, tau=0.07):
        """Composite objective with both heads upsampled to label resolution."""
        factor = np.asarray(labels).shape[-1] // out.main.shape[-1]
        return total_loss(
            T.bilinear_upsample(out.main, factor),
            T.bilinear_upsample(out.aux, factor),
            labels,
            out.fused.sfm,
            self.class_embeddings,
            self.cr_classifier,
            weights or LossWeights(),
            thresh=thresh,
            tau=tau,
        )

    def predict(self, inputs, head="main"):
        """Label map at input resolution from the chosen head (``main``, ``aux`` or ``mean``)."""
        with T.no_grad():
            out = self.forward(inputs)
            if head == "main":
                logits = out.main.data
            elif head == "aux":
                logits = out.aux.data
            elif head == "mean":
                logits = 0.5 * (out.main.data + out.aux.data)
            else:
                raise ValueError(f"unknown head {head!r}")
            full = T.bilinear_upsample(T.Tensor(logits), PATCH_SIZE).data
        return full.argmax(axis=1).astype(np.uint8)


def init_rng(seed):
    return stream_rng(seed, "init")


_STREAMS = {"init": 1, "data": 2, "augment": 3}


def stream_rng(seed, stream):
    """Independent named RNG streams derived from one integer seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _STREAMS[stream]])))
