"""Dual context capture over homogeneous areas.

Pipeline: cluster the feature map into areas, run one shared transformer
encoder over each area's pixel tokens (regional context), average each area
into a descriptor, relate descriptors with a second encoder (global
context), and broadcast the result back to every pixel through a
cross-attention decoder. The module output concatenates the raw feature map
with the final context stream.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .cluster import AreaAssignment, run_clustering
from .errors import ConfigError
from .nn import (
    AttentionConfig,
    PositionalConv1d,
    PositionalConv2d,
    TransformerDecoderLayer,
    TransformerEncoderLayer,
)


class DualContextModule:
    """Area-structured context extraction over a (C, H, W) feature map.

    Stream flags select what the output concatenates: the raw input map, the
    per-area encoded map, and the globally aggregated map. When the global
    branch runs, the regional map feeds it and only the global result is
    concatenated, so the default configuration emits 2C channels.
    """

    def __init__(self, channels, num_areas, iterations=5, heads=2, mlp_ratio=2,
                 use_input=True, use_regional=True, use_global=True,
                 activation="relu", rng=None, dtype=np.float32, prefix="context"):
        if not (use_input or use_regional or use_global):
            raise ConfigError("at least one context stream must be enabled")
        if rng is None:
            rng = np.random.default_rng(0)
        cfg = AttentionConfig(channels, heads, mlp_ratio, activation)
        self.attn_cfg = cfg
        self.channels = channels
        self.num_areas = num_areas
        self.iterations = iterations
        self.use_input = use_input
        self.use_regional = use_regional
        self.use_global = use_global
        self.pos_map = None
        self.region_encoder = None
        self.pos_seq = None
        self.summary_encoder = None
        self.context_decoder = None
        if use_regional:
            self.pos_map = PositionalConv2d(channels, rng, dtype, prefix=f"{prefix}.pos_map")
            self.region_encoder = TransformerEncoderLayer(cfg, rng, dtype, prefix=f"{prefix}.region")
        if use_global:
            self.pos_seq = PositionalConv1d(channels, rng, dtype, prefix=f"{prefix}.pos_seq")
            self.summary_encoder = TransformerEncoderLayer(cfg, rng, dtype, prefix=f"{prefix}.summary")
            self.context_decoder = TransformerDecoderLayer(cfg, rng, dtype, prefix=f"{prefix}.decode")

    @property
    def out_channels(self):
        streams = int(self.use_input)
        if self.use_global:
            streams += 1
        elif self.use_regional:
            streams += 1
        return streams * self.channels

    def parameters(self):
        out = []
        for block in (self.pos_map, self.region_encoder, self.pos_seq,
                      self.summary_encoder, self.context_decoder):
            if block is not None:
                out.extend(block.parameters())
        return out

    def zero_output_projections(self):
        for block in (self.region_encoder, self.summary_encoder, self.context_decoder):
            if block is not None:
                block.zero_output_projections()

    # -- stages ----------------------------------------------------------------

    def encode_regions(self, tokens, pos_tokens, areas: AreaAssignment):
        """Run the shared encoder over each area's tokens and restitch the map."""
        n = tokens.shape[0]
        order = np.argsort(areas.labels, kind="stable")
        pieces = []
        start = 0
        for count in areas.counts:
            if count == 0:
                continue
            idx = order[start:start + count]
            start += count
            piece = self.region_encoder(
                ad.gather_rows(tokens, idx), pos=ad.gather_rows(pos_tokens, idx))
            pieces.append(piece)
        stacked = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
        inverse = np.empty(n, dtype=np.intp)
        inverse[order] = np.arange(n)
        return ad.gather_rows(stacked, inverse)

    def build_descriptors(self, tokens, areas: AreaAssignment):
        """Per-area token means; empty areas yield zero rows plus a validity mask."""
        summaries = ad.scatter_mean(tokens, areas.labels, areas.num_areas)
        return summaries, areas.counts > 0

    def forward(self, features):
        """(C, H, W) tensor -> (out_channels, H, W) tensor plus the area structure."""
        c, h, w = features.shape
        n = h * w
        # areas are index structure; gradients reach the features through the
        # token paths, so clustering runs off-tape
        areas = run_clustering(features.detach(), self.num_areas, self.iterations)
        tokens = ad.transpose(ad.reshape(features, (c, n)))

        regional_tokens = tokens
        if self.use_regional:
            pos_tokens = ad.transpose(ad.reshape(self.pos_map(features), (c, n)))
            regional_tokens = self.encode_regions(tokens, pos_tokens, areas)

        streams = []
        if self.use_input:
            streams.append(features)
        if self.use_global:
            summaries, valid = self.build_descriptors(regional_tokens, areas)
            encoded = self.summary_encoder(
                summaries, pos=self.pos_seq(summaries), key_mask=valid)
            decoded = self.context_decoder(regional_tokens, encoded, key_mask=valid)
            streams.append(ad.reshape(ad.transpose(decoded), (c, h, w)))
        elif self.use_regional:
            streams.append(ad.reshape(ad.transpose(regional_tokens), (c, h, w)))

        out = streams[0] if len(streams) == 1 else ad.concat(streams, axis=0)
        return out, areas

    __call__ = forward
