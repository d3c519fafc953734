"""Pipeline assembly: parameter initialization and window-level forward.

One forward covers a (2n+1)-frame window: encode each available frame
with token drop, bind spatially per frame from the shared slot
initialization, relate slots temporally, merge, and decode the center
frame over the full grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binding, diffcore as dc, encoder, objecthead
from .config import RunConfig
from .diffcore import ParamStore, Tensor


def _glorot(rng: np.random.Generator, shape) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: RunConfig, seed: int | None = None) -> ParamStore:
    """Build and initialize every learnable tensor of the pipeline."""
    m, d = cfg.model, cfg.data
    rng = np.random.default_rng(
        np.random.SeedSequence([seed if seed is not None else d.seed, 0x9A7A]))
    store = ParamStore()

    def reg(name, arr):
        store.register(name, arr)

    for name, shape in encoder.projection_param_shapes(d.d_features, m.d_slot).items():
        full = "enc.proj." + name
        if name == "ln_g":
            reg(full, np.ones(shape))
        elif len(shape) == 1:
            reg(full, np.zeros(shape))
        else:
            reg(full, _glorot(rng, shape))

    for name, shape in binding.binding_param_shapes(m.d_slot, m.k_slots, m.window).items():
        if name == "bind.init.z":
            reg(name, _glorot(rng, shape))
        elif name == "bind.init.scale":
            # small initial scales sharpen first-iteration relative
            # coordinates so slots specialize by position immediately
            reg(name, np.abs(rng.normal(0.1, 0.02, size=shape)) + 1e-3)
        elif name == "bind.init.pos":
            reg(name, rng.normal(0.0, 0.6, size=shape))
        elif name == "bind.g.w":
            # fan-in of 2: He-style scale keeps the position term
            # comparable to the content term in the attention logits
            reg(name, rng.normal(0.0, 1.0, size=shape))
        elif name == "bind.q.w":
            # query gain sharpens first-forward attention so slots grab
            # distinct token clusters immediately instead of averaging
            reg(name, 4.0 * _glorot(rng, shape))
        elif name == "bind.gru.b_u":
            # bias the update gate open: slot contents start as bounded
            # functions of their own aggregated tokens rather than an
            # accumulating state, which keeps slots distinguishable
            reg(name, np.full(shape, 2.0))
        elif name == "tbind.temb":
            reg(name, rng.normal(0.0, 0.02, size=shape))
        elif name.endswith(("ln_g", "ln_q.g")):
            reg(name, np.ones(shape))
        else:
            reg(name, _glorot(rng, shape))

    for name, shape in binding.transformer_param_shapes(m.d_slot, m.transformer_layers).items():
        if name.endswith(("ln1_g", "ln2_g")):
            reg(name, np.ones(shape))
        else:
            reg(name, _glorot(rng, shape))

    dec_shapes = objecthead.decoder_param_shapes(
        m.d_slot, d.n_tokens, d.d_features, m.decoder_hidden, m.decoder_layers)
    for name, shape in dec_shapes.items():
        if name == "dec.pos":
            reg(name, rng.normal(0.0, 0.02, size=shape))
        elif name == "merge.h.w":
            # fan-in of 2: keep the per-slot position blob visible next to
            # the broadcast slot contents so masks can localize early
            reg(name, rng.normal(0.0, 2.0, size=shape))
        else:
            reg(name, _glorot(rng, shape))
    return store


@dataclass
class WindowOutput:
    decoded: objecthead.DecodedFrame
    merged: objecthead.MergedSlots
    attention: binding.AttentionRecord
    center_slots: Tensor


class Pipeline:
    """Stateless forward passes over a fixed parameter store."""

    def __init__(self, cfg: RunConfig, store: ParamStore | None = None,
                 seed: int | None = None):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, seed)
        d = cfg.data
        self.grid = encoder.build_position_grid(d.grid_rows, d.grid_cols)

    def forward_window(self, features: np.ndarray, availability: np.ndarray,
                       kept_indices: list, apply_merge: bool,
                       init_jitter: np.ndarray | None = None) -> WindowOutput:
        """features: (window, N, D) with arbitrary content on unavailable
        frames (they are masked out of temporal attention).

        ``init_jitter`` (K x D_slot) perturbs the shared slot
        initialization for this whole window; training draws one per clip
        so slot identities cannot act as a fixed code across clips.
        """
        m = self.cfg.model
        t_frames = features.shape[0]
        center = t_frames // 2
        if not availability[center]:
            raise ValueError("center frame must be available")
        init_z = None
        if init_jitter is not None:
            init_z = dc.add(self.store["bind.init.z"], Tensor(init_jitter))
        slots = []
        center_record = None
        for t in range(t_frames):
            if availability[t]:
                enc = encoder.encode_frame(
                    features[t], self.grid, kept_indices[t], self.store)
                z, _, record = binding.spatial_bind(
                    enc.tokens, enc.kept_grid, self.store, m.delta,
                    n_iters=m.isa_iters, invariant=m.use_invariant_attention,
                    kept_indices=enc.kept_indices, init_z=init_z)
                if t == center:
                    center_record = record
            else:
                z = Tensor(np.zeros((m.k_slots, m.d_slot)))
            slots.append(z)
        if m.use_temporal_binding:
            c, _ = binding.temporal_bind(
                slots, availability, self.store,
                n_layers=m.transformer_layers, heads=m.transformer_heads,
                center=center)
        else:
            c = slots[center]
        partition = None
        if not (apply_merge and m.use_merging):
            partition = objecthead.identity_partition(m.k_slots)
        merged = objecthead.merge_slots(c, center_record, m.tau_merge,
                                        partition=partition)
        decoded = objecthead.decode(merged, self.store, self.grid, m.delta,
                                    self.cfg.data.d_features,
                                    n_layers=m.decoder_layers)
        return WindowOutput(decoded=decoded, merged=merged,
                            attention=center_record, center_slots=c)

    def window_loss(self, out: WindowOutput, center_features: np.ndarray) -> Tensor:
        return objecthead.reconstruction_loss(out.decoded.y, center_features)


def full_keep_plan(window: int, n_tokens: int) -> list:
    keep = np.arange(n_tokens, dtype=np.int64)
    return [keep] * window


def infer_video(pipe: Pipeline, features: np.ndarray):
    """Sliding center-frame inference over the whole video.

    Every frame becomes the center of its own window; frames outside the
    video are masked via availability. Token drop is off and merging is
    always applied. Returns (tracked segmentation, per-frame slot counts).
    """
    from . import evalkit

    cfg = pipe.cfg
    n = cfg.model.n_window
    window = cfg.model.window
    f_total, n_tok, _ = features.shape
    if n_tok != cfg.data.n_tokens:
        raise ValueError(f"feature grid {n_tok} does not match config tokens {cfg.data.n_tokens}")
    kept = full_keep_plan(window, n_tok)
    label_frames = []
    slot_vectors = []
    for t in range(f_total):
        idx = np.arange(t - n, t + n + 1)
        availability = (idx >= 0) & (idx < f_total)
        window_feats = np.zeros((window,) + features.shape[1:], dtype=features.dtype)
        window_feats[availability] = features[idx[availability]]
        out = pipe.forward_window(window_feats, availability, kept, apply_merge=True)
        labels = evalkit.rasterize(out.decoded.m.data, cfg.data.grid_rows,
                                   cfg.data.grid_cols, cfg.data.canvas_h,
                                   cfg.data.canvas_w)
        label_frames.append(labels)
        slot_vectors.append(out.merged.cprime.data.copy())
    tracked = evalkit.link_tracks(slot_vectors, label_frames)
    k_t_per_frame = [v.shape[0] for v in slot_vectors]
    return tracked, k_t_per_frame
