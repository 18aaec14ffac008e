"""Volumetric segmentation network with prompt fusion and expert routing.

Layout, bottom to top:

* a small convolutional encoder (stem + ``depth`` stride-2 stages) that turns
  a ``(B, 1, P, P, P)`` patch into bottleneck tokens ``(B*m, token_dim)``;
* cross-attention fusion that injects text / anatomical prompt embeddings
  into those tokens as an additive residual;
* a mask-proposal head predicting which output channel should carry the mask;
* low-rank expert mixtures inserted after the bottleneck and after the
  deepest decoder stage (one shared expert bank, token-wise routing);
* a nearest-upsample decoder with skip concatenation and 1x1x1 convolutions.

All parameters are initialised from named counter-based streams so that any
single component can be toggled without shifting another component's draws.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .autodiff import Tensor, ops
from .autodiff.conv import conv3d, upsample_nearest3d
from .config import RunConfig
from .data.generator import TumorRecipe, default_recipes
from .errors import ContractError, ShapeError
from .moe import ExpertBank, RouterState, moe_forward
from .prompts import AnatomyEncoder, PromptEncoder, TextEncoder, default_registry


def _he_conv(st, c_in: int, c_out: int, k: int) -> np.ndarray:
    fan_in = c_in * k ** 3
    scale = math.sqrt(2.0 / fan_in)
    return (st.normal(0.0, scale, size=(c_out, c_in, k, k, k))).astype(np.float32)


def _linear_init(st, d_in: int, d_out: int) -> np.ndarray:
    scale = math.sqrt(2.0 / d_in)
    return (st.normal(0.0, scale, size=(d_in, d_out))).astype(np.float32)


class _ConvLayer:
    """One conv + bias with named parameters."""

    __slots__ = ("name", "w", "b", "stride", "padding")

    def __init__(self, seed: int, name: str, c_in: int, c_out: int, k: int,
                 stride: int = 1, padding: int = 0):
        st = rng.stream("init", seed, f"{name}.w")
        self.name = name
        self.w = Tensor(_he_conv(st, c_in, c_out, k), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.b", self.b


def encoder_channels(base: int, depth: int, token_dim: int) -> List[int]:
    """Output channels of the stem and each stride-2 stage (excluding the
    bottleneck, which always projects to ``token_dim``)."""
    chans = [base * 2 ** i for i in range(depth)]
    chans[-1] = max(chans[-1], token_dim // 2)
    return chans


class Backbone:
    """Encoder/decoder pair operating on 5-D ``(B, C, D, H, W)`` tensors."""

    def __init__(self, seed: int, cfg: RunConfig):
        if cfg.patch_extent % (2 ** cfg.depth) != 0:
            raise ContractError(
                f"patch extent {cfg.patch_extent} not divisible by 2^{cfg.depth}"
            )
        self.cfg = cfg
        d = cfg.token_dim
        chans = encoder_channels(cfg.base_channels, cfg.depth, d)
        self.enc_channels = chans
        self.token_extent = cfg.patch_extent // (2 ** cfg.depth)
        self.n_tokens = self.token_extent ** 3

        self.stem = _ConvLayer(seed, "backbone.stem", 1, chans[0], 3, padding=1)
        self.enc = []
        c_prev = chans[0]
        # stride-2 stages: chans[1:], then the bottleneck projection to d
        stage_out = chans[1:] + [d]
        for i, c_out in enumerate(stage_out, start=1):
            self.enc.append(_ConvLayer(seed, f"backbone.enc{i}", c_prev, c_out, 3,
                                       stride=2, padding=1))
            c_prev = c_out
        # decoder: 1x1x1 convs after upsample + skip concat, shallowest last
        skip_chans = chans[::-1]          # deepest skip first
        dec_out = [d] + [max(chans[j] * 2, 8) for j in range(len(chans) - 2, -1, -1)]
        self.dec = []
        c_prev = d
        for j, (skip_c, c_out) in enumerate(zip(skip_chans, dec_out)):
            idx = len(skip_chans) - 1 - j        # dec2, dec1, dec0 for depth 3
            self.dec.append(_ConvLayer(seed, f"backbone.dec{idx}", c_prev + skip_c, c_out, 1))
            c_prev = c_out
        self.head = _ConvLayer(seed, "backbone.head", c_prev, cfg.n_classes, 1)

    # --- shape plumbing -------------------------------------------------
    def to_tokens(self, x: Tensor) -> Tensor:
        """(B, d, e, e, e) -> (B*m, d) with m = e**3."""
        b, d = x.data.shape[0], x.data.shape[1]
        flat = x.reshape(b, d, -1)
        return flat.transpose(0, 2, 1).reshape(-1, d)

    def from_tokens(self, tok: Tensor, batch: int, extent: int) -> Tensor:
        d = tok.data.shape[1]
        x = tok.reshape(batch, extent ** 3, d).transpose(0, 2, 1)
        return x.reshape(batch, d, extent, extent, extent)

    # --- forward --------------------------------------------------------
    def encode(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        """Returns (tokens (B*m, d), skips shallowest-first)."""
        if x.data.ndim != 5 or x.data.shape[1] != 1:
            raise ShapeError(f"encode expects (B, 1, D, H, W), got {x.data.shape}")
        h = ops.relu(self.stem(x))
        skips = [h]
        for layer in self.enc[:-1]:
            h = ops.relu(layer(h))
            skips.append(h)
        h = ops.relu(self.enc[-1](h))
        return self.to_tokens(h), skips

    def decode(self, tokens: Tensor, skips: Sequence[Tensor],
               post_stage0: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
        """Tokens + skips -> per-voxel class logits (B, n_classes, P, P, P).

        ``post_stage0`` is applied to the token view of the deepest decoder
        stage output (the expert-mixture insertion point).
        """
        batch = tokens.data.shape[0] // self.n_tokens
        h = self.from_tokens(tokens, batch, self.token_extent)
        extent = self.token_extent
        for j, (layer, skip) in enumerate(zip(self.dec, reversed(skips))):
            up = upsample_nearest3d(h, 2)
            extent *= 2
            h = ops.relu(layer(ops.concat([up, skip], axis=1)))
            if j == 0 and post_stage0 is not None:
                tok = self.to_tokens(h)
                tok = post_stage0(tok)
                h = self.from_tokens(tok, batch, extent)
        return self.head(h)

    def params(self):
        for layer in [self.stem, *self.enc, *self.dec, self.head]:
            yield from layer.params()


class FusionState:
    """Cross-attention from prompt embeddings (queries) to image tokens."""

    def __init__(self, seed: int, token_dim: int, prompt_dim: int, attn_dim: int,
                 n_queries: int):
        if n_queries < 1:
            raise ContractError("fusion needs at least one prompt query")
        self.token_dim = token_dim
        self.attn_dim = attn_dim
        self.n_queries = n_queries
        self.params_map: Dict[str, Tensor] = {}

        def lin(name: str, d_in: int, d_out: int, zero: bool = False):
            if zero:
                w = np.zeros((d_in, d_out), dtype=np.float32)
            else:
                st = rng.stream("init", seed, f"fusion.{name}.w")
                w = _linear_init(st, d_in, d_out)
            self.params_map[f"fusion.{name}.w"] = Tensor(w, requires_grad=True)
            self.params_map[f"fusion.{name}.b"] = Tensor(
                np.zeros(d_out, dtype=np.float32), requires_grad=True)

        lin("q_txt", prompt_dim, attn_dim)
        lin("q_a", prompt_dim, attn_dim)
        lin("k", token_dim, attn_dim)
        lin("v", token_dim, attn_dim)
        # the output projection starts at zero so prompts are a no-op until
        # trained; a random delta here acts as a content-coupled bias on
        # every token and reliably derails early pretraining
        lin("out", n_queries * attn_dim, token_dim, zero=True)

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.params_map[f"fusion.{name}.w"]),
                       self.params_map[f"fusion.{name}.b"])

    def fuse(self, tokens: Tensor, e_txt: Optional[Tensor], e_a: Optional[Tensor],
             return_attn: bool = False):
        """tokens (m, d) for ONE sample; prompt embeddings are (prompt_dim,).

        Returns tokens + broadcast(out-projection(attention contexts)); the
        residual is identical for every token (queries are global prompts).
        """
        queries = []
        if e_txt is not None:
            queries.append(self._linear("q_txt", e_txt.reshape(1, -1)))
        if e_a is not None:
            queries.append(self._linear("q_a", e_a.reshape(1, -1)))
        if not queries:
            raise ContractError("fuse called with no prompt embeddings")
        if len(queries) != self.n_queries:
            raise ShapeError(
                f"fusion built for {self.n_queries} queries, got {len(queries)}")
        q = queries[0] if len(queries) == 1 else ops.concat(queries, axis=0)
        k = self._linear("k", tokens)
        v = self._linear("v", tokens)
        scores = ops.mul(ops.matmul(q, k.transpose()),
                         Tensor(1.0 / math.sqrt(self.attn_dim)))
        attn = ops.softmax(scores, axis=-1)          # (n_q, m)
        ctx = ops.matmul(attn, v).reshape(1, -1)     # (1, n_q * d_a)
        delta = self._linear("out", ctx).reshape(-1)  # (d,)
        fused = ops.add(tokens, delta)               # broadcast over rows
        if return_attn:
            return fused, delta, attn
        return fused, delta

    def params(self):
        yield from self.params_map.items()


class ProposalHead:
    """Two-layer MLP scoring output channels from pooled tokens + text."""

    def __init__(self, seed: int, token_dim: int, prompt_dim: int, n_classes: int,
                 hidden: int = 32):
        self.in_dim = token_dim + prompt_dim
        st1 = rng.stream("init", seed, "proposal.fc1.w")
        self.fc1_w = Tensor(_linear_init(st1, self.in_dim, hidden), requires_grad=True)
        self.fc1_b = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
        # zero final layer: proposals start exactly uniform, so the output
        # gate begins argmax-neutral across tumor channels instead of
        # handing a random class a head start
        self.fc2_w = Tensor(np.zeros((hidden, n_classes), dtype=np.float32),
                            requires_grad=True)
        self.fc2_b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)

    def propose(self, tokens: Tensor, e_txt: Tensor) -> Tensor:
        """Channel logits (n_classes,) for one sample."""
        pooled = ops.mean(tokens, axis=0).reshape(1, -1)
        feat = ops.concat([pooled, e_txt.reshape(1, -1)], axis=1)
        h = ops.relu(ops.add(ops.matmul(feat, self.fc1_w), self.fc1_b))
        return ops.add(ops.matmul(h, self.fc2_w), self.fc2_b).reshape(-1)

    def params(self):
        yield "proposal.fc1.w", self.fc1_w
        yield "proposal.fc1.b", self.fc1_b
        yield "proposal.fc2.w", self.fc2_w
        yield "proposal.fc2.b", self.fc2_b


def gate_channels(logits: Tensor, thetas: List[Tensor]) -> Tensor:
    """Scale per-voxel logits by proposal confidence.

    The gate for sample b is ``g = bg_keep + probs(theta_b) * fg_mask`` so the
    background channel always passes through unscaled while each foreground
    channel is weighted by the proposal probability assigned to it.
    """
    n_classes = logits.data.shape[1]
    fg_mask = np.ones(n_classes, dtype=np.float32)
    fg_mask[0] = 0.0
    bg_keep = np.zeros(n_classes, dtype=np.float32)
    bg_keep[0] = 1.0
    rows = []
    for theta in thetas:
        probs = ops.softmax(theta, axis=-1)
        g = ops.add(ops.mul(probs, Tensor(fg_mask)), Tensor(bg_keep))
        rows.append(g.reshape(1, -1))
    gates = rows[0] if len(rows) == 1 else ops.concat(rows, axis=0)
    return ops.scale_channels(logits, gates)


@dataclasses.dataclass
class ForwardResult:
    logits: Tensor                       # (B, n_classes, P, P, P)
    thetas: Optional[List[Tensor]]       # per-sample proposal logits, or None
    deltas: Optional[List[Tensor]]       # per-sample fusion residuals, or None


class SegModel:
    """Composed network; component toggles select which parts exist at all."""

    def __init__(self, cfg: RunConfig, seed: int,
                 prompt_encoder: Optional[PromptEncoder] = None,
                 recipes: Optional[Sequence[TumorRecipe]] = None):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.backbone = Backbone(seed, cfg)
        self.task_ids = tuple(range(1, cfg.n_classes))

        self.prompts = prompt_encoder
        if self.prompts is None and (cfg.use_tp or cfg.use_ap):
            registry = default_registry()
            text = TextEncoder.create(seed, vocab_size=cfg.vocab_size,
                                      dim=cfg.prompt_dim) if cfg.use_tp else None
            anat = AnatomyEncoder.create(seed, recipes or default_recipes(),
                                         dim=cfg.prompt_dim) if cfg.use_ap else None
            self.prompts = PromptEncoder(registry, text=text, anatomy=anat)

        n_queries = int(cfg.use_tp) + int(cfg.use_ap)
        self.fusion = FusionState(seed, cfg.token_dim, cfg.prompt_dim,
                                  cfg.attn_dim, n_queries) if n_queries else None
        # the proposal head needs a text embedding to condition on
        self.proposal = ProposalHead(seed, cfg.token_dim, cfg.prompt_dim,
                                     cfg.n_classes) if cfg.use_tp else None

        if cfg.use_dmoe:
            self.bank = ExpertBank.create(seed, "dmoe", cfg.token_dim, cfg.moe_rank,
                                          cfg.moe_alpha, k2=cfg.moe_k2, k1=cfg.moe_k1,
                                          tasks=self.task_ids)
            self.router_g = RouterState.create(seed, "dmoe.router.g", cfg.token_dim,
                                               cfg.moe_k2, cfg.moe_k, kind="generalized")
            self.routers_t = {
                t: RouterState.create(seed, f"dmoe.router.t.{t}", cfg.token_dim,
                                      cfg.moe_k1 + cfg.moe_k2, cfg.moe_k, kind="task")
                for t in self.task_ids
            }
        else:
            self.bank = None
            self.router_g = None
            self.routers_t = {}

    # --- parameter enumeration ------------------------------------------
    def param_entries(self) -> Iterator[Tuple[str, str, Tensor]]:
        """Yields (name, group, tensor) for every parameter that exists."""
        for name, t in self.backbone.params():
            yield name, "backbone", t
        if self.prompts is not None:
            if self.prompts.text is not None:
                yield from self.prompts.text.params()
            if self.prompts.anatomy is not None:
                yield from self.prompts.anatomy.params()
        if self.fusion is not None:
            for name, t in self.fusion.params():
                yield name, "fusion", t
        if self.proposal is not None:
            for name, t in self.proposal.params():
                yield name, "proposal", t
        if self.bank is not None:
            for i, e in enumerate(self.bank.generic):
                yield f"dmoe.generic.{i}.A", f"dmoe.generic.{i}", e.a
                yield f"dmoe.generic.{i}.B", f"dmoe.generic.{i}", e.b
            for t in self.task_ids:
                for i, e in enumerate(self.bank.specific[t]):
                    yield f"dmoe.task{t}.{i}.A", f"dmoe.task{t}.{i}", e.a
                    yield f"dmoe.task{t}.{i}.B", f"dmoe.task{t}.{i}", e.b
            yield "dmoe.router.g.W", "dmoe.router.g", self.router_g.w
            for t in self.task_ids:
                yield f"dmoe.router.t.{t}.W", "dmoe.router.t", self.routers_t[t].w

    # --- forward ---------------------------------------------------------
    def _moe_pass(self, tokens: Tensor, class_ids: Sequence[int],
                  tokens_per_sample: int) -> Tensor:
        """Route each sample's token rows through its task-conditioned pool."""
        batch = len(class_ids)
        if tokens.data.shape[0] != batch * tokens_per_sample:
            raise ShapeError("token rows do not match batch * tokens_per_sample")
        outs = []
        for b, cid in enumerate(class_ids):
            rows = ops.slice_rows(tokens, b * tokens_per_sample,
                                  (b + 1) * tokens_per_sample)
            outs.append(moe_forward(rows, int(cid), self.bank,
                                    self.router_g, self.routers_t[int(cid)]))
        return outs[0] if batch == 1 else ops.concat(outs, axis=0)

    def forward(self, volumes: Tensor, class_ids: Sequence[int],
                organ_onehot: Optional[Tensor] = None) -> ForwardResult:
        """volumes (B, 1, P, P, P); class_ids are the per-sample task labels;
        organ_onehot (B, n_organs, P, P, P) is required when the anatomical
        prompt is enabled."""
        cfg = self.cfg
        batch = volumes.data.shape[0]
        if len(class_ids) != batch:
            raise ShapeError("class_ids length must match the batch")
        tokens, skips = self.backbone.encode(volumes)
        m = self.backbone.n_tokens

        if self.bank is not None:
            tokens = self._moe_pass(tokens, class_ids, m)

        thetas: Optional[List[Tensor]] = [] if self.proposal is not None else None
        deltas: Optional[List[Tensor]] = [] if self.fusion is not None else None
        if self.fusion is not None:
            e_as = None
            if cfg.use_ap:
                if organ_onehot is None:
                    raise ContractError("anatomical prompt enabled but no organ maps given")
                e_as = self.prompts.anatomy.encode_onehot(organ_onehot)  # (B, d_p)
            fused_rows = []
            for b, cid in enumerate(class_ids):
                rows = ops.slice_rows(tokens, b * m, (b + 1) * m)
                e_txt = self.prompts.text_embedding(int(cid)) if cfg.use_tp else None
                e_a = ops.slice_rows(e_as, b, b + 1).reshape(-1) if e_as is not None else None
                fused, delta = self.fusion.fuse(rows, e_txt, e_a)
                fused_rows.append(fused)
                deltas.append(delta)
                if self.proposal is not None:
                    thetas.append(self.proposal.propose(fused, e_txt))
            f_attn = fused_rows[0] if batch == 1 else ops.concat(fused_rows, axis=0)
            dec_in = ops.add(f_attn, tokens)
        else:
            dec_in = tokens

        hook = None
        if self.bank is not None:
            stage_m = (self.backbone.token_extent * 2) ** 3
            hook = lambda tok: self._moe_pass(tok, class_ids, stage_m)
        logits = self.backbone.decode(dec_in, skips, post_stage0=hook)

        if thetas:
            logits = gate_channels(logits, thetas)
        return ForwardResult(logits=logits, thetas=thetas, deltas=deltas)


def count_parameters(model: SegModel) -> Dict[str, int]:
    """Per-group and total parameter counts (scalar elements)."""
    per_group: Dict[str, int] = {}
    total = 0
    for _, group, t in model.param_entries():
        n = int(t.data.size)
        per_group[group] = per_group.get(group, 0) + n
        total += n
    per_group["total"] = total
    return per_group
