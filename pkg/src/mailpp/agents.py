"""Agent layers, cross-modal bridges, coupling modes, and exact folding.

An agent layer is a per-channel affine (scaling vector ``a``, shifting
vector ``b``) appended after a frozen LayerNorm or linear layer. At each
insertion position there is one coupled site holding the image agent,
the text agent and, depending on the coupling mode, bridge functions
and a meta-scaling vector:

  ivlu            both agents train independently, no bridges
  text_to_image   a_v_eff = a_v + W_up . W_down . a_t
  image_to_text   a_t_eff = a_t + W_up . W_down . a_v
  bidirectional   a_v_eff = a_v + W_up_v . W_down_v . a_m
                  a_t_eff = a_t + W_up_t . W_down_t . a_m

Bridges start at zero output (W_up = 0), so every mode is exactly
transparent at initialization. ``bridge_shift`` mirrors the same rule
onto the shifting vectors with separate bridges (and a separate meta
shift vector in bidirectional mode); it is off by default.

After training, agents fold exactly into the frozen parameters:
LayerNorm gamma' = gamma * a, beta' = beta * a + b; linear rows scale
as W'[i] = a[i] * W[i], bias' = bias * a + b.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (
    ALL_POSITIONS,
    BLOCK_POSITIONS,
    FINAL_POSITIONS,
    AttentionParams,
    BlockWeights,
    DualEncoder,
    EncoderConfig,
    EncoderWeights,
    HookSet,
    LayerNormParams,
    LinearParams,
    MlpParams,
    Modality,
    Position,
    ScalingMap,
)

__all__ = [
    "CouplingMode",
    "AgentLayer",
    "BridgeFunction",
    "MetaScalingVector",
    "SiteKey",
    "CoupledAgentSite",
    "build_sites",
    "hook_set",
    "agent_apply",
    "effective_scalings",
    "build_scaling_map",
    "fuse_layernorm",
    "fuse_linear",
    "fuse_model",
    "bridge_norm",
    "site_param_count",
    "trainable_param_count",
]


class CouplingMode(str, Enum):
    IVLU = "ivlu"
    TEXT_TO_IMAGE = "text_to_image"
    IMAGE_TO_TEXT = "image_to_text"
    BIDIRECTIONAL = "bidirectional"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


@dataclass
class AgentLayer:
    """Scaling vector ``a`` (init ones) and shifting vector ``b`` (init zeros)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValueError(f"agent vectors must be equal-length 1-D, got {self.a.shape} and {self.b.shape}")

    @classmethod
    def identity(cls, dim: int, dtype=np.float32) -> "AgentLayer":
        return cls(a=np.ones(dim, dtype=dtype), b=np.zeros(dim, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.a.shape[0]


@dataclass
class BridgeFunction:
    """Bottleneck map W_up . W_down (rank r) from a source vector into a target width."""

    w_down: np.ndarray  # (r, in_dim)
    w_up: np.ndarray  # (out_dim, r)

    def __post_init__(self):
        if self.w_down.ndim != 2 or self.w_up.ndim != 2 or self.w_up.shape[1] != self.w_down.shape[0]:
            raise ValueError(f"bridge shapes {self.w_up.shape} / {self.w_down.shape} are inconsistent")
        r = self.rank
        if not 1 <= r <= min(self.in_dim, self.out_dim):
            raise ValueError(f"bridge rank {r} outside [1, min({self.in_dim}, {self.out_dim})]")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rank: int, rng: np.random.Generator, dtype=np.float32) -> "BridgeFunction":
        if not 1 <= rank <= min(in_dim, out_dim):
            raise ValueError(f"bridge rank {rank} outside [1, min({in_dim}, {out_dim})]")
        w_down = (rng.standard_normal((rank, in_dim)) / np.sqrt(in_dim)).astype(dtype)
        w_up = np.zeros((out_dim, rank), dtype=dtype)
        return cls(w_down=w_down, w_up=w_up)

    @property
    def rank(self) -> int:
        return self.w_down.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_down.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_up.shape[0]


@dataclass
class MetaScalingVector:
    a_m: np.ndarray

    def __post_init__(self):
        if self.a_m.ndim != 1:
            raise ValueError("meta-scaling vector must be 1-D")

    @property
    def dim(self) -> int:
        return self.a_m.shape[0]


@dataclass(frozen=True, order=True)
class SiteKey:
    """Insertion position: (block index, pos) for in-block sites, (None, pos) for final ones."""

    sort_index: tuple = field(init=False, repr=False, compare=True)
    block: int | None = field(compare=False, default=None)
    pos: Position = field(compare=False, default="4")

    def __post_init__(self):
        if self.pos in BLOCK_POSITIONS:
            if self.block is None:
                raise ValueError(f"position {self.pos} requires a block index")
        elif self.pos in FINAL_POSITIONS:
            if self.block is not None:
                raise ValueError(f"position {self.pos} takes no block index")
        else:
            raise ValueError(f"unknown position {self.pos!r}")
        order = (0, self.block, BLOCK_POSITIONS.index(self.pos)) if self.block is not None else (
            1,
            0,
            FINAL_POSITIONS.index(self.pos),
        )
        object.__setattr__(self, "sort_index", order)

    def __str__(self) -> str:
        return f"block{self.block}.{self.pos}" if self.block is not None else f"final.{self.pos}"

    @classmethod
    def parse(cls, text: str) -> "SiteKey":
        head, _, pos = text.partition(".")
        if head == "final":
            return cls(block=None, pos=pos)
        if head.startswith("block"):
            return cls(block=int(head[5:]), pos=pos)
        raise ValueError(f"bad site key {text!r}")


@dataclass
class CoupledAgentSite:
    """One insertion position's image agent, text agent, and coupling state."""

    key: SiteKey
    mode: CouplingMode
    image_agent: AgentLayer
    text_agent: AgentLayer
    bridge_v: BridgeFunction | None = None
    bridge_t: BridgeFunction | None = None
    meta: MetaScalingVector | None = None
    bridge_shift: bool = False
    shift_bridge_v: BridgeFunction | None = None
    shift_bridge_t: BridgeFunction | None = None
    shift_meta: MetaScalingVector | None = None

    def __post_init__(self):
        m = self.mode
        if m == CouplingMode.IVLU:
            if self.bridge_v or self.bridge_t or self.meta:
                raise ValueError("ivlu sites carry no bridges and no meta vector")
            if self.bridge_shift:
                raise ValueError("bridge_shift requires a coupled mode")
        elif m == CouplingMode.TEXT_TO_IMAGE:
            if self.bridge_v is None or self.bridge_t is not None or self.meta is not None:
                raise ValueError("text_to_image sites need exactly bridge_v")
            self._check_bridge(self.bridge_v, self.text_agent.dim, self.image_agent.dim)
        elif m == CouplingMode.IMAGE_TO_TEXT:
            if self.bridge_t is None or self.bridge_v is not None or self.meta is not None:
                raise ValueError("image_to_text sites need exactly bridge_t")
            self._check_bridge(self.bridge_t, self.image_agent.dim, self.text_agent.dim)
        else:  # bidirectional
            if self.bridge_v is None or self.bridge_t is None or self.meta is None:
                raise ValueError("bidirectional sites need bridge_v, bridge_t and a meta vector")
            self._check_bridge(self.bridge_v, self.meta.dim, self.image_agent.dim)
            self._check_bridge(self.bridge_t, self.meta.dim, self.text_agent.dim)
        if self.bridge_shift:
            if m == CouplingMode.TEXT_TO_IMAGE and self.shift_bridge_v is None:
                raise ValueError("bridge_shift on text_to_image needs shift_bridge_v")
            if m == CouplingMode.IMAGE_TO_TEXT and self.shift_bridge_t is None:
                raise ValueError("bridge_shift on image_to_text needs shift_bridge_t")
            if m == CouplingMode.BIDIRECTIONAL and (
                self.shift_bridge_v is None or self.shift_bridge_t is None or self.shift_meta is None
            ):
                raise ValueError("bridge_shift on bidirectional needs both shift bridges and a shift meta")

    @staticmethod
    def _check_bridge(bridge: BridgeFunction, in_dim: int, out_dim: int) -> None:
        if bridge.in_dim != in_dim or bridge.out_dim != out_dim:
            raise ValueError(
                f"bridge dims ({bridge.in_dim} -> {bridge.out_dim}) do not match site ({in_dim} -> {out_dim})"
            )

    # ---- trainable parameter registry -------------------------------

    def params(self) -> Iterator[tuple[str, np.ndarray]]:
        """Trainable arrays in a fixed, documented order."""
        yield "image/a", self.image_agent.a
        yield "image/b", self.image_agent.b
        yield "text/a", self.text_agent.a
        yield "text/b", self.text_agent.b
        if self.meta is not None:
            yield "meta/a_m", self.meta.a_m
        if self.bridge_v is not None:
            yield "bridge_v/w_up", self.bridge_v.w_up
            yield "bridge_v/w_down", self.bridge_v.w_down
        if self.bridge_t is not None:
            yield "bridge_t/w_up", self.bridge_t.w_up
            yield "bridge_t/w_down", self.bridge_t.w_down
        if self.shift_meta is not None:
            yield "shift_meta/b_m", self.shift_meta.a_m
        if self.shift_bridge_v is not None:
            yield "shift_bridge_v/w_up", self.shift_bridge_v.w_up
            yield "shift_bridge_v/w_down", self.shift_bridge_v.w_down
        if self.shift_bridge_t is not None:
            yield "shift_bridge_t/w_up", self.shift_bridge_t.w_up
            yield "shift_bridge_t/w_down", self.shift_bridge_t.w_down

    def set_param(self, local_name: str, value: np.ndarray) -> None:
        holder, _, leafname = local_name.partition("/")
        targets = {
            "image": self.image_agent,
            "text": self.text_agent,
            "meta": self.meta,
            "bridge_v": self.bridge_v,
            "bridge_t": self.bridge_t,
            "shift_meta": self.shift_meta,
            "shift_bridge_v": self.shift_bridge_v,
            "shift_bridge_t": self.shift_bridge_t,
        }
        obj = targets.get(holder)
        if obj is None:
            raise KeyError(f"site {self.key} has no parameter {local_name!r}")
        attr = {"a": "a", "b": "b", "a_m": "a_m", "b_m": "a_m", "w_up": "w_up", "w_down": "w_down"}[leafname]
        current = getattr(obj, attr)
        if current.shape != value.shape:
            raise ValueError(f"shape mismatch writing {local_name!r}: {value.shape} != {current.shape}")
        setattr(obj, attr, np.ascontiguousarray(value, dtype=current.dtype))

    # ---- effective vectors ------------------------------------------

    def _value(self, values: Mapping[str, Tensor] | None, local_name: str, raw: np.ndarray) -> Tensor:
        if values is not None:
            full = f"{self.key}/{local_name}"
            if full in values:
                return values[full]
        return Tensor(raw)

    def effective(self, values: Mapping[str, Tensor] | None = None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """(a_v_eff, a_t_eff, b_v_eff, b_t_eff), on the tape if values are leaves."""
        a_v = self._value(values, "image/a", self.image_agent.a)
        a_t = self._value(values, "text/a", self.text_agent.a)
        b_v = self._value(values, "image/b", self.image_agent.b)
        b_t = self._value(values, "text/b", self.text_agent.b)

        def through(bridge: BridgeFunction, prefix: str, source: Tensor) -> Tensor:
            w_up = self._value(values, f"{prefix}/w_up", bridge.w_up)
            w_down = self._value(values, f"{prefix}/w_down", bridge.w_down)
            return ad.matmul(w_up, ad.matmul(w_down, source))

        if self.mode == CouplingMode.TEXT_TO_IMAGE:
            a_v = ad.add(a_v, through(self.bridge_v, "bridge_v", a_t))
            if self.bridge_shift:
                b_v = ad.add(b_v, through(self.shift_bridge_v, "shift_bridge_v", b_t))
        elif self.mode == CouplingMode.IMAGE_TO_TEXT:
            a_t = ad.add(a_t, through(self.bridge_t, "bridge_t", a_v))
            if self.bridge_shift:
                b_t = ad.add(b_t, through(self.shift_bridge_t, "shift_bridge_t", b_v))
        elif self.mode == CouplingMode.BIDIRECTIONAL:
            a_m = self._value(values, "meta/a_m", self.meta.a_m)
            a_v = ad.add(a_v, through(self.bridge_v, "bridge_v", a_m))
            a_t = ad.add(a_t, through(self.bridge_t, "bridge_t", a_m))
            if self.bridge_shift:
                b_m = self._value(values, "shift_meta/b_m", self.shift_meta.a_m)
                b_v = ad.add(b_v, through(self.shift_bridge_v, "shift_bridge_v", b_m))
                b_t = ad.add(b_t, through(self.shift_bridge_t, "shift_bridge_t", b_m))
        return a_v, a_t, b_v, b_t


def agent_apply(y: Tensor, agent: AgentLayer, effective_a: Tensor | None = None) -> Tensor:
    """y * a + b over the last axis; ``effective_a`` substitutes the raw scaling."""
    a = effective_a if effective_a is not None else Tensor(agent.a)
    return ad.affine(y, a, Tensor(agent.b))


def effective_scalings(site: CoupledAgentSite, values: Mapping[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """The site's (a_v_eff, a_t_eff) under its coupling mode."""
    a_v, a_t, _, _ = site.effective(values)
    return a_v, a_t


# ------------------------------------------------------------------
# construction


def build_sites(
    cfg: EncoderConfig,
    mode: CouplingMode,
    rank: int,
    d_m: int,
    rng: np.random.Generator,
    dtype=np.float32,
    bridge_shift: bool = False,
    positions: tuple[Position, ...] = ALL_POSITIONS,
) -> dict[SiteKey, CoupledAgentSite]:
    """Freshly initialized sites for every requested position, in canonical order."""
    mode = CouplingMode(mode)
    for p in positions:
        if p not in ALL_POSITIONS:
            raise ValueError(f"unknown position {p!r}")
    if d_m < 1:
        raise ValueError("d_m must be positive")
    keys = [SiteKey(i, p) for i in range(cfg.L) for p in BLOCK_POSITIONS if p in positions]
    keys += [SiteKey(None, p) for p in FINAL_POSITIONS if p in positions]

    sites: dict[SiteKey, CoupledAgentSite] = {}
    for key in keys:
        w_v = cfg.hook_width("image", key.pos)
        w_t = cfg.hook_width("text", key.pos)
        image_agent = AgentLayer.identity(w_v, dtype)
        text_agent = AgentLayer.identity(w_t, dtype)
        bridge_v = bridge_t = meta = None
        sb_v = sb_t = s_meta = None
        if mode == CouplingMode.TEXT_TO_IMAGE:
            bridge_v = BridgeFunction.init(w_t, w_v, rank, rng, dtype)
            if bridge_shift:
                sb_v = BridgeFunction.init(w_t, w_v, rank, rng, dtype)
        elif mode == CouplingMode.IMAGE_TO_TEXT:
            bridge_t = BridgeFunction.init(w_v, w_t, rank, rng, dtype)
            if bridge_shift:
                sb_t = BridgeFunction.init(w_v, w_t, rank, rng, dtype)
        elif mode == CouplingMode.BIDIRECTIONAL:
            meta = MetaScalingVector(np.ones(d_m, dtype=dtype))
            bridge_v = BridgeFunction.init(d_m, w_v, rank, rng, dtype)
            bridge_t = BridgeFunction.init(d_m, w_t, rank, rng, dtype)
            if bridge_shift:
                s_meta = MetaScalingVector(np.ones(d_m, dtype=dtype))
                sb_v = BridgeFunction.init(d_m, w_v, rank, rng, dtype)
                sb_t = BridgeFunction.init(d_m, w_t, rank, rng, dtype)
        elif bridge_shift:
            raise ValueError("bridge_shift requires a coupled mode")
        sites[key] = CoupledAgentSite(
            key=key,
            mode=mode,
            image_agent=image_agent,
            text_agent=text_agent,
            bridge_v=bridge_v,
            bridge_t=bridge_t,
            meta=meta,
            bridge_shift=bridge_shift,
            shift_bridge_v=sb_v,
            shift_bridge_t=sb_t,
            shift_meta=s_meta,
        )
    return sites


def hook_set(sites: Mapping[SiteKey, CoupledAgentSite]) -> HookSet:
    agents = {}
    for key, site in sites.items():
        agents[("image", key.block, key.pos)] = site.image_agent
        agents[("text", key.block, key.pos)] = site.text_agent
    return HookSet(agents)


def build_scaling_map(
    sites: Mapping[SiteKey, CoupledAgentSite], values: Mapping[str, Tensor] | None = None
) -> ScalingMap:
    """Effective (a, b) per hook key, recomputed from current parameters."""
    out: ScalingMap = {}
    for key, site in sites.items():
        a_v, a_t, b_v, b_t = site.effective(values)
        out[("image", key.block, key.pos)] = (a_v, b_v)
        out[("text", key.block, key.pos)] = (a_t, b_t)
    return out


# ------------------------------------------------------------------
# folding


def fuse_layernorm(
    gamma: np.ndarray,
    beta: np.ndarray,
    agent: AgentLayer,
    effective_a: np.ndarray | None = None,
    effective_b: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """gamma' = gamma * a, beta' = beta * a + b."""
    a = agent.a if effective_a is None else effective_a
    b = agent.b if effective_b is None else effective_b
    if gamma.shape != a.shape or beta.shape != a.shape:
        raise ValueError(f"fuse_layernorm: agent width {a.shape} does not match gamma {gamma.shape}")
    return gamma * a, beta * a + b


def fuse_linear(
    w: np.ndarray,
    bias: np.ndarray,
    agent: AgentLayer,
    effective_a: np.ndarray | None = None,
    effective_b: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Row i of W scales by a[i]; bias' = bias * a + b."""
    a = agent.a if effective_a is None else effective_a
    b = agent.b if effective_b is None else effective_b
    if w.ndim != 2 or w.shape[0] != a.shape[0] or bias.shape != a.shape:
        raise ValueError(f"fuse_linear: agent width {a.shape} does not match weight {w.shape}")
    return w * a[:, None], bias * a + b


def _fuse_encoder(
    weights: EncoderWeights,
    cfg: EncoderConfig,
    sites: Mapping[SiteKey, CoupledAgentSite],
    modality: Modality,
) -> EncoderWeights:
    eff: dict[SiteKey, tuple[np.ndarray, np.ndarray]] = {}
    for key, site in sites.items():
        a_v, a_t, b_v, b_t = site.effective(None)
        eff[key] = (a_v.data, b_v.data) if modality == "image" else (a_t.data, b_t.data)

    def agent_of(key: SiteKey) -> AgentLayer:
        return sites[key].image_agent if modality == "image" else sites[key].text_agent

    def fused_ln(ln: LayerNormParams, key: SiteKey) -> LayerNormParams:
        if key not in sites:
            return LayerNormParams(ln.gamma.copy(), ln.beta.copy())
        a, b = eff[key]
        g2, b2 = fuse_layernorm(ln.gamma, ln.beta, agent_of(key), a, b)
        return LayerNormParams(g2, b2)

    def fused_lin(lin: LinearParams, key: SiteKey) -> LinearParams:
        if key not in sites:
            return LinearParams(lin.w.copy(), lin.b.copy())
        a, b = eff[key]
        w2, b2 = fuse_linear(lin.w, lin.b, agent_of(key), a, b)
        return LinearParams(w2, b2)

    def copy_lin(lin: LinearParams) -> LinearParams:
        return LinearParams(lin.w.copy(), lin.b.copy())

    blocks = []
    for i, blk in enumerate(weights.blocks):
        blocks.append(
            BlockWeights(
                ln1=fused_ln(blk.ln1, SiteKey(i, "1a")),
                attn=AttentionParams(
                    w_q=copy_lin(blk.attn.w_q),
                    w_k=copy_lin(blk.attn.w_k),
                    w_v=copy_lin(blk.attn.w_v),
                    w_o=fused_lin(blk.attn.w_o, SiteKey(i, "2")),
                ),
                ln2=fused_ln(blk.ln2, SiteKey(i, "1b")),
                mlp=MlpParams(fc1=copy_lin(blk.mlp.fc1), fc2=fused_lin(blk.mlp.fc2, SiteKey(i, "3"))),
            )
        )
    return EncoderWeights(
        modality=weights.modality,
        embed=None if weights.embed is None else weights.embed.copy(),
        pos=weights.pos.copy(),
        cls_token=None if weights.cls_token is None else weights.cls_token.copy(),
        blocks=blocks,
        final_ln=fused_ln(weights.final_ln, SiteKey(None, "4")),
        proj=fused_lin(weights.proj, SiteKey(None, "5")),
    )


def fuse_model(model: DualEncoder, sites: Mapping[SiteKey, CoupledAgentSite]) -> DualEncoder:
    """Fold every site into the frozen weights; the result has no hooks left."""
    for key in sites:
        if key.pos not in ALL_POSITIONS:
            raise ValueError(f"site {key} is not attached to a foldable layer")
    return DualEncoder(
        cfg=model.cfg,
        text=_fuse_encoder(model.text, model.cfg, sites, "text"),
        image=_fuse_encoder(model.image, model.cfg, sites, "image"),
    )


# ------------------------------------------------------------------
# diagnostics


def bridge_norm(site: CoupledAgentSite, side: Modality) -> float:
    """Scaled norm (100 / sqrt(d)) * ||W_up . W_down . a_m|| of one side's coupling term."""
    if site.mode != CouplingMode.BIDIRECTIONAL or site.meta is None:
        raise ValueError("bridge_norm needs a bidirectional site with a meta vector")
    bridge = site.bridge_v if side == "image" else site.bridge_t
    vec = bridge.w_up @ (bridge.w_down @ site.meta.a_m)
    d = vec.shape[0]
    return float(100.0 / np.sqrt(d) * np.linalg.norm(vec))


def site_param_count(site: CoupledAgentSite) -> int:
    return sum(arr.size for _, arr in site.params())


def trainable_param_count(sites: Mapping[SiteKey, CoupledAgentSite]) -> int:
    """Enumeration-based count: sums the actually registered trainable arrays."""
    return sum(site_param_count(s) for s in sites.values())
