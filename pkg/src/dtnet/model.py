"""Declarative network specs and the classification/segmentation networks.

A spec is an ordered list of stages written the same way the architecture
tables write them, e.g.::

    FDS(N=512,r=0.2,K=32,C=320)-DPCT(M=4)-FDS(N=128,r=0.4,K=32,C=640)-DPCT(M=4)
    -POOL(C=1024)-DPCT(M=4)-FC(C=512)-FC(C=256)-FC(C=40)

The network keeps a stack of resolution levels. ``FDS``/``POOL`` push a new,
coarser level; ``DPCT`` transforms the features of the level on top; ``FUS``
pops the top level and interpolates it onto the level below, fusing with the
features stored there (the skip connection); ``FC`` stages form the head.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import DpctLayer
from .layers import FcHead, FdsLayer, FusLayer, GlobalPoolLayer
from .module import Module
from .tensor import Tensor

__all__ = [
    "SpecError",
    "Fds",
    "Dpct",
    "GlobalPool",
    "Fus",
    "Fc",
    "NetworkSpec",
    "DTNet",
    "parse_stages",
    "format_stages",
    "build_classification_net",
    "build_segmentation_net",
    "build_net",
    "paper_classification_spec",
    "paper_segmentation_spec",
    "ATTENTION_VARIANTS",
]

ATTENTION_VARIANTS = ("none", "pwsa", "cwsa", "both")


class SpecError(ValueError):
    """The stage list does not describe a consistent network."""


@dataclass(frozen=True)
class Fds:
    n_samples: int
    channels: int
    radius: float = 0.2
    max_neighbors: int = 32


@dataclass(frozen=True)
class Dpct:
    heads: int = 4
    channels: int | None = None  # optional, checked against the incoming width


@dataclass(frozen=True)
class GlobalPool:
    channels: int


@dataclass(frozen=True)
class Fus:
    channels: int


@dataclass(frozen=True)
class Fc:
    channels: int


_STAGE_RE = re.compile(r"\s*([A-Za-z]+)\s*\(([^)]*)\)\s*")


def _kv(body: str) -> dict[str, str]:
    out = {}
    for part in filter(None, (p.strip() for p in body.split(","))):
        if "=" not in part:
            raise SpecError(f"expected key=value, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        out[k] = v
    return out


def parse_stages(text: str) -> tuple:
    """Parse ``FDS(...)-DPCT(...)-...`` into stage objects."""
    stages = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _STAGE_RE.match(text, pos)
        if not m:
            raise SpecError(f"cannot parse stage at {text[pos:]!r}")
        name, args = m.group(1).upper(), _kv(m.group(2))
        pos = m.end()
        if pos < len(text):
            if text[pos] != "-":
                raise SpecError(f"expected '-' between stages at {text[pos:]!r}")
            pos += 1
        try:
            if name == "FDS" and int(args.get("N", 0)) == 1 and "r" not in args:
                stages.append(GlobalPool(int(args["C"])))
            elif name == "FDS":
                stages.append(Fds(int(args["N"]), int(args["C"]), float(args.get("r", 0.2)), int(args.get("K", 32))))
            elif name == "POOL":
                stages.append(GlobalPool(int(args["C"])))
            elif name == "DPCT":
                stages.append(Dpct(int(args.get("M", 4)), int(args["C"]) if "C" in args else None))
            elif name == "FUS":
                stages.append(Fus(int(args["C"])))
            elif name == "FC":
                stages.append(Fc(int(args["C"])))
            else:
                raise SpecError(f"unknown stage {name}")
        except KeyError as exc:
            raise SpecError(f"stage {name} is missing {exc.args[0]}") from None
        except ValueError as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"stage {name}: {exc}") from None
    return tuple(stages)


def format_stages(stages) -> str:
    parts = []
    for s in stages:
        if isinstance(s, Fds):
            parts.append(f"FDS(N={s.n_samples},r={s.radius!r},K={s.max_neighbors},C={s.channels})")
        elif isinstance(s, GlobalPool):
            parts.append(f"POOL(C={s.channels})")
        elif isinstance(s, Dpct):
            parts.append(f"DPCT(M={s.heads})" if s.channels is None else f"DPCT(M={s.heads},C={s.channels})")
        elif isinstance(s, Fus):
            parts.append(f"FUS(C={s.channels})")
        elif isinstance(s, Fc):
            parts.append(f"FC(C={s.channels})")
    return "-".join(parts)


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple
    task: str = "classification"
    n_classes: int = 40
    in_channels: int = 3
    attention: str = "both"
    head_dropout: float = 0.4

    def __post_init__(self):
        if isinstance(self.stages, str):
            object.__setattr__(self, "stages", parse_stages(self.stages))
        else:
            object.__setattr__(self, "stages", tuple(self.stages))

    def with_attention(self, attention: str) -> NetworkSpec:
        return dataclasses.replace(self, attention=attention)

    def to_dict(self) -> dict:
        return {
            "stages": format_stages(self.stages),
            "task": self.task,
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
            "attention": self.attention,
            "head_dropout": self.head_dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def validate(self) -> list[dict]:
        """Check channel chaining and level pairing; return the resolved plan.

        Each plan entry records the stage plus the channel widths it consumes
        and produces.
        """
        if self.task not in ("classification", "segmentation"):
            raise SpecError(f"unknown task {self.task!r}")
        if self.attention not in ATTENTION_VARIANTS:
            raise SpecError(f"attention must be one of {ATTENTION_VARIANTS}")
        if self.n_classes < 1:
            raise SpecError("n_classes must be positive")
        # each level: (channels, point count or None for the input, is_global)
        levels = [(self.in_channels, None, False)]
        plan = []
        in_head = False
        for i, s in enumerate(self.stages):
            width = levels[-1][0]
            if isinstance(s, Fc):
                if not in_head:
                    if self.task == "classification" and not levels[-1][2]:
                        raise SpecError("classification head must follow a POOL stage")
                    if self.task == "segmentation" and len(levels) != 1:
                        raise SpecError(
                            f"segmentation head reached with {len(levels) - 1} unmatched encoder level(s); "
                            "every FDS/POOL needs a FUS"
                        )
                in_head = True
                plan.append({"stage": s, "c_in": width, "c_out": s.channels})
                levels[-1] = (s.channels, levels[-1][1], levels[-1][2])
                continue
            if in_head:
                raise SpecError(f"stage {i} ({type(s).__name__}) follows the FC head")
            if isinstance(s, Fds):
                if levels[-1][2]:
                    raise SpecError("FDS cannot follow a POOL stage")
                prev_n = levels[-1][1]
                if prev_n is not None and s.n_samples > prev_n:
                    raise SpecError(f"FDS samples {s.n_samples} points from a level of {prev_n}")
                if s.radius <= 0 or s.max_neighbors < 1:
                    raise SpecError("FDS needs radius > 0 and K >= 1")
                plan.append({"stage": s, "c_in": width, "c_out": s.channels})
                levels.append((s.channels, s.n_samples, False))
            elif isinstance(s, GlobalPool):
                if levels[-1][2]:
                    raise SpecError("POOL cannot follow another POOL")
                plan.append({"stage": s, "c_in": width, "c_out": s.channels})
                levels.append((s.channels, 1, True))
            elif isinstance(s, Dpct):
                if s.channels is not None and s.channels != width:
                    raise SpecError(f"DPCT declares C={s.channels} but receives {width} channels")
                if s.heads < 1 or width % s.heads:
                    raise SpecError(f"{width} channels do not split into {s.heads} heads")
                plan.append({"stage": s, "c_in": width, "c_out": width})
            elif isinstance(s, Fus):
                if self.task != "segmentation":
                    raise SpecError("FUS stages only belong in segmentation specs")
                if len(levels) < 2:
                    raise SpecError("FUS has no encoder level to pair with")
                coarse = levels.pop()
                skip = levels[-1]
                n_coarse = coarse[1]
                k = 3 if n_coarse is None else min(3, n_coarse)
                plan.append({"stage": s, "c_in": coarse[0], "c_skip": skip[0], "c_out": s.channels, "k": k})
                levels[-1] = (s.channels, skip[1], skip[2])
            else:
                raise SpecError(f"unknown stage object {s!r}")
        if not in_head:
            raise SpecError("spec needs at least one FC stage")
        if plan[-1]["c_out"] != self.n_classes:
            raise SpecError(f"last FC has {plan[-1]['c_out']} outputs but there are {self.n_classes} classes")
        return plan


class DTNet(Module):
    """Network assembled from a :class:`NetworkSpec`.

    ``forward(coords)`` takes ``[B, N, 3]`` coordinates and returns logits of
    shape ``[B, classes]`` (classification) or ``[B, N, parts]``
    (segmentation).
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        plan = spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        pw = spec.attention in ("both", "pwsa")
        cw = spec.attention in ("both", "cwsa")
        self.blocks = []
        head_widths = []
        head_in = None
        for entry in plan:
            s = entry["stage"]
            if isinstance(s, Fds):
                self.blocks.append(FdsLayer(s.n_samples, s.radius, s.max_neighbors, entry["c_in"], s.channels, rng))
            elif isinstance(s, GlobalPool):
                self.blocks.append(GlobalPoolLayer(entry["c_in"], s.channels, rng))
            elif isinstance(s, Dpct):
                self.blocks.append(DpctLayer(entry["c_in"], s.heads, rng, point_wise=pw, channel_wise=cw))
            elif isinstance(s, Fus):
                self.blocks.append(FusLayer(entry["c_skip"], entry["c_in"], s.channels, rng, k=entry["k"]))
            elif isinstance(s, Fc):
                if head_in is None:
                    head_in = entry["c_in"]
                head_widths.append(s.channels)
        self.head = FcHead(head_in, head_widths[:-1], head_widths[-1], rng, dropout=spec.head_dropout)

    @property
    def task(self) -> str:
        return self.spec.task

    def forward(self, coords, rng: np.random.Generator | None = None) -> Tensor:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim == 2:
            coords = coords[None]
        if coords.shape[-1] != 3:
            raise T.DimensionError(f"coords must be [B, N, 3], got {coords.shape}")
        dtype = T.get_default_dtype()
        levels: list[list] = [[coords, Tensor(coords.astype(dtype))]]
        for block in self.blocks:
            top = levels[-1]
            if isinstance(block, (FdsLayer, GlobalPoolLayer)):
                levels.append(list(block(top[0], top[1])))
            elif isinstance(block, DpctLayer):
                top[1] = block(top[1])
            elif isinstance(block, FusLayer):
                coarse = levels.pop()
                fine = levels[-1]
                fine[1] = block(fine[0], fine[1], coarse[0], coarse[1])
        feats = levels[-1][1]
        if self.task == "classification":
            feats = T.reshape(feats, (feats.shape[0], feats.shape[-1]))
        return self.head(feats, rng)


def build_classification_net(spec: NetworkSpec, seed: int = 0) -> DTNet:
    if spec.task != "classification":
        raise SpecError(f"expected a classification spec, got {spec.task!r}")
    return DTNet(spec, seed)


def build_segmentation_net(spec: NetworkSpec, seed: int = 0) -> DTNet:
    if spec.task != "segmentation":
        raise SpecError(f"expected a segmentation spec, got {spec.task!r}")
    return DTNet(spec, seed)


def build_net(spec: NetworkSpec, seed: int = 0) -> DTNet:
    return DTNet(spec, seed)


def paper_classification_spec(n_classes: int = 40, heads: int = 4) -> NetworkSpec:
    """Published classification layout with per-stage widths moved onto FDS.

    The attention blocks preserve width, so the 320/640 widths listed for
    them are produced by the down-sampling layer before each one, and the
    second level keeps the 128 points its FDS samples.
    """
    stages = (
        Fds(512, 320, 0.2, 32),
        Dpct(heads, 320),
        Fds(128, 640, 0.4, 32),
        Dpct(heads, 640),
        GlobalPool(1024),
        Dpct(heads, 1024),
        Fc(512),
        Fc(256),
        Fc(n_classes),
    )
    return NetworkSpec(stages, "classification", n_classes)


def paper_segmentation_spec(n_parts: int = 50, heads: int = 4) -> NetworkSpec:
    """Published part-segmentation layout (global block width read as 1024)."""
    stages = (
        Fds(512, 320, 0.2, 32),
        Dpct(heads, 320),
        Fds(128, 512, 0.4, 32),
        Dpct(heads, 512),
        GlobalPool(1024),
        Dpct(heads, 1024),
        Fus(256),
        Dpct(heads, 256),
        Fus(128),
        Dpct(heads, 128),
        Fus(128),
        Dpct(heads, 128),
        Fc(128),
        Fc(n_parts),
    )
    return NetworkSpec(stages, "segmentation", n_parts)
