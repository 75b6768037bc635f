"""Composition of change maps with semantic maps, prompt grouping, the
angle-threshold proposal comparator, and a deterministic mock segmenter.

The binary composition rule is saturating: a pixel is change when the
category-agnostic map fires AND either timestamp's semantic label is a
foreground class (plain addition of two binary products could reach 2, so
the logical-OR form is used; outputs stay binary).  The proposal
comparator reproduces the classic paradigm this package replaces: a
proposal counts as changed when the cosine similarity of its mean
embeddings falls below cos(theta * pi / 180).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import ShapeError


@dataclass
class SemanticMap:
    """Class-index map over the image grid; index 0 is background."""
    classes: np.ndarray
    palette: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 2:
            raise ShapeError(f"semantic map must be single-channel, got {arr.shape}")
        arr = arr.astype(np.int64)
        if arr.min() < 0:
            raise ValueError("class indices must be non-negative")
        self.classes = arr

    @property
    def shape(self):
        return self.classes.shape


@dataclass(frozen=True)
class PromptClass:
    name: str
    subclasses: tuple[str, ...]
    foreground: bool = True


class PromptConfig:
    """Canonical classes, each expanded into subclass prompt strings.

    Subclass strings must be unique across classes; class ids are assigned
    1..K in declaration order with 0 reserved for background.
    """

    def __init__(self, classes: list[PromptClass]):
        self.classes = list(classes)
        self._owner: dict[str, PromptClass] = {}
        for cls in self.classes:
            for sub in cls.subclasses:
                if sub in self._owner:
                    raise ValueError(f"subclass {sub!r} appears in more than one class")
                self._owner[sub] = cls

    def class_ids(self) -> dict[int, str]:
        return {i + 1: cls.name for i, cls in enumerate(self.classes)}

    def class_id(self, name: str) -> int:
        for i, cls in enumerate(self.classes):
            if cls.name == name:
                return i + 1
        raise KeyError(f"unknown class {name!r}")

    def foreground_ids(self) -> set[int]:
        return {i + 1 for i, cls in enumerate(self.classes) if cls.foreground}

    def owner_of(self, subclass: str) -> PromptClass:
        if subclass not in self._owner:
            raise KeyError(f"subclass {subclass!r} is not in the prompt config")
        return self._owner[subclass]

    def to_file(self, path) -> None:
        doc = {"classes": [
            {"name": c.name, "subclasses": list(c.subclasses), "foreground": c.foreground}
            for c in self.classes]}
        with open(path, "w") as f:
            json.dump(doc, f, indent=1, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> "PromptConfig":
        with open(path) as f:
            doc = json.load(f)
        return cls([PromptClass(c["name"], tuple(c["subclasses"]),
                                bool(c.get("foreground", True)))
                    for c in doc["classes"]])


def building_prompt_config() -> PromptConfig:
    """Single-foreground building setup with common distractor classes."""
    return PromptConfig([
        PromptClass("bareland", ("bareland", "barren"), foreground=False),
        PromptClass("grass", ("grass",), foreground=False),
        PromptClass("car", ("car",), foreground=False),
        PromptClass("tree", ("tree", "forest"), foreground=False),
        PromptClass("water", ("water", "river"), foreground=False),
        PromptClass("cropland", ("cropland",), foreground=False),
        PromptClass("building", ("building", "roof", "house"), foreground=True),
    ])


def _as_change(change) -> np.ndarray:
    arr = np.asarray(change, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("change map must be binary")
    return arr.astype(bool)


def compose_binary(change, m1: SemanticMap, m2: SemanticMap,
                   foreground: set[int]) -> np.ndarray:
    """change AND (fg(m1) OR fg(m2)), returned as a {0,1} float map."""
    ca = _as_change(change)
    if m1.shape != ca.shape or m2.shape != ca.shape:
        raise ShapeError("semantic and change grids differ")
    fg = np.isin(m1.classes, list(foreground)) | np.isin(m2.classes, list(foreground))
    return (ca & fg).astype(np.float64)


def compose_semantic(change, m: SemanticMap) -> SemanticMap:
    """Keep the class index where change fired, background elsewhere."""
    ca = _as_change(change)
    if m.shape != ca.shape:
        raise ShapeError("semantic and change grids differ")
    return SemanticMap(np.where(ca, m.classes, 0), dict(m.palette))


def group_prompts(subclass_scores: dict[str, np.ndarray],
                  cfg: PromptConfig) -> SemanticMap:
    """Collapse per-subclass score maps to canonical classes.

    The winning subclass at each pixel elects its owning class; pixels won
    by a non-foreground subclass become background.
    """
    if not subclass_scores:
        raise ValueError("no subclass maps given")
    names = sorted(subclass_scores)
    grids = {subclass_scores[n].shape for n in names}
    if len(grids) != 1:
        raise ShapeError(f"subclass maps disagree on grid: {sorted(grids)}")
    owners = [cfg.owner_of(n) for n in names]
    stack = np.stack([np.asarray(subclass_scores[n], dtype=np.float64) for n in names])
    winner = np.argmax(stack, axis=0)
    out = np.zeros(stack.shape[1:], dtype=np.int64)
    for i, cls in enumerate(owners):
        if cls.foreground:
            out[winner == i] = cfg.class_id(cls.name)
    return SemanticMap(out, cfg.class_ids())


def beta_threshold(theta_degrees: float) -> float:
    """Similarity threshold cos(theta * pi / 180) for theta in [0, 180]."""
    if not 0.0 <= theta_degrees <= 180.0:
        raise ValueError(f"theta must be in [0, 180] degrees, got {theta_degrees}")
    return float(np.cos(theta_degrees * np.pi / 180.0))


@dataclass
class Proposal:
    """Candidate region with its mean embedding at both timestamps."""
    mask: np.ndarray
    emb1: np.ndarray
    emb2: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("proposal mask is empty")


def baseline_compare(proposals: list[Proposal], theta_degrees: float,
                     grid_shape: tuple[int, int], eps: float = 1e-8) -> np.ndarray:
    """Union of proposals whose embedding angle exceeds theta.

    Equivalent forms: negated cosine D > -beta, or cosine similarity < beta.
    An empty proposal list yields an empty change map.
    """
    beta = beta_threshold(theta_degrees)
    out = np.zeros(grid_shape, dtype=np.float64)
    for p in proposals:
        cos = float(np.dot(p.emb1, p.emb2)
                    / (np.linalg.norm(p.emb1) * np.linalg.norm(p.emb2) + eps))
        if cos < beta:
            out[p.mask] = 1.0
    return out


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """4-connected components of a boolean mask, as boolean masks."""
    labels, count = ndimage.label(np.asarray(mask, dtype=bool))
    return [labels == i for i in range(1, count + 1)]


def proposals_from_semantic(m1: SemanticMap, m2: SemanticMap,
                            emb_map1: np.ndarray, emb_map2: np.ndarray,
                            min_pixels: int = 1) -> list[Proposal]:
    """Segment-derived proposals with mask-mean embeddings per timestamp."""
    if m1.shape != m2.shape or emb_map1.shape != emb_map2.shape:
        raise ShapeError("maps and embeddings must share grids")
    if emb_map1.shape[1:] != m1.shape:
        raise ShapeError("embedding grid does not match the semantic maps")
    proposals = []
    for sem in (m1, m2):
        for cid in np.unique(sem.classes):
            if cid == 0:
                continue
            for mask in connected_components(sem.classes == cid):
                if mask.sum() < min_pixels:
                    continue
                proposals.append(Proposal(
                    mask,
                    emb_map1[:, mask].mean(axis=1),
                    emb_map2[:, mask].mean(axis=1)))
    return proposals


def mock_segment(image: np.ndarray, cfg: PromptConfig, seed: int = 0,
                 precomputed: SemanticMap | None = None) -> SemanticMap:
    """Nearest seeded color-prototype labeling; a precomputed map bypasses it."""
    if precomputed is not None:
        return precomputed
    if not any(c.foreground for c in cfg.classes):
        raise ValueError("prompt config lists no foreground class")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W] image, got {image.shape}")
    rng = np.random.default_rng(seed)
    prototypes = rng.uniform(0.0, 1.0, size=(len(cfg.classes), 3))
    # squared distance of every pixel to every class prototype
    diffs = image[None] - prototypes[:, :, None, None]
    dist = np.sum(diffs * diffs, axis=1)
    winner = np.argmin(dist, axis=0) + 1
    return SemanticMap(winner, cfg.class_ids())


__all__ = [
    "SemanticMap", "PromptClass", "PromptConfig", "building_prompt_config",
    "compose_binary", "compose_semantic", "group_prompts",
    "beta_threshold", "Proposal", "baseline_compare",
    "connected_components", "proposals_from_semantic", "mock_segment",
]
