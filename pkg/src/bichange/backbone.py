"""Frozen feature extractors for bi-temporal image pairs.

The deterministic mock backbone stands in for a pretrained ViT-style
encoder: a seeded linear patch embedding followed by ``num_layers`` mixing
layers (seeded pointwise linear + 3x3 mean smoothing), with the running
feature map snapshotted at each tap layer.  All weights derive from the
config seed and are never trained, so backbone parameters can never appear
in a gradient report.

An ``external:`` provider ingests precomputed per-layer features from a
named-tensor archive instead of computing them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, as_tensor
from .tensorio import load_archive, save_archive


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 14
    embed_dim: int = 768
    num_layers: int = 12
    tap_layers: tuple[int, ...] = (2, 5, 8, 11)
    seed: int = 0

    def __post_init__(self):
        taps = tuple(self.tap_layers)
        object.__setattr__(self, "tap_layers", taps)
        if self.patch_size < 1 or self.embed_dim < 1 or self.num_layers < 1:
            raise ValueError("patch_size, embed_dim and num_layers must be positive")
        if list(taps) != sorted(set(taps)):
            raise ValueError(f"tap_layers must be strictly increasing, got {taps}")
        if taps and taps[-1] >= self.num_layers:
            raise ValueError(
                f"tap_layers {taps} must all be < num_layers {self.num_layers}")


@dataclass
class RawFeatures:
    """Per-timestamp, per-tap-layer feature maps on one shared token grid."""
    tap_layers: tuple[int, ...]
    by_time: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)

    def get(self, t: int, layer: int) -> np.ndarray:
        return self.by_time[t][layer]

    @property
    def grid(self) -> tuple[int, int]:
        first = self.by_time[1][self.tap_layers[0]]
        return first.shape[1], first.shape[2]


class MockBackbone:
    """Seeded, frozen stand-in feature extractor.

    Immutable after construction; extraction is a pure function of the
    input image, so identical bi-temporal inputs yield identical features
    and swapping the pair swaps the outputs exactly.
    """

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p, c = cfg.patch_size, cfg.embed_dim
        fan_in = 3 * p * p
        self.patch_weight = rng.normal(size=(c, fan_in)) / np.sqrt(fan_in)
        self.patch_bias = 0.01 * rng.normal(size=c)
        self.mix_weights = [rng.normal(size=(c, c)) / np.sqrt(c)
                            for _ in range(cfg.num_layers)]
        self.mix_biases = [0.01 * rng.normal(size=c) for _ in range(cfg.num_layers)]
        self._calibrate(rng)

    def _calibrate(self, rng, grid: int = 8) -> None:
        # rescale each mixing layer against a seeded probe so tap features
        # keep unit RMS instead of decaying under repeated mean smoothing;
        # still a pure function of the seed, frozen after construction
        p = self.cfg.patch_size
        probe = rng.uniform(0.0, 1.0, size=(3, grid * p, grid * p))
        x = self.patch_embed(probe)
        for i in range(self.cfg.num_layers):
            y = np.einsum("dc,cgh->dgh", self.mix_weights[i], x)
            y = y + self.mix_biases[i][:, None, None]
            y = self._smooth3x3(y)
            gain = 1.0 / max(np.sqrt((y * y).mean()), 1e-12)
            self.mix_weights[i] *= gain
            self.mix_biases[i] *= gain
            x = y * gain

    def patch_embed(self, image: np.ndarray) -> np.ndarray:
        """Project each p x p x 3 patch to one embed_dim token."""
        image = as_tensor(image)
        p = self.cfg.patch_size
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"expected image of shape [3,H,W], got {image.shape}")
        _, h, w = image.shape
        if h % p or w % p:
            raise ShapeError(
                f"image size {h}x{w} must be a multiple of the patch size {p}")
        gh, gw = h // p, w // p
        # [3,H,W] -> [gh,gw, 3*p*p] with per-patch (channel, row, col) order
        patches = image.reshape(3, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
        patches = patches.reshape(gh, gw, 3 * p * p)
        tokens = patches @ self.patch_weight.T + self.patch_bias
        return np.ascontiguousarray(tokens.transpose(2, 0, 1))

    @staticmethod
    def _smooth3x3(x: np.ndarray) -> np.ndarray:
        # zero-padded 3x3 mean, fixed divisor 9
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros_like(x)
        for dy in range(3):
            for dx in range(3):
                out += xp[:, dy:dy + x.shape[1], dx:dx + x.shape[2]]
        return out / 9.0

    def _forward_one(self, image: np.ndarray) -> dict[int, np.ndarray]:
        x = self.patch_embed(image)
        taps = {}
        for i in range(self.cfg.num_layers):
            x = np.einsum("dc,cgh->dgh", self.mix_weights[i], x)
            x = x + self.mix_biases[i][:, None, None]
            x = self._smooth3x3(x)
            if i in self.cfg.tap_layers:
                taps[i] = x.copy()
        return taps

    def extract_features(self, image1: np.ndarray, image2: np.ndarray) -> RawFeatures:
        image1, image2 = as_tensor(image1), as_tensor(image2)
        if image1.shape != image2.shape:
            raise ShapeError(
                f"bi-temporal images differ in shape: {image1.shape} vs {image2.shape}")
        return RawFeatures(self.cfg.tap_layers,
                           {1: self._forward_one(image1), 2: self._forward_one(image2)})


class ExternalFeatures:
    """Precomputed-feature provider backed by one named-tensor archive.

    The archive holds entries ``t{1,2}.layer{i}`` for each tap layer; the
    manifest records the backbone config they were produced with.  Serves
    exactly the stored pair and validates the requested image grid against it.
    """

    def __init__(self, path: str):
        self.path = path
        tensors, manifest = load_archive(path)
        cfg = manifest.get("backbone", {})
        self.cfg = BackboneConfig(
            patch_size=cfg.get("patch_size", 14),
            embed_dim=cfg.get("embed_dim", tensors[next(iter(tensors))].shape[0]),
            num_layers=cfg.get("num_layers", 12),
            tap_layers=tuple(cfg.get("tap_layers", (2, 5, 8, 11))),
            seed=cfg.get("seed", 0),
        )
        self._features = RawFeatures(self.cfg.tap_layers, {1: {}, 2: {}})
        for t in (1, 2):
            for layer in self.cfg.tap_layers:
                self._features.by_time[t][layer] = tensors[f"t{t}.layer{layer}"]

    def extract_features(self, image1: np.ndarray, image2: np.ndarray) -> RawFeatures:
        if image1.shape != image2.shape:
            raise ShapeError("bi-temporal images differ in shape")
        p = self.cfg.patch_size
        expect = (image1.shape[1] // p, image1.shape[2] // p)
        if self._features.grid != expect:
            raise ShapeError(
                f"stored feature grid {self._features.grid} does not match "
                f"image grid {expect}")
        return self._features


def save_features(path, features: RawFeatures, cfg: BackboneConfig) -> None:
    """Write a RawFeatures bundle in the external-provider archive layout."""
    tensors = {}
    for t in (1, 2):
        for layer in features.tap_layers:
            tensors[f"t{t}.layer{layer}"] = features.get(t, layer)
    save_archive(path, tensors, {"backbone": {
        "patch_size": cfg.patch_size, "embed_dim": cfg.embed_dim,
        "num_layers": cfg.num_layers, "tap_layers": list(cfg.tap_layers),
        "seed": cfg.seed}})


def make_backbone(spec: str, cfg: BackboneConfig | None = None):
    """Build a provider from a selector string: ``mock:<seed>`` or ``external:<path>``."""
    kind, _, arg = spec.partition(":")
    if kind == "mock":
        base = cfg or BackboneConfig()
        seed = int(arg) if arg else base.seed
        return MockBackbone(BackboneConfig(
            patch_size=base.patch_size, embed_dim=base.embed_dim,
            num_layers=base.num_layers, tap_layers=base.tap_layers, seed=seed))
    if kind == "external":
        if not arg:
            raise ValueError("external backbone needs a path: external:<path>")
        return ExternalFeatures(arg)
    raise ValueError(f"unknown backbone selector {spec!r} (use mock:<seed> or external:<path>)")


__all__ = [
    "BackboneConfig", "RawFeatures", "MockBackbone",
    "ExternalFeatures", "save_features", "make_backbone",
]
