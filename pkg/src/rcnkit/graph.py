"""The RefineContourNet graph: residual backbone, deepest-first refinement path.

Refinement runs from the coarsest backbone features to the finest.  Each
level passes its backbone features through residual conv units (RCU), fuses
them with the coarser level's output (multi-resolution fusion, MRF), gathers
context with chained residual pooling (CRP) and adapts once more with RCUs.
A last fusion adds an RCU path over the raw image before a single-channel
sigmoid head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import (
    DTYPE,
    ParameterStore,
    ShapeError,
    Tensor,
    add,
    channel_affine,
    conv2d,
    init_conv,
    max_pool,
    no_grad,
    relu,
    sigmoid,
    upsample_bilinear,
)

# per-channel normalisation for images scaled to [0, 1]
IMAGE_MEAN = (0.5, 0.5, 0.5)
IMAGE_STD = (0.25, 0.25, 0.25)


class SpecError(ValueError):
    """A network description violates its own wiring rules."""


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activations after {layer}")
        self.layer = layer


@dataclass(frozen=True)
class StageSpec:
    num_blocks: int
    channels: int
    stride: int = 2


@dataclass(frozen=True)
class BackboneSpec:
    stem_channels: int = 16
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = False
    stages: tuple[StageSpec, ...] = (
        StageSpec(2, 16),
        StageSpec(2, 32),
        StageSpec(2, 64),
        StageSpec(2, 128),
    )

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise SpecError(f"backbone needs 4 stages, got {len(self.stages)}")
        factor = self.stem_stride * (2 if self.stem_pool else 1)
        prev = self.stem_channels
        for i, st in enumerate(self.stages, start=1):
            factor *= st.stride
            if factor != 2 ** (i + 1):
                raise SpecError(f"stage {i} sits at 1/{factor} resolution, expected 1/{2 ** (i + 1)}")
            if st.num_blocks < 1:
                raise SpecError(f"stage {i} has no blocks")
            if st.channels < prev:
                raise SpecError(f"stage {i} narrows channels from {prev} to {st.channels}")
            prev = st.channels


@dataclass(frozen=True)
class LevelSpec:
    fused_channels: int
    rcu_count_in: int = 2
    crp_pool_blocks: int = 2
    rcu_count_out: int = 1


@dataclass(frozen=True)
class RefinePathSpec:
    """Refinement levels indexed shallow (1/4) to deep (1/32)."""

    levels: tuple[LevelSpec, ...] = (LevelSpec(32), LevelSpec(32), LevelSpec(32), LevelSpec(32))


@dataclass(frozen=True)
class NetworkSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    path: RefinePathSpec = field(default_factory=RefinePathSpec)
    extra_image_path_rcus: int = 3
    image_fused_channels: int = 16
    output_scale: str = "half"
    head_kernel: int = 3

    def validate(self) -> None:
        self.backbone.validate()
        levels = self.path.levels
        if len(levels) != len(self.backbone.stages):
            raise SpecError(f"{len(levels)} refinement levels for {len(self.backbone.stages)} backbone stages")
        for k, lv in enumerate(levels, start=1):
            if lv.fused_channels < 1:
                raise SpecError(f"level {k}: fused width must be positive, got {lv.fused_channels}")
            if lv.crp_pool_blocks < 1:
                raise SpecError(f"level {k}: CRP needs at least one pooling block")
            if lv.rcu_count_in < 0 or lv.rcu_count_out < 0:
                raise SpecError(f"level {k}: negative RCU count")
        if self.image_fused_channels < 1:
            raise SpecError("image path fused width must be positive")
        if self.extra_image_path_rcus < 0:
            raise SpecError("image path RCU count must be nonnegative")
        if self.output_scale not in ("half", "full"):
            raise SpecError(f"output_scale must be 'half' or 'full', got {self.output_scale!r}")

    # plain-text key = value form

    def to_config(self) -> dict[str, str]:
        bb, lv = self.backbone, self.path.levels
        join = lambda xs: ",".join(str(x) for x in xs)  # noqa: E731
        return {
            "backbone.stem_channels": str(bb.stem_channels),
            "backbone.stem_kernel": str(bb.stem_kernel),
            "backbone.stem_stride": str(bb.stem_stride),
            "backbone.stem_pool": str(bb.stem_pool).lower(),
            "backbone.stage_blocks": join(s.num_blocks for s in bb.stages),
            "backbone.stage_channels": join(s.channels for s in bb.stages),
            "backbone.stage_strides": join(s.stride for s in bb.stages),
            "path.fused_channels": join(l.fused_channels for l in lv),
            "path.rcu_in": join(l.rcu_count_in for l in lv),
            "path.crp_blocks": join(l.crp_pool_blocks for l in lv),
            "path.rcu_out": join(l.rcu_count_out for l in lv),
            "image_path.rcus": str(self.extra_image_path_rcus),
            "image_path.fused_channels": str(self.image_fused_channels),
            "output_scale": self.output_scale,
            "head_kernel": str(self.head_kernel),
        }

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> NetworkSpec:
        base = cls()
        d = base.to_config()
        unknown = set(cfg) - set(d)
        if unknown:
            raise SpecError(f"unknown network keys: {', '.join(sorted(unknown))}")
        d.update(cfg)
        ints = lambda key: [int(v) for v in d[key].split(",")]  # noqa: E731
        try:
            blocks, chans, strides = ints("backbone.stage_blocks"), ints("backbone.stage_channels"), ints("backbone.stage_strides")
            fused, rin, crp, rout = ints("path.fused_channels"), ints("path.rcu_in"), ints("path.crp_blocks"), ints("path.rcu_out")
            if not (len(blocks) == len(chans) == len(strides)):
                raise SpecError("backbone stage lists differ in length")
            if not (len(fused) == len(rin) == len(crp) == len(rout)):
                raise SpecError("refinement level lists differ in length")
            spec = cls(
                backbone=BackboneSpec(
                    stem_channels=int(d["backbone.stem_channels"]),
                    stem_kernel=int(d["backbone.stem_kernel"]),
                    stem_stride=int(d["backbone.stem_stride"]),
                    stem_pool=d["backbone.stem_pool"].strip().lower() in ("1", "true", "yes"),
                    stages=tuple(StageSpec(b, c, s) for b, c, s in zip(blocks, chans, strides)),
                ),
                path=RefinePathSpec(tuple(LevelSpec(f, a, b, c) for f, a, b, c in zip(fused, rin, crp, rout))),
                extra_image_path_rcus=int(d["image_path.rcus"]),
                image_fused_channels=int(d["image_path.fused_channels"]),
                output_scale=d["output_scale"].strip(),
                head_kernel=int(d["head_kernel"]),
            )
        except ValueError as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"malformed network config: {exc}") from exc
        spec.validate()
        return spec


def desk_spec(widths=(16, 32, 64, 128), fused=32, blocks=2, output_scale="half") -> NetworkSpec:
    """The ResNet-18-style desk-scale network."""
    return NetworkSpec(
        backbone=BackboneSpec(stem_channels=widths[0], stages=tuple(StageSpec(blocks, w) for w in widths)),
        path=RefinePathSpec(tuple(LevelSpec(fused) for _ in widths)),
        output_scale=output_scale,
    )


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------


def _conv(store: ParameterStore, prefix: str, x: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    w = store[prefix + ".weight"]
    b = store.get(prefix + ".bias")
    k = w.shape[2]
    return conv2d(x, w, b, stride=stride, padding=k // 2 if padding is None else padding)


def _affine(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    return channel_affine(x, store[prefix + ".scale"], store[prefix + ".shift"])


def residual_block(x: Tensor, store: ParameterStore, prefix: str, stride: int = 1) -> Tensor:
    """Basic residual block ``relu(F(x) + shortcut(x))``.

    ``F`` is conv3x3(stride)-affine-relu-conv3x3-affine.  A 1x1 projection
    shortcut is used when ``prefix.proj`` parameters exist.
    """
    has_proj = prefix + ".proj.weight" in store
    out_ch = store[prefix + ".conv1.weight"].shape[0]
    if not has_proj and (stride != 1 or x.shape[1] != out_ch):
        raise ShapeError(
            f"{prefix}: identity shortcut cannot map {x.shape[1]} channels at stride {stride} to {out_ch}",
            dim="channels",
        )
    h = relu(_affine(store, prefix + ".bn1", _conv(store, prefix + ".conv1", x, stride)))
    h = _affine(store, prefix + ".bn2", _conv(store, prefix + ".conv2", h))
    if has_proj:
        sc = _affine(store, prefix + ".proj_bn", _conv(store, prefix + ".proj", x, stride, padding=0))
    else:
        sc = x
    return relu(add(h, sc))


def rcu_forward(x: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    """Residual conv unit: ``x + conv(relu(conv(relu(x))))``, 3x3 convs."""
    width = store[prefix + ".conv1.weight"].shape[1]
    if x.shape[1] != width:
        raise ShapeError(f"{prefix}: input has {x.shape[1]} channels, unit width is {width}", dim="channels")
    h = _conv(store, prefix + ".conv2", relu(_conv(store, prefix + ".conv1", relu(x))))
    return add(x, h)


def mrf_forward(high: Tensor | None, low: Tensor, store: ParameterStore, prefix: str, fused_channels: int | None) -> Tensor:
    """Adapt both inputs to ``fused_channels``, upsample ``high``, and sum.

    ``high`` may be ``None`` for the deepest level, which only adapts.
    """
    if fused_channels is None:
        raise SpecError(f"{prefix}: fused width is undeclared")
    out = _conv(store, prefix + ".adapt_low", low)
    if out.shape[1] != fused_channels:
        raise ShapeError(f"{prefix}: adapt conv gives {out.shape[1]} channels, declared {fused_channels}", dim="channels")
    if high is None:
        return out
    if high.shape[2] > low.shape[2] or high.shape[3] > low.shape[3]:
        raise ShapeError(f"{prefix}: high-level input {high.shape[2:]} is larger than low-level {low.shape[2:]}", dim="height")
    h = _conv(store, prefix + ".adapt_high", high)
    h = upsample_bilinear(h, low.shape[2], low.shape[3])
    return add(h, out)


def crp_forward(x: Tensor, store: ParameterStore, prefix: str, pool_blocks: int) -> Tensor:
    """Chained residual pooling; every chain stage is added to the input."""
    if pool_blocks < 1:
        raise SpecError(f"{prefix}: pool_blocks must be >= 1")
    running = x
    acc = x
    for i in range(pool_blocks):
        running = _conv(store, f"{prefix}.conv{i}", max_pool(running, 5, 1, 2))
        acc = add(acc, running)
    return acc


# --------------------------------------------------------------------------
# parameter layout
# --------------------------------------------------------------------------


def parameter_shapes(spec: NetworkSpec) -> dict[str, tuple[int, int, int, int]]:
    """Every learned tensor the graph declares, by hierarchical name."""
    spec.validate()
    shapes: dict[str, tuple[int, int, int, int]] = {}

    def conv(name: str, o: int, i: int, k: int, bias: bool) -> None:
        shapes[name + ".weight"] = (o, i, k, k)
        if bias:
            shapes[name + ".bias"] = (1, o, 1, 1)

    def affine(name: str, c: int) -> None:
        shapes[name + ".scale"] = (1, c, 1, 1)
        shapes[name + ".shift"] = (1, c, 1, 1)

    bb = spec.backbone
    conv("backbone.stem.conv", bb.stem_channels, 3, bb.stem_kernel, False)
    affine("backbone.stem.bn", bb.stem_channels)
    cin = bb.stem_channels
    for s, st in enumerate(bb.stages, start=1):
        for b in range(st.num_blocks):
            p = f"backbone.stage{s}.block{b}"
            stride = st.stride if b == 0 else 1
            conv(p + ".conv1", st.channels, cin, 3, False)
            affine(p + ".bn1", st.channels)
            conv(p + ".conv2", st.channels, st.channels, 3, False)
            affine(p + ".bn2", st.channels)
            if stride != 1 or cin != st.channels:
                conv(p + ".proj", st.channels, cin, 1, False)
                affine(p + ".proj_bn", st.channels)
            cin = st.channels

    def rcu(name: str, c: int) -> None:
        conv(name + ".conv1", c, c, 3, True)
        conv(name + ".conv2", c, c, 3, True)

    levels = spec.path.levels
    for k in range(len(levels), 0, -1):
        lv = levels[k - 1]
        c = bb.stages[k - 1].channels
        p = f"refine{k}"
        for r in range(lv.rcu_count_in):
            rcu(f"{p}.rcu_in{r}", c)
        conv(p + ".mrf.adapt_low", lv.fused_channels, c, 3, True)
        if k < len(levels):
            conv(p + ".mrf.adapt_high", lv.fused_channels, levels[k].fused_channels, 3, True)
        for i in range(lv.crp_pool_blocks):
            conv(f"{p}.crp.conv{i}", lv.fused_channels, lv.fused_channels, 3, False)
        for r in range(lv.rcu_count_out):
            rcu(f"{p}.rcu_out{r}", lv.fused_channels)
    for r in range(spec.extra_image_path_rcus):
        rcu(f"image_path.rcu{r}", 3)
    conv("image_path.mrf.adapt_low", spec.image_fused_channels, 3, 3, True)
    conv("image_path.mrf.adapt_high", spec.image_fused_channels, levels[0].fused_channels, 3, True)
    conv("head.conv", 1, spec.image_fused_channels, spec.head_kernel, True)
    return shapes


def init_parameters(spec: NetworkSpec, seed: int = 0) -> ParameterStore:
    """He-normal conv weights, zero biases, unit affine scales.

    Every residual branch starts closed: the last backbone affine scale, the
    second RCU conv and the CRP convs are zero, so blocks begin as their
    shortcut.  MRF adapt convs are scaled by 1/sqrt(2) since two of them are
    summed.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in sorted(parameter_shapes(spec).items()):
        if name.endswith(".weight"):
            o, i, k, _ = shape
            value = init_conv(rng, o, i, k)
            if _closes_branch(name):
                value = np.zeros(shape, DTYPE)
            elif ".mrf.adapt_" in name:
                value *= DTYPE(np.sqrt(0.5))
        elif name.endswith(".scale"):
            value = np.zeros(shape, DTYPE) if name.endswith("bn2.scale") else np.ones(shape, DTYPE)
        else:
            value = np.zeros(shape, DTYPE)
        store.add(name, Tensor(value))
    return store


def _closes_branch(name: str) -> bool:
    return (".rcu" in name and name.endswith("conv2.weight")) or ".crp.conv" in name


# --------------------------------------------------------------------------
# executable graph
# --------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Intermediate tensors from one forward pass, for wiring checks."""

    backbone: list[Tensor] = field(default_factory=list)
    levels: dict[int, Tensor] = field(default_factory=dict)
    image_path: Tensor | None = None
    logits: Tensor | None = None


class RCNGraph:
    """Callable network: ``graph(store, image)`` returns the probability map.

    The map is at half the input resolution when ``spec.output_scale`` is
    ``"half"``.
    """

    def __init__(self, spec: NetworkSpec, check_finite: bool = False):
        spec.validate()
        self.spec = spec
        self.check_finite = check_finite
        self._names = frozenset(parameter_shapes(spec))

    def check_store(self, store: ParameterStore) -> None:
        missing = sorted(self._names - set(store))
        if missing:
            raise KeyError(f"store lacks {len(missing)} parameters, e.g. {missing[0]}")
        for name, shape in parameter_shapes(self.spec).items():
            if store[name].shape != shape:
                raise ShapeError(f"{name}: shape {store[name].shape}, expected {shape}", dim=name)

    def _guard(self, t: Tensor, layer: str) -> Tensor:
        if self.check_finite and not np.isfinite(t.data).all():
            raise NonFiniteError(layer)
        return t

    def forward(self, store: ParameterStore, image: Tensor, trace: ForwardTrace | None = None) -> Tensor:
        spec = self.spec
        bb = spec.backbone
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if image.shape[1] != 3:
            raise ShapeError(f"image must have 3 channels, got {image.shape[1]}", dim="channels")
        x = _conv(store, "backbone.stem.conv", image, bb.stem_stride)
        x = relu(_affine(store, "backbone.stem.bn", x))
        if bb.stem_pool:
            x = max_pool(x, 3, 2, 1)
        feats = []
        for s, st in enumerate(bb.stages, start=1):
            for b in range(st.num_blocks):
                x = residual_block(x, store, f"backbone.stage{s}.block{b}", st.stride if b == 0 else 1)
            feats.append(self._guard(x, f"backbone.stage{s}"))
        if trace is not None:
            trace.backbone = feats

        levels = spec.path.levels
        out = None
        for k in range(len(levels), 0, -1):
            lv = levels[k - 1]
            p = f"refine{k}"
            h = feats[k - 1]
            for r in range(lv.rcu_count_in):
                h = rcu_forward(h, store, f"{p}.rcu_in{r}")
            h = self._guard(mrf_forward(out, h, store, p + ".mrf", lv.fused_channels), p)
            h = crp_forward(relu(h), store, p + ".crp", lv.crp_pool_blocks)
            for r in range(lv.rcu_count_out):
                h = rcu_forward(h, store, f"{p}.rcu_out{r}")
            out = self._guard(h, p)
            if trace is not None:
                trace.levels[k] = out

        img = image
        if spec.output_scale == "half":
            img = Tensor(_half(image.data), dtype=image.dtype)
        for r in range(spec.extra_image_path_rcus):
            img = rcu_forward(img, store, f"image_path.rcu{r}")
        fused = mrf_forward(out, img, store, "image_path.mrf", spec.image_fused_channels)
        fused = self._guard(fused, "image_path.mrf")
        logits = _conv(store, "head.conv", relu(fused))
        logits = self._guard(logits, "head.conv")
        if trace is not None:
            trace.image_path = img
            trace.logits = logits
        return sigmoid(logits)

    __call__ = forward

    def predict(self, store: ParameterStore, image: Tensor) -> np.ndarray:
        """Probability maps (N, H, W) at input resolution, no tape recorded."""
        if not isinstance(image, Tensor):
            image = Tensor(image)
        with no_grad():
            prob = self.forward(store, image)
            if prob.shape[2:] != image.shape[2:]:
                prob = upsample_bilinear(prob, image.shape[2], image.shape[3])
        if not np.isfinite(prob.data).all():
            raise NonFiniteError("output")
        return prob.data[:, 0]


def build_rcn(spec: NetworkSpec, seed: int = 0) -> tuple[ParameterStore, RCNGraph]:
    graph = RCNGraph(spec)
    return init_parameters(spec, seed), graph


def _half(x: np.ndarray) -> np.ndarray:
    """2x2 mean downsampling; odd trailing rows/cols are averaged in."""
    n, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)), mode="edge")
    return xp.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5)).astype(x.dtype)


def normalize_image(image: np.ndarray, mean=IMAGE_MEAN, std=IMAGE_STD) -> np.ndarray:
    """uint8 (H, W, 3) or float (H, W, 3) in [0, 1] to a normalised (1, 3, H, W) array."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(DTYPE) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    arr = (arr.astype(DTYPE) - np.asarray(mean, DTYPE)) / np.asarray(std, DTYPE)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)[None])


def read_spec(path: str | Path) -> NetworkSpec:
    from .config import read_config

    return NetworkSpec.from_config(read_config(path))


def with_scale(spec: NetworkSpec, output_scale: str) -> NetworkSpec:
    return replace(spec, output_scale=output_scale)
