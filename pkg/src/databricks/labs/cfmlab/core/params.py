import logging
from collections.abc import Iterator, Mapping, Sequence
from enum import Enum
from typing import Generic, TypeVar

import numpy as np

from databricks.labs.cfmlab.core.rng import RngHandle
from databricks.labs.cfmlab.errors import ConfigError

logger = logging.getLogger(__name__)

__all__ = [
    "Family",
    "LayerParams",
    "LossGradient",
    "ParameterPath",
    "PathNorm",
    "ThetaBlockGrad",
    "layer_direction",
    "path_axpy",
    "path_distance",
    "path_norm",
    "random_direction",
]


class Family(str, Enum):
    ATTENTION = "attention"
    MLP = "mlp"
    NEAREST = "nearest"

    @property
    def block_names(self) -> tuple[str, ...]:
        return _BLOCK_NAMES[self]

    @property
    def differentiable(self) -> bool:
        return self is not Family.NEAREST


_BLOCK_NAMES = {
    Family.ATTENTION: ("Q", "K", "V"),
    Family.MLP: ("W1", "W2", "b"),
    Family.NEAREST: ("A",),
}
_VECTOR_BLOCKS = frozenset({"b"})


def _block_shape(name: str, d: int) -> tuple[int, ...]:
    if name in _VECTOR_BLOCKS:
        return (d,)
    return (d, d)


class ParamBlocks:
    """Named parameter blocks of one layer, stored as read-only float64 arrays."""

    def __init__(self, family: Family | str, blocks: Mapping[str, np.ndarray]):
        self._family = Family(family)
        names = self._family.block_names
        if set(blocks) != set(names):
            msg = f"{self._family.value} expects blocks {names}, got {tuple(sorted(blocks))}"
            raise ConfigError(msg)
        d = np.shape(blocks[names[0]])[0]
        self._blocks: dict[str, np.ndarray] = {}
        for name in names:
            value = np.array(blocks[name], dtype=np.float64)
            if value.shape != _block_shape(name, d):
                msg = f"block {name} has shape {value.shape}, expected {_block_shape(name, d)}"
                raise ConfigError(msg)
            value.setflags(write=False)
            self._blocks[name] = value
        self._dimension = int(d)

    @classmethod
    def zeros(cls, family: Family | str, d: int):
        family = Family(family)
        return cls(family, {name: np.zeros(_block_shape(name, d)) for name in family.block_names})

    @classmethod
    def random(cls, family: Family | str, d: int, generator: np.random.Generator, scale: float):
        """Gaussian blocks, each rescaled to Frobenius norm ``scale``."""
        family = Family(family)
        blocks = {}
        for name in family.block_names:
            draw = generator.standard_normal(_block_shape(name, d))
            norm = np.linalg.norm(draw)
            blocks[name] = draw * (scale / norm) if norm > 0 else draw * 0.0
        return cls(family, blocks)

    @classmethod
    def from_flat(cls, family: Family | str, d: int, flat: np.ndarray):
        family = Family(family)
        blocks = {}
        offset = 0
        for name in family.block_names:
            shape = _block_shape(name, d)
            size = int(np.prod(shape))
            blocks[name] = np.asarray(flat[offset : offset + size]).reshape(shape)
            offset += size
        if offset != len(flat):
            msg = f"flat vector of length {len(flat)} does not match {family.value} blocks in d={d}"
            raise ConfigError(msg)
        return cls(family, blocks)

    @property
    def family(self) -> Family:
        return self._family

    @property
    def dimension(self) -> int:
        return self._dimension

    @property
    def names(self) -> tuple[str, ...]:
        return self._family.block_names

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.names:
            yield name, self._blocks[name]

    def size(self) -> int:
        return sum(block.size for block in self._blocks.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self._blocks[name].ravel() for name in self.names])

    def norm(self) -> float:
        """Euclidean norm of the flattened blocks."""
        return float(np.linalg.norm(self.flatten()))

    def block_norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(block)) for name, block in self.items()}

    def inner(self, other: "ParamBlocks") -> float:
        self._check_compatible(other)
        return float(sum(np.vdot(block, other[name]) for name, block in self.items()))

    def axpby(self, a: float, other: "ParamBlocks", b: float):
        """Returns ``b * self + a * other`` with the type of ``self``."""
        self._check_compatible(other)
        return type(self)(self._family, {name: b * block + a * other[name] for name, block in self.items()})

    def _check_compatible(self, other: "ParamBlocks"):
        if other.family is not self._family or other.dimension != self._dimension:
            msg = (
                f"incompatible blocks: {self._family.value}(d={self._dimension}) "
                f"vs {other.family.value}(d={other.dimension})"
            )
            raise ConfigError(msg)

    def __repr__(self):
        norms = ", ".join(f"|{name}|={value:.3g}" for name, value in self.block_norms().items())
        return f"{type(self).__name__}<{self._family.value}, d={self._dimension}, {norms}>"


class LayerParams(ParamBlocks):
    pass


class ThetaBlockGrad(ParamBlocks):
    pass


Blocks = TypeVar("Blocks", bound=ParamBlocks)


class PathNorm(str, Enum):
    L1 = "l1"
    LINF = "linf"


class BlockPath(Generic[Blocks]):
    """Piecewise-constant function of depth: block ``l`` occupies ``[l/L, (l+1)/L)``."""

    def __init__(self, blocks: Sequence[Blocks]):
        if len(blocks) == 0:
            msg = "a path needs at least one layer"
            raise ConfigError(msg)
        dimensions = {block.dimension for block in blocks}
        if len(dimensions) != 1:
            msg = f"all layers must share one dimension, got {sorted(dimensions)}"
            raise ConfigError(msg)
        self._blocks = tuple(blocks)

    @property
    def blocks(self) -> tuple[Blocks, ...]:
        return self._blocks

    @property
    def L(self) -> int:
        return len(self._blocks)

    @property
    def dimension(self) -> int:
        return self._blocks[0].dimension

    @property
    def schedule(self) -> tuple[Family, ...]:
        return tuple(block.family for block in self._blocks)

    def layer_norms(self) -> np.ndarray:
        return np.array([block.norm() for block in self._blocks])

    def flatten(self) -> np.ndarray:
        return np.concatenate([block.flatten() for block in self._blocks])

    def inner(self, other: "BlockPath") -> float:
        """L² inner product over depth, ``(1/L) Σ_l <a_l, b_l>``."""
        _check_schedule(self, other)
        return sum(a.inner(b) for a, b in zip(self._blocks, other.blocks, strict=True)) / self.L

    def l2_norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def __repr__(self):
        schedule = ",".join(family.value for family in self.schedule)
        return f"{type(self).__name__}<L={self.L}, d={self.dimension}, schedule={schedule}>"


class ParameterPath(BlockPath[LayerParams]):
    @property
    def layers(self) -> tuple[LayerParams, ...]:
        return self.blocks

    @classmethod
    def zeros(cls, schedule: Sequence[Family | str], d: int) -> "ParameterPath":
        return cls([LayerParams.zeros(family, d) for family in schedule])

    @classmethod
    def random(cls, schedule: Sequence[Family | str], d: int, rng: RngHandle, scale: float) -> "ParameterPath":
        generator = rng.generator()
        return cls([LayerParams.random(family, d, generator, scale) for family in schedule])

    def differentiable(self) -> bool:
        return all(family.differentiable for family in self.schedule)


class LossGradient(BlockPath[ThetaBlockGrad]):
    """Layer averages of the loss derivative with respect to the parameter path."""

    @classmethod
    def zeros_like(cls, path: BlockPath) -> "LossGradient":
        return cls([ThetaBlockGrad.zeros(family, path.dimension) for family in path.schedule])

    def pair(self, direction: BlockPath) -> float:
        """Directional derivative of the loss along a piecewise-constant direction."""
        return self.inner(direction)


def _check_schedule(a: BlockPath, b: BlockPath):
    if a.schedule != b.schedule or a.dimension != b.dimension:
        msg = f"schedule mismatch: {a!r} vs {b!r}"
        raise ConfigError(msg)


def path_axpy(a: float, g: BlockPath, b: float, theta: ParameterPath) -> ParameterPath:
    """Returns ``b * theta + a * g`` blockwise."""
    _check_schedule(g, theta)
    return ParameterPath([layer.axpby(a, block, b) for layer, block in zip(theta.layers, g.blocks, strict=True)])


def path_norm(theta: BlockPath, which: PathNorm | str) -> float:
    norms = theta.layer_norms()
    if PathNorm(which) is PathNorm.L1:
        return float(norms.sum() / theta.L)
    return float(norms.max())


def path_distance(a: BlockPath, b: BlockPath, which: PathNorm | str = PathNorm.LINF) -> float:
    _check_schedule(a, b)
    norms = np.array(
        [np.linalg.norm(x.flatten() - y.flatten()) for x, y in zip(a.blocks, b.blocks, strict=True)]
    )
    if PathNorm(which) is PathNorm.L1:
        return float(norms.sum() / a.L)
    return float(norms.max())


def layer_direction(theta: BlockPath, layer: int, rng: RngHandle) -> ParameterPath:
    """Gaussian direction of unit norm on layer ``layer``; every other block is zero."""
    if not 0 <= layer < theta.L:
        msg = f"layer must be in [0, {theta.L}), got {layer}"
        raise ConfigError(msg)
    layers = [LayerParams.zeros(block.family, block.dimension) for block in theta.blocks]
    block = theta.blocks[layer]
    flat = rng.generator().standard_normal(block.size())
    layers[layer] = LayerParams.from_flat(block.family, block.dimension, flat / np.linalg.norm(flat))
    return ParameterPath(layers)


def random_direction(theta: BlockPath, rng: RngHandle) -> ParameterPath:
    """Gaussian direction with the schedule of ``theta`` and unit L² path norm."""
    generator = rng.generator()
    layers = [
        LayerParams.from_flat(block.family, block.dimension, generator.standard_normal(block.size()))
        for block in theta.blocks
    ]
    direction = ParameterPath(layers)
    norm = direction.l2_norm()
    return path_axpy(0.0, direction, 1.0 / norm, direction)
