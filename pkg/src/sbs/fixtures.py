"""Layer-spec fixtures used by tests, demos and the CLI."""
from __future__ import annotations

from .config import LayerSpec

__all__ = ["resnet18_specs", "mlp_specs", "chain3_specs"]


def resnet18_specs(group_size: int = 16) -> list[LayerSpec]:
    """The 17 searched convolutions of ImageNet ResNet-18 plus its classifier.

    Shortcut projections are not searched.  The classifier's outputs are class
    logits, so it is a single non-prunable group.
    """
    specs = [LayerSpec.conv("conv1", 3, 64, 7, 112, group_size=group_size)]
    c_in = 64
    for stage, (width, hw) in enumerate([(64, 56), (128, 28), (256, 14), (512, 7)], start=1):
        for i in range(4):
            specs.append(LayerSpec.conv(f"layer{stage}.{i}", c_in, width, 3, hw, group_size=group_size))
            c_in = width
    specs.append(LayerSpec.linear("fc", 512, 1000, group_size=group_size, prunable=False))
    return specs


def mlp_specs(sizes: list[int], group_size: int = 4, prune_last: bool = False,
              fixed_first_last: int | None = None) -> list[LayerSpec]:
    """Specs of a fully connected chain ``sizes[0] -> ... -> sizes[-1]``."""
    n = len(sizes) - 1
    specs = []
    for i in range(n):
        last = i == n - 1
        fixed = fixed_first_last if (fixed_first_last and i in (0, n - 1)) else None
        specs.append(LayerSpec.linear(
            f"fc{i}", sizes[i], sizes[i + 1], group_size=group_size,
            prunable=prune_last or not last, fixed_bits=fixed))
    return specs


def chain3_specs() -> list[LayerSpec]:
    """Three-layer chain with uneven groups, for exhaustive gate-flip checks."""
    return [
        LayerSpec.linear("a", 6, 10, group_size=4),       # groups of 4, 4, 2
        LayerSpec.linear("b", 10, 8, group_size=4),
        LayerSpec.linear("c", 8, 3, group_size=2, prunable=False),
    ]
