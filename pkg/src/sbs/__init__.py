"""Single-path bit sharing: joint mixed-precision quantization and group pruning search."""
from .config import CompressionConfig, LayerConfig, LayerSpec
from .quantizer import BitLadder

__version__ = "0.1.0"

__all__ = ["BitLadder", "CompressionConfig", "LayerConfig", "LayerSpec"]
