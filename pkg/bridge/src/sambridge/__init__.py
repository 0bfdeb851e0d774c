"""sambridge: runs a frozen pretrained ViT-B encoder and box-prompted mask
decoder behind the detection pipeline's file interfaces (embedding archives,
prompt JSON, TSR1 masks)."""

from .bridge import decode_masks, export_embeddings
from .model import FrozenSam, MissingWeights, build_model

__all__ = ["FrozenSam", "MissingWeights", "build_model", "decode_masks", "export_embeddings"]
__version__ = "0.1.0"
