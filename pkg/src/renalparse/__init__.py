"""renalparse: kidney-parsing segmentation with a class-wise two-network ensemble."""

from renalparse.volgrid import ClassId, LabelMap, Volume

__version__ = "0.1.0"

__all__ = ["ClassId", "LabelMap", "Volume", "__version__"]
