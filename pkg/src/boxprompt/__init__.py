"""boxprompt: anchor-based detection over frozen encoder features with
automatic box-prompt handoff to a mask decoder, plus the evaluation stack
(centroid F1, AP@0.5, panoptic quality, dice) for nuclei-style instance
segmentation."""

__version__ = "0.1.0"
