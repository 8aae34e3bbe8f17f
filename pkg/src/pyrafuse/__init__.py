"""pyrafuse: selective multi-scale attention fusion on a tiny autodiff engine.

Subpackages/modules:
  engine      tensors, recorded ops, reverse-mode grads, SDAT tensor files
  neck        channel/spatial layer-attention fusion with dependency refinement
  scenes      synthetic X-ray style scene generator and dataset I/O
  detector    anchor-free center detector (backbone, head, loss, decode, NMS)
  evaluation  COCO-style AP/AR for boxes and masks
  training    SGD trainer, checkpoints, metrics log
  cli         `pyrafuse` command line entry point
"""

__version__ = "0.1.0"
