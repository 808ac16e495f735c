"""Spatiotemporal sampling network for video object detection, in numpy.

Modules:
    tensor      reverse-mode autodiff on dense float arrays
    conv        conv2d, deformable conv2d and bilinear sampling
    kernels     numba / numpy deformable im2col kernels (``STSN_DISABLE_NUMBA=1``)
    model       backbone, sampling blocks, aggregation and detection head
    synthvid    synthetic degraded video clips and their on-disk format
    metrics     IoU, NMS and mAP@0.5
    train       detection loss, momentum SGD, training loop
    evaluate    evaluation and the temporal ablations
    experiment  desk-scale SSN vs STSN experiment
    checkpoint  binary checkpoints
    config      YAML run configuration
    cli         ``stsn`` command
"""

__version__ = "0.1.0"
