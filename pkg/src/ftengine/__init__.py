"""Two-stage transfer-learning engine for VGG-style convnets.

Library layout:
    tensor      dense tensors, layer kernels, tape-based reverse-mode autodiff
    network     layer/network types, backbone builder, model surgery, freezing
    checkpoint  bit-exact binary weight snapshots (FTW1 format)
    optim       SGD-with-momentum and Adagrad with per-parameter slots
    data        PPM ingestion, preprocessing, augmentation, batching
    synthetic   seeded generator for similar-class desk-scale datasets
    training    pretrain / fine-tune loops, evaluation, strategy advisor
    reports     delimited prediction/history reports plus rendered figures
    cli         command-line front end
"""

__version__ = "0.1.0"
