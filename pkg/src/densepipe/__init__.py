"""DenseNet-style image classification with autodiff, Grad-CAM and a CLI.

A numpy implementation of a dense-block CNN pipeline for binary sex
classification of grayscale dental radiographs: tensors and layer ops,
model graphs, training with early stopping and transfer, data loading,
metrics, Grad-CAM explanations and the ``densepipe`` command.
"""

__version__ = "0.1.0"
