"""Transferable deployment of multi-device semantic edge inference.

Two-step adaptation of a device-encoder / server-decoder classifier to a new
deployment: class-weighted MMD domain adaptation under a simulated channel,
then confidence-masked knowledge distillation towards a new channel SNR.
"""

__version__ = "0.1.0"
