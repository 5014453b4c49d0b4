"""Adversarial attacks on spiking convolutional networks over event rasters.

Submodules:

- ``event_data``: events, rasters, file formats and the synthetic bar dataset
- ``snn_core``: the discrete-time integrate-and-fire network engine
- ``training``: BPTT, weight transfer, quantization and TRADES training
- ``attacks``: SpikeFool, discrete PGD variants and adversarial patches
- ``harness``: attack campaigns, metrics and reports
- ``cli``: the ``spikefool`` command
"""

from . import attacks, event_data, harness, snn_core, training

__version__ = "0.1.0"

__all__ = ["attacks", "event_data", "harness", "snn_core", "training", "__version__"]
