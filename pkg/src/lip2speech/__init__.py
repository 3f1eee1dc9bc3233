"""Lip-to-speech synthesis with separate acoustic (source) and semantic (filter) paths.

Submodules:

- ``audio``: waveform I/O, STFT, log-mel, F0 and energy analysis
- ``providers``: visual features, table G2P, stub timbre encoder
- ``units``: k-means speech-unit codebooks
- ``blocks``, ``linguistic``, ``acoustic``, ``decoder``, ``model``: the network
- ``training``: losses, optimizer schedule, checkpoints, training loop
- ``metrics``: objective evaluation metrics
- ``vocoder``: Griffin-Lim fallback vocoder
- ``pipeline`` and ``cli``: the prepare / train-units / train / synth / eval commands
"""

__version__ = "0.1.0"
