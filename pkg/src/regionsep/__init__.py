"""Region-constrained multichannel speech separation workbench.

Subpackages cover the full pipeline: a small reverse-mode autodiff engine
(`autodiff`), shoebox-room impulse-response simulation (`acoustics`),
dataset synthesis (`dataset`), the triple-path masking separator
(`separator`), SI-SDR objectives and permutation analysis (`objectives`),
the training loop (`training`), and the command-line front end (`cli`).
"""

__version__ = "0.1.0"
