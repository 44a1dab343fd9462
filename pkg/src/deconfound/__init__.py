"""Adversarial deconfounding of speech emotion recognition.

Submodules: ``netcore`` (autodiff and layers), ``model``, ``features``,
``data``, ``train``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
