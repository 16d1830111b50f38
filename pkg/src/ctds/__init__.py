"""Continuously tempered diffusion samplers in numpy.

Modules: ``diffcore`` (networks with exact input derivatives), ``energies``
(sources, targets, paths), ``tempering`` (the temperature coordinate),
``models``, ``dynamics`` (proposal integrators), ``training``,
``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
