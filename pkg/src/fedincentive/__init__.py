"""Federated learning under label-flipping attacks, with a verify-then-pay incentive mechanism.

Modules map one-to-one onto the simulator's parts: ``datasets``, ``model``,
``adversary``, ``aggregators``, ``mechanism``, ``engine``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
