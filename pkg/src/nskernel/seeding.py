"""Seed derivation.

Everything random descends from one integer root seed through
:class:`numpy.random.SeedSequence` spawn keys:

=====================  ==========================================
purpose                spawn key
=====================  ==========================================
simulated sequence i   ``(i,)``
lam_bar pilot run      ``(2**31,)``
train/test split       ``(2**31 + 1,)``
network init           ``(2**31 + 2,)``
epoch e batch order    ``(2**31 + 3, e)``
=====================  ==========================================
"""

import numpy as np

PILOT = 2 ** 31
SPLIT = 2 ** 31 + 1
INIT = 2 ** 31 + 2
SHUFFLE = 2 ** 31 + 3


def derive(seed, *key):
    """Child :class:`~numpy.random.SeedSequence` of ``seed`` with spawn key ``key``."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def rng(seed, *key):
    return np.random.default_rng(derive(seed, *key))
