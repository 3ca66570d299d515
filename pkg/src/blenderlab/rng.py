"""Counter-based random streams.

A run has one 64-bit seed.  Every consumer asks for a generator by
``(stream, cell)``: ``stream`` names the purpose and ``cell`` indexes the
unit of parallel work (a parameter value, a pair block, ...).  The pair is
placed in the Philox counter, so draws do not depend on how work is split
across threads.

Stream assignment
-----------------
=====  ===========================================================
id     purpose
=====  ===========================================================
1      pair heads and tails for transversality scans
2      Monte Carlo parameter samples
3      Gibbs word draws (pushforward atoms)
4      uniform tails beyond the Gibbs depth
5      jittered parameter samples in the density integral
6      sampled checks (unipotency, containment, stratified bounds)
7      parameter scans (parameter draws)
8      random test systems in the distortion suites
=====  ===========================================================
"""

import numpy as np

PAIRS = 1
PARAMS = 2
ATOMS = 3
TAILS = 4
JITTER = 5
CHECKS = 6
SCAN = 7
SYSTEMS = 8

_MASK64 = (1 << 64) - 1


def stream(seed: int, stream_id: int, cell: int = 0) -> np.random.Generator:
    """Generator for one ``(stream, cell)`` slot of a run seed."""
    seed = int(seed) & _MASK64
    bitgen = np.random.Philox(key=seed, counter=[0, 0, int(cell) & _MASK64, int(stream_id) & _MASK64])
    return np.random.Generator(bitgen)
