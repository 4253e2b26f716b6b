"""AoII-minimizing transmission policies for slotted ALOHA sensor networks.

Modules: ``chain`` (truncated Markov chain of one sensor), ``bound`` (upper
bound on the average AoII), ``optimizer`` (penalized gradient descent),
``pipeline`` (threshold start plus descent), ``simulator`` (N-sensor Monte
Carlo), ``io`` and ``cli`` (files and command line), ``checks``.
"""

__version__ = "0.1.0"
