"""Universal adversarial attacks and defenses for temporal-fusion detectors.

Desk-scale toolkit: a synthetic moving-shapes benchmark, a late-slow-fusion
temporal detector, universal noise/patch attacks, adversarial-training
defenses, and the evaluation harness tying them together.
"""

__version__ = "0.1.0"
