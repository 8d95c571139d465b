"""deepckit: hybrid model/data predictive control at desk scale.

Subpackages follow the processing pipeline: ``trajkit`` (signals and Hankel
algebra), ``plant`` (triple-mass ground truth), ``ambiguity`` (empirical
distributions and Wasserstein balls), ``qpcore`` (epigraph scenario-program
solver), ``controllers`` (DeePC baseline, distributionally robust variant,
exact-model oracle), ``bench`` (closed-loop experiments and metrics) and
``cli`` (command-line entry point).
"""

__version__ = "0.1.0"
