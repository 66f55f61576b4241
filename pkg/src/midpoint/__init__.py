"""Privacy-preserving rating collection for matrix-factorization recommenders.

The user-facing pieces are the midpoint obfuscation protocols in
:mod:`midpoint.protocol`; everything else either produces the analyst's
item profiles (:mod:`midpoint.factorization`), attacks the obfuscated
output (:mod:`midpoint.inference`) or measures both sides of the
privacy/accuracy tradeoff (:mod:`midpoint.evaluation`).
"""

__version__ = "0.1.0"
