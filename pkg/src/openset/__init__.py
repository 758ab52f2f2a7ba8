"""Multi-task open-set recognition with extreme-value tail rejection.

A shared encoder feeds a classifier and a decoder trained jointly; the tail
of the training reconstruction errors is modeled with a Generalized Pareto
distribution, and test inputs whose errors fall deep into that tail are
rejected as unknown classes.
"""

__version__ = "0.1.0"
