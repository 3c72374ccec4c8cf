"""Neural demand systems on the budget simplex.

KL-trained softmax share models with habit state, control-function IV and
economic regularity penalties, plus classical benchmarks, simulation DGPs and
welfare/elasticity tools.
"""

__version__ = "0.1.0"
