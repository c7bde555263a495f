"""Flow-guided correlation filter tracking toolkit.

Modules: ``ndkit`` (2-D DFT helpers), ``featext`` (patches and features),
``cflayer`` (differentiable correlation filter), ``flowwarp`` (flow and
warping), ``attention`` (spatial-temporal weighting), ``tracker`` (online
loop), ``traineval`` (synthetic data, training, metrics) and ``cli``.
"""

__version__ = "0.1.0"
