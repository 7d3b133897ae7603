"""Backend selection for the numeric kernels and the particle core.

The compiled extension is used when it was built; otherwise the pure-Python
twin is loaded.  Set ``DYNTREE_BACKEND=python`` to force the fallback.
Both backends expose the same names.
"""

import os

from . import _pycore as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("DYNTREE_BACKEND", "").lower() != "python":
    backend = compiled_backend
else:
    backend = python_backend

BACKEND = backend.NAME
REL_SS_TOL = python_backend.REL_SS_TOL
REL_FIT_TOL = python_backend.REL_FIT_TOL
COND_MAX = python_backend.COND_MAX
CONSTANT = python_backend.CONSTANT
LINEAR = python_backend.LINEAR
MULTINOMIAL = python_backend.MULTINOMIAL
LEAF = python_backend.LEAF

linear_slices = python_backend.linear_slices
stats_size = python_backend.stats_size

route = backend.route
residual_resample = backend.residual_resample
prefix_lml_constant = backend.prefix_lml_constant
prefix_lml_linear = backend.prefix_lml_linear
prefix_lml_multinomial = backend.prefix_lml_multinomial
gram_inverse = backend.gram_inverse
stats_batch = backend.stats_batch
stats_update = backend.stats_update
stats_merge = backend.stats_merge
stats_defined = backend.stats_defined
stats_lml = backend.stats_lml
log_predictive = backend.log_predictive
t_logpdf = backend.t_logpdf

Node = backend.Node
new_leaf = backend.new_leaf
new_internal = backend.new_internal
rebuild = backend.rebuild
route_path = backend.route_path
subtree_stats = backend.subtree_stats
subtree_rows = backend.subtree_rows
group_roots = backend.group_roots
weigh = backend.weigh
propagate = backend.propagate
