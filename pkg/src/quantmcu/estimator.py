"""Scikit-learn style front end.

``QuantMCUPlanner.fit`` calibrates on a batch of inputs and derives the
mixed-precision plan; ``transform`` runs the fake-quantized network under
that plan and ``predict`` takes the argmax of the final map. The class
follows the sklearn estimator contract (``get_params``/``set_params``
via ``BaseEstimator``), so it composes with pipelines and grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import pipeline, refengine
from .netgraph import NetworkSpec, load_network
from .validation import check_fitted, check_input_batch


class QuantMCUPlanner(BaseEstimator, TransformerMixin):
    """Plan and simulate value-driven mixed-precision quantization.

    Parameters mirror the CLI defaults: ``phi`` is the outlier threshold,
    ``lam`` weighs entropy loss against BitOPs savings, ``bins`` sets the
    entropy histogram resolution, ``mem_limit`` is the per-pair memory
    budget in bytes (None = unconstrained), and ``weight_seed`` generates
    the synthetic weights when no explicit ``weights`` are supplied.
    """

    def __init__(self, net=None, weights=None, weight_seed=42,
                 phi=pipeline.DEFAULT_PHI, lam=pipeline.DEFAULT_LAMBDA,
                 bins=256, mem_limit=None, candidates=(8, 4, 2), b_last=8,
                 phi_baseline="int8", eq1_literal=False, strict_grid=False,
                 dynamic=False):
        self.net = net
        self.weights = weights
        self.weight_seed = weight_seed
        self.phi = phi
        self.lam = lam
        self.bins = bins
        self.mem_limit = mem_limit
        self.candidates = candidates
        self.b_last = b_last
        self.phi_baseline = phi_baseline
        self.eq1_literal = eq1_literal
        self.strict_grid = strict_grid
        self.dynamic = dynamic

    def _resolve_net(self) -> NetworkSpec:
        if isinstance(self.net, NetworkSpec):
            return self.net
        if isinstance(self.net, (str, bytes)) or hasattr(self.net, "__fspath__"):
            return load_network(self.net)
        raise ValueError("net must be a NetworkSpec or a path to a network file")

    def _plan_config(self) -> pipeline.PlanConfig:
        return pipeline.PlanConfig(
            phi=self.phi, lam=self.lam, bins=self.bins,
            mem_limit=self.mem_limit, candidates=tuple(self.candidates),
            b_last=self.b_last, phi_baseline=self.phi_baseline,
            eq1_literal=self.eq1_literal, strict_grid=self.strict_grid,
            dynamic=self.dynamic, seed=self.weight_seed,
        )

    def fit(self, X, y=None):
        """Calibrate on ``X`` (n_samples, H, W, C) and derive the plan."""
        net = self._resolve_net()
        batch = check_input_batch(net, X)
        self.net_ = net
        self.weights_ = (self.weights if self.weights is not None
                         else refengine.synthetic_weights(net, self.weight_seed))
        cal = refengine.calibration_from_arrays(list(batch))
        self.context_ = pipeline.PlanContext(net, self.weights_, cal,
                                             strict_grid=self.strict_grid)
        self.plan_ = pipeline._plan_on_context(self.context_, self._plan_config())
        self.report_ = pipeline.plan_to_dict(self.plan_)
        self.n_features_in_ = int(np.prod(net.input_shape))
        return self

    def transform(self, X):
        """Quantized final feature maps for ``X`` under the fitted plan."""
        check_fitted(self)
        batch = check_input_batch(self.net_, X)
        ctx = self.context_
        branch_bits = [bp.bits for bp in self.plan_.branches]
        outputs = []
        for sample in batch:
            # route the sample through the fitted context's simulator
            ctx_sample = self._simulate(ctx, sample, branch_bits)
            outputs.append(ctx_sample)
        return np.stack(outputs)

    def _simulate(self, ctx, sample, branch_bits):
        tiles = []
        for bi, branch in enumerate(ctx.branches):
            maps = refengine.forward_branch(
                ctx.net, ctx.weights, sample, branch,
                bits=list(branch_bits[bi]), ranges=ctx.branch_ranges[bi],
                quantized_weights=ctx.qweights,
            )
            tiles.append(maps[-1])
        s = ctx.depth
        fmap = refengine.stitch(
            ctx.branches, tiles, s,
            (ctx.shapes[s].height, ctx.shapes[s].width, ctx.shapes[s].channels),
        )
        return refengine.forward_tail(
            ctx.net, ctx.qweights, fmap, s,
            bits=list(self.plan_.post_stage_bits),
            ranges=[ctx.full_ranges[d] for d in range(s + 1, ctx.num_layers + 1)],
        )

    def predict(self, X):
        """Argmax over the final map; meaningful for classifier-shaped nets."""
        check_fitted(self)
        out = self.transform(X)
        return out.reshape(out.shape[0], -1).argmax(axis=1)

    def score_table_(self):
        """Serialized per-branch score tables of the fitted plan."""
        check_fitted(self)
        return [entry["score_table"] for entry in self.report_["branches"]]
