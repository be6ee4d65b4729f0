"""Gradient verification suites shared by the CLI and the test suite.

Two layers of checking:

* every differentiable tensor op against central differences on small
  random inputs (elementwise finite differences over all inputs);
* the end-to-end contrastive loss at tiny dims (4x4 BEV grid, 8 channels,
  4 windows), finite-differenced against a probe subset of parameters
  spanning every component -- full elementwise differencing over all
  parameters would take hours in pure Python and adds nothing: any broken
  backward rule already fails through the probes it feeds.
"""

from __future__ import annotations

import numpy as np

from w2wbev import retrieval, tensor as T, world
from w2wbev.config import RunConfig
from w2wbev.model import CrossViewModel
from w2wbev.tensor import GradCheckReport, Tensor, grad_check

OP_CASES = {
    "matmul": lambda rng: (
        lambda a, b: T.matmul(a, b),
        [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
    ),
    "softmax": lambda rng: (
        lambda x: T.softmax(x, axis=1),
        [rng.standard_normal((3, 5))],
    ),
    "log_softmax": lambda rng: (
        lambda x: T.log_softmax(x, axis=0),
        [rng.standard_normal((4, 3))],
    ),
    "conv2d_zero": lambda rng: (
        lambda x, k: T.conv2d(x, k, stride=2, padding_mode="zero"),
        [rng.standard_normal((5, 6, 2)), rng.standard_normal((3, 3, 2, 2))],
    ),
    "conv2d_circular": lambda rng: (
        lambda x, k: T.conv2d(x, k, stride=1, padding_mode="circular_width"),
        [rng.standard_normal((4, 6, 2)), rng.standard_normal((3, 3, 2, 1))],
    ),
    "pool_max": lambda rng: (
        lambda x: T.pool(x, "max", axis=0),
        [rng.standard_normal((4, 3, 2))],
    ),
    "pool_avg": lambda rng: (
        lambda x: T.pool(x, "avg", window=(2, 2)),
        [rng.standard_normal((4, 6, 2))],
    ),
    "pool_global_avg": lambda rng: (
        lambda x: T.pool(x, "global_avg"),
        [rng.standard_normal((3, 4))],
    ),
    "upsample2x": lambda rng: (
        lambda x: T.upsample2x(x),
        [rng.standard_normal((3, 4, 2))],
    ),
    "linear": lambda rng: (
        lambda x, w, b: T.linear(x, w, b),
        [rng.standard_normal((4, 3)), rng.standard_normal((3, 5)),
         rng.standard_normal(5)],
    ),
    "layernorm": lambda rng: (
        lambda x, g, b: T.layernorm(x, g, b),
        [rng.standard_normal((4, 6)), rng.standard_normal(6),
         rng.standard_normal(6)],
    ),
    "l2_normalize": lambda rng: (
        lambda x: T.l2_normalize(x),
        [rng.standard_normal(7)],
    ),
    "bilinear_resize": lambda rng: (
        lambda x: T.bilinear_resize(x, 5, 3),
        [rng.standard_normal((3, 6, 2))],
    ),
    "relu": lambda rng: (
        lambda x: T.relu(x),
        [rng.standard_normal((4, 4)) + 0.05],   # keep away from the kink
    ),
    "concat": lambda rng: (
        lambda a, b: T.concat([a, b], axis=1),
        [rng.standard_normal((3, 2)), rng.standard_normal((3, 4))],
    ),
    "slice": lambda rng: (
        lambda x: x[1:3, ::2],
        [rng.standard_normal((4, 6))],
    ),
    "infonce": lambda rng: (
        lambda g, a: retrieval.infonce(g, a, 0.5),
        [rng.standard_normal((3, 5)), rng.standard_normal((3, 5))],
    ),
}

# one parameter tensor per component of the end-to-end pipeline
END_TO_END_PROBES = (
    "ground.stage2.conv1.bias",
    "ground.lateral4.kernel",
    "aerial.stage1.conv2.bias",
    "bev.depth.weight",
    "bev.depth.bias",
    "enc0.cross.wq",
    "enc0.cross.wv",
    "enc0.self.wo",
    "enc0.ffn.b1",
    "enc0.ffn.ln.gain",
    "embed.ground.weight",
    "embed.aerial.bias",
)


def run_op_suite(num_seeds: int = 20, h: float = 1e-4,
                 tol: float = 1e-4) -> list[GradCheckReport]:
    """One aggregated report per op: worst relative error over the seeds."""
    reports = []
    for name in sorted(OP_CASES):
        worst = GradCheckReport(name=name, max_rel_err=0.0, h=h, tol=tol)
        for seed in range(num_seeds):
            rng = np.random.default_rng(1000 + seed)
            closure, arrays = OP_CASES[name](rng)
            inputs = [Tensor(a, requires_grad=True, dtype=np.float64)
                      for a in arrays]
            rep = grad_check(closure, inputs, h=h, tol=tol, name=name)
            worst.finite = worst.finite and rep.finite
            worst.max_rel_err = max(worst.max_rel_err, rep.max_rel_err
                                    if rep.finite else float("inf"))
        reports.append(worst)
    return reports


def tiny_config() -> RunConfig:
    """End-to-end verification dims: 4x4 grid, 8 channels, 4 windows."""
    return RunConfig(
        c_model=8, depth_bins=4, grid_h=4, grid_w=4, n_windows=4,
        num_blocks=1, num_heads=4, ffn_expansion=4, embed_dim=8,
        temperature=0.2, pano_h=16, pano_w=64, aerial_size=16,
        fov=360.0, batch_size=2,
    ).validate()


def run_end_to_end(num_seeds: int = 20, h: float = 1e-4,
                   tol: float = 1e-4) -> GradCheckReport:
    """Contrastive loss over two rendered pairs vs central differences.

    The checked inputs are the END_TO_END_PROBES parameter tensors; they
    are temporarily swapped into the registry for each evaluation.
    """
    worst = GradCheckReport(name="end_to_end_loss", max_rel_err=0.0, h=h, tol=tol)
    for seed in range(num_seeds):
        cfg = tiny_config().replace(seed=seed)
        model = CrossViewModel(cfg, dtype=np.float64)
        panos, aerials = [], []
        for i in range(2):
            scene = world.generate_scene(world.scene_seed_for(seed, i), k=4)
            panos.append(world.render_pano(scene, (cfg.pano_h, cfg.pano_w)))
            aerials.append(world.render_aerial(scene, cfg.aerial_size))
        names = [n for n in END_TO_END_PROBES if n in model.params]
        originals = [model.params[n] for n in names]

        def closure(*probes):
            for n, p in zip(names, probes):
                model.params.replace(n, p)
            g = T.stack([model.ground_embedding(p) for p in panos], axis=0)
            a = T.stack([model.aerial_embedding(p) for p in aerials], axis=0)
            return retrieval.infonce(g, a, cfg.temperature)

        try:
            rep = grad_check(closure, originals, h=h, tol=tol,
                             name=f"end_to_end_loss[seed={seed}]")
        finally:
            for n, p in zip(names, originals):
                model.params.replace(n, p)
        worst.finite = worst.finite and rep.finite
        worst.max_rel_err = max(worst.max_rel_err,
                                rep.max_rel_err if rep.finite else float("inf"))
    return worst
