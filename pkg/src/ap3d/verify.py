"""Finite-difference gradient suites over growing scopes of the model.

Each scope returns a list of :class:`GradcheckReport` rows.  Composite checks
project the output onto a fixed random tensor to obtain a scalar, randomise
zero-initialised weights (APM gate, NL output BN) so that no gradient path is
trivially zero, and perturb a random subset of elements per tensor.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .apm import APM, ApmConfig, apm_forward
from .blocks import Ap3dWrapper, BlockKind, NonLocalBlock, build_block
from .network import arch_spec, build_network
from .tensorcore import GradcheckReport, Module, Tensor, check_tensors, concat, default_dtype, gradcheck, mul, sum_
from .tensorcore.gradcheck import DEFAULT_TOL, OPS

SCOPES = ("primitives", "apm", "blocks", "network")
# composite graphs contain ReLU and max-pool kinks; a smaller step keeps
# perturbations from crossing them while f64 round-off stays far below tol
COMPOSITE_STEP = 1e-6
# biases feeding a softmax or a train-mode BN have identically zero gradient;
# both estimates are then pure round-off and are compared absolutely
ZERO_ATOL = 1e-7


def _randomize(module: Module, rng: np.random.Generator) -> None:
    for name, p in module.named_parameters():
        if name.endswith("w.weight") or name.endswith("bn.weight") or name.endswith("bn.bias"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape) * rng.choice([-1, 1], p.shape)


def _check_module(name: str, module: Module, forward: Callable[[Tensor], Tensor], x: np.ndarray, seed: int,
                  max_elems: int, tol: float) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    _randomize(module, rng)
    inp = Tensor(x, requires_grad=True)
    proj = rng.standard_normal(forward(inp).shape)
    tensors = [inp] + module.parameters()
    err, n = check_tensors(lambda: sum_(mul(forward(inp), proj)), tensors, step=COMPOSITE_STEP,
                           max_elems=max_elems, rng=rng, zero_atol=ZERO_ATOL)
    return GradcheckReport(name, err, n, tol)


def check_primitives(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradcheckReport]:
    return [gradcheck(op, seed=seed, tol=tol) for op in OPS]


def check_apm(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradcheckReport]:
    rows = []
    with default_dtype(np.float64):
        for ca in (True, False):
            rng = np.random.default_rng(seed)
            apm = APM(8, ApmConfig(embed_divisor=4, use_contrastive_attention=ca), rng=rng)
            _randomize(apm, rng)
            c = Tensor(rng.uniform(-1, 1, (2, 8, 4, 5)), requires_grad=True)
            x = Tensor(rng.uniform(-1, 1, (2, 8, 4, 5)), requires_grad=True)
            proj = rng.standard_normal((2, 8, 4, 5))
            err, n = check_tensors(lambda: sum_(mul(apm_forward(c, x, apm), proj)), [c, x] + apm.parameters(),
                                   step=COMPOSITE_STEP, max_elems=24, rng=rng,
                                   zero_atol=ZERO_ATOL)
            rows.append(GradcheckReport(f"apm_forward{'' if ca else '_no_ca'}", err, n, tol))
            wrapper = Ap3dWrapper(8, 6, (3, 1, 1), apm_config=apm.config, rng=rng)
            clip = rng.uniform(-1, 1, (1, 8, 3, 4, 3))
            rows.append(_check_module(f"ap3d_wrapper{'' if ca else '_no_ca'}", wrapper, wrapper, clip, seed,
                                      16, tol))
    return rows


def check_blocks(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradcheckReport]:
    rows = []
    with default_dtype(np.float64):
        cfg = ApmConfig(embed_divisor=2)
        for kind in BlockKind:
            if kind is BlockKind.NL2D:
                continue
            for basic in (False, True):
                rng = np.random.default_rng(seed)
                block = build_block(kind, 8, 4, stride=2, basic=basic, apm_config=cfg, rng=rng)
                x = rng.uniform(-1, 1, (2, 8, 3, 5, 4))
                label = f"{kind.value.lower()}_{'basic' if basic else 'bottleneck'}"
                rows.append(_check_module(label, block, block, x, seed, 8, tol))
        for sub in (True, False):
            rng = np.random.default_rng(seed)
            nl = NonLocalBlock(8, subsample=sub, rng=rng)
            x = rng.uniform(-1, 1, (2, 8, 2, 4, 4))
            rows.append(_check_module(f"non_local{'_subsampled' if sub else ''}", nl, nl, x, seed, 8, tol))
    return rows


def check_network(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradcheckReport]:
    rows = []
    with default_dtype(np.float64):
        for arch in ("tiny-c2d", "tiny-ap-p3d-c"):
            model = build_network(arch_spec(arch, num_classes=3, base_width=4,
                                            apm=ApmConfig(embed_divisor=2)), seed=seed)
            clips = np.random.default_rng(seed).uniform(-1, 1, (2, 3, 3, 32, 16))

            def both(x, model=model):
                feat, logits = model(x)
                return concat([feat, logits], axis=1)

            rows.append(_check_module(arch, model, both, clips, seed, 4, tol))
    return rows


SUITES = {"primitives": check_primitives, "apm": check_apm, "blocks": check_blocks, "network": check_network}


def run_scope(scope: str, seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradcheckReport]:
    if scope not in SUITES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    return SUITES[scope](seed, tol)


def format_reports(reports: list[GradcheckReport]) -> str:
    width = max(len(r.name) for r in reports)
    lines = [f"{'check':<{width}}  {'max_rel_err':>11}  {'elems':>6}  result"]
    for r in reports:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:11.3e}  {r.checked:6d}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
