"""Central finite-difference checks for every differentiable op and module.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-3 * S, 1e-10)``
where ``a`` is the tape gradient, ``n`` the numeric one and ``S`` the largest
gradient magnitude seen anywhere in the case. The floor keeps components that
are zero by construction (a bias in front of a softmax or a batch norm) from
turning roundoff into a reported failure.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, backward, precision

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(scale, float(np.abs(numeric).max()))
    floor = max(1e-3 * scale, 1e-10)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def check(fn: Callable[[], Tensor], leaves: Sequence[Tensor], rng: np.random.Generator,
          max_coords: Optional[int] = None, eps_scale: float = 1e-3) -> Tuple[float, int]:
    """Compare tape gradients of the scalar ``fn()`` against central differences.

    ``fn`` must read the current values of ``leaves``. At most ``max_coords``
    random coordinates per leaf are probed (all when None).
    """
    for leaf in leaves:
        leaf.grad = None
    backward(fn())
    analytic = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]
    scale = max(float(np.abs(g).max()) for g in analytic)
    worst, total = 0.0, 0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            eps = eps_scale * max(1.0, abs(orig))

            def central(h):
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                return (up - down) / (2 * h)
            # Richardson extrapolation cancels the O(eps^2) truncation term
            numeric[j] = (4.0 * central(eps / 2) - central(eps)) / 3.0
        worst = max(worst, relative_error(grad.reshape(-1)[idx], numeric, scale))
        total += len(idx)
    return worst, total


def projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into a scalar via a fixed random projection."""
    cache = {}

    def fn():
        out = out_fn()
        outs = out if isinstance(out, tuple) else (out,)
        total = None
        for k, o in enumerate(outs):
            if k not in cache:
                cache[k] = Tensor(rng.standard_normal(o.shape))
            term = ops.reduce_sum(ops.mul(o, cache[k]))
            total = term if total is None else ops.add(total, term)
        return total
    return fn


# ---------------------------------------------------------------- cases

@dataclass
class Case:
    name: str
    op: Optional[str]
    build: Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor], Optional[int]]]
    # relative finite-difference step; deep piecewise-linear graphs need a small
    # one so the probe does not straddle a ReLU kink
    eps_scale: float = 1e-3


def _rand(rng, shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return Tensor(x, requires_grad=True)


def _op_case(name, op, make):
    def build(rng):
        out_fn, leaves = make(rng)
        return projected(out_fn, rng), leaves, None
    return Case(name, op, build)


SHAPES = [(1, 2, 3, 3), (2, 3, 2, 4), (2, 4, 5, 1)]


def _elementwise_cases() -> List[Case]:
    cases = []
    for i, shape in enumerate(SHAPES):
        n, c = shape[:2]
        for kind in ("add", "sub", "mul"):
            other = (1, c, 1, 1) if i == 1 else (n, c, 1, 1) if i == 2 else shape
            cases.append(_op_case(f"{kind}{shape}", kind, lambda rng, s=shape, o=other, k=kind: (
                (lambda a=_rand(rng, s), b=_rand(rng, o): (lambda: ops.elementwise(k, a, b), [a, b]))())))

        def make_div(rng, s=shape):
            a = _rand(rng, s)
            b = Tensor(1.0 + rng.random(s), requires_grad=True)
            return (lambda: ops.div(a, b)), [a, b]
        cases.append(_op_case(f"div{shape}", "div", make_div))
        for unary in ("neg", "reverse", "sigmoid", "gelu"):
            cases.append(_op_case(f"{unary}{shape}", unary, lambda rng, s=shape, u=unary: (
                (lambda a=_rand(rng, s): (lambda: getattr(ops, u)(a), [a]))())))
        cases.append(_op_case(f"relu{shape}", "relu", lambda rng, s=shape: (
            (lambda a=_rand(rng, s, True): (lambda: ops.relu(a), [a]))())))

        def make_bce(rng, s=shape):
            a = _rand(rng, s)
            t = Tensor((rng.random(s) > 0.5).astype(float))
            return (lambda: ops.bce_with_logits(a, t)), [a]
        cases.append(_op_case(f"bce_with_logits{shape}", "bce_with_logits", make_bce))
    return cases


def _structural_cases() -> List[Case]:
    cases = []
    for shape, axis in zip(SHAPES, [None, (1,), (2, 3)]):
        cases.append(_op_case(f"sum{shape}{axis}", "sum", lambda rng, s=shape, ax=axis: (
            (lambda a=_rand(rng, s): (lambda: ops.reduce_sum(a, ax), [a]))())))
    for shape in SHAPES:
        n, c, h, w = shape
        cases.append(_op_case(f"reshape{shape}", "reshape", lambda rng, s=shape: (
            (lambda a=_rand(rng, s): (lambda: ops.reshape(a, (s[0], 1, s[1] * s[2], s[3])), [a]))())))
        cases.append(_op_case(f"transpose{shape}", "transpose", lambda rng, s=shape: (
            (lambda a=_rand(rng, s): (lambda: ops.transpose(a, (0, 3, 1, 2)), [a]))())))
        cases.append(_op_case(f"softmax{shape}", "softmax", lambda rng, s=shape: (
            (lambda a=_rand(rng, s): (lambda: ops.softmax(a, axis=-1), [a]))())))
    for shape in [(1, 4, 3, 3), (2, 3, 2, 2), (2, 6, 1, 4)]:
        for k in (1, shape[1] - 1):
            cases.append(_op_case(f"split_channels{shape}k={k}", "split_channels", lambda rng, s=shape, k=k: (
                (lambda a=_rand(rng, s): (lambda: ops.split_channels(a, k), [a]))())))
        cases.append(_op_case(f"concat_channels{shape}", "concat_channels", lambda rng, s=shape: (
            (lambda a=_rand(rng, s), b=_rand(rng, (s[0], 2, s[2], s[3])): (lambda: ops.concat_channels([a, b]), [a, b]))())))
    for (n, m, p, k, q) in [(1, 1, 1, 2, 1), (2, 1, 3, 4, 2), (1, 3, 5, 2, 4)]:
        cases.append(_op_case(f"matmul({n},{m},{p},{k})@({k},{q})", "matmul", lambda rng, n=n, m=m, p=p, k=k, q=q: (
            (lambda a=_rand(rng, (n, m, p, k)), b=_rand(rng, (n, m, k, q)): (lambda: ops.matmul(a, b), [a, b]))())))
    return cases


def _conv_cases() -> List[Case]:
    cases = []
    # (x shape, c_out, kernel, stride, padding, groups)
    variants = [
        ((2, 3, 5, 5), 4, 1, 1, 0, 1),     # pointwise
        ((1, 3, 6, 6), 2, 3, 1, 1, 1),     # general
        ((2, 2, 7, 7), 3, 3, 2, 1, 1),     # strided
        ((1, 4, 5, 5), 4, 3, 1, 1, 4),     # depthwise
        ((2, 3, 6, 6), 3, 3, 2, 1, 3),     # depthwise strided
        ((1, 4, 4, 4), 2, 3, 1, 1, 2),     # grouped
        ((2, 3, 8, 8), 2, 4, 4, 0, 1),     # patchify
        ((1, 3, 8, 8), 4, 7, 4, 3, 1),     # patch embed
    ]
    for xs, co, k, s, p, g in variants:
        def make(rng, xs=xs, co=co, k=k, s=s, p=p, g=g):
            x = _rand(rng, xs)
            w = _rand(rng, (co, xs[1] // g, k, k))
            b = _rand(rng, (1, co, 1, 1))
            return (lambda: ops.conv2d(x, w, b, s, p, g)), [x, w, b]
        cases.append(_op_case(f"conv2d x{xs} k{k} s{s} p{p} g{g}", "conv2d", make))
    for xs, (oh, ow) in [((1, 2, 3, 3), (6, 6)), ((2, 1, 4, 6), (2, 3)), ((1, 3, 5, 4), (7, 9))]:
        cases.append(_op_case(f"resize_bilinear{xs}->{oh}x{ow}", "resize_bilinear", lambda rng, xs=xs, oh=oh, ow=ow: (
            (lambda a=_rand(rng, xs): (lambda: ops.resize_bilinear(a, oh, ow), [a]))())))
    for xs in [(2, 3, 2, 2), (1, 5, 3, 1), (3, 2, 1, 2)]:
        def make_ln(rng, xs=xs):
            x = _rand(rng, xs)
            sc = Tensor(1 + 0.3 * rng.standard_normal((1, xs[1], 1, 1)), requires_grad=True)
            sh = _rand(rng, (1, xs[1], 1, 1))
            return (lambda: ops.layer_norm(x, sc, sh)), [x, sc, sh]
        cases.append(_op_case(f"layer_norm{xs}", "layer_norm", make_ln))
        for training in (True, False):
            def make_bn(rng, xs=xs, training=training):
                x = _rand(rng, xs)
                sc = Tensor(1 + 0.3 * rng.standard_normal((1, xs[1], 1, 1)), requires_grad=True)
                sh = _rand(rng, (1, xs[1], 1, 1))
                rm, rv = rng.standard_normal(xs[1]), 0.5 + rng.random(xs[1])

                def fn():
                    # fresh buffers each call keep the function pure
                    return ops.batch_norm(x, sc, sh, rm.copy(), rv.copy(), training)
                return fn, [x, sc, sh]
            cases.append(_op_case(f"batch_norm{xs} {'train' if training else 'eval'}", "batch_norm", make_bn))
    return cases


def _module_case(name, make_module, input_shapes, max_coords=4):
    """Check a module's gradient w.r.t. its inputs and a sample of parameters.

    Modules contain ReLUs, so the probe step is small (see ``Case.eps_scale``).
    """
    def build(rng):
        module = make_module(rng)
        inputs = [_rand(rng, s) for s in input_shapes]
        out_fn = projected(lambda: module(*inputs), rng)
        return out_fn, inputs + module.parameters(), max_coords
    return Case(name, None, build, eps_scale=1e-5)


def _module_cases() -> List[Case]:
    from .encoder import EncoderConfig, PatchEmbed, PyramidEncoder, SRAttention
    from .glsa import GLSA, GlobalSpatialAttention, LocalSpatialAttention
    from .nn import BatchNorm2d, ExpandMLP
    from .sba import RAU, SBA, SemanticFusion

    tiny = EncoderConfig(depths=(1, 1, 1, 1), dims=(8, 8, 16, 16), heads=(1, 2, 2, 4),
                         reductions=(4, 2, 2, 1), mlp_ratios=(2, 2, 2, 2))
    return [
        _module_case("batchnorm2d", lambda r: BatchNorm2d(3), [(2, 3, 3, 3)]),
        _module_case("expand_mlp", lambda r: ExpandMLP(8, rng=r), [(2, 8, 1, 1)]),
        _module_case("gsa", lambda r: GlobalSpatialAttention(32, rng=r), [(1, 32, 4, 4)]),
        _module_case("lsa", lambda r: LocalSpatialAttention(32, rng=r), [(1, 32, 6, 6)]),
        _module_case("glsa parallel", lambda r: GLSA(64, 32, rng=r), [(1, 64, 4, 4)]),
        _module_case("glsa serial_lsa_gsa", lambda r: GLSA(64, 32, "serial_lsa_gsa", rng=r), [(1, 64, 2, 2)]),
        _module_case("rau", lambda r: RAU(32, rng=r), [(1, 32, 3, 3), (1, 32, 3, 3)]),
        _module_case("build_fs", lambda r: SemanticFusion(32, rng=r), [(1, 32, 4, 4), (1, 32, 2, 2)]),
        _module_case("sba", lambda r: SBA(32, rng=r), [(2, 32, 2, 2), (2, 32, 4, 4)]),
        _module_case("patch_embed", lambda r: PatchEmbed(3, 8, 4, rng=r), [(1, 3, 8, 8)]),
        _module_case("sr_attention r=2", lambda r: SRAttention(8, 2, 2, rng=r), [(2, 8, 4, 4)]),
        _module_case("sr_attention r=1", lambda r: SRAttention(8, 2, 1, rng=r), [(1, 8, 2, 3)]),
        _module_case("encode", lambda r: PyramidEncoder(tiny, rng=r), [(1, 3, 32, 32)], max_coords=2),
        Case("duat + total loss", None, _full_model_build, eps_scale=1e-5),
    ]


def _full_model_build(rng):
    from .encoder import EncoderConfig
    from .losses import total_loss
    from .model import DuAT, DuatConfig

    cfg = DuatConfig(encoder=EncoderConfig(depths=(1, 1, 1, 1), dims=(16, 16, 24, 32), heads=(1, 2, 2, 4),
                                           reductions=(4, 2, 2, 1), mlp_ratios=(2, 2, 2, 2)),
                     input_size=32, seed=int(rng.integers(1 << 30)))
    model = DuAT(cfg)
    x = Tensor(rng.random((2, 3, 32, 32)), requires_grad=True)
    yy, xx = np.mgrid[0:32, 0:32]
    g = ((yy - 14) ** 2 + (xx - 17) ** 2 < 40).astype(float)
    mask = Tensor(np.stack([g, g[::-1]])[:, None])
    return (lambda: total_loss(model(x), mask)), [x] + model.parameters(), 2


def all_cases() -> List[Case]:
    return _elementwise_cases() + _structural_cases() + _conv_cases() + _module_cases()


def covered_ops(cases: Sequence[Case]) -> set:
    return {c.op for c in cases if c.op}


def run_case(case: Case, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    with precision("test", debug=True):
        fn, leaves, max_coords = case.build(rng)
        err, coords = check(fn, leaves, rng, max_coords, case.eps_scale)
    return CheckResult(case.name, err, coords, time.perf_counter() - t0)


def run_all(seed: int = 0, cases: Optional[Sequence[Case]] = None) -> List[CheckResult]:
    return [run_case(c, seed) for c in (cases or all_cases())]


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'case':<{width}}  {'max_rel_err':>11}  {'coords':>6}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:11.3e}  {r.coords:6d}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
