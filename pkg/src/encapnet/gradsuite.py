"""Named central-difference checks for every differentiable stage.

Each case builds a small float64 problem, computes reverse-mode gradients
for a scalar objective, and compares them against central differences.
The `ot_loss_stop_gradient` case is special: the returned gradient is the
transport plan itself by construction, so the check (a) asserts bitwise
equality with the plan and (b) differentiates the equivalent frozen-plan
objective <Q, stop(P)> numerically.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, seeded_rng
from .capsules import CapFC, margin_loss, squash
from .capconv import CapConv, CapConvSpec
from .gradcheck import DEFAULT_H, DEFAULT_TOL, check_grads, fd_gradients, rel_error
from .network import ModuleSpec, NetworkConfig, StemSpec, build_network
from .routing import CapNetLayer
from .sinkhorn import Extractor, Generator, OTConfig, sinkhorn_iterates, ot_loss


def _sq_sum(t: Tensor) -> Tensor:
    return T.tsum(t * t)


def _case_squash():
    rng = seeded_rng(11, "squash")
    x = Tensor(rng.normal(size=(2, 5, 4)))
    return lambda: _sq_sum(squash(x, axis=-1)), [("x", x)]


def _case_capfc():
    rng = seeded_rng(11, "capfc")
    fc = CapFC(6, 3, 4, rng=seeded_rng(12, "capfc_w"))
    x = Tensor(rng.normal(size=(2, 6, 4)))
    return lambda: _sq_sum(fc(x)), [("x", x), ("weight", fc.weight)]


def _case_margin():
    rng = seeded_rng(11, "margin")
    x = Tensor(rng.normal(size=(3, 5, 4)) * 0.6)
    labels = np.array([0, 3, 2])
    return lambda: margin_loss(squash(x, axis=-1), labels), [("x", x)]


def _case_capconv():
    spec = CapConvSpec(caps=2, dim_in=2, dim_out=3, kernel=3, stride=2,
                       padding=1, interaction="v3")
    block = CapConv(spec, seed=21)
    rng = seeded_rng(11, "capconv")
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    tensors = [("x", x)] + list(block.named_params())
    return lambda: _sq_sum(block(x)), tensors


def _routing_case(routing: str):
    layer = CapNetLayer(caps_in=2, dim_in=2, in_hw=(2, 2), caps_out=3,
                        dim_out=3, out_hw=(1, 1), routing=routing, iters=3,
                        rng=seeded_rng(31, routing))
    rng = seeded_rng(11, routing)
    x = Tensor(rng.normal(size=(2, 4, 2, 2)))
    tensors = [("x", x)] + list(layer.named_params())
    return lambda: _sq_sum(layer(x)), tensors


def _case_generator():
    gen = Generator(caps_in=2, dim_in=2, caps_out=2, dim_out=2, stride=2, seed=41)
    rng = seeded_rng(11, "generator")
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    tensors = [("x", x)] + list(gen.named_params())
    return lambda: _sq_sum(gen(x, (6, 6))), tensors


def _case_extractor():
    ext = Extractor(8, seed=42)
    rng = seeded_rng(11, "extractor")
    x = Tensor(rng.normal(size=(2, 8, 8, 8)))
    tensors = [("x", x)] + list(ext.named_params())
    return lambda: _sq_sum(ext(x)), tensors


def toy_network():
    """Two modules, both feedback kinds, every mechanism in one graph."""
    cfg = NetworkConfig(
        family="encapnet", n_classes=3, in_channels=1, image_size=12,
        stem=StemSpec((8,), (1,)), caps_channels=4, class_caps_dim=4,
        modules=(ModuleSpec(2, 4, stride=2, n_type2=1, interaction="v3",
                            skip="both", ot=("main", "skip")),
                 ModuleSpec(4, 4, stride=2, n_type2=0, interaction="v1",
                            skip="type_I", ot=("main",))),
        ot=OTConfig(eps=0.1, iters=4, stop_gradient=False),
    )
    return build_network(cfg, seed=51)


def _case_toy_net():
    net = toy_network()
    rng = seeded_rng(11, "toy")
    x = Tensor(rng.normal(size=(2, 1, 12, 12)))
    labels = np.array([0, 2])

    def build():
        caps, ots = net(x, with_feedback=True)
        loss = margin_loss(caps, labels)
        for unit_vals in ots:
            for val in unit_vals:
                loss = loss + 10.0 * val
        return loss

    tensors = [("x", x)] + list(net.named_params())
    return build, tensors


def _check_standard(case, h, tol):
    build, tensors = case()
    errs = check_grads(build, [t for _, t in tensors], h=h)
    worst = max(errs)
    name = tensors[int(np.argmax(errs))][0]
    return worst, f"worst tensor {name!r}"


def _check_ot_stop_gradient(h, tol):
    rng = seeded_rng(11, "otsg")
    q = Tensor(rng.uniform(0.1, 1.0, size=(4, 4)), requires_grad=True)
    loss = ot_loss(q, eps=0.1, iters=10, stop_gradient=True)
    q.grad = None
    loss.backward()
    plan = sinkhorn_iterates(q.data, eps=0.1, iters=10).P
    exact_gap = float(np.max(np.abs(q.grad - plan)))
    if exact_gap != 0.0:
        return np.inf, f"analytic gradient differs from plan by {exact_gap}"

    qd = q.data

    def frozen():
        return float((qd * plan).sum())

    fd = fd_gradients(frozen, [qd], h=h)[0]
    return rel_error(q.grad, fd), "frozen-plan objective"


CASES = {
    "squash": _case_squash,
    "capfc": _case_capfc,
    "margin_loss": _case_margin,
    "capconv_bn_relu_squash": _case_capconv,
    "dynamic_routing_r3": lambda: _routing_case("dynamic"),
    "em_routing_r3": lambda: _routing_case("em"),
    "generator": _case_generator,
    "extractor": _case_extractor,
    "toy_net_total_loss": _case_toy_net,
}

GROUPS = {
    "core": ("squash", "capfc", "margin_loss"),
    "routing": ("dynamic_routing_r3", "em_routing_r3"),
    "capconv": ("capconv_bn_relu_squash",),
    "feedback": ("generator", "extractor", "ot_loss_stop_gradient"),
    "net": ("toy_net_total_loss",),
}
GROUPS["all"] = (GROUPS["core"] + GROUPS["capconv"] + GROUPS["routing"]
                 + GROUPS["feedback"] + GROUPS["net"])


def run_suite(names=None, h: float = DEFAULT_H, tol: float = DEFAULT_TOL):
    """[(case, max rel err, tol, passed, note)] for the requested cases."""
    if names is None:
        names = GROUPS["all"]
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    out = []
    try:
        for name in names:
            if name == "ot_loss_stop_gradient":
                err, note = _check_ot_stop_gradient(h, tol)
            elif name in CASES:
                err, note = _check_standard(CASES[name], h, tol)
            else:
                raise KeyError(f"unknown gradcheck case {name!r}")
            out.append((name, float(err), tol, bool(err < tol), note))
    finally:
        T.set_default_dtype(prev)
    return out
