"""Oracle suite behind ``shortcutbench selfcheck``.

Each check prints one ``PASS``/``FAIL`` line in a fixed order. Checks look
functions up through their modules at call time, so a patched
implementation is what gets checked.
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import evaluate, measures, model
from . import numerics as nx

EPS = 1e-3
GRAD_TOL = 1e-2


def _gradcheck(fn: Callable[..., nx.Tensor], arrays: list[np.ndarray], eps: float = EPS) -> float:
    """Max relative error of tape gradients against central differences."""
    ts = [nx.Tensor(a, requires_grad=True) for a in arrays]
    with nx.Tape() as tape:
        out = fn(*ts)
    tape.backward(out)
    worst = 0.0
    for t in ts:
        num = nx.numerical_grad(lambda: fn(*ts).item(), t, eps)
        worst = max(worst, nx.max_rel_error(t.grad, num))
    return worst


def check_op_gradients() -> str:
    rng = np.random.default_rng(0)
    y = nx.one_hot(rng.integers(0, 2, 6))
    g = rng.normal(size=(5, 3))
    cases = {
        "affine": (lambda x, W, b: nx.sum(nx.affine(x, W, b)),
                   [rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)]),
        "relu": (lambda x: nx.sum(nx.mul(nx.relu(x), nx.Tensor([[1.0, 2.0]]))), [np.array([[0.5, -0.5]])]),
        "cross_entropy": (lambda l: nx.softmax_cross_entropy(l, y), [rng.normal(size=(6, 2))]),
        "grad_reverse": (lambda x: nx.sum(nx.mul(nx.grad_reverse(x, 0.7), nx.Tensor(g))), [rng.normal(size=(5, 3))]),
        "dcor": (lambda a, b: measures.dcor(a, b), [rng.normal(size=(8, 2)), rng.normal(size=(8, 2))]),
        "logmeanexp": (lambda x: nx.logmeanexp(x), [rng.normal(size=(7, 1))]),
    }
    errs = {}
    for name, (fn, arrays) in cases.items():
        if name == "grad_reverse":
            # the reversal is deliberate: compare against -lam * (identity gradient)
            ts = nx.Tensor(arrays[0], requires_grad=True)
            with nx.Tape() as tape:
                out = fn(ts)
            tape.backward(out)
            errs[name] = nx.max_rel_error(ts.grad, -0.7 * g)
        else:
            errs[name] = _gradcheck(fn, arrays)
    worst = max(errs, key=errs.get)
    status = "PASS" if errs[worst] < GRAD_TOL else "FAIL"
    return f"{status} op gradients vs finite differences (worst {worst}: {errs[worst]:.2e} < {GRAD_TOL})"


def _composite_case(mode: str, rng: np.random.Generator):
    spec = model.EncoderSpec(2, 3, (5,), 2, 2, mode)
    m = model.Model(spec, seed=int(rng.integers(1000)))
    x = nx.Tensor(rng.uniform(0, 1, size=(6, 6)))
    return m, x, rng.integers(0, 2, 6), rng.integers(0, 2, 6)


def check_composite_gradients(lam: float = 0.3) -> str:
    """dCor-penalized subspace loss and the GRL objective vs finite differences.

    Under gradient reversal the encoder descends CE1 - lam*CE2 while the heads
    descend CE1 + CE2, so each parameter group is compared with the finite
    differences of the objective it actually follows.
    """
    worst = 0.0
    rng = np.random.default_rng(1)
    for mode in ("split", "shared"):
        for _ in range(100):
            m, x, y1, y2 = _composite_case(mode, rng)
            with nx.relu_margin() as mg:
                m.latent(x)
            if mg.value > 20 * EPS:
                break
        if mode == "split":
            taped = lambda: model.loss_penalized(m, m.encode(x), y1, y2, "dcor", 0.5)[0]
            objectives = {"": taped}
        else:
            taped = lambda: model.loss_adversarial(m, m.latent(x), y1, y2, lam)[0]
            ce = lambda which, y: nx.softmax_cross_entropy(m.head_logits(which, m.latent(x)), nx.one_hot(y))
            objectives = {"enc.": lambda: nx.sub(ce(1, y1), nx.scale(ce(2, y2), lam)),
                          "head": lambda: nx.add(ce(1, y1), ce(2, y2))}
        m.params.zero_grad()
        with nx.Tape() as tape:
            out = taped()
        tape.backward(out)
        for name, p in m.params.items():
            f = next(fn for prefix, fn in objectives.items() if name.startswith(prefix))
            num = nx.numerical_grad(lambda: f().item(), p)
            worst = max(worst, nx.max_rel_error(p.grad, num))
    status = "PASS" if worst < GRAD_TOL else "FAIL"
    return f"{status} composite model gradients vs finite differences (worst {worst:.2e} < {GRAD_TOL})"


def adversarial_decomposition_error(lam: float = 0.6, seed: int = 3) -> float:
    """|g_enc - (g_CE1 - lam g_CE2)|_inf with the branches from separate backward passes."""
    spec = model.EncoderSpec(4, 4, (8,), 2, 2, "shared")
    m = model.Model(spec, seed=seed)
    rng = np.random.default_rng(seed)
    x = nx.Tensor(rng.uniform(0, 1, size=(10, 16)))
    y1, y2 = rng.integers(0, 2, 10), rng.integers(0, 2, 10)
    keys = m.encoder_keys()

    def enc_grads(build):
        m.params.zero_grad()
        with nx.Tape() as tape:
            out = build()
        tape.backward(out)
        g = {k: m.params[k].grad.astype(np.float64) for k in keys}
        m.params.zero_grad()
        return g

    total = enc_grads(lambda: model.loss_adversarial(m, m.latent(x), y1, y2, lam)[0])
    ce1 = enc_grads(lambda: nx.softmax_cross_entropy(m.head_logits(1, m.latent(x)), nx.one_hot(y1)))
    ce2 = enc_grads(lambda: nx.softmax_cross_entropy(m.head_logits(2, m.latent(x)), nx.one_hot(y2)))
    return max(float(np.max(np.abs(total[k] - (ce1[k] - lam * ce2[k])))) for k in keys)


def check_adversarial_decomposition() -> str:
    err = adversarial_decomposition_error()
    status = "PASS" if err < 1e-6 else "FAIL"
    return f"{status} GRL encoder gradient == g_CE1 - lam*g_CE2 (max abs diff {err:.1e} < 1e-6)"


def check_dcor_cases() -> str:
    rng = np.random.default_rng(0)
    z = rng.normal(size=(50, 2))
    same = measures.dcor(z, z).item()
    n2 = measures.dcor([[0.0], [3.0]], [[1.0], [5.0]]).item()
    centered = measures.double_center(nx.Tensor([[0.0, 2.0], [2.0, 0.0]])).data
    u = np.random.default_rng(11).uniform(size=(1000, 2))
    v = np.random.default_rng(12).uniform(size=(1000, 2))
    observed, null = measures.permutation_null(u, v, 200, seed=0)
    ok = (abs(same - 1) <= 1e-6 and n2 == 1.0
          and np.array_equal(centered, np.array([[-1, 1], [1, -1]], dtype=np.float32))
          and observed < 0.1 and observed <= np.percentile(null, 99))
    return (f"{'PASS' if ok else 'FAIL'} dCor hand cases (dcor(z,z)={same:.7f}, N=2 -> {n2}, "
            f"independent N=1000 -> {observed:.3f} vs null p99 {np.percentile(null, 99):.3f})")


def mine_gaussian_run(rho: float, steps: int = 600, n: int = 5000, seed: int = 0,
                      lr: float = 1e-3) -> float:
    """Train a fresh statistics network on bivariate normal pairs; mean of the last 100 bounds."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = rho * x + math.sqrt(1 - rho * rho) * rng.normal(size=n)
    net = measures.MineNet(1, 1, seed=seed)
    opt = nx.Optimizer(net.params, "adam", lr)
    trace = [measures.mine_train_step(net, x, y, opt, rng).value for _ in range(steps)]
    return float(np.mean(trace[-100:]))


def check_mine_gaussian() -> str:
    target = measures.gaussian_mi_analytic(0.9)
    est = mine_gaussian_run(0.9)
    indep = mine_gaussian_run(0.0, steps=400)
    ok = 0.63 <= est <= 0.88 and est <= target + 0.05 and abs(indep) < 0.1
    return (f"{'PASS' if ok else 'FAIL'} MINE vs analytic MI (rho=0.9: {est:.3f} vs {target:.4f}; "
            f"rho=0: {indep:+.3f})")


def check_auroc_equivalence(instances: int = 1000) -> str:
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(instances):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse scores force plenty of ties
        scores = rng.integers(0, int(rng.integers(2, 20)), n) / 4.0
        if evaluate.auroc(scores, labels) != evaluate.auroc_bruteforce(scores, labels):
            mismatches += 1
    status = "PASS" if mismatches == 0 else "FAIL"
    return f"{status} AUROC ranking == pair counting on {instances} instances ({mismatches} mismatches)"


CHECKS = (
    check_op_gradients,
    check_composite_gradients,
    check_adversarial_decomposition,
    check_dcor_cases,
    check_auroc_equivalence,
    check_mine_gaussian,
)


def run(echo: Callable[[str], None] = print) -> bool:
    ok = True
    start = time.perf_counter()
    for check in CHECKS:
        try:
            line = check()
        except Exception as exc:  # a crashing check is a failing check
            line = f"FAIL {check.__name__}: {type(exc).__name__}: {exc}"
        ok &= line.startswith("PASS")
        echo(line)
    echo(f"{'all checks passed' if ok else 'selfcheck FAILED'} ({time.perf_counter() - start:.0f}s)")
    return ok
