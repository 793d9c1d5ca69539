"""Central finite-difference checks of every differentiable op.

Each check draws random inputs, reduces the op output to a scalar with a
random weighting, and compares the backward-pass gradient with central
differences (step 1e-6). The error is ``|analytic - numeric| / max(|analytic|, |numeric|)``
measured in the Euclidean norm over all checked entries of one instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from derc.numerics import tensor as T
from derc.numerics.rng import RngStream

STEP = 1e-6
OP_TOL = 1e-5
COMPOSED_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    op: str
    instances: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, entries=None, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[j] = (hi - lo) / (2.0 * step)
    return out


def check_function(build: Callable[[list[T.Tensor]], T.Tensor], inputs: list[np.ndarray]) -> float:
    """Max over inputs of the relative error for scalar-valued ``build``."""
    leaves = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    build(leaves).backward()
    worst = 0.0
    for leaf in leaves:
        def value():
            with T.no_grad():
                return build([T.Tensor(l.data) for l in leaves]).item()

        num = numeric_grad(value, leaf.data)
        ana = leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros(leaf.data.size)
        worst = max(worst, rel_error(ana, num))
    return worst


def _weighted(fn, weight):
    def build(ts):
        return (fn(*ts) * weight).sum()
    return build


def _op_cases():
    """(name, input sampler, function) triples; samplers take an rng."""

    def sym(shape, lo=-2.0, hi=2.0):
        return lambda r: r.uniform(lo, hi, size=shape)

    def away_from_zero(shape):
        def draw(r):
            x = r.uniform(0.05, 2.0, size=shape)
            return x * np.where(r.uniform(size=shape) < 0.5, -1.0, 1.0)
        return draw

    return [
        ("add", [sym((3, 4)), sym((4,))], lambda a, b: a + b),
        ("sub", [sym((3, 4)), sym((3, 1))], lambda a, b: a - b),
        ("mul", [sym((3, 4)), sym((3, 4))], lambda a, b: a * b),
        ("div", [sym((3, 4)), away_from_zero((3, 4))], lambda a, b: a / b),
        ("matmul", [sym((2, 3, 4)), sym((4, 5))], lambda a, b: a @ b),
        ("matmul_batched", [sym((2, 3, 4)), sym((2, 4, 2))], lambda a, b: a @ b),
        ("tanh", [sym((3, 4))], T.tanh),
        ("exp", [sym((3, 4))], T.exp),
        ("log", [sym((3, 4), 0.1, 2.0)], T.log),
        ("relu", [away_from_zero((3, 4))], T.relu),
        ("lgamma", [sym((3, 4), 0.1, 5.0)], T.lgamma),
        ("softmax", [sym((3, 5))], lambda a: T.softmax(a, axis=-1)),
        ("log_softmax", [sym((3, 5))], lambda a: T.log_softmax(a, axis=-1)),
        ("layer_norm", [sym((3, 6)), sym((6,)), sym((6,))], T.layer_norm),
        ("sum", [sym((3, 4))], lambda a: T.tsum(a, axis=1, keepdims=True)),
        ("mean", [sym((3, 4))], lambda a: T.mean(a, axis=0)),
        ("reshape", [sym((3, 4))], lambda a: T.reshape(a, (2, 6))),
        ("transpose", [sym((2, 3, 4))], lambda a: T.transpose(a, (2, 0, 1))),
        ("getitem", [sym((3, 4))], lambda a: a[:, 1:3]),
    ]


def check_ops(rng: RngStream, instances: int = 100, tol: float = OP_TOL) -> list[CheckResult]:
    results = []
    for name, samplers, fn in _op_cases():
        worst = 0.0
        for _ in range(instances):
            inputs = [s(rng) for s in samplers]
            with T.no_grad():
                shape = fn(*[T.Tensor(x) for x in inputs]).shape
            weight = rng.uniform(-1.0, 1.0, size=shape)
            worst = max(worst, check_function(_weighted(fn, weight), inputs))
        results.append(CheckResult(name, instances, worst, tol))
    return results


def check_losses(rng: RngStream, instances: int = 100, tol: float = OP_TOL) -> list[CheckResult]:
    from derc import distributions as dist

    K = 5
    worst = {"loss_dpn": 0.0, "loss_kl": 0.0, "loss_hard": 0.0, "loss_combined": 0.0}
    cfg = dist.LossConfig(mode=dist.LossMode.DPN_KL)
    for _ in range(instances):
        logits = rng.uniform(-2.0, 2.0, size=K)
        labels = [int(x) for x in rng.integers(0, K, size=3)]
        soft = dist.soft_label(labels, K)
        major = dist.majority_vote(labels, K)
        worst["loss_dpn"] = max(worst["loss_dpn"], check_function(
            lambda ts: dist.loss_dpn(ts[0], labels, 0.01), [logits]))
        worst["loss_kl"] = max(worst["loss_kl"], check_function(
            lambda ts: dist.loss_kl(T.softmax(ts[0]), soft), [logits]))
        worst["loss_hard"] = max(worst["loss_hard"], check_function(
            lambda ts: dist.loss_hard(T.softmax(ts[0]), major), [logits]))
        worst["loss_combined"] = max(worst["loss_combined"], check_function(
            lambda ts: dist.loss_combined(ts[0], labels, soft, cfg), [logits]))
    return [CheckResult(k, instances, v, tol) for k, v in worst.items()]


def check_fusion(rng: RngStream, instances: int = 100, tol: float = OP_TOL) -> CheckResult:
    from derc.fusion import FusionParams, fuse

    q, d, o = 4, 3, 2
    worst = 0.0
    for _ in range(instances):
        shapes = [(2, q), (2, q), (q, d), (q, d), (o, d), (o,), (o, q), (o, q)]
        inputs = [rng.uniform(-2.0, 2.0, size=s) for s in shapes]
        weight = rng.uniform(-1.0, 1.0, size=(2, o))

        def build(ts):
            params = FusionParams(*ts[2:])
            return (fuse(ts[0], ts[1], params) * weight).sum()

        worst = max(worst, check_function(build, inputs))
    return CheckResult("fusion", instances, worst, tol)


def check_composed(rng: RngStream, instances: int = 100, n_params: int = 10,
                   tol: float = COMPOSED_TOL) -> list[CheckResult]:
    """Fusion -> Transformer -> loss on a tiny model, ``instances`` per loss mode."""
    from derc.distributions import LossConfig, LossMode, label_log_mean, majority_vote, soft_label
    from derc.model import DialogueModel, ModelConfig, shift_right
    from derc.training import Batch, batch_loss

    cfg = ModelConfig(model_dim=8, encoder_blocks=1, decoder_blocks=1, heads=2, feedforward_dim=16,
                      dropout=0.0, K=5, feature_dim=4, fusion_rank=4, fusion_dim=8)
    modes = [LossMode.HARD, LossMode.SOFT, LossMode.DPN_KL]
    worst = {m: 0.0 for m in modes}
    counts = {m: 0 for m in modes}
    B, Tn, K = 2, 3, cfg.K
    for i in range(instances * len(modes)):
        mode = modes[i % len(modes)]
        loss_cfg = LossConfig(mode=mode)
        model = DialogueModel.init(cfg, rng)
        labels = rng.integers(0, K, size=(B, Tn, 3))
        soft = np.zeros((B, Tn, K))
        major = np.zeros((B, Tn, K))
        has = np.zeros((B, Tn), dtype=bool)
        logmu = np.zeros((B, Tn, K))
        for b in range(B):
            for t in range(Tn):
                lab = [int(x) for x in labels[b, t]]
                soft[b, t] = soft_label(lab, K)
                m = majority_vote(lab, K)
                if m is not None:
                    major[b, t, m] = 1.0
                    has[b, t] = True
                logmu[b, t] = label_log_mean(lab, K, loss_cfg.smoothing_eps)
        batch = Batch(rng.uniform(-2, 2, size=(B, Tn, 4)), rng.uniform(-2, 2, size=(B, Tn, 4)),
                      np.ones((B, Tn), dtype=bool), soft, major, has, logmu, soft)
        hist = shift_right(soft)

        def loss_value():
            with T.no_grad():
                return batch_loss(model(batch.audio, batch.text, hist), batch, loss_cfg).item()

        model.zero_grad()
        batch_loss(model(batch.audio, batch.text, hist), batch, loss_cfg).backward()
        names = list(model.params)
        picks = [names[int(j)] for j in rng.integers(0, len(names), size=n_params)]
        ana, num = [], []
        for name in picks:
            p = model.params[name]
            entry = int(rng.integers(0, p.data.size))
            ana.append(p.grad.reshape(-1)[entry] if p.grad is not None else 0.0)
            num.append(numeric_grad(loss_value, p.data, [entry])[0])
        worst[mode] = max(worst[mode], rel_error(np.array(ana), np.array(num)))
        counts[mode] += 1
    return [CheckResult(f"composed[{m.value}]", counts[m], worst[m], tol) for m in modes]


def run_suite(seed: int = 0, instances: int = 100) -> list[CheckResult]:
    rng = RngStream(seed)
    results = check_ops(rng.child(1), instances)
    results += check_losses(rng.child(2), instances)
    results.append(check_fusion(rng.child(3), instances))
    results += check_composed(rng.child(4), instances)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.op) for r in results)
    lines = [f"{'op':<{width}}  {'n':>4}  {'max_rel_error':>13}  {'tol':>7}  status"]
    for r in results:
        lines.append(f"{r.op:<{width}}  {r.instances:>4}  {r.max_rel_error:>13.3e}  {r.tol:>7.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
