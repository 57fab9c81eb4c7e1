"""Untargeted C&W-L2 and elastic-net (EAD) attacks.

Both attacks are vectorised over a batch of inputs; every sample keeps its own
loss constant ``c`` and binary-search bounds, so results for one sample do not
depend on which other samples share the batch (up to BLAS rounding).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ShapeError

RULES = ("EN", "L1")


@dataclass(frozen=True)
class AttackConfig:
    kappa: float = 0.0
    beta: float = 0.1
    max_iterations: int = 1000
    binary_search_steps: int = 9
    c_init: float = 1e-3
    c_max: float = 1e10
    learning_rate: float = 1e-2
    decision_rule: str = "EN"
    box: tuple = (0.0, 1.0)
    seed: int = 0
    # keep every successful EAD iterate on the result (memory heavy; for inspection)
    record_candidates: bool = False

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.max_iterations < 1 or self.binary_search_steps < 1:
            raise ValueError("iteration counts must be positive")
        if not 0 < self.c_init <= self.c_max:
            raise ValueError("need 0 < c_init <= c_max")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.decision_rule.upper() not in RULES:
            raise ValueError(f"decision_rule must be one of {RULES}")
        object.__setattr__(self, "decision_rule", self.decision_rule.upper())
        lo, hi = self.box
        if not lo < hi:
            raise ValueError(f"empty box {self.box}")
        object.__setattr__(self, "box", (float(lo), float(hi)))


@dataclass
class Candidate:
    adversarial: np.ndarray
    margin: float
    c: float
    iteration: int


@dataclass
class AdversarialResult:
    original: np.ndarray
    adversarial: np.ndarray
    true_label: int
    success: bool
    achieved_margin: float
    c_used: float
    iterations_used: int
    attack: str = "cw"
    kappa: float = 0.0
    beta: float = 0.0
    rule: str = "L2"
    candidates: list | None = field(default=None, repr=False)

    @property
    def delta(self) -> np.ndarray:
        return self.adversarial - self.original

    @property
    def l1(self) -> float:
        return float(np.sum(np.abs(self.delta)))

    @property
    def l2(self) -> float:
        return float(np.sqrt(np.sum(self.delta ** 2)))

    @property
    def elastic_net_score(self) -> float:
        return elastic_net_score(self.delta, self.beta)


def _margins(z: np.ndarray, labels: np.ndarray):
    """Return (max_{j != y} Z_j - Z_y, index of that best other class) per row."""
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, labels] = -np.inf
    other = np.argmax(masked, axis=1)
    return masked[rows, other] - z[rows, labels], other


def margin_loss(logits, true_label: int, kappa: float) -> float:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.size < 2:
        raise ValueError("margin loss needs at least two classes")
    if not 0 <= true_label < z.size:
        raise ValueError(f"true_label {true_label} out of range for {z.size} logits")
    others = np.delete(z, true_label)
    return float(max(z[true_label] - others.max(), -kappa))


class MarginLoss:
    """Clamped margin ``max(Z_y - max_{j!=y} Z_j, -kappa)`` as an input-gradient loss."""

    def __init__(self, labels, kappa: float):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.kappa = float(kappa)

    def __call__(self, z):
        z2 = np.atleast_2d(z)
        labels = np.broadcast_to(self.labels, (z2.shape[0],))
        gap, other = _margins(z2, labels)
        raw = -gap
        value = np.maximum(raw, -self.kappa)
        live = raw > -self.kappa
        grad = np.zeros_like(z2)
        rows = np.arange(z2.shape[0])
        grad[rows, labels] = live
        grad[rows, other] -= live
        if np.ndim(z) == 1:
            return value[0], grad[0]
        return value, grad


def elastic_net_score(delta, beta: float) -> float:
    d = np.asarray(delta, dtype=np.float64)
    return float(beta * np.sum(np.abs(d)) + np.sum(d * d))


def cw_objective(net, x, delta, true_label, c, kappa) -> float:
    d = np.asarray(delta, dtype=np.float64)
    z = nn.logits(net, np.asarray(x) + d)
    return float(np.sum(d * d) + c * margin_loss(z, true_label, kappa))


def ead_objective(net, x, delta, true_label, c, kappa, beta) -> float:
    d = np.asarray(delta, dtype=np.float64)
    z = nn.logits(net, np.asarray(x) + d)
    return float(c * margin_loss(z, true_label, kappa) + elastic_net_score(d, beta))


def shrink(z, origin, beta: float, box=(0.0, 1.0)) -> np.ndarray:
    """Projected soft-thresholding of ``z`` toward ``origin``."""
    z = np.asarray(z, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if z.shape != origin.shape:
        raise ShapeError(f"shape mismatch {z.shape} vs {origin.shape}")
    lo, hi = box
    diff = z - origin
    return np.where(diff > beta, np.minimum(z - beta, hi),
                    np.where(diff < -beta, np.maximum(z + beta, lo), origin))


def select_candidate(candidates, original, rule: str, beta: float):
    """Index of the winning candidate under the EN or L1 rule (first on ties)."""
    if not candidates:
        return None
    if rule.upper() == "EN":
        scores = [elastic_net_score(c.adversarial - original, beta) for c in candidates]
    else:
        scores = [float(np.sum(np.abs(c.adversarial - original))) for c in candidates]
    return int(np.argmin(scores))


def _prepare(net, x, labels, cfg):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"input dim {x.shape[1]} != network input dim {net.input_dim}")
    if labels.shape != (x.shape[0],):
        raise ShapeError("need exactly one label per sample")
    lo, hi = cfg.box
    return np.clip(x, lo, hi), labels, single


class _Search:
    """Per-sample binary search over the loss constant."""

    def __init__(self, n, cfg):
        self.cfg = cfg
        self.c = np.full(n, cfg.c_init)
        self.lower = np.zeros(n)
        self.upper = np.full(n, np.inf)

    def update(self, succeeded):
        cfg = self.cfg
        self.upper = np.where(succeeded, np.minimum(self.upper, self.c), self.upper)
        self.lower = np.where(succeeded, self.lower, np.maximum(self.lower, self.c))
        bisect = (self.lower + self.upper) / 2
        grow = np.minimum(self.c * 10, cfg.c_max)
        self.c = np.where(np.isfinite(self.upper), bisect, grow)


def _margin_grad(net, adv, x_clean, labels, c, kappa):
    """Logits, achieved margins and the gradient of ||adv - x||^2 + c * margin_loss."""
    trace = nn.forward(net, adv)
    z = trace.logits
    gap, other = _margins(z, labels)
    live = -gap > -kappa
    dz = np.zeros_like(z)
    rows = np.arange(len(z))
    dz[rows, labels] = c * live
    dz[rows, other] -= c * live
    g = nn._backward(net, adv, trace, dz)[0] + 2.0 * (adv - x_clean)
    return gap, g


def _results(x, labels, adv, margin, c_used, iters, cfg, attack, rule, beta, cands=None):
    out = []
    for i in range(len(x)):
        out.append(AdversarialResult(
            original=x[i].copy(), adversarial=adv[i].copy(), true_label=int(labels[i]),
            success=bool(margin[i] >= cfg.kappa), achieved_margin=float(margin[i]),
            c_used=float(c_used[i]), iterations_used=int(iters[i]), attack=attack,
            kappa=cfg.kappa, beta=beta, rule=rule,
            candidates=None if cands is None else cands[i]))
    return out


def cw_l2_batch(net, x, labels, cfg: AttackConfig = AttackConfig()) -> list[AdversarialResult]:
    """C&W-L2 over a batch: tanh box reparameterisation, Adam, binary search on c."""
    x, labels, _ = _prepare(net, x, labels, cfg)
    n = len(x)
    lo, hi = cfg.box
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    kappa = cfg.kappa

    gap0, _ = _margins(nn.logits(net, x), labels)
    done = gap0 >= kappa  # zero perturbation already suffices
    best_l2 = np.where(done, 0.0, np.inf)
    best_adv = x.copy()
    best_margin = gap0.copy()
    best_c = np.full(n, cfg.c_init)
    last_adv, last_margin = x.copy(), gap0.copy()
    iters = np.zeros(n, dtype=np.int64)

    todo = np.flatnonzero(~done)
    search = _Search(len(todo), cfg)
    xs, ys = x[todo], labels[todo]
    w0 = np.arctanh(np.clip((xs - mid) / half, -1.0, 1.0) * 0.999999)
    b1, b2, eps = 0.9, 0.999, 1e-8

    for _ in range(cfg.binary_search_steps if len(todo) else 0):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        hit = np.zeros(len(todo), dtype=bool)
        c = search.c
        for it in range(cfg.max_iterations + 1):
            t = np.tanh(w)
            adv = np.clip(mid + half * t, lo, hi)
            gap, g_adv = _margin_grad(net, adv, xs, ys, c, kappa)
            l2sq = np.sum((adv - xs) ** 2, axis=1)
            ok = gap >= kappa
            hit |= ok
            better = ok & (l2sq < best_l2[todo])
            if better.any():
                sel = todo[better]
                best_l2[sel] = l2sq[better]
                best_adv[sel] = adv[better]
                best_margin[sel] = gap[better]
                best_c[sel] = c[better]
            if it == cfg.max_iterations:
                last_adv[todo], last_margin[todo] = adv, gap
                break
            g = g_adv * half * (1.0 - t * t)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            step = it + 1
            w = w - cfg.learning_rate * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        iters[todo] += cfg.max_iterations
        search.update(hit)

    found = np.isfinite(best_l2)
    adv = np.where(found[:, None], best_adv, last_adv)
    margin = np.where(found, best_margin, last_margin)
    c_used = best_c.copy()
    if len(todo):
        c_used[todo] = np.where(found[todo], best_c[todo], search.c)
    return _results(x, labels, adv, margin, c_used, iters, cfg, "cw", "L2", 0.0)


def ead_batch(net, x, labels, cfg: AttackConfig = AttackConfig()) -> list[AdversarialResult]:
    """Elastic-net attack by accelerated proximal gradient (FISTA with restart)."""
    x, labels, _ = _prepare(net, x, labels, cfg)
    n = len(x)
    lo, hi = cfg.box
    kappa, beta = cfg.kappa, cfg.beta

    gap0, _ = _margins(nn.logits(net, x), labels)
    done = gap0 >= kappa
    # running winners for both rules; the configured rule picks one at the end
    best = {r: np.where(done, 0.0, np.inf) for r in RULES}
    best_adv = {r: x.copy() for r in RULES}
    best_margin = {r: gap0.copy() for r in RULES}
    best_c = {r: np.full(n, cfg.c_init) for r in RULES}
    last_adv, last_margin = x.copy(), gap0.copy()
    iters = np.zeros(n, dtype=np.int64)
    cands = [[] for _ in range(n)] if cfg.record_candidates else None
    if cands is not None:
        for i in np.flatnonzero(done):
            cands[i].append(Candidate(x[i].copy(), float(gap0[i]), cfg.c_init, 0))

    todo = np.flatnonzero(~done)
    search = _Search(len(todo), cfg)
    xs, ys = x[todo], labels[todo]

    for _ in range(cfg.binary_search_steps if len(todo) else 0):
        c = search.c
        xk = xs.copy()
        yk = xs.copy()
        momentum = np.zeros(len(todo))
        prev_obj = c * np.maximum(-gap0[todo], -kappa)
        hit = np.zeros(len(todo), dtype=bool)
        for it in range(cfg.max_iterations):
            lr = cfg.learning_rate * (1.0 - it / cfg.max_iterations) ** 0.5
            _, g = _margin_grad(net, yk, xs, ys, c, kappa)
            x_new = shrink(yk - lr * g, xs, beta * lr, cfg.box)
            gap, _ = _margins(nn.logits(net, x_new), ys)
            d = x_new - xs
            l1 = np.sum(np.abs(d), axis=1)
            l2sq = np.sum(d * d, axis=1)
            en = beta * l1 + l2sq
            obj = c * np.maximum(-gap, -kappa) + en
            ok = gap >= kappa
            hit |= ok
            for rule, score in (("EN", en), ("L1", l1)):
                better = ok & (score < best[rule][todo])
                if better.any():
                    sel = todo[better]
                    best[rule][sel] = score[better]
                    best_adv[rule][sel] = x_new[better]
                    best_margin[rule][sel] = gap[better]
                    best_c[rule][sel] = c[better]
            if cands is not None:
                for j in np.flatnonzero(ok):
                    cands[todo[j]].append(Candidate(x_new[j].copy(), float(gap[j]), float(c[j]),
                                                    int(iters[todo[j]] + it + 1)))
            restart = obj > prev_obj
            momentum = np.where(restart, 0.0, momentum + 1.0)
            zt = (momentum / (momentum + 3.0))[:, None]
            yk = np.clip(x_new + zt * (x_new - xk), lo, hi)
            xk, prev_obj = x_new, obj
            last_gap = gap
        last_adv[todo], last_margin[todo] = xk, last_gap
        iters[todo] += cfg.max_iterations
        search.update(hit)

    rule = cfg.decision_rule
    found = np.isfinite(best[rule])
    adv = np.where(found[:, None], best_adv[rule], last_adv)
    margin = np.where(found, best_margin[rule], last_margin)
    c_used = best_c[rule].copy()
    if len(todo):
        c_used[todo] = np.where(found[todo], best_c[rule][todo], search.c)
    return _results(x, labels, adv, margin, c_used, iters, cfg, "ead", rule, beta, cands)


def cw_l2_attack(net, x, true_label: int, cfg: AttackConfig = AttackConfig()) -> AdversarialResult:
    return cw_l2_batch(net, np.asarray(x)[None], [true_label], cfg)[0]


def ead_attack(net, x, true_label: int, cfg: AttackConfig = AttackConfig()) -> AdversarialResult:
    return ead_batch(net, np.asarray(x)[None], [true_label], cfg)[0]


def run_attack(name: str, net, x, labels, cfg: AttackConfig) -> list[AdversarialResult]:
    if name == "cw":
        return cw_l2_batch(net, x, labels, cfg)
    if name == "ead":
        return ead_batch(net, x, labels, cfg)
    raise ValueError(f"unknown attack {name!r}")


CSV_COLUMNS = ["sample_id", "attack", "kappa", "beta", "rule", "success", "margin", "l1", "l2", "en_score", "c_used"]


def write_results_csv(results, path, sample_ids=None) -> None:
    ids = range(len(results)) if sample_ids is None else sample_ids
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for sid, r in zip(ids, results):
            writer.writerow([sid, r.attack, repr(float(r.kappa)), repr(float(r.beta)), r.rule.lower(),
                             int(r.success), repr(r.achieved_margin), repr(r.l1), repr(r.l2),
                             repr(r.elastic_net_score), repr(r.c_used)])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["sample_id"] = int(row["sample_id"])
        row["success"] = bool(int(row["success"]))
        for key in ("kappa", "beta", "margin", "l1", "l2", "en_score", "c_used"):
            row[key] = float(row[key])
    return rows


def save_results_npz(results, path, sample_ids) -> None:
    """Arrays of a result list, enough to rebuild it with :func:`load_results_npz`."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    r0 = results[0]
    np.savez_compressed(
        path, sample_id=np.asarray(sample_ids, dtype=np.int64),
        label=np.array([r.true_label for r in results]),
        original=np.array([r.original for r in results]),
        adversarial=np.array([r.adversarial for r in results]),
        margin=np.array([r.achieved_margin for r in results]),
        c_used=np.array([r.c_used for r in results]),
        iterations=np.array([r.iterations_used for r in results]),
        meta=np.array([r0.attack, r0.rule, repr(float(r0.kappa)), repr(float(r0.beta))]))


def load_results_npz(path):
    """Return ``(sample_ids, results)``."""
    with np.load(path) as z:
        attack, rule, kappa, beta = (str(v) for v in z["meta"])
        kappa, beta = float(kappa), float(beta)
        results = [
            AdversarialResult(original=z["original"][i], adversarial=z["adversarial"][i],
                              true_label=int(z["label"][i]), success=bool(z["margin"][i] >= kappa),
                              achieved_margin=float(z["margin"][i]), c_used=float(z["c_used"][i]),
                              iterations_used=int(z["iterations"][i]), attack=attack, kappa=kappa,
                              beta=beta, rule=rule)
            for i in range(len(z["label"]))]
        return z["sample_id"].copy(), results
