"""End-to-end protocols: oblivious, confidence-ensemble and transfer evaluation.

A :class:`Session` owns the datasets, the trained models and caches of attack
results and LID features, so protocols sharing a session reuse work. Every
random choice is derived from the master seed plus a fixed tag, which keeps
runs reproducible bit for bit.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, data, detector, lid, nn
from .errors import ConfigError, InsufficientDataError

logger = logging.getLogger(__name__)

PROTOCOLS = ("oblivious", "ensemble", "transfer")
HIDDEN = {"A": nn.MODEL_A[1:-1], "B": nn.MODEL_B[1:-1]}


@dataclass
class ExperimentConfig:
    dataset: str = "idx"  # "idx" or "blobs"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    blob_n: int = 600
    blob_classes: int = 3
    blob_dim: int = 10
    blob_spread: float = 0.05
    # weight-file path, "A"/"B" (hidden sizes of Model-A/B) or comma-separated layer sizes
    target_model: str = "A"
    source_model: str = "B"
    train_epochs: int = 30
    train_lr: float = 0.05
    train_batch_size: int = 32
    attack: str = "cw"
    decision_rule: str = "EN"
    kappa_list: tuple = (0.0, 10.0, 20.0, 30.0, 40.0)
    beta: float = 0.1
    max_iterations: int = 200
    binary_search_steps: int = 9
    c_init: float = 1e-3
    c_max: float = 1e10
    # 0 selects the per-attack default (cw 0.1 Adam step, ead 0.01 proximal step)
    learning_rate: float = 0.0
    n_targets: int = 200
    k: int = 20
    batch_size: int = 100
    reference_split: str = "train"  # "train" pool or the attacked "targets" themselves
    reference_pool: int = 2000
    train_fraction: float = 0.7
    detector_lr: float = 0.1
    detector_epochs: int = 1000
    threshold: float = 0.5
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        self.kappa_list = tuple(float(k) for k in self.kappa_list)
        self.decision_rule = self.decision_rule.upper()
        self.validate()

    def validate(self):
        if self.dataset not in ("idx", "blobs"):
            raise ConfigError(f"dataset must be 'idx' or 'blobs', got {self.dataset!r}")
        if self.attack not in ("cw", "ead"):
            raise ConfigError(f"attack must be 'cw' or 'ead', got {self.attack!r}")
        if self.decision_rule not in attacks.RULES:
            raise ConfigError(f"rule must be one of {attacks.RULES}")
        if not self.kappa_list or min(self.kappa_list) < 0:
            raise ConfigError("kappa_list must be a nonempty list of nonnegative values")
        if self.reference_split not in ("train", "targets"):
            raise ConfigError("reference_split must be 'train' or 'targets'")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.n_targets < 1:
            raise ConfigError("n_targets must be positive")
        try:
            self.lid_config()
            self.detector_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.n_targets < self.batch_size:
            logger.warning("n_targets=%d is below the LID batch size %d", self.n_targets, self.batch_size)

    def lid_config(self) -> lid.LIDConfig:
        return lid.LIDConfig(k=self.k, batch_size=self.batch_size, seed=self.seed)

    def detector_config(self) -> detector.DetectorConfig:
        return detector.DetectorConfig(self.detector_lr, self.detector_epochs, self.seed, self.threshold)

    def attack_config(self, kappa: float) -> attacks.AttackConfig:
        lr = self.learning_rate or (0.1 if self.attack == "cw" else 0.01)
        return attacks.AttackConfig(kappa=kappa, beta=self.beta, max_iterations=self.max_iterations,
                                    binary_search_steps=self.binary_search_steps, c_init=self.c_init,
                                    c_max=self.c_max, learning_rate=lr, decision_rule=self.decision_rule,
                                    seed=self.seed)

    @property
    def rule_tag(self) -> str:
        return "l2" if self.attack == "cw" else self.decision_rule.lower()


def _parse_value(kind, raw: str):
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (tuple, "tuple"):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read ``key=value`` lines (``#`` starts a comment) and apply overrides."""
    kinds = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _parse_value(kinds[key], raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in kinds:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = val
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def subseed(seed: int, tag: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


@dataclass
class ReportRow:
    protocol: str
    attack: str
    rule: str
    kappa: float
    auc: float | None
    detection_rate: float | None
    post_detection_classification_rate: float | None = None
    classification_rate_wo_detection: float | None = None
    n: int = 0
    dropped_degenerate: int = 0
    tpr_at_5_fpr: float | None = None


REPORT_COLUMNS = [f.name for f in dataclasses.fields(ReportRow)]
_RATE_COLUMNS = ("auc", "detection_rate", "post_detection_classification_rate",
                 "classification_rate_wo_detection", "tpr_at_5_fpr")


def emit_report(rows, path) -> None:
    """CSV with one line per row; rates written as percentages with two decimals."""
    if not rows:
        raise ValueError("no report rows to write")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            out = []
            for name in REPORT_COLUMNS:
                val = getattr(row, name)
                if name in _RATE_COLUMNS:
                    out.append("" if val is None else f"{100.0 * val:.2f}")
                elif name == "kappa":
                    out.append(f"{val:g}")
                else:
                    out.append(str(val))
            writer.writerow(out)


def read_report(path) -> list[ReportRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for name in REPORT_COLUMNS:
                raw = rec.get(name, "")
                if name in _RATE_COLUMNS:
                    kw[name] = None if raw == "" else round(float(raw) / 100.0, 6)
                elif name in ("n", "dropped_degenerate"):
                    kw[name] = int(raw)
                elif name == "kappa":
                    kw[name] = float(raw)
                else:
                    kw[name] = raw
            rows.append(ReportRow(**kw))
    return rows


def _arch(spec: str, in_dim: int, n_classes: int):
    if spec.upper() in HIDDEN:
        return (in_dim, *HIDDEN[spec.upper()], n_classes)
    try:
        sizes = tuple(int(s) for s in spec.split(","))
    except ValueError:
        raise ConfigError(f"model spec {spec!r} is neither a file, 'A', 'B' nor a layer list") from None
    if sizes[0] != in_dim or sizes[-1] != n_classes:
        raise ConfigError(f"layer list {sizes} does not fit data ({in_dim} inputs, {n_classes} classes)")
    return sizes


@dataclass
class CraftedSet:
    """Attack results plus LID features for one (model, attack, rule, kappa)."""

    results: list
    features: dict = field(default_factory=dict)  # target position -> {"clean", "noisy", "adversarial"}
    dropped: int = 0


class Session:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.train_data, self.test_data = self._load_data()
        self._models: dict[str, nn.Network] = {}
        self._attacks: dict[tuple, list] = {}
        self._crafted: dict[tuple, CraftedSet] = {}
        self._clean_feats: dict[tuple, dict] = {}
        pool_rng = np.random.default_rng(subseed(cfg.seed, "reference-pool"))
        n_pool = min(cfg.reference_pool, len(self.train_data))
        self.reference_pool = np.sort(pool_rng.choice(len(self.train_data), size=n_pool, replace=False))

    def _load_data(self):
        cfg = self.cfg
        if cfg.dataset == "blobs":
            # same seed keeps class centres shared; the split tag alone changes the draw
            full = data.synthetic_blobs(2 * cfg.blob_n, cfg.blob_classes, cfg.blob_dim, cfg.blob_spread,
                                        subseed(cfg.seed, "blobs"))
            tr = data.LabeledDataset(full.samples[: cfg.blob_n], full.labels[: cfg.blob_n], "train")
            te = data.LabeledDataset(full.samples[cfg.blob_n:], full.labels[cfg.blob_n:], "test")
            return tr, te
        missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels") if not getattr(cfg, k)]
        if missing:
            raise ConfigError(f"dataset=idx needs paths for {', '.join(missing)}")
        try:
            tr = data.load_idx(cfg.train_images, cfg.train_labels, "train")
            te = data.load_idx(cfg.test_images, cfg.test_labels, "test")
        except OSError as exc:
            raise ConfigError(f"cannot read dataset: {exc}") from exc
        return tr, te

    @property
    def num_classes(self) -> int:
        return int(max(self.train_data.labels.max(), self.test_data.labels.max())) + 1

    def model(self, role: str) -> nn.Network:
        """Load or train the ``target`` or ``source`` model."""
        if role in self._models:
            return self._models[role]
        spec = getattr(self.cfg, f"{role}_model")
        if Path(spec).is_file():
            net = nn.load_network(spec)
        else:
            sizes = _arch(spec, self.train_data.samples.shape[1], self.num_classes)
            seed = subseed(self.cfg.seed, f"model-{role}")
            hp = nn.TrainConfig(self.cfg.train_lr, self.cfg.train_epochs, self.cfg.train_batch_size, seed)
            net = nn.train(nn.init_network(sizes, seed), self.train_data, hp)
            nn.save_network(net, self.out / "models" / f"{role}.lidnn")
            logger.info("%s model %s: train acc %.4f, test acc %.4f", role, sizes,
                        nn.accuracy(net, self.train_data), nn.accuracy(net, self.test_data))
        self._models[role] = net
        return net

    def targets(self, roles=("target",)) -> np.ndarray:
        """Test-set indices correctly classified by every model in ``roles``."""
        ok = np.ones(len(self.test_data), dtype=bool)
        for role in roles:
            ok &= nn.predict(self.model(role), self.test_data.samples) == self.test_data.labels
        pool = np.flatnonzero(ok)
        n = self.cfg.n_targets
        if n > len(pool):
            raise InsufficientDataError(f"asked for {n} targets but only {len(pool)} are correctly classified")
        tag = "targets-" + "-".join(roles)
        return np.sort(np.random.default_rng(subseed(self.cfg.seed, tag)).choice(pool, size=n, replace=False))

    def split(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint detector train/test positions over ``n`` targets."""
        perm = np.random.default_rng(subseed(self.cfg.seed, "detector-split")).permutation(n)
        cut = int(round(self.cfg.train_fraction * n))
        return np.sort(perm[:cut]), np.sort(perm[cut:])

    def _reference_batch(self, chunk: int, target_idx: np.ndarray):
        """Clean reference batch for a chunk of targets, plus target position -> batch index."""
        cfg = self.cfg
        bs = cfg.batch_size
        members = np.arange(chunk * bs, min((chunk + 1) * bs, len(target_idx)))
        rng = np.random.default_rng(subseed(cfg.seed, f"reference-{chunk}"))
        if cfg.reference_split == "train":
            picks = rng.choice(self.reference_pool, size=bs, replace=False)
            return self.train_data.samples[picks], {}
        batch = list(self.test_data.samples[target_idx[members]])
        fill = rng.choice(self.reference_pool, size=bs - len(members), replace=False)
        batch.extend(self.train_data.samples[fill])
        return np.asarray(batch), {int(p): i for i, p in enumerate(members)}

    def _chunks(self, n: int):
        return range(math.ceil(n / self.cfg.batch_size))

    def _lid(self, net, queries, chunk, target_idx):
        ref, counterpart = self._reference_batch(chunk, target_idx)
        qs = [(x, label, counterpart.get(pos)) for pos, label, x in queries]
        out = lid.extract_features(net, ref, qs, self.cfg.lid_config())
        return {(queries[i][0], queries[i][1]): v for i, v in zip(out.kept, out.vectors)}

    def attack_results(self, role: str, kappa: float, target_idx: np.ndarray) -> list:
        """Attack results for ``target_idx`` on the ``role`` model (cached, saved under adv/)."""
        cfg = self.cfg
        key = (role, cfg.attack, cfg.decision_rule, kappa, target_idx.tobytes())
        if key not in self._attacks:
            x = self.test_data.samples[target_idx]
            y = self.test_data.labels[target_idx]
            results = attacks.run_attack(cfg.attack, self.model(role), x, y, cfg.attack_config(kappa))
            self._save_attack(role, kappa, target_idx, results)
            self._attacks[key] = results
        return self._attacks[key]

    def preload_attack(self, role: str, kappa: float, target_idx: np.ndarray, results: list) -> None:
        key = (role, self.cfg.attack, self.cfg.decision_rule, kappa, target_idx.tobytes())
        self._attacks[key] = results

    def crafted(self, role: str, kappa: float, target_idx: np.ndarray, feature_role: str | None = None) -> CraftedSet:
        """Attack ``target_idx`` on the ``role`` model and featurise on ``feature_role`` (default: same)."""
        cfg = self.cfg
        feature_role = feature_role or role
        key = (role, feature_role, cfg.attack, cfg.decision_rule, kappa, target_idx.tobytes())
        if key in self._crafted:
            return self._crafted[key]
        results = self.attack_results(role, kappa, target_idx)
        crafted = CraftedSet(results)
        net = self.model(feature_role)
        clean = self.clean_features(feature_role, target_idx)
        for chunk in self._chunks(len(target_idx)):
            queries = []
            for pos in range(chunk * cfg.batch_size, min((chunk + 1) * cfg.batch_size, len(target_idx))):
                r = results[pos]
                if not r.success or pos not in clean or r.l2 == 0.0:
                    continue
                seed = subseed(cfg.seed, f"noise-{role}-{kappa:g}-{int(target_idx[pos])}")
                queries.append((pos, "noisy", lid.make_noisy(r.original, r.l2, (0.0, 1.0), seed)))
                queries.append((pos, "adversarial", r.adversarial))
            feats = self._lid(net, queries, chunk, target_idx)
            for pos, _, _ in queries[::2]:
                if (pos, "noisy") in feats and (pos, "adversarial") in feats:
                    crafted.features[pos] = {"clean": clean[pos], "noisy": feats[(pos, "noisy")],
                                             "adversarial": feats[(pos, "adversarial")]}
                else:
                    crafted.dropped += 1
        self._save_features(role, feature_role, kappa, target_idx, crafted)
        self._crafted[key] = crafted
        return crafted

    def clean_features(self, role: str, target_idx: np.ndarray) -> dict:
        key = (role, target_idx.tobytes())
        if key not in self._clean_feats:
            net = self.model(role)
            feats = {}
            for chunk in self._chunks(len(target_idx)):
                positions = range(chunk * self.cfg.batch_size, min((chunk + 1) * self.cfg.batch_size, len(target_idx)))
                queries = [(pos, "clean", self.test_data.samples[target_idx[pos]]) for pos in positions]
                for (pos, _), v in self._lid(net, queries, chunk, target_idx).items():
                    feats[pos] = v
            self._clean_feats[key] = feats
        return self._clean_feats[key]

    def _stem(self, role, kappa):
        return f"{role}_{self.cfg.attack}_{self.cfg.rule_tag}_k{kappa:g}"

    def _save_attack(self, role, kappa, target_idx, results):
        stem = self._stem(role, kappa)
        attacks.write_results_csv(results, self.out / "adv" / f"{stem}.csv", [int(i) for i in target_idx])
        attacks.save_results_npz(results, self.out / "adv" / f"{stem}.npz", target_idx)
        side = int(round(math.sqrt(len(results[0].original))))
        if side * side == len(results[0].original):
            for r, sid in list(zip(results, target_idx))[:5]:
                data.dump_image(r.adversarial, side, side, self.out / "images" / f"{stem}_{int(sid)}.pgm")

    def _save_features(self, role, feature_role, kappa, target_idx, crafted):
        ids, vecs = [], []
        for pos in sorted(crafted.features):
            for label in lid.LABELS:
                ids.append(int(target_idx[pos]))
                vecs.append(crafted.features[pos][label])
        suffix = "" if role == feature_role else f"_on_{feature_role}"
        lid.write_features_csv(vecs, self.out / "features" / f"{self._stem(role, kappa)}{suffix}.csv", ids)


def _split_features(crafted: CraftedSet, positions):
    pos, neg = [], []
    for p in positions:
        f = crafted.features.get(int(p))
        if f is not None:
            pos.append(f["adversarial"])
            neg.extend([f["clean"], f["noisy"]])
    return pos, neg


def _metrics(model, pos, neg):
    ps = detector.score_all(model, pos)
    ns = detector.score_all(model, neg)
    return detector.auc(ps, ns), float(np.mean(ps >= model.threshold)), detector.tpr_at_fpr(ps, ns, 0.05)


def _empty_row(protocol, cfg, kappa, dropped):
    return ReportRow(protocol, cfg.attack, cfg.rule_tag, kappa, None, None, n=0, dropped_degenerate=dropped)


def run_oblivious(cfg: ExperimentConfig, session: Session | None = None) -> list[ReportRow]:
    """Per kappa: detector trained and tested on the same attack and confidence."""
    session = session or Session(cfg)
    target_idx = session.targets(("target",))
    train_pos, test_pos = session.split(len(target_idx))
    rows = []
    for kappa in cfg.kappa_list:
        crafted = session.crafted("target", kappa, target_idx)
        tr_p, tr_n = _split_features(crafted, train_pos)
        te_p, te_n = _split_features(crafted, test_pos)
        if not tr_p or not te_p:
            logger.warning("oblivious kappa=%g: no successful attacks in a split", kappa)
            rows.append(_empty_row("oblivious", cfg, kappa, crafted.dropped))
            continue
        model = detector.train_detector(tr_p, tr_n, cfg.detector_config())
        a, dr, tpr = _metrics(model, te_p, te_n)
        rows.append(ReportRow("oblivious", cfg.attack, cfg.rule_tag, kappa, a, dr, n=len(te_p),
                              dropped_degenerate=crafted.dropped, tpr_at_5_fpr=tpr))
    return rows


def run_ensemble(cfg: ExperimentConfig, session: Session | None = None) -> list[ReportRow]:
    """One detector trained on the union of all kappas, evaluated per kappa."""
    if len(cfg.kappa_list) < 2:
        raise ConfigError("the ensemble protocol needs at least two kappa values")
    session = session or Session(cfg)
    target_idx = session.targets(("target",))
    train_pos, test_pos = session.split(len(target_idx))
    crafted = {kappa: session.crafted("target", kappa, target_idx) for kappa in cfg.kappa_list}
    all_p, all_n = [], []
    for kappa in cfg.kappa_list:
        p, n = _split_features(crafted[kappa], train_pos)
        all_p.extend(p)
        all_n.extend(n)
    rows = []
    model = detector.train_detector(all_p, all_n, cfg.detector_config()) if all_p and all_n else None
    for kappa in cfg.kappa_list:
        te_p, te_n = _split_features(crafted[kappa], test_pos)
        if model is None or not te_p:
            rows.append(_empty_row("ensemble", cfg, kappa, crafted[kappa].dropped))
            continue
        a, dr, tpr = _metrics(model, te_p, te_n)
        rows.append(ReportRow("ensemble", cfg.attack, cfg.rule_tag, kappa, a, dr, n=len(te_p),
                              dropped_degenerate=crafted[kappa].dropped, tpr_at_5_fpr=tpr))
    return rows


def run_transfer(cfg: ExperimentConfig, session: Session | None = None) -> list[ReportRow]:
    """Craft on the source model, detect and classify with the target model and its detector."""
    if cfg.source_model == cfg.target_model:
        raise ConfigError("transfer needs distinct source and target models")
    session = session or Session(cfg)
    target_net = session.model("target")
    target_idx = session.targets(("target", "source"))
    train_pos, test_pos = session.split(len(target_idx))
    rows = []
    for kappa in cfg.kappa_list:
        own = session.crafted("target", kappa, target_idx)
        moved = session.crafted("source", kappa, target_idx, feature_role="target")
        tr_p, tr_n = _split_features(own, train_pos)
        _, te_n = _split_features(own, test_pos)
        sent = [int(p) for p in test_pos if moved.results[int(p)].success]
        logger.info("transfer kappa=%g: %d/%d source attacks succeeded", kappa, len(sent), len(test_pos))
        evaluated = [p for p in sent if p in moved.features]
        dropped = own.dropped + moved.dropped
        if not tr_p or not evaluated or not te_n:
            rows.append(_empty_row("transfer", cfg, kappa, dropped))
            continue
        model = detector.train_detector(tr_p, tr_n, cfg.detector_config())
        adv_feats = [moved.features[p]["adversarial"] for p in evaluated]
        ps = detector.score_all(model, adv_feats)
        detected = ps >= model.threshold
        adv_x = np.array([moved.results[p].adversarial for p in evaluated])
        labels = np.array([moved.results[p].true_label for p in evaluated])
        correct = nn.predict(target_net, adv_x) == labels
        ns = detector.score_all(model, te_n)
        rows.append(ReportRow(
            "transfer", cfg.attack, cfg.rule_tag, kappa,
            auc=detector.auc(ps, ns), detection_rate=float(detected.mean()),
            post_detection_classification_rate=float(np.mean(~detected & correct)),
            classification_rate_wo_detection=float(correct.mean()),
            n=len(evaluated), dropped_degenerate=dropped, tpr_at_5_fpr=detector.tpr_at_fpr(ps, ns, 0.05)))
    return rows


RUNNERS = {"oblivious": run_oblivious, "ensemble": run_ensemble, "transfer": run_transfer}


def run_protocol(name: str, cfg: ExperimentConfig, session: Session | None = None):
    """Run a protocol and write ``reports/<name>_<attack>_<rule>.csv``; returns (rows, path)."""
    rows = RUNNERS[name](cfg, session)
    path = Path(cfg.out_dir) / "reports" / f"{name}_{cfg.attack}_{cfg.rule_tag}.csv"
    emit_report(rows, path)
    return rows, path
