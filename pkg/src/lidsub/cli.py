"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, data, detector, harness, lid, nn
from .errors import ConfigError

logger = logging.getLogger("lidsub")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _kappas(text: str):
    try:
        return tuple(float(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad kappa list {text!r}") from None


def _common(p):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--attack", choices=["cw", "ead"])
    p.add_argument("--rule", choices=["en", "l1"])
    p.add_argument("--kappa", type=_kappas, help="comma-separated confidence values")
    p.add_argument("--beta", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lidsub", description="LID-based adversarial subspace analysis")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch-mnist", help="export the bundled 5,000-image MNIST subset as IDX files")
    p.add_argument("--out-dir", default="data/mnist")
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-model", help="train the target or source model")
    _common(p)
    p.add_argument("--role", choices=["target", "source"], default="target")

    p = sub.add_parser("attack", help="attack the selected targets at every kappa")
    _common(p)
    p.add_argument("--role", choices=["target", "source"], default="target")

    p = sub.add_parser("features", help="LID features for clean, noisy and adversarial examples")
    _common(p)
    p.add_argument("--role", choices=["target", "source"], default="target")
    p.add_argument("--adv", nargs="*", default=[], help="saved attack .npz files (otherwise attacks run)")

    p = sub.add_parser("detect", help="train and evaluate a detector from a features CSV")
    _common(p)
    p.add_argument("features_csv")

    for name in harness.PROTOCOLS:
        p = sub.add_parser(name, help=f"run the {name} protocol")
        _common(p)

    p = sub.add_parser("report", help="print report CSVs as tables")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out-dir", default="out")
    return parser


def _config(args) -> harness.ExperimentConfig:
    return harness.load_config(
        args.config, seed=args.seed, out_dir=args.out_dir, attack=args.attack,
        decision_rule=args.rule.upper() if args.rule else None, kappa_list=args.kappa,
        beta=args.beta, k=args.k, batch_size=args.batch_size)


def _print_rows(rows):
    header = f"{'protocol':<10} {'attack':<6} {'rule':<4} {'kappa':>6} {'AUC':>7} {'det%':>7} {'post%':>7} {'w/o%':>7} {'n':>5} {'drop':>5}"
    print(header)

    def pct(v):
        return "-" if v is None else f"{100 * v:.2f}"

    for r in rows:
        print(f"{r.protocol:<10} {r.attack:<6} {r.rule:<4} {r.kappa:>6g} {pct(r.auc):>7} {pct(r.detection_rate):>7} "
              f"{pct(r.post_detection_classification_rate):>7} {pct(r.classification_rate_wo_detection):>7} "
              f"{r.n:>5} {r.dropped_degenerate:>5}")


def cmd_fetch_mnist(args):
    paths = data.export_mnist_subset(args.out_dir, args.n_test, args.seed)
    for key, path in paths.items():
        print(f"{key} = {path}")


def cmd_train_model(args):
    cfg = _config(args)
    session = harness.Session(cfg)
    net = session.model(args.role)
    path = Path(cfg.out_dir) / "models" / f"{args.role}.lidnn"
    if not path.exists():
        nn.save_network(net, path)
    print(f"{args.role}: {[s.out_dim for s in net.layers]} train acc {nn.accuracy(net, session.train_data):.4f} "
          f"test acc {nn.accuracy(net, session.test_data):.4f} -> {path}")


def cmd_attack(args):
    cfg = _config(args)
    session = harness.Session(cfg)
    targets = session.targets((args.role,))
    for kappa in cfg.kappa_list:
        results = session.attack_results(args.role, kappa, targets)
        ok = [r for r in results if r.success]
        mean_l2 = np.mean([r.l2 for r in ok]) if ok else float("nan")
        print(f"{cfg.attack} kappa={kappa:g}: {len(ok)}/{len(results)} succeeded, mean L2 {mean_l2:.4f}")


def cmd_features(args):
    cfg = _config(args)
    session = harness.Session(cfg)
    targets = session.targets((args.role,))
    kappas = list(cfg.kappa_list)
    if args.adv:
        kappas = []
        for path in args.adv:
            ids, results = attacks.load_results_npz(path)
            if not np.array_equal(ids, targets):
                raise ConfigError(f"{path} was crafted for a different target selection")
            session.preload_attack(args.role, results[0].kappa, targets, results)
            kappas.append(results[0].kappa)
    for kappa in kappas:
        crafted = session.crafted(args.role, kappa, targets)
        print(f"kappa={kappa:g}: {len(crafted.features)} samples featurised, {crafted.dropped} dropped")


def cmd_detect(args):
    cfg = _config(args)
    ids, vectors = lid.read_features_csv(args.features_csv)
    by_id: dict[int, dict] = {}
    for sid, v in zip(ids, vectors):
        by_id.setdefault(sid, {})[v.label] = v
    uniq = np.array(sorted(by_id))
    perm = np.random.default_rng(harness.subseed(cfg.seed, "detector-split")).permutation(len(uniq))
    cut = int(round(cfg.train_fraction * len(uniq)))

    def gather(sel):
        pos, neg = [], []
        for sid in uniq[np.sort(sel)]:
            group = by_id[int(sid)]
            pos += [group[k] for k in ("adversarial",) if k in group]
            neg += [group[k] for k in ("clean", "noisy") if k in group]
        return pos, neg

    tr_p, tr_n = gather(perm[:cut])
    te_p, te_n = gather(perm[cut:])
    model = detector.train_detector(tr_p, tr_n, cfg.detector_config())
    ps, ns = detector.score_all(model, te_p), detector.score_all(model, te_n)
    stem = Path(args.features_csv).stem
    detector.save_detector(model, Path(cfg.out_dir) / "models" / f"detector_{stem}.csv")
    print(f"AUC {100 * detector.auc(ps, ns):.2f}  detection rate {100 * np.mean(ps >= model.threshold):.2f}  "
          f"TPR@5%FPR {100 * detector.tpr_at_fpr(ps, ns):.2f}  (n={len(te_p)})")


def cmd_protocol(args):
    cfg = _config(args)
    rows, path = harness.run_protocol(args.command, cfg)
    _print_rows(rows)
    print(f"report written to {path}")


def cmd_report(args):
    inputs = args.inputs or sorted(str(p) for p in (Path(args.out_dir) / "reports").glob("*.csv"))
    if not inputs:
        raise ConfigError("no report files found")
    rows = []
    for path in inputs:
        rows.extend(harness.read_report(path))
    _print_rows(rows)


COMMANDS = {
    "fetch-mnist": cmd_fetch_mnist, "train-model": cmd_train_model, "attack": cmd_attack,
    "features": cmd_features, "detect": cmd_detect, "report": cmd_report,
    **{name: cmd_protocol for name in harness.PROTOCOLS},
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logger.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
