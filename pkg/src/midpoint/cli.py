"""Command-line entry point: ``midpoint <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input).  Where a subcommand takes ``--config``, the JSON file is the base
and explicit flags override individual fields.  All randomness derives
from the master ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .dataset import (
    ParseError,
    RatingsDataset,
    SyntheticConfig,
    filter_min_counts,
    generate_synthetic,
    parse_labels,
    parse_ratings,
)
from .factorization import AnalystModel, MfHyperparams, compute_biases, train_mf
from .seeding import derive_int, derive_rng
from .wire import AnalystError

logger = logging.getLogger("midpoint")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_bytes(path: str | Path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"input file not found: {p}")
    return p.read_bytes()


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(_read_bytes(path))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc


def _write(path: str | Path, data: str | bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    p.write_bytes(data)


def _load_model(path) -> AnalystModel:
    try:
        return AnalystModel.from_json(_read_bytes(path).decode("utf-8"))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: not a valid model: {exc}") from exc


def _load_dataset(ratings, labels=None, fmt="doublecolon", rating_range=(1.0, 5.0), label_name=None) -> RatingsDataset:
    label_map = parse_labels(_read_bytes(labels)) if labels else None
    return parse_ratings(_read_bytes(ratings), fmt, rating_range, label_map, label_name)


def _rating_range(args) -> tuple[float, float] | None:
    if getattr(args, "no_range", False):
        return None
    return tuple(args.rating_range) if args.rating_range else (1.0, 5.0)


def _dataset_from_config(doc: dict, base: Path) -> RatingsDataset:
    if "synthetic" in doc:
        syn = dict(doc["synthetic"])
        seed = syn.pop("seed", 0)
        dataset, _ = generate_synthetic(SyntheticConfig.from_dict(syn), seed)
        return dataset
    if "dataset" not in doc:
        raise DataError("config needs a 'dataset' or 'synthetic' section")
    ds = doc["dataset"]
    rr = ds.get("rating_range", [1, 5])
    dataset = _load_dataset(
        base / ds["ratings"],
        base / ds["labels"] if ds.get("labels") else None,
        ds.get("format", "doublecolon"),
        None if rr is None else tuple(float(v) for v in rr),
        ds.get("label_name"),
    )
    if ds.get("min_user_ratings") or ds.get("min_item_ratings"):
        dataset = filter_min_counts(dataset, ds.get("min_user_ratings", 0), ds.get("min_item_ratings", 0))
    return dataset


def cmd_synth(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    doc = dict(doc.get("synthetic", doc))
    doc.pop("seed", None)
    overrides = {
        "n_users": args.n_users, "n_items": args.n_items, "d": args.d, "noise_sigma": args.sigma,
        "bias_scale": args.bias_scale, "prob_model": args.prob_model,
        "prob_low": args.prob_low, "prob_high": args.prob_high,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.paired:
        doc["paired"] = True
    doc.setdefault("n_users", 1000)
    doc.setdefault("n_items", 50)
    doc.setdefault("d", 5)
    config = SyntheticConfig.from_dict(doc)
    dataset, truth = generate_synthetic(config, derive_int(args.seed, "synth"))
    out = Path(args.out)
    _write(out / "ratings.dat", dataset.to_double_colon())
    _write(out / "labels.csv", dataset.labels_csv())
    _write(out / "truth.json", truth.to_json())
    print(f"wrote {len(dataset.ratings)} ratings by {len(dataset.users)} users to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = _load_dataset(args.ratings, args.labels, args.format, _rating_range(args), args.label_name)
    if args.min_user_ratings or args.min_item_ratings:
        dataset = filter_min_counts(dataset, args.min_user_ratings, args.min_item_ratings)
    hp = MfHyperparams(
        d=args.d, learning_rate=args.lr, regularization=args.reg, epochs=args.epochs,
        seed=derive_int(args.seed, "mf"), joint_bias=args.joint_bias,
    )
    model = train_mf(dataset, compute_biases(dataset), hp)
    _write(args.out, model.to_json())
    print(f"trained d={hp.d} on {len(dataset.ratings)} ratings; training RMSE {model.noise_sigma_hat:.4f}")
    return 0


def cmd_select(args) -> int:
    from .wire import choose_items

    model = _load_model(args.model)
    items = choose_items(model, args.budget)
    _write(args.out, json.dumps(items))
    print(f"selected {len(items)} items")
    return 0


def cmd_obfuscate(args) -> int:
    from .protocol import mp_disclose, mp_obfuscate, mpss_disclose, mpss_obfuscate, round_ratings

    model = _load_model(args.model)
    dataset = _load_dataset(args.ratings, args.labels, args.format, _rating_range(args))
    profiles = model.profiles
    items = json.loads(_read_bytes(args.items)) if args.items else model.item_ids
    items = [str(i) for i in items if str(i) in profiles]
    solicited = set(items)
    lines = []
    for user in dataset.labeled_users():
        ratings = {i: r for i, r in dataset.user_ratings(user).items() if i in solicited}
        if not ratings:
            continue
        x0 = dataset.label(user)
        rng = derive_rng(args.seed, "obfuscate", user)
        if args.protocol == "mpss":
            slice_ = [profiles[i] for i in items]
            disclosure = mpss_disclose(slice_, [model.probs(i) for i in items])
            fb = mpss_obfuscate(ratings, x0, disclosure, rng)
        else:
            rated = [i for i in items if i in ratings]
            disclosure = mp_disclose([profiles[i] for i in rated])
            fb = mp_obfuscate([ratings[i] for i in rated], x0, disclosure)
        values = fb.values
        if args.round:
            values = round_ratings(values, args.round[0], args.round[1], rng).astype(float)
        lines.append(json.dumps({"user_id": user, "revealed": list(fb.revealed), "values": values.tolist()}))
    _write(args.out, "\n".join(lines) + ("\n" if lines else ""))
    print(f"obfuscated {len(lines)} users with {args.protocol.upper()}")
    return 0


def _read_feedback(path) -> dict[str, dict[str, float]]:
    out = {}
    for lineno, line in enumerate(_read_bytes(path).decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            out[str(doc["user_id"])] = dict(zip(map(str, doc["revealed"]), map(float, doc["values"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad feedback record: {exc}") from exc
    return out


def cmd_attack(args) -> int:
    from .evaluation import _nb_matrix
    from .inference import auc, dense_inputs, logistic_score, logistic_train, lse_attack, nb_score, nb_train

    model = _load_model(args.model)
    profiles = model.profiles
    feedback = _read_feedback(args.feedback)
    labels = parse_labels(_read_bytes(args.labels))
    users = [u for u in feedback if labels.get(u) in (1, -1)]
    if not users:
        raise DataError("no labeled users in the feedback file")
    item_ids = model.item_ids
    lo, hi = (int(v) for v in args.rating_range) if args.rating_range else (1, 5)
    if args.attacker == "lse":
        scores = []
        for u in users:
            items = [i for i in feedback[u] if i in profiles]
            scores.append(lse_attack([feedback[u][i] for i in items], [profiles[i] for i in items]).score if items else 0.0)
    else:
        if not args.train_ratings or not args.train_labels:
            raise UsageError(f"attacker {args.attacker} needs --train-ratings and --train-labels")
        train = _load_dataset(args.train_ratings, args.train_labels, args.format, None)
        tu = train.labeled_users()
        X = dense_inputs([train.user_ratings(u) for u in tu], item_ids)
        y = [train.label(u) for u in tu]
        Xt = dense_inputs([feedback[u] for u in users], item_ids)
        if args.attacker == "lr":
            clf = logistic_train(X, y, args.l2, args.epochs, derive_int(args.seed, "lr"))
            scores = logistic_score(clf, Xt).tolist()
        else:
            mask = dense_inputs([{i: 1.0 for i in train.user_ratings(u)} for u in tu], item_ids) > 0
            clf = nb_train(_nb_matrix(X, mask, lo, hi), y, args.alpha, range(0, hi - lo + 2))
            tmask = dense_inputs([{i: 1.0 for i in feedback[u]} for u in users], item_ids) > 0
            scores = nb_score(clf, _nb_matrix(Xt, tmask, lo, hi)).tolist()
        if args.model_out:
            _write(args.model_out, clf.to_json())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["user_id", "score", "label"])
    for u, s in zip(users, scores):
        writer.writerow([u, repr(float(s)), labels[u]])
    _write(args.out, buf.getvalue())
    y_true = [labels[u] for u in users]
    if len(set(y_true)) == 2:
        print(f"AUC {auc(scores, y_true):.4f} over {len(users)} users")
    return 0


def _experiment_config(doc: dict, args):
    from .evaluation import ExperimentConfig

    exp = dict(doc.get("experiment", {}))
    for key in ("folds", "jobs"):
        if getattr(args, key, None) is not None:
            exp[key] = getattr(args, key)
    exp["seed"] = args.seed if args.seed is not None else exp.get("seed", 0)
    try:
        return ExperimentConfig.from_dict(exp)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid experiment config: {exc}") from exc


def cmd_evaluate(args) -> int:
    from .evaluation import run_experiment

    doc = _read_json(args.config)
    dataset = _dataset_from_config(doc, Path(args.config).parent)
    config = _experiment_config(doc, args)
    report = run_experiment(dataset, config)
    out = Path(args.out_dir)
    _write(out / "report.json", report.to_json())
    _write(out / "report.csv", report.to_csv())
    for scheme, entry in report.summary().items():
        aucs = " ".join(f"{a}={v:.3f}" for a, v in entry["auc"].items())
        print(f"{scheme:8s} RMSE={entry['rmse']:.4f} {aucs}")
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import curve_csv, tradeoff_sweep

    doc = _read_json(args.config)
    dataset = _dataset_from_config(doc, Path(args.config).parent)
    config = _experiment_config(doc, args)
    scheme = args.scheme or doc.get("scheme", "MPSS")
    alphas = doc.get("alphas", [round(0.1 * k, 1) for k in range(11)])
    points = tradeoff_sweep(dataset, scheme, alphas, config)
    _write(args.out, curve_csv(points))
    for p in points:
        print(f"alpha={p.alpha:.1f} AUC_LSE={p.auc_lse:.3f} RMSE={p.rmse:.4f}")
    return 0


def cmd_serve(args) -> int:
    from .wire import AnalystService, SelectionConfig, analyst_serve

    model = _load_model(args.model)
    items = tuple(json.loads(_read_bytes(args.items))) if args.items else None
    config = SelectionConfig(budget=args.budget, protocol=args.protocol, items=items)
    if args.http:
        import uvicorn

        from .api import create_app

        uvicorn.run(create_app(AnalystService(model, config)), host=args.host, port=args.port)
    else:
        analyst_serve(model, config, args.host, args.port)
    return 0


def cmd_agent(args) -> int:
    from .wire import user_agent_run

    text = _read_bytes(args.ratings).decode("utf-8")
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:2]] != ["item_id", "rating"]:
        raise DataError(f"{args.ratings}: expected an item_id,rating CSV")
    try:
        ratings = {row[0].strip(): float(row[1]) for row in reader if row}
    except (IndexError, ValueError) as exc:
        raise DataError(f"{args.ratings}: bad rating row: {exc}") from exc
    rng = derive_rng(args.seed, "agent")
    if args.url:
        from .api import user_agent_run_http

        estimate = user_agent_run_http(ratings, args.x0, args.url, args.protocol, rng)
    else:
        estimate = user_agent_run(ratings, args.x0, args.host, args.port, args.protocol, rng)
    print(estimate.model_dump_json())
    return 0


def cmd_drop_stats(args) -> int:
    from .evaluation import drop_ratio_stats

    model = _load_model(args.model)
    dataset = _load_dataset(args.ratings, args.labels, args.format, _rating_range(args))
    stats = drop_ratio_stats(dataset, model, derive_rng(args.seed, "drop-stats"))
    _write(args.out, stats.to_json())
    s = stats.summary()
    if s["n"]:
        print(f"{s['n']} users; mean dropped fraction {s['mean']:.4f}; median {s['quantiles']['0.5']:.4f}")
    return 0


def _add_data_flags(p, labels_required=True):
    p.add_argument("--ratings", required=True, help="ratings file")
    p.add_argument("--labels", required=labels_required, help="user_id,label CSV with labels in {-1,1}")
    p.add_argument("--format", default="doublecolon", choices=["doublecolon", "csv"], help="ratings file format")
    p.add_argument("--rating-range", nargs=2, type=float, metavar=("LO", "HI"), help="valid rating range (default 1 5)")
    p.add_argument("--no-range", action="store_true", help="accept any real rating")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="midpoint", description="Privacy-preserving rating disclosure: data, training, protocols, attacks, evaluation.")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset with ground truth")
    p.add_argument("--config", help="JSON synthetic config")
    p.add_argument("--n-users", type=int, help="number of users")
    p.add_argument("--n-items", type=int, help="number of items")
    p.add_argument("--d", type=int, help="latent dimension")
    p.add_argument("--sigma", type=float, help="noise standard deviation")
    p.add_argument("--bias-scale", type=float, help="biases uniform in [-b, b]")
    p.add_argument("--prob-model", choices=["dense", "uniform"], help="rating-probability model")
    p.add_argument("--prob-low", type=float, help="lower bound of uniform rating probabilities")
    p.add_argument("--prob-high", type=float, help="upper bound of uniform rating probabilities")
    p.add_argument("--paired", action="store_true", help="users in pairs sharing x with opposite labels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit item profiles and rating probabilities")
    _add_data_flags(p)
    p.add_argument("--label-name", help="name of the private feature")
    p.add_argument("--d", type=int, default=20, help="latent dimension (default 20)")
    p.add_argument("--epochs", type=int, default=20, help="SGD epochs (default 20)")
    p.add_argument("--lr", type=float, default=0.01, help="SGD learning rate (default 0.01)")
    p.add_argument("--reg", type=float, default=0.1, help="L2 regularization (default 0.1)")
    p.add_argument("--joint-bias", action="store_true", help="learn biases jointly instead of fixing class-mean estimates")
    p.add_argument("--min-user-ratings", type=int, default=0, help="drop users with fewer ratings")
    p.add_argument("--min-item-ratings", type=int, default=0, help="drop items with fewer ratings")
    p.add_argument("--out", required=True, help="model JSON path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="choose items to solicit (A-optimal greedy)")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--budget", type=int, required=True, help="number of items to solicit")
    p.add_argument("--out", required=True, help="output JSON list of item ids")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("obfuscate", help="obfuscate each labeled user's ratings")
    _add_data_flags(p)
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--protocol", choices=["mp", "mpss"], default="mp", help="obfuscation protocol")
    p.add_argument("--items", help="JSON list of solicited items (default: whole catalog)")
    p.add_argument("--round", nargs=2, type=int, metavar=("LO", "HI"), help="randomized rounding into [LO, HI]")
    p.add_argument("--out", required=True, help="feedback JSONL path")
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("attack", help="score users' private label from feedback")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--feedback", required=True, help="feedback JSONL from 'obfuscate'")
    p.add_argument("--labels", required=True, help="true labels of the feedback users, for AUC")
    p.add_argument("--attacker", choices=["lse", "lr", "nb"], default="lse", help="attack classifier")
    p.add_argument("--train-ratings", help="raw ratings for training LR/NB")
    p.add_argument("--train-labels", help="labels for training LR/NB")
    p.add_argument("--format", default="doublecolon", choices=["doublecolon", "csv"], help="training ratings format")
    p.add_argument("--rating-range", nargs=2, type=int, metavar=("LO", "HI"), help="NB discretization range (default 1 5)")
    p.add_argument("--l2", type=float, default=1.0, help="LR regularization")
    p.add_argument("--epochs", type=int, default=300, help="LR iterations")
    p.add_argument("--alpha", type=float, default=1.0, help="NB smoothing")
    p.add_argument("--model-out", help="write the trained attack model JSON here")
    p.add_argument("--out", required=True, help="scores CSV path")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="cross-validated AUC/RMSE report")
    p.add_argument("--config", required=True, help="JSON with dataset|synthetic and experiment sections")
    p.add_argument("--folds", type=int, help="override experiment.folds")
    p.add_argument("--jobs", type=int, help="parallel fold workers")
    p.add_argument("--out-dir", default=".", help="directory for report.json and report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="privacy/accuracy tradeoff over the mixing level alpha")
    p.add_argument("--config", required=True, help="JSON as for evaluate, plus optional scheme and alphas")
    p.add_argument("--scheme", help="scheme to sweep (default MPSS)")
    p.add_argument("--folds", type=int, help="override experiment.folds")
    p.add_argument("--jobs", type=int, help="parallel fold workers")
    p.add_argument("--out", required=True, help="curve CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="run the analyst service")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--budget", type=int, default=20, help="items to solicit per session")
    p.add_argument("--items", help="JSON list of items to solicit instead of selecting")
    p.add_argument("--protocol", choices=["mp", "mpss"], default="mp", help="protocol to offer")
    p.add_argument("--host", default="127.0.0.1", help="listen address")
    p.add_argument("--port", type=int, default=7341, help="listen port")
    p.add_argument("--http", action="store_true", help="serve the HTTP API instead of NDJSON over TCP")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("agent", help="answer one solicitation as a privacy-conscious user")
    p.add_argument("--ratings", required=True, help="item_id,rating CSV of this user's ratings")
    p.add_argument("--x0", type=int, choices=[-1, 1], required=True, help="private label (never sent)")
    p.add_argument("--protocol", choices=["mp", "mpss"], default="mp", help="protocol to run")
    p.add_argument("--host", default="127.0.0.1", help="analyst host")
    p.add_argument("--port", type=int, default=7341, help="analyst port")
    p.add_argument("--url", help="analyst HTTP base URL (uses the HTTP API)")
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("drop-stats", help="fraction of rated items sub-sampling withholds")
    _add_data_flags(p)
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--out", required=True, help="summary JSON path")
    p.set_defaults(func=cmd_drop_stats)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"midpoint: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.seed is None and args.command not in ("evaluate", "sweep"):
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"midpoint: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ParseError, OSError, AnalystError) as exc:
        print(f"midpoint: data error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"midpoint: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
