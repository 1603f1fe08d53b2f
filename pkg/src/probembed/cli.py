"""Command-line front-end: gen-data, train, embed, retrieve, eval, analyze.

Exit codes: 0 success, 1 validation error, 2 numeric failure.  Errors are a
single JSON line on stderr.  Every output file records the full invocation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .datagen import DatasetConfig, generate
from .gaussian import IncompatibleEmbeddingsError, MatchParams, Modality, NumericOverflowError
from .io import (
    SchemaError,
    read_dataset,
    read_embeddings,
    read_model,
    write_csv,
    write_dataset,
    write_embeddings,
    write_model,
    atomic_write_text,
)
from .metrics import DEFAULT_BINS, DEFAULT_ZETAS, corruption_sweep, evaluate, evaluate_direction
from .retrieval import ModalityError, SimilarityKind, SimilaritySpec, retrieve
from .trainer import (
    DegenerateEncodingError,
    LossKind,
    Mode,
    NumericalFailure,
    TrainConfig,
    embed_dataset,
    init_model,
    train,
)


class UsageError(Exception):
    """Bad flags or flag values; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- flag value parsers ------------------------------------------------------


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError(f"expected a nonnegative integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0 or v == float("inf"):
        raise ValueError(f"expected a finite nonnegative number, got {text}")
    return v


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"expected a number in [0, 1], got {text}")
    return v


def _int_list(text):
    if isinstance(text, list):
        vals = [int(x) for x in text]
    else:
        vals = [int(x) for x in str(text).split(",") if x.strip()]
    if not vals or any(v < 0 for v in vals):
        raise ValueError(f"expected a comma list of nonnegative integers, got {text}")
    return vals


def _ratio_list(text):
    if isinstance(text, list):
        vals = [float(x) for x in text]
    else:
        vals = [float(x) for x in str(text).split(",") if x.strip()]
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise ValueError(f"expected a comma list of ratios in [0, 1], got {text}")
    return vals


def _kind(text):
    return SimilarityKind.parse(text).value


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text}")
        return text

    return parse


# (flag, dest, parser, default, required)
COMMANDS = {
    "gen-data": [
        ("--classes", "classes", _positive_int, 3, False),
        ("--items", "items", _positive_int, 20, False),
        ("--feature-dim", "feature_dim", _positive_int, DatasetConfig.feature_dim, False),
        ("--attr-dim", "attr_dim", _positive_int, DatasetConfig.attribute_dim, False),
        ("--noise", "noise", _nonneg_float, DatasetConfig.noise_sigma, False),
        ("--ambiguity", "ambiguity", _unit_float, DatasetConfig.ambiguity_fraction, False),
        ("--seed", "seed", int, None, True),
        ("--out", "out", str, None, True),
    ],
    "train": [
        ("--data", "data", str, None, True),
        ("--mode", "mode", _choice("prob", "mu-only"), "prob", False),
        ("--loss", "loss", _choice("soft", "mil", "triplet"), "soft", False),
        ("--batch", "batch", _positive_int, TrainConfig.batch_size, False),
        ("--samples", "samples", _positive_int, TrainConfig.samples, False),
        ("--epochs", "epochs", _nonneg_int, TrainConfig.epochs, False),
        ("--lr", "lr", _nonneg_float, TrainConfig.learning_rate, False),
        ("--lambda-kl", "lambda_kl", _nonneg_float, TrainConfig.lambda_kl, False),
        ("--lambda-unif", "lambda_unif", _nonneg_float, TrainConfig.lambda_unif, False),
        ("--margin", "margin", _nonneg_float, TrainConfig.margin, False),
        ("--embed-dim", "embed_dim", _positive_int, TrainConfig.embed_dim, False),
        ("--seed", "seed", int, None, True),
        ("--out", "out", str, None, True),
    ],
    "embed": [
        ("--model", "model", str, None, True),
        ("--data", "data", str, None, True),
        ("--out", "out", str, None, True),
    ],
    "retrieve": [
        ("--queries", "queries", str, None, True),
        ("--gallery", "gallery", str, None, True),
        ("--metric", "metric", _kind, "mean", False),
        ("--samples", "samples", _positive_int, 7, False),
        ("--seed", "seed", int, None, True),
        ("--topk", "topk", _positive_int, 10, False),
        ("--out", "out", str, None, True),
    ],
    "eval": [
        ("--queries", "queries", str, None, True),
        ("--gallery", "gallery", str, None, True),
        ("--data", "data", str, None, True),
        ("--metric", "metric", _kind, "mean", False),
        ("--zeta", "zeta", _int_list, list(DEFAULT_ZETAS), False),
        ("--samples", "samples", _positive_int, 7, False),
        ("--seed", "seed", int, 0, False),
        ("--out", "out", str, None, True),
    ],
    "analyze": [
        ("--model", "model", str, None, True),
        ("--data", "data", str, None, True),
        ("--embeddings", "embeddings", str, None, True),
        ("--bins", "bins", _positive_int, DEFAULT_BINS, False),
        ("--ratios", "ratios", _ratio_list, [0.0, 0.25, 0.5, 0.75], False),
        ("--metric", "metric", _kind, "mean", False),
        ("--samples", "samples", _positive_int, 7, False),
        ("--seed", "seed", int, 0, False),
        ("--out", "out", str, None, True),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="probembed", description="Probabilistic cross-modal embeddings.")
    parser.add_argument("--version", action="version", version=f"probembed {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, flags in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", dest="config", default=None, help="JSON object mirroring the flags")
        for flag, dest, _, default, required in flags:
            help_text = "required" if required else f"default: {default}"
            # raw strings here; typed and validated after merging --config
            p.add_argument(flag, dest=dest, default=None, help=help_text)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, --config and explicit flags, then type-check every value."""
    flags = COMMANDS[command]
    by_key = {}
    for flag, dest, *_ in flags:
        by_key[dest] = dest
        by_key[flag.lstrip("-")] = dest
    from_config = {}
    if ns.config is not None:
        try:
            cfg = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {ns.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in cfg.items():
            if key not in by_key:
                raise UsageError(f"unknown config key {key!r}")
            from_config[by_key[key]] = value

    out = {}
    for flag, dest, parse, default, required in flags:
        raw = getattr(ns, dest)
        if raw is None:
            raw = from_config.get(dest)
        if raw is None:
            if required:
                raise UsageError(f"missing required flag {flag}")
            out[dest] = default
            continue
        try:
            out[dest] = parse(raw) if not isinstance(raw, bool) else parse(str(raw))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid value for {flag}: {exc}") from None
    return out


def _invocation(command, args):
    return {"command": command, "flags": args, "version": __version__}


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args):
    try:
        config = DatasetConfig(
            num_classes=args["classes"],
            items_per_class_per_modality=args["items"],
            feature_dim=args["feature_dim"],
            attribute_dim=args["attr_dim"],
            noise_sigma=args["noise"],
            ambiguity_fraction=args["ambiguity"],
            seed=args["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = generate(config)
    meta = {"invocation": _invocation("gen-data", args), "config": dict(config.__dict__)}
    write_dataset(args["out"], dataset, meta)


def _train_config(args):
    try:
        return TrainConfig(
            batch_size=args["batch"],
            samples=args["samples"],
            epochs=args["epochs"],
            learning_rate=args["lr"],
            lambda_kl=args["lambda_kl"],
            lambda_unif=args["lambda_unif"],
            seed=args["seed"],
            mode=Mode(args["mode"]),
            alt_mode=LossKind(args["loss"]),
            margin=args["margin"],
            embed_dim=args["embed_dim"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    config = _train_config(args)
    dataset, _ = read_dataset(args["data"])
    if args["epochs"] == 0:
        model = init_model(_feature_dims(dataset), config)
    else:
        try:
            model, _ = train(dataset, config)
        except ValueError as exc:
            if isinstance(exc, DegenerateEncodingError):
                raise
            raise UsageError(str(exc)) from None
    write_model(args["out"], model, config.to_dict(), _invocation("train", args))


def _feature_dims(dataset):
    dims = {}
    for m in (Modality.A, Modality.B):
        group = dataset.modality_items(m)
        if not group:
            raise UsageError(f"dataset has no modality-{m.value} items")
        dims[m] = group[0].features.size
    return dims


def _embedding_meta(command, args, params: MatchParams):
    return {"invocation": _invocation(command, args), "match_params": {"a": params.a, "b": params.b}}


def cmd_embed(args):
    model, _ = read_model(args["model"])
    dataset, _ = read_dataset(args["data"])
    for m, fd in _feature_dims(dataset).items():
        if fd != model.feature_dim(m):
            raise UsageError(
                f"modality {m.value}: data has {fd} features, model expects {model.feature_dim(m)}"
            )
    embeddings = embed_dataset(model, dataset)
    write_embeddings(args["out"], embeddings, _embedding_meta("embed", args, model.match_params))


def _params_from_meta(*metas) -> MatchParams:
    for meta in metas:
        if isinstance(meta, dict) and isinstance(meta.get("match_params"), dict):
            try:
                return MatchParams(meta["match_params"]["a"], meta["match_params"]["b"])
            except (KeyError, TypeError, ValueError):
                raise UsageError("embedding metadata holds invalid match parameters") from None
    return MatchParams()


def _spec(args, params):
    return SimilaritySpec(args["metric"], J=args["samples"], seed=args["seed"], params=params)


def _directions(queries, gallery):
    """Pair each query modality with the opposite-modality gallery entries.

    A mixed dump given as both queries and gallery yields both directions.
    """
    out = []
    for m in (Modality.A, Modality.B):
        q = [e for e in queries if e.modality is m]
        g = [e for e in gallery if e.modality is m.other]
        if q and g:
            out.append((q, g))
    if not out:
        raise ModalityError("queries and gallery share no opposite-modality pairing")
    return out


def cmd_retrieve(args):
    queries, qmeta = read_embeddings(args["queries"])
    gallery, gmeta = read_embeddings(args["gallery"])
    spec = _spec(args, _params_from_meta(qmeta, gmeta))
    ranked = []
    for q, g in _directions(queries, gallery):
        k = min(args["topk"], len(g))
        ranked += [(rl, k) for rl in retrieve(q, g, spec)]
    lines = [json.dumps({"_meta": {"invocation": _invocation("retrieve", args)}}, sort_keys=True)]
    for rl, k in ranked:
        lines.append(json.dumps({
            "query_id": rl.query_id,
            "ranked": list(rl.gallery_ids[:k]),
            "scores": [float(s) for s in rl.scores[:k]],
        }, sort_keys=True, allow_nan=False))
    atomic_write_text(args["out"], "\n".join(lines) + "\n")


def _check_ids(embeddings, dataset, path):
    missing = [e.id for e in embeddings if e.id not in dataset._by_id]
    if missing:
        raise UsageError(f"{path}: {len(missing)} ids absent from the dataset, e.g. {missing[0]!r}")
    for e in embeddings:
        if dataset[e.id].modality is not e.modality:
            raise UsageError(f"{path}: id {e.id!r} has modality {e.modality.value} in the dump")


def cmd_eval(args):
    queries, qmeta = read_embeddings(args["queries"])
    gallery, gmeta = read_embeddings(args["gallery"])
    dataset, _ = read_dataset(args["data"])
    _check_ids(queries, dataset, args["queries"])
    _check_ids(gallery, dataset, args["gallery"])
    spec = _spec(args, _params_from_meta(qmeta, gmeta))
    rows = []
    for q, g in _directions(queries, gallery):
        rows += evaluate_direction(q, g, dataset, spec, zetas=args["zeta"]).rows()
    write_csv(args["out"], ["direction", "metric", "param", "value"], rows, _invocation("eval", args))


def cmd_analyze(args):
    model, _ = read_model(args["model"])
    dataset, _ = read_dataset(args["data"])
    embeddings, meta = read_embeddings(args["embeddings"])
    _check_ids(embeddings, dataset, args["embeddings"])
    for m, fd in _feature_dims(dataset).items():
        if fd != model.feature_dim(m):
            raise UsageError(
                f"modality {m.value}: data has {fd} features, model expects {model.feature_dim(m)}"
            )
    spec = _spec(args, _params_from_meta(meta))
    report = evaluate(embeddings, dataset, spec)
    out = Path(args["out"])
    out.mkdir(parents=True, exist_ok=True)
    invocation = _invocation("analyze", args)
    bins = {}
    for name, d in report.directions.items():
        if len(d.per_query_r1) < args["bins"]:
            raise UsageError(f"{name}: {len(d.per_query_r1)} queries cannot fill {args['bins']} bins")
        bins[name] = d.bins(args["bins"])
    sweep = corruption_sweep(model, dataset, args["ratios"], args["seed"])
    for name, table in bins.items():
        write_csv(out / f"uncertainty_bins_{name}.csv", ["bin", "mean_uncertainty", "mean_r1"],
                  [(b.bin, b.mean_uncertainty, b.mean_r1) for b in table], invocation)
    write_csv(out / "corruption.csv", ["ratio", "mean_sigma"], sweep, invocation)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def _fail(stream, payload: dict, code: int) -> int:
    stream.write(json.dumps(payload, sort_keys=True, default=str) + "\n")
    return code


def main(argv=None, stderr=None) -> int:
    stderr = sys.stderr if stderr is None else stderr
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        args = resolve(ns.command, ns)
        HANDLERS[ns.command](args)
    except UsageError as exc:
        return _fail(stderr, {"error": "usage", "message": str(exc)}, 1)
    except SchemaError as exc:
        return _fail(stderr, exc.to_dict(), 1)
    except (IncompatibleEmbeddingsError, ModalityError) as exc:
        return _fail(stderr, {"error": "validation", "message": str(exc)}, 1)
    except NumericalFailure as exc:
        return _fail(stderr, {"error": "numeric", "message": str(exc), "step": exc.step,
                              "component": exc.component}, 2)
    except (NumericOverflowError, DegenerateEncodingError, FloatingPointError) as exc:
        return _fail(stderr, {"error": "numeric", "message": str(exc)}, 2)
    except ValueError as exc:
        return _fail(stderr, {"error": "validation", "message": str(exc)}, 1)
    except OSError as exc:
        return _fail(stderr, {"error": "io", "message": f"{exc.strerror}: {exc.filename}"}, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
