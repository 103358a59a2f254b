"""Command-line entry point: ``earlyguard <command> [flags]``.

Exit codes: 0 success, 2 bad flags, 3 missing input file, 4 invalid input,
5 experiment failure. Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, baselines, evaluation, gru, search, traces
from .ensemble import confidence, confidence_ttest, load_manifest, write_manifest

log = logging.getLogger("earlyguard")

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_EXPERIMENT = 5
MANIFEST_NAME = "run_manifest.json"


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _fail_line(code, kind, message) -> str:
    return json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())})


class Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(_fail_line(EXIT_USAGE, "usage", f"{self.prog}: {message}") + "\n")
        sys.exit(EXIT_USAGE)


# input helpers


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, "missing_file", f"{path}: no such file")
    return p


def _load_data(path, role="train") -> traces.LabeledDataset:
    p = _need_file(path)
    try:
        return traces.load_traces(p, role)
    except traces.TraceError as exc:
        raise CliError(EXIT_INVALID, "invalid_input", str(exc)) from None


def _parse_cutoff(text):
    try:
        return traces.parse_utc(text)
    except ValueError as exc:
        raise CliError(EXIT_INVALID, "invalid_input", f"--cutoff: {exc}") from None


def _split(dataset, cutoff, side):
    """Whole dataset without a cutoff, else the requested side of the date split."""
    if not cutoff:
        return dataset
    try:
        train, test = traces.split_by_date(dataset, _parse_cutoff(cutoff))
    except traces.TraceError as exc:
        raise CliError(EXIT_INVALID, "invalid_input", str(exc)) from None
    return train if side == "train" else test


def _load_config(text) -> gru.HyperConfig:
    if text.upper() in gru.PRESETS:
        return gru.PRESETS[text.upper()]
    p = _need_file(text)
    try:
        return gru.HyperConfig.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, gru.ModelError, TypeError) as exc:
        raise CliError(EXIT_INVALID, "invalid_input", f"{p}: {exc}") from None


def _load_scorer(path):
    """A model file, or an ensemble manifest (.json)."""
    p = _need_file(path)
    try:
        if p.suffix == ".json":
            return load_manifest(p)
        return gru.load_model(p)
    except (gru.ModelError, KeyError, FileNotFoundError) as exc:
        raise CliError(EXIT_INVALID, "invalid_input", f"{p}: {exc}") from None


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: Path, text: str, outputs: list):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    outputs.append(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit_both(report, out: Path, stem: str, outputs: list):
    _write(out / f"{stem}.csv", evaluation.report_csv(report), outputs)
    _write(out / f"{stem}.json", evaluation.report_json(report), outputs)


# commands


def cmd_synth(args, outputs):
    spec = traces.GeneratorSpec(length=args.length)
    data = traces.synth_generate(spec, args.benign, args.malicious, args.seed)
    _write(Path(args.out), traces.dump_traces(data), outputs)


def cmd_search(args, outputs):
    data = _split(_load_data(args.data), args.cutoff, "train")
    space = search.SearchSpace()
    if args.space:
        try:
            space = search.SearchSpace.from_dict(json.loads(_need_file(args.space).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, search.SearchError, gru.ModelError) as exc:
            raise CliError(EXIT_INVALID, "invalid_input", f"{args.space}: {exc}") from None
    times = range(1, args.select_until + 1)
    ranked, failed = search.random_search(space, data, args.trials, args.k_folds, args.seed, args.jobs, times)
    out = _out_dir(args)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(search.TRIAL_COLUMNS)
    writer.writerows(search.trial_rows(ranked))
    _write(out / "trials.csv", buf.getvalue(), outputs)
    best = search.select_best_over_time(ranked, times)
    _write(out / "best_configs.json", search.best_configs_json(best), outputs)
    if failed:
        lines = [json.dumps({"index": r.index, "config": r.config.to_table(), "error": r.error}, sort_keys=True) for r in failed]
        _write(out / "failed_trials.jsonl", "\n".join(lines) + "\n", outputs)


def cmd_train(args, outputs):
    config = _load_config(args.config)
    data = _split(_load_data(args.data), args.cutoff, "train")
    norm = traces.fit_normalizer(data)
    init_seed, train_seed = np.random.SeedSequence([args.seed, 3]).generate_state(2, dtype=np.uint32)
    net = gru.init_params(config, int(init_seed))
    record = gru.train(net, data, norm, int(train_seed))
    log.info("trained %s: loss %.4f -> %.4f", config.digest(), record.epoch_loss[0], record.epoch_loss[-1])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    gru.save_model(net, out)
    outputs.append(out)


def _eval_files(metrics, out, outputs, stem="metrics"):
    _write(out / f"{stem}.csv", evaluation.metrics_table_csv(metrics), outputs)
    _emit_both(metrics, out, f"{stem}_long", outputs)
    _write(out / f"{stem}_scores.csv", evaluation.scores_csv(metrics), outputs)


def cmd_eval(args, outputs):
    model = _load_scorer(args.model)
    test = _split(_load_data(args.test, "test"), args.cutoff, "test")
    metrics = evaluation.time_sliced_eval(model, test, range(1, args.t_max + 1))
    _eval_files(metrics, _out_dir(args), outputs)


def cmd_holdout(args, outputs):
    config = _load_config(args.config)
    data = _load_data(args.data)
    if args.holdout_key is None or args.holdout_value is None:
        raise CliError(EXIT_INVALID, "invalid_input", "--holdout-key and --holdout-value are required")
    seeds = [int(s) for s in np.random.SeedSequence(args.seed).generate_state(args.repeats, dtype=np.uint32)]
    try:
        report = evaluation.family_holdout_experiment(
            data, args.holdout_key, args.holdout_value, config, seeds, range(1, args.t_max + 1), not args.keep_disputed
        )
    except traces.TraceError as exc:
        raise CliError(EXIT_INVALID, "invalid_input", str(exc)) from None
    out = _out_dir(args)
    _emit_both(report, out, "holdout", outputs)
    _write(out / "train_ids.txt", "\n".join(report.train_ids) + "\n", outputs)
    _write(out / "held_out_ids.txt", "\n".join(report.held_out_ids) + "\n", outputs)


def cmd_ablate(args, outputs):
    model = _load_scorer(args.model)
    test = _split(_load_data(args.test, "test"), args.cutoff, "test")
    out = _out_dir(args)
    for k in range(1, args.subset_size + 1):
        report = evaluation.impact_factors(model, test, args.t, k, jobs=args.jobs)
        _emit_both(report, out, f"ablation_k{k}", outputs)
    if args.features_on:
        report = evaluation.features_on_search(model, test, args.t, args.features_on, jobs=args.jobs)
        _emit_both(report, out, "features_on", outputs)


def cmd_ensemble(args, outputs):
    out = _out_dir(args)
    manifest = out / "ensemble.json"
    for m in args.models:
        _need_file(m)
    try:
        write_manifest(manifest, args.models, args.threshold)
        ens = load_manifest(manifest)
    except gru.ModelError as exc:
        raise CliError(EXIT_INVALID, "invalid_input", str(exc)) from None
    outputs.append(manifest)
    test = _split(_load_data(args.test, "test"), args.cutoff, "test")
    t_range = range(1, args.t_max + 1)
    metrics = evaluation.time_sliced_eval(ens, test, t_range)
    _eval_files(metrics, out, outputs, "ensemble_metrics")
    member_metrics = [evaluation.time_sliced_eval(m, test, t_range) for m in ens.members]
    y = metrics.labels
    lines = ["t,best_member,best_member_accuracy,ensemble_accuracy,mean_conf_diff,t_statistic,p_value,significant,degenerate"]
    for t in t_range:
        accs = [mm.accuracy(t) for mm in member_metrics]
        best = int(np.argmax(accs))
        res = confidence_ttest(confidence(y, metrics.scores[t]), confidence(y, member_metrics[best].scores[t]), args.alpha)
        cells = [t, best, repr(accs[best]), repr(metrics.accuracy(t)), repr(res.mean_difference)]
        cells += [
            "" if res.statistic is None else repr(res.statistic),
            "" if res.p_value is None else repr(res.p_value),
            int(res.significant),
            int(res.degenerate),
        ]
        lines.append(",".join(str(c) for c in cells))
    _write(out / "confidence_ttest.csv", "\n".join(lines) + "\n", outputs)


def cmd_baselines(args, outputs):
    data = _load_data(args.data)
    if not args.cutoff:
        raise CliError(EXIT_INVALID, "invalid_input", "--cutoff is required to separate train and test")
    train_set, test_set = _split(data, args.cutoff, "train"), _split(data, args.cutoff, "test")
    out = _out_dir(args)
    lines = ["algorithm,t,accuracy,fp_rate,fn_rate"]
    for kind in args.kinds:
        model = baselines.PerTimeBaseline(kind, train_set, seed=args.seed)
        metrics = evaluation.time_sliced_eval(model, test_set, range(args.t_min, args.t_max + 1))
        _emit_both(metrics, out, f"baseline_{kind}", outputs)
        for r in metrics.rows:
            lines.append(",".join(str(c) for c in (kind, r.t, repr(r.accuracy), evaluation._encode(r.fp_rate), evaluation._encode(r.fn_rate))))
    for kind in baselines.UNAVAILABLE:
        lines.append(f"{kind},,unavailable,,")
    _write(out / "comparison.csv", "\n".join(lines) + "\n", outputs)


COMMANDS = {
    "synth": cmd_synth,
    "search": cmd_search,
    "train": cmd_train,
    "eval": cmd_eval,
    "holdout": cmd_holdout,
    "ablate": cmd_ablate,
    "ensemble": cmd_ensemble,
    "baselines": cmd_baselines,
}


def build_parser() -> Parser:
    parser = Parser(prog="earlyguard", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("-o", "--out", required=True)
        return p

    p = add("synth", "generate a synthetic trace CSV")
    p.add_argument("--benign", type=int, default=100)
    p.add_argument("--malicious", type=int, default=100)
    p.add_argument("--length", type=int, default=21, help="snapshots per trace")

    p = add("search", "random hyperparameter search with k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--cutoff", help="search on traces first seen before this ISO-8601 time")
    p.add_argument("--trials", type=int, default=60)
    p.add_argument("--k-folds", type=int, default=10)
    p.add_argument("--space", help="JSON search-space file")
    p.add_argument("--select-until", type=int, default=5, help="pick the best config at each t = 1..N")

    p = add("train", "train one network")
    p.add_argument("--config", required=True, help="config JSON file or preset A/B/C")
    p.add_argument("--data", required=True)
    p.add_argument("--cutoff")

    p = add("eval", "time-sliced evaluation of a model or ensemble manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--cutoff", help="evaluate only traces first seen at or after this time")
    p.add_argument("--t-max", type=int, default=20)

    p = add("holdout", "train without one family/variant and test on it")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--holdout-key", choices=("family", "variant"))
    p.add_argument("--holdout-value")
    p.add_argument("--repeats", type=int, default=1, help="independently seeded models")
    p.add_argument("--t-max", type=int, default=10)
    p.add_argument("--keep-disputed", action="store_true")

    p = add("ablate", "feature-masking impact factors and features-on search")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--cutoff")
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--subset-size", type=int, default=3, choices=(1, 2, 3))
    p.add_argument("--features-on", type=int, default=2, help="largest features-on subset (0 to skip)")

    p = add("ensemble", "max-ensemble of model files with confidence tests")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--cutoff")
    p.add_argument("--t-max", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.01)

    p = add("baselines", "time-sliced comparison classifiers")
    p.add_argument("--data", required=True)
    p.add_argument("--cutoff")
    p.add_argument("--t-min", type=int, default=0)
    p.add_argument("--t-max", type=int, default=20)
    p.add_argument("--kinds", nargs="+", default=list(baselines.KINDS), choices=baselines.KINDS)

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", help="write outputs here instead of the recorded location")
    return parser


def _manifest_path(args) -> Path:
    out = Path(args.out)
    return out / MANIFEST_NAME if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _input_paths(args) -> list[str]:
    paths = []
    for name in ("data", "test", "model", "space", "config"):
        v = getattr(args, name, None)
        if v and Path(v).is_file():
            paths.append(v)
    paths += list(getattr(args, "models", None) or [])
    return paths


def _write_run_manifest(args, argv, outputs, started):
    base = Path(args.out) if Path(args.out).is_dir() else Path(args.out).parent
    manifest = {
        "tool": "earlyguard",
        "tool_version": __version__,
        "command": args.command,
        "argv": argv,
        "arguments": {k: v for k, v in sorted(vars(args).items())},
        "seed": getattr(args, "seed", None),
        "inputs": {p: _digest(p) for p in _input_paths(args)},
        "outputs": {str(p.relative_to(base)) if p.is_relative_to(base) else str(p): _digest(p) for p in outputs},
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    path = _manifest_path(args)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _replay(args) -> int:
    manifest = json.loads(_need_file(args.manifest).read_text(encoding="utf-8"))
    argv = list(manifest["argv"])
    if args.out:
        for flag in ("-o", "--out"):
            if flag in argv:
                argv[argv.index(flag) + 1] = args.out
    code = main(argv)
    if code:
        return code
    fresh = json.loads(_manifest_path(build_parser().parse_args(argv)).read_text(encoding="utf-8"))
    if fresh["outputs"] != manifest["outputs"]:
        changed = sorted(k for k in manifest["outputs"] if fresh["outputs"].get(k) != manifest["outputs"][k])
        raise CliError(EXIT_EXPERIMENT, "replay_mismatch", f"outputs differ from the manifest: {', '.join(changed)}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("EARLYGUARD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return _replay(args)
        started = datetime.now(timezone.utc).isoformat()
        outputs: list[Path] = []
        try:
            COMMANDS[args.command](args, outputs)
        except CliError:
            raise
        except (traces.TraceError, gru.ModelError) as exc:
            raise CliError(EXIT_EXPERIMENT, "experiment_failed", str(exc)) from None
        except (search.SearchError, evaluation.EvaluationError, baselines.BaselineError) as exc:
            raise CliError(EXIT_EXPERIMENT, "experiment_failed", str(exc)) from None
        except OSError as exc:
            raise CliError(EXIT_EXPERIMENT, "io_error", str(exc)) from None
        _write_run_manifest(args, argv, outputs, started)
    except CliError as exc:
        sys.stderr.write(_fail_line(exc.code, exc.kind, exc) + "\n")
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
