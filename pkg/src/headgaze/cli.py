"""``headgaze`` command line: generate, train, eval, report.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage error.
Output directories default to ``$HEADGAZE_OUT_ROOT/<command>-seed<seed>``
(``runs/`` when unset) and must be empty unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

OUT_ROOT_ENV = "HEADGAZE_OUT_ROOT"
CONFIG_ECHO = "config.json"
MODEL_FILE = "model.pt"
HISTORY_FILE = "history.jsonl"
LDA_FILE = "lda.bin"
METRICS_FILE = "metrics.json"

GENERATE_KEYS = {"n", "seed", "face_size", "eye_size", "train_ratio", "samples_per_subject", "render_face", "ranges"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config handling


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def effective_config(defaults: dict, allowed: set[str], config_file: str | None, flags: dict, overrides) -> dict:
    """defaults < config file < explicit flags < key=value overrides."""
    cfg = dict(defaults)
    layers = []
    if config_file:
        try:
            layers.append(json.loads(Path(config_file).read_text()))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_file}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_file} is not valid JSON: {exc}") from None
        if not isinstance(layers[0], dict):
            raise UsageError(f"config file {config_file} must hold a flat JSON object")
    layers.append({k: v for k, v in flags.items() if v is not None})
    layers.append(dict(parse_override(o) for o in overrides or ()))
    for layer in layers:
        unknown = set(layer) - allowed
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(layer)
    return cfg


def prepare_out_dir(out: str | None, command: str, seed: int, force: bool) -> Path:
    if out is None:
        out = Path(os.environ.get(OUT_ROOT_ENV, "runs")) / f"{command}-seed{seed}"
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_echo(out: Path, command: str, config: dict, extra: dict | None = None) -> Path:
    echo = {"command": command, "config": config, **(extra or {})}
    path = out / CONFIG_ECHO
    path.write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return path


def resolve_manifest(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p}")
    return p


def _split(sample_set, tag: str):
    """Samples tagged ``tag``; untagged sets are returned whole."""
    if all(s.split is None for s in sample_set):
        return sample_set
    return sample_set.with_split(tag)


def _validate(paths) -> None:
    for p in paths:
        p = Path(p)
        if not p.is_file() or p.stat().st_size == 0:
            raise RuntimeError(f"expected output missing or empty: {p}")
        if p.suffix in (".json", ".jsonl"):
            for line in p.read_text().splitlines() if p.suffix == ".jsonl" else [p.read_text()]:
                if line.strip():
                    json.loads(line)


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    from .synthgen import GeneratorConfig, generate_dataset

    defaults = {k: v for k, v in GeneratorConfig().to_dict().items()}
    defaults["n"] = None
    flags = {
        "n": args.n,
        "seed": args.seed,
        "face_size": args.face_size,
        "eye_size": args.eye_size,
        "train_ratio": args.train_ratio,
        "render_face": args.face,
    }
    cfg = effective_config(defaults, GENERATE_KEYS, args.config, flags, args.set)
    n = cfg.pop("n")
    if not isinstance(n, int) or n < 1:
        raise UsageError(f"--n must be a positive integer, got {n!r}")
    gen = GeneratorConfig.from_dict(cfg)
    out = prepare_out_dir(args.out, "generate", gen.seed, args.force)
    # the generator owns its directory and removes it on failure
    out.rmdir()
    manifest = generate_dataset(n, gen, out)
    echo = write_echo(out, "generate", {"n": n, **gen.to_dict()})
    _validate([manifest, echo])
    print(manifest)
    return 0


TRAIN_FLAG_KEYS = (
    "epochs", "batch_size", "lr", "decay_every", "beta", "seed", "strategy",
    "depth", "width", "use_face", "head_task", "use_mhog", "use_lda",
)


def cmd_train(args) -> int:
    from .datasets import load_manifest
    from .nets import save_checkpoint
    from .training import (
        REGIMES,
        TrainConfig,
        build_model,
        fit_lda_for,
        prepare,
        spec_for,
        train_classifier,
        train_explicit,
        train_implicit,
        train_nohp,
    )

    if args.regime not in REGIMES:
        raise UsageError(f"unknown regime {args.regime!r}")
    flags = {k: getattr(args, k) for k in TRAIN_FLAG_KEYS}
    defaults = TrainConfig().to_dict()
    if args.regime == "nohp":
        defaults["use_face"] = None  # so an explicit request for face input is visible
    cfg_dict = effective_config(defaults, set(defaults), args.config, flags, args.set)
    if args.regime == "nohp":
        if cfg_dict["strategy"] != "SEM":
            raise UsageError("the nohp regime works on single eyes; use --strategy SEM")
        if cfg_dict["use_face"]:
            raise UsageError("the nohp regime takes no face input")
        if cfg_dict["use_lda"] or cfg_dict["use_mhog"]:
            raise UsageError("the nohp regime takes plain eye crops (no mhog/lda)")
        cfg_dict["use_face"] = False
        if not args.synth or not args.target:
            raise UsageError("the nohp regime needs --synth and --target manifests")
    elif not args.data:
        raise UsageError(f"the {args.regime} regime needs --data")
    try:
        cfg = TrainConfig.from_dict(cfg_dict)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.regime == "explicit" and not cfg.use_face:
        raise UsageError("the explicit regime needs the face model")

    out = prepare_out_dir(args.out, "train", cfg.seed, args.force)
    outputs = []
    extra = {"regime": args.regime}
    if args.regime == "nohp":
        synth_all = load_manifest(resolve_manifest(args.synth))
        target_all = load_manifest(resolve_manifest(args.target))
        synth = prepare(_split(synth_all, "train"), "SEM", with_face=False, with_landmarks=True)
        target = prepare(_split(target_all, "train"), "SEM", with_face=False)
        synth_val = _maybe(synth_all, "test", lambda s: prepare(s, "SEM", with_face=False, with_landmarks=True))
        target_val = _maybe(target_all, "test", lambda s: prepare(s, "SEM", with_face=False))
        spec = spec_for(cfg, synth, "nohp")
        model = build_model(spec, cfg.seed)
        model, history = train_nohp(model, synth, target, cfg, synth_val, target_val)
        extra.update(synth=str(resolve_manifest(args.synth)), target=str(resolve_manifest(args.target)))
    else:
        all_samples = load_manifest(resolve_manifest(args.data))
        train_set = _split(all_samples, "train")
        val_set = load_manifest(resolve_manifest(args.val)) if args.val else _maybe(all_samples, "test", None)
        lda = None
        if cfg.use_lda:
            lda = fit_lda_for(train_set, cfg.strategy)
            outputs.append(lda.save(out / LDA_FILE))
            extra["lda"] = LDA_FILE
        prep = lambda s: prepare(s, cfg.strategy, use_mhog=cfg.use_mhog, lda=lda, with_face=cfg.use_face)  # noqa: E731
        train = prep(train_set)
        val = prep(val_set) if val_set is not None and len(val_set) else None
        regime = "classifier" if args.regime == "classifier" else "hgd"
        spec = spec_for(cfg, train, regime if regime == "classifier" else "implicit")
        model = build_model(spec, cfg.seed)
        fn = {"implicit": train_implicit, "explicit": train_explicit, "classifier": train_classifier}[args.regime]
        model, history = fn(model, train, cfg, val)
        extra["data"] = str(resolve_manifest(args.data))
    history.meta["model"] = spec.to_dict()
    sidecar_cfg = {"train": cfg.to_dict(), "model": spec.to_dict(), **extra}
    outputs.append(save_checkpoint(out / MODEL_FILE, model, sidecar_cfg, cfg.seed))
    outputs.append(Path(str(out / MODEL_FILE) + ".json"))
    outputs.append(history.save(out / HISTORY_FILE))
    outputs.append(write_echo(out, "train", cfg.to_dict(), extra))
    for w in history.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _validate(outputs)
    print(out)
    return 0


def _maybe(sample_set, tag, fn):
    if all(s.split is None for s in sample_set):
        return None
    sub = sample_set.with_split(tag)
    if not len(sub):
        return None
    return sub if fn is None else fn(sub)


def load_run(checkpoint: str | Path):
    """Rebuild the trained network, its TrainConfig and LDA transform from a checkpoint."""
    from .nets import load_checkpoint
    from .preprocess import LdaTransform
    from .training import ModelSpec, TrainConfig, build_model

    state, sidecar = load_checkpoint(checkpoint)
    cfg = TrainConfig.from_dict(sidecar["config"]["train"])
    spec = ModelSpec.from_dict(sidecar["config"]["model"])
    model = build_model(spec, cfg.seed)
    model.load_state_dict(state)
    model.eval()
    lda = None
    if sidecar["config"].get("lda"):
        lda = LdaTransform.load(Path(checkpoint).parent / sidecar["config"]["lda"])
    return model, cfg, spec, lda, sidecar


def cmd_eval(args) -> int:
    from .datasets import load_manifest
    from .evalreport import evaluate
    from .training import prepare

    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model, cfg, spec, lda, sidecar = load_run(args.checkpoint)
    samples = load_manifest(resolve_manifest(args.data))
    subset = samples if args.split == "all" else _split(samples, args.split)
    if not len(subset):
        raise ValueError(f"no samples in split {args.split!r}")
    out = prepare_out_dir(args.out, "eval", cfg.seed, args.force)
    if spec.kind == "nohp":
        data = prepare(subset, "SEM", with_face=False)
    else:
        data = prepare(subset, cfg.strategy, use_mhog=cfg.use_mhog, lda=lda, with_face=spec.use_face)
    report = evaluate(model, data, cfg, split=args.split, classify=args.classify)
    metrics = out / METRICS_FILE
    metrics.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    echo = write_echo(out, "eval", cfg.to_dict(), {
        "checkpoint": str(args.checkpoint), "data": str(resolve_manifest(args.data)),
        "split": args.split, "classify": args.classify, "checkpoint_sha256": sidecar["file_sha256"],
    })
    _validate([metrics, echo])
    if report.aem is not None:
        print(f"AEM {report.aem:.4f}  VEM {report.vem:.4f}  ({report.n_pairs} pairs)")
    if report.confusion is not None:
        print(f"zone accuracy {report.confusion.accuracy:.4f}")
    return 0


def cmd_report(args) -> int:
    from .datasets import load_manifest
    from .evalreport import MetricsReport, render_reports
    from .training import TrainHistory

    report = history = samples = None
    if args.metrics:
        report = MetricsReport.from_dict(json.loads(Path(args.metrics).read_text()))
    if args.history:
        history = TrainHistory.load(args.history)
    if args.data:
        samples = load_manifest(resolve_manifest(args.data))
    if report is None and history is None and samples is None:
        raise UsageError("report needs at least one of --metrics, --history, --data")
    out = prepare_out_dir(args.out, "report", 0, args.force)
    files = render_reports(report, history, samples, out)
    echo = write_echo(out, "report", {"metrics": args.metrics, "history": args.history, "data": args.data})
    _validate(files + [echo])
    for f in files:
        print(f)
    return 0


# --------------------------------------------------------------------------
# parser


def _pair(text: str) -> list[int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return [h, w]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="headgaze", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<command>-seed<seed>)")
        sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    def configurable(sp):
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--n", type=int, help="number of samples (required)")
    g.add_argument("--seed", type=int)
    g.add_argument("--face-size", type=_pair, metavar="HxW", help="face image size (default 224x224)")
    g.add_argument("--eye-size", type=_pair, metavar="HxW", help="eye crop size (default 64x96)")
    g.add_argument("--train-ratio", type=float, help="fraction tagged train (default 0.9)")
    g.add_argument("--face", action=argparse.BooleanOptionalAction, default=None, help="render face images")
    common(g)
    configurable(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--regime", default="implicit", help="implicit | explicit | nohp | classifier")
    t.add_argument("--data", help="training manifest (train/test split tags are honoured)")
    t.add_argument("--val", help="separate validation manifest")
    t.add_argument("--synth", help="nohp: synthetic manifest with eye landmarks")
    t.add_argument("--target", help="nohp: target-domain manifest")
    t.add_argument("--epochs", type=int, help="default 100")
    t.add_argument("--batch-size", type=int, help="default 64")
    t.add_argument("--lr", type=float, help="initial step size (default 1e-4)")
    t.add_argument("--decay-every", type=int, help="epochs between x0.1 step-size decays (default 30)")
    t.add_argument("--beta", type=float, help="head-loss weight (default 0.3)")
    t.add_argument("--seed", type=int, help="default 0")
    t.add_argument("--strategy", choices=["SEM", "BEH", "BEV", "BEC"], help="eye input strategy (default SEM)")
    t.add_argument("--depth", type=int, help="backbone depth: 10, 18, 34, 56 or 101 (default 34)")
    t.add_argument("--width", type=int, help="backbone base width (default 64)")
    t.add_argument("--face", dest="use_face", action=argparse.BooleanOptionalAction, default=None,
                   help="use the face branch (default on)")
    t.add_argument("--head-task", dest="head_task", action=argparse.BooleanOptionalAction, default=None,
                   help="train on the head-pose loss (default on)")
    t.add_argument("--mhog", dest="use_mhog", action=argparse.BooleanOptionalAction, default=None,
                   help="append mHoG channels to the eye input (default off)")
    t.add_argument("--lda", dest="use_lda", action=argparse.BooleanOptionalAction, default=None,
                   help="append an LDA vector to the fusion input (default off)")
    common(t)
    configurable(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="manifest to evaluate")
    e.add_argument("--split", default="test", help="split tag to evaluate, or 'all' (default test)")
    e.add_argument("--classify", action="store_true", help="add a 9-zone confusion matrix")
    common(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render plots and a summary")
    r.add_argument("--metrics", help="metrics.json written by eval")
    r.add_argument("--history", help="history.jsonl written by train")
    r.add_argument("--data", help="manifest for the head/gaze scatter")
    common(r)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"headgaze {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"headgaze {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
