"""Command-line entry point: ``das-forge <subcommand> ...``.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 missing
file, 4 invalid configuration or malformed input.  Failures print one JSON
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import dataset, demod, harness, reports, sim
from .fileio import FormatError, load_tsm, save_png, save_tsm, write_json
from .model import FeatureExtractorSpec, ModelConfig, ModelError, TwoStageClassifier

log = logging.getLogger("das_forge")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2, 3, 4
THREADS_ENV = "DAS_FORGE_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit_error(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message, **extra}), file=sys.stderr)
    return code


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"no such directory: {p}")
    return p


def _read_json(path) -> dict:
    with open(_require_file(path), encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return doc


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    overrides = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    base = sim.preset(args.preset).to_dict()
    cfg = sim.SimConfig.from_dict({**base, **overrides}).validate()
    out = Path(args.out)
    field = sim.build_scatterers(cfg)
    index = []
    for label in sim.all_labels():
        raw = sim.synthesize(cfg, field, label, stream=label.class_index + 1)
        name = f"{label.name}.tsm"
        save_tsm(out / name, raw.data)
        index.append({"id": label.name, "amplitude_v": label.amplitude_v, "frequency_hz": label.frequency_hz,
                      "class_index": label.class_index, "raw": name})
        log.info("simulated %s", label.name)
    write_json(out / "sim_config.json", cfg.to_dict())
    write_json(out / "index.json", {"recordings": index})
    return EXIT_OK


def _band_spec(args, sim_cfg: dict | None) -> demod.BandpassSpec:
    cfg = sim.SimConfig.from_dict(sim_cfg) if sim_cfg else sim.SimConfig()
    default = demod.BandpassSpec.for_pulse(cfg.f_aom_hz, cfg.pulse_width_s, cfg.fast_rate_hz)
    return demod.BandpassSpec(
        center_hz=default.center_hz if args.band_center is None else args.band_center,
        bandwidth_hz=default.bandwidth_hz if args.band_width is None else args.band_width,
        fast_rate_hz=default.fast_rate_hz if args.fast_rate is None else args.fast_rate,
    ).validate()


def cmd_demod(args) -> int:
    if (args.inp is None) == (args.in_dir is None):
        raise UsageError("demod: give exactly one of --in or --in-dir")
    if args.inp is not None:
        if not (args.out_amp and args.out_phase):
            raise UsageError("demod: --in needs --out-amp and --out-phase")
        raw = load_tsm(_require_file(args.inp))
        damp, wphase = demod.preprocess(raw, _band_spec(args, None))
        save_tsm(args.out_amp, damp)
        save_tsm(args.out_phase, wphase)
        return EXIT_OK
    if not args.out_dir:
        raise UsageError("demod: --in-dir needs --out-dir")
    in_dir = _require_dir(args.in_dir)
    index = _read_json(in_dir / "index.json")
    sim_cfg = _read_json(in_dir / "sim_config.json") if (in_dir / "sim_config.json").is_file() else None
    spec = _band_spec(args, sim_cfg)
    out = Path(args.out_dir)
    recs = []
    for rec in index["recordings"]:
        raw = load_tsm(_require_file(in_dir / rec["raw"]))
        damp, wphase = demod.preprocess(raw, spec)
        amp_name, phase_name = f"{rec['id']}_damp.tsm", f"{rec['id']}_wphase.tsm"
        save_tsm(out / amp_name, damp)
        save_tsm(out / phase_name, wphase)
        recs.append({k: rec[k] for k in ("id", "amplitude_v", "frequency_hz")} | {"amp": amp_name, "phase": phase_name})
        log.info("demodulated %s", rec["id"])
    write_json(out / "index.json", {"recordings": recs, "band": {"center_hz": spec.center_hz,
               "bandwidth_hz": spec.bandwidth_hz, "fast_rate_hz": spec.fast_rate_hz}})
    return EXIT_OK


def cmd_dataset_build(args) -> int:
    base_dir = _require_dir(args.base_dir)
    _require_file(base_dir / "index.json")
    render = dataset.RenderSpec(args.img_size, args.img_size, args.colormap).validate()
    manifest = dataset.build_dataset(
        dataset.load_base_dir(base_dir), args.out_dir, render, n_offsets=args.offsets,
        flip=args.flip, src=tuple(args.src), seed=args.seed or 0,
        require_all_classes=not args.allow_missing_classes,
    )
    log.info("wrote %d samples to %s", len(manifest), args.out_dir)
    return EXIT_OK


def _train_config(args) -> harness.TrainConfig:
    d = _read_json(args.config) if args.config else {}
    for key in ("epochs", "batch_size", "train_fraction", "lr"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if args.seed is not None:
        d["seed"] = args.seed
    return harness.TrainConfig.from_dict(d)


def _model_config(args, manifest: dataset.DatasetManifest) -> ModelConfig:
    if args.model_config:
        cfg = ModelConfig.from_dict(_read_json(args.model_config))
    else:
        h = manifest.render.get("out_height", 64)
        w = manifest.render.get("out_width", 64)
        cfg = ModelConfig(extractor=FeatureExtractorSpec(input_height=h, input_width=w))
    if getattr(args, "variant", None):
        cfg.extractor.variant = args.variant
    if getattr(args, "freeze", False):
        cfg.freeze_extractor = True
    return cfg.validate()


def _load_manifest(path) -> dataset.DatasetManifest:
    return dataset.DatasetManifest.load(_require_file(path))


def cmd_train(args) -> int:
    manifest = _load_manifest(args.dataset)
    tcfg = _train_config(args)
    mcfg = _model_config(args, manifest)
    if args.pretrained:
        _require_file(args.pretrained)
    out = Path(args.out)
    images = harness.ImageSet.from_manifest(manifest)
    if args.all:
        model = TwoStageClassifier(mcfg, seed=tcfg.seed)
        if args.pretrained:
            model.load_weights(args.pretrained)
        report = harness.train(model, images, tcfg, seed=tcfg.seed)
        split_doc = {"train": [s.id for s in manifest.samples], "test": []}
    else:
        model, report, (train_m, test_m) = harness.single_run(manifest, images, mcfg, tcfg, tcfg.seed, args.pretrained)
        split_doc = {"train": [s.id for s in train_m.samples], "test": [s.id for s in test_m.samples]}
    model.save_weights(out / "weights.wgt")
    if args.extractor_out:
        model.save_weights(args.extractor_out, model.extractor_names())
    mcfg.save(out / "model_config.json")
    write_json(out / "split.json", split_doc)
    reports.export_reports(out, [report], plots=not args.no_plots,
                           extra={"train_config": tcfg.__dict__, "model_config": mcfg.to_dict()})
    if report.accuracy is not None:
        log.info("test accuracy %.4f", report.accuracy)
    return EXIT_OK


def _load_model(args) -> TwoStageClassifier:
    mcfg = ModelConfig.load(_require_file(args.model_config))
    model = TwoStageClassifier(mcfg)
    model.load_weights(_require_file(args.weights), strict=True)
    return model


def _subset(manifest, args):
    if not args.split:
        return manifest
    ids = _read_json(args.split)[args.subset]
    return manifest.subset(ids)


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.dataset)
    model = _load_model(args)
    data = _subset(manifest, args)
    ev = harness.evaluate(model, data)
    doc = {"schema": reports.REPORT_SCHEMA, "version": reports.REPORT_VERSION, "accuracy": ev["accuracy"],
           "loss": ev["loss"], "confusion": ev["confusion"].tolist(), "n": len(data)}
    out = Path(args.out)
    write_json(out / "eval.json", doc)
    if not args.no_plots:
        reports.plot_confusion(ev["confusion"], out / "confusion.png")
    print(json.dumps({"accuracy": ev["accuracy"], "n": len(data)}))
    return EXIT_OK


def cmd_runs(args) -> int:
    manifest = _load_manifest(args.dataset)
    tcfg = _train_config(args)
    mcfg = _model_config(args, manifest)
    if args.pretrained:
        _require_file(args.pretrained)
    res = harness.repeated_runs(manifest, mcfg, tcfg, n_runs=args.n, pretrained=args.pretrained)
    reports.export_reports(args.out, res["reports"], res["stats"], plots=not args.no_plots,
                           extra={"train_config": tcfg.__dict__, "model_config": mcfg.to_dict()})
    print(json.dumps(res["stats"]))
    return EXIT_OK


def cmd_embed(args) -> int:
    manifest = _load_manifest(args.dataset)
    model = _load_model(args)
    data = _subset(manifest, args)
    stages = [1, 2] if args.stage == "both" else [int(args.stage)]
    embs = [harness.extract_embeddings(model, data, s, args.perplexity, args.iters, args.seed or 0) for s in stages]
    agreement = {f"stage{e.stage}": harness.knn1_agreement(e.coords, e.labels) for e in embs}
    reports.export_reports(args.out, [], embeddings=embs, plots=not args.no_plots, extra={"knn1_agreement": agreement})
    print(json.dumps(agreement))
    return EXIT_OK


def cmd_render(args) -> int:
    matrix = load_tsm(_require_file(args.inp))
    spec = dataset.RenderSpec(args.img_size, args.img_size, args.colormap).validate()
    save_png(args.out, dataset.render_image(matrix, spec))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS so a value given before the subcommand is not reset after it
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every stochastic stage")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help=f"BLAS thread cap (default ${THREADS_ENV}); 1 gives bitwise reproducibility")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = _Parser(prog="das-forge", description="Phase-OTDR event simulation and two-stage classification.",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="synthesize one raw recording per class")
    s.add_argument("--preset", default="desk", choices=sorted(sim.PRESETS))
    s.add_argument("--config", help="JSON with SimConfig field overrides")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("demod", parents=[common], help="bandpass, analytic signal, differential amplitude and wrapped phase")
    s.add_argument("--in", dest="inp")
    s.add_argument("--out-amp")
    s.add_argument("--out-phase")
    s.add_argument("--in-dir", help="directory written by simulate")
    s.add_argument("--out-dir")
    s.add_argument("--band-center", type=float)
    s.add_argument("--band-width", type=float)
    s.add_argument("--fast-rate", type=float)
    s.set_defaults(func=cmd_demod)

    s = sub.add_parser("dataset", parents=[common], help="dataset operations")
    dsub = s.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    b = dsub.add_parser("build", parents=[common], help="augment and render demodulated recordings")
    b.add_argument("--base-dir", required=True)
    b.add_argument("--out-dir", required=True)
    b.add_argument("--offsets", type=int, default=9)
    b.add_argument("--flip", action=argparse.BooleanOptionalAction, default=True)
    b.add_argument("--img-size", type=int, default=64)
    b.add_argument("--colormap", default="grayscale3", choices=dataset.COLORMAPS)
    b.add_argument("--src", type=int, nargs=2, default=(2200, 2500), metavar=("START", "STOP"))
    b.add_argument("--allow-missing-classes", action="store_true")
    b.set_defaults(func=cmd_dataset_build)

    def training_flags(s):
        s.add_argument("--dataset", required=True, help="manifest.json")
        s.add_argument("--out", required=True)
        s.add_argument("--config", help="JSON with TrainConfig fields")
        s.add_argument("--model-config", help="JSON model config")
        s.add_argument("--variant", choices=("vgg_s", "plain_s", "depthwise_s"))
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--train-fraction", type=float)
        s.add_argument("--lr", type=float)
        s.add_argument("--freeze", action="store_true", help="freeze the extractor")
        s.add_argument("--pretrained", help="WGT1 file to import before training")
        s.add_argument("--no-plots", action="store_true")

    s = sub.add_parser("train", parents=[common], help="one training run on a seeded split")
    training_flags(s)
    s.add_argument("--all", action="store_true", help="train on every sample, no test split")
    s.add_argument("--extractor-out", help="also write extractor-only weights here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("runs", parents=[common], help="repeated independent runs")
    training_flags(s)
    s.add_argument("--n", type=int, default=5)
    s.set_defaults(func=cmd_runs)

    def model_flags(s):
        s.add_argument("--dataset", required=True)
        s.add_argument("--weights", required=True)
        s.add_argument("--model-config", required=True)
        s.add_argument("--split", help="split.json written by train")
        s.add_argument("--subset", default="test", choices=("train", "test"))
        s.add_argument("--out", required=True)
        s.add_argument("--no-plots", action="store_true")

    s = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix")
    model_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("embed", parents=[common], help="t-SNE of stage-1 or stage-2 features")
    model_flags(s)
    s.add_argument("--stage", default="both", choices=("1", "2", "both"))
    s.add_argument("--perplexity", type=float, default=30.0)
    s.add_argument("--iters", type=int, default=1000)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("render", parents=[common], help="render a TSM matrix to PNG")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--img-size", type=int, default=64)
    s.add_argument("--colormap", default="grayscale3", choices=dataset.COLORMAPS)
    s.set_defaults(func=cmd_render)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ValueError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for key in ("seed", "threads", "verbose"):
            if not hasattr(args, key):
                setattr(args, key, None)
        if args.threads is None and os.environ.get(THREADS_ENV):
            try:
                args.threads = int(os.environ[THREADS_ENV])
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer") from None
    except UsageError as exc:
        return _emit_error(EXIT_USAGE, "usage", str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    level = logging.WARNING if not args.verbose else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        return _emit_error(EXIT_USAGE, "usage", str(exc))
    except FileNotFoundError as exc:
        path = exc.filename or str(exc).rsplit(": ", 1)[-1]
        return _emit_error(EXIT_MISSING, "missing_file", str(exc), path=str(path))
    except (sim.ConfigError, ModelError, dataset.DatasetError, FormatError, ValueError, KeyError, TypeError) as exc:
        return _emit_error(EXIT_CONFIG, "invalid_config", f"{type(exc).__name__}: {exc}")
    except Exception as exc:
        return _emit_error(EXIT_FAILURE, "failure", f"{type(exc).__name__}: {exc}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
