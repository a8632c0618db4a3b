"""Command-line entry point: synth / train / eval / score / inspect.

Run configs are flat ``key=value`` text files whose keys exactly match the
config dataclass field names; unknown keys are rejected so configs cannot
drift. Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import metrics, synth_data, tensor_store, trainer
from .errors import ConfigError, FormatError, NumericalAbort, ValidationError
from .losses import LossWeights

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise _UsageError(message)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _coerce(key: str, value: str, target_type: type):
    try:
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def _build_train_config(pairs: dict[str, str]) -> trainer.TrainConfig:
    config = trainer.TrainConfig()
    train_keys = {f.name for f in fields(trainer.TrainConfig)} - {"loss_weights"}
    loss_keys = {f.name for f in fields(LossWeights)}
    for key, value in pairs.items():
        if key in train_keys:
            setattr(config, key, _coerce(key, value, type(getattr(config, key))))
        elif key in loss_keys:
            setattr(config.loss_weights, key,
                    _coerce(key, value, type(getattr(config.loss_weights, key))))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return config


def _build_synth_config(pairs: dict[str, str]) -> synth_data.SynthConfig:
    config = synth_data.SynthConfig()
    known = {f.name for f in fields(synth_data.SynthConfig)}
    for key, value in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(config, key, _coerce(key, value, type(getattr(config, key))))
    return config


def load_train_config(path: str | None) -> trainer.TrainConfig:
    if path is None:
        return trainer.TrainConfig()
    return _build_train_config(parse_config_text(Path(path).read_text(), path))


def load_synth_config(path: str | None) -> synth_data.SynthConfig:
    if path is None:
        return synth_data.SynthConfig()
    return _build_synth_config(parse_config_text(Path(path).read_text(), path))


def _checkpoint_train_config(container: tensor_store.TensorContainer) -> trainer.TrainConfig:
    text = container.metadata.get("config", "")
    return _build_train_config(parse_config_text(text, "<checkpoint config>"))


def _cmd_synth(args) -> int:
    config = load_synth_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_records, bank = synth_data.generate(config)
    test_config = synth_data.SynthConfig(**{
        f.name: getattr(config, f.name) for f in fields(synth_data.SynthConfig)
    })
    test_config.data_seed = config.data_seed + 1
    test_records, _ = synth_data.generate(test_config)
    tensor_store.write_container(
        out / "train.avaf", tensor_store.features_to_container(train_records)
    )
    tensor_store.write_container(
        out / "test.avaf", tensor_store.features_to_container(test_records)
    )
    tensor_store.write_container(out / "text.avaf", tensor_store.textbank_to_container(bank))
    print(f"wrote {out / 'train.avaf'} ({len(train_records)} images), "
          f"{out / 'test.avaf'} ({len(test_records)} images), {out / 'text.avaf'} "
          f"({config.n_classes} classes)")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = load_train_config(args.config)
    records, bank = tensor_store.load_dataset(args.features, args.text)
    result = trainer.train(
        config, records, bank, out_dir=args.out, resume_from=args.resume
    )
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(
            f"epoch {last['epoch']}: total={last['total']:.6f} "
            f"mean_wn_normal={last['mean_wn_normal']:.4f} "
            f"mean_wa_anomaly={last['mean_wa_anomaly']:.4f}"
        )
    print(f"checkpoint: {Path(args.out) / 'checkpoint_final.avaf'}")
    return EXIT_OK


def _load_model(checkpoint_path: str):
    params, container = trainer.load_checkpoint(checkpoint_path)
    config = _checkpoint_train_config(container)
    return params, config


def _cmd_eval(args) -> int:
    params, config = _load_model(args.checkpoint)
    records, bank = tensor_store.load_dataset(args.features, args.text)
    layer_ids = None
    if args.layers:
        layer_ids = trainer.resolve_layers(args.layers, params.layer_ids)
    report = metrics.evaluate(
        records, params, bank, config.tau, layer_ids=layer_ids, threads=args.threads
    )
    print(report.format_table())
    if args.report:
        report.to_csv(args.report)
        print(f"report: {args.report}")
    return EXIT_OK


def _write_pgm(path: Path, image: np.ndarray) -> None:
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + data.tobytes())


def _cmd_score(args) -> int:
    params, config = _load_model(args.checkpoint)
    records, bank = tensor_store.load_dataset(args.features, args.text)
    container = tensor_store.TensorContainer(metadata={"kind": "predictions"})
    pgm_dir = Path(args.pgm_dir) if args.pgm_dir else None
    if pgm_dir is not None:
        pgm_dir.mkdir(parents=True, exist_ok=True)

    def score_one(record):
        output, _, _ = metrics.forward_image(record, params, bank, config.tau)
        pred = metrics.map_at_mask_resolution(record, output.grid)
        return pred, output.image_score

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(score_one, records))
    else:
        results = [score_one(rec) for rec in records]

    for i, (pred, score) in enumerate(results):
        container.add(f"img{i}/pred_map", pred.astype(np.float32))
        container.add(f"img{i}/score", np.array([score], dtype=np.float32))
        if pgm_dir is not None:
            _write_pgm(pgm_dir / f"img{i}.pgm", pred)
    tensor_store.write_container(args.out, container)
    print(f"wrote {args.out} ({len(records)} maps)")
    return EXIT_OK


_DTYPE_NAMES = {0: "float32", 1: "float64", 2: "uint8"}


def _cmd_inspect(args) -> int:
    container = tensor_store.read_container(args.file)
    print(args.file)
    print(f"kind: {container.kind() or '(unset)'}")
    if container.metadata:
        print("metadata:")
        for key in container.metadata:
            if key == "kind":
                continue
            value = container.metadata[key]
            shown = value if len(value) <= 60 else value[:57] + "..."
            shown = shown.replace("\n", "\\n")
            print(f"  {key}: {shown}")
    print(f"entries: {len(container.entries)}")
    for name, arr in container.entries.items():
        dims = ", ".join(str(d) for d in arr.shape)
        print(f"  {name}  {arr.dtype.name}  [{dims}]")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="anoroute", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="key=value synth config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train on a feature dataset")
    p.add_argument("--features", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--config", help="key=value train config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--features", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", help="write per-class CSV here")
    p.add_argument("--layers", help="restrict aggregation to these layers, e.g. 1,2")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("score", help="emit anomaly maps and image scores")
    p.add_argument("--features", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output AVAF file")
    p.add_argument("--pgm-dir", help="also write grayscale PGM maps here")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("inspect", help="print a container's inventory")
    p.add_argument("file")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
