"""``dss`` command line: stats, train, track and eval."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from .config import TrainConfig, read_config_file, write_config
from .estimator import infer_ontology
from .generator import predictions_to_dict, read_predictions, track_dialogues, write_predictions
from .metrics import evaluate_predictions, format_table, write_report
from .model import CheckpointError, load_checkpoint
from .ontology import (
    FIVE_DOMAINS,
    LoadReport,
    Ontology,
    OntologyError,
    SlotSchema,
    NONE,
    categorical_flags_from_schema,
    corpus_statistics,
    load_dialogues,
    load_ontology,
    multiwoz_schema,
)
from .training import NonFiniteLossError, train

logger = logging.getLogger("dssdst")

SPLIT_FILES = {"train": "train_dials.json", "dev": "dev_dials.json", "test": "test_dials.json"}
STATS_DOMAINS = ("hotel", "attraction", "restaurant", "taxi", "train")
# keys that change the network's shape; a checkpoint cannot be run under different values
ARCHITECTURE_KEYS = ("encoder", "hidden_size", "num_layers", "num_heads", "share_generator_encoder", "max_len", "position_embedding")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MISMATCH = 4
EXIT_TRAINING = 5


class CLIError(Exception):
    category = "usage"
    code = EXIT_USAGE


class DataError(CLIError):
    category = "data"
    code = EXIT_DATA


class MismatchError(CLIError):
    category = "mismatch"
    code = EXIT_MISMATCH


# --------------------------------------------------------------------------
# helpers


def _existing(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} path does not exist: {p}")
    return p


def split_path(data: Path, split: str) -> Path:
    """``data`` is either one corpus file or a directory holding the TRADE split files."""
    if data.is_file():
        return data
    p = data / SPLIT_FILES[split]
    if not p.exists():
        raise DataError(f"missing {split} split: {p}")
    return p


def _load(path: Path) -> list:
    report = LoadReport()
    try:
        dialogues = load_dialogues(path, FIVE_DOMAINS, report)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return dialogues


def effective_config(args) -> TrainConfig:
    """Defaults, then the config file, then ``--set``/``--seed``/``--ablate`` flags."""
    data = {}
    if args.config:
        try:
            data.update(read_config_file(_existing(args.config, "config")))
        except ValueError as exc:
            raise CLIError(str(exc)) from exc
    for item in args.set or []:
        if "=" not in item:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        data[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    for ablation in args.ablate or []:
        if ablation == "no-preliminary":
            data["use_preliminary"] = False
        elif ablation == "no-ultimate":
            data["use_ultimate"] = False
        elif ablation == "selector-history":
            data["selector_history"] = 2
        elif ablation.startswith("k="):
            data["k"] = ablation[2:]
        else:
            raise CLIError(f"unknown ablation {ablation!r}")
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad config: {exc}") from exc


def _ontology(args, dialogues=None) -> Ontology:
    flags = None
    if getattr(args, "schema", None):
        flags = categorical_flags_from_schema(_existing(args.schema, "schema"))
    try:
        if args.ontology:
            return load_ontology(_existing(args.ontology, "ontology"), flags or multiwoz_schema()["slots"])
    except OntologyError as exc:
        raise DataError(str(exc)) from exc
    if dialogues is None:
        raise CLIError("--ontology is required")
    try:
        return infer_ontology(dialogues)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


class _AtomicDir:
    """Build outputs in a sibling temp dir and move it into place on success."""

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self) -> Path:
        if self.target.exists():
            raise CLIError(f"output directory already exists: {self.target}")
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.tmp.rename(self.target)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# --------------------------------------------------------------------------
# commands


def statistics_table(splits: dict[str, list], domains=STATS_DOMAINS) -> str:
    """Per-domain dialogue and turn counts for each split, one row per domain."""
    stats = {name: corpus_statistics(raw, domains) for name, raw in splits.items()}
    slots = multiwoz_schema()["slots"]
    header = ["Domain", "Slots", "Dialogues Train", "Dialogues Valid", "Dialogues Test", "Turns Train", "Turns Valid", "Turns Test"]
    rows = []
    for d in domains:
        names = ", ".join(s.split("-", 1)[1] for s in slots if s.startswith(d + "-"))
        dial = [f"{stats[s][d][0]:,}" for s in ("train", "dev", "test")]
        turn = [f"{stats[s][d][1]:,}" for s in ("train", "dev", "test")]
        rows.append([d.capitalize(), names, *dial, *turn])
    return format_table(header, rows, "llrrrrrr") + "\n"


def cmd_stats(args) -> int:
    data = _existing(args.data, "data")
    splits = {}
    for split in SPLIT_FILES:
        path = split_path(data, split) if data.is_dir() else None
        if path is None:
            raise CLIError("stats needs a directory with the train/dev/test split files")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        if not isinstance(raw, list):
            raise DataError(f"{path}: expected a JSON list of dialogues")
        splits[split] = raw
    text = statistics_table(splits)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _train_once(config, train_dialogues, val_dialogues, ontology, out_dir: Path) -> float | None:
    write_config(config, out_dir / "config.json")
    (out_dir / "ontology.json").write_text(json.dumps(ontology.to_dict(), indent=1) + "\n", encoding="utf-8")
    result = train(train_dialogues, ontology, config, val_dialogues, out_dir)
    return result.best_joint


def cmd_train(args) -> int:
    config = effective_config(args)
    data = _existing(args.data, "data")
    if args.out is None:
        raise CLIError("--out is required")
    train_dialogues = _load(split_path(data, "train"))
    if not train_dialogues:
        raise DataError("training split has no dialogues")
    val_dialogues = _load(split_path(data, "dev")) if data.is_dir() else None
    ontology = _ontology(args, train_dialogues)
    try:
        with _AtomicDir(args.out) as out:
            if args.seeds <= 1:
                best = _train_once(config, train_dialogues, val_dialogues, ontology, out)
                summary = {"seeds": [config.seed], "val_joint_acc": [best]}
            else:
                seeds = [config.seed + i for i in range(args.seeds)]
                scores = []
                for seed in seeds:
                    sub = out / f"seed_{seed}"
                    sub.mkdir()
                    scores.append(_train_once(config.replace(seed=seed), train_dialogues, val_dialogues, ontology, sub))
                summary = {"seeds": seeds, "val_joint_acc": scores}
            known = [s for s in summary["val_joint_acc"] if s is not None]
            summary["mean_val_joint_acc"] = sum(known) / len(known) if known else None
            (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    except NonFiniteLossError as exc:
        print(f"error[training]: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    print(json.dumps(summary))
    return EXIT_OK


def _checkpoint_model(args):
    path = _existing(args.checkpoint, "checkpoint")
    try:
        model = load_checkpoint(path)
    except CheckpointError as exc:
        raise MismatchError(str(exc)) from exc
    except (OSError, RuntimeError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if args.ontology:
        ontology = _ontology(args)
        if ontology.fingerprint() != model.ontology.fingerprint():
            raise MismatchError(
                f"ontology fingerprint {ontology.fingerprint()} does not match checkpoint {model.ontology.fingerprint()}"
            )
    if args.config or args.set or args.ablate:
        wanted = effective_config(args)
        given = set(read_config_file(args.config)) if args.config else set()
        given |= {s.split("=", 1)[0].strip() for s in args.set or []}
        clash = [k for k in ARCHITECTURE_KEYS if k in given and getattr(wanted, k) != getattr(model.config, k)]
        if clash:
            raise MismatchError(f"config does not match checkpoint for: {', '.join(clash)}")
        keep = {k: getattr(model.config, k) for k in ARCHITECTURE_KEYS}
        model.config = wanted.replace(**keep)
    return model


def cmd_track(args) -> int:
    model = _checkpoint_model(args)
    data = _existing(args.data, "data")
    dialogues = _load(split_path(data, args.split))
    if args.out is None:
        raise CLIError("--out is required")
    results = track_dialogues(dialogues, model, forcing=args.forcing)
    payload = predictions_to_dict(dialogues, results, model, debug=args.debug)
    with _AtomicDir(args.out) as out:
        write_predictions(payload, out / "predictions.json")
        write_config(model.config, out / "config.json", {"checkpoint": str(args.checkpoint), "forcing": args.forcing})
    print(f"{len(dialogues)} dialogues tracked -> {Path(args.out) / 'predictions.json'}")
    return EXIT_OK


def _dump_ontology(payload) -> Ontology:
    slots = payload.get("slots") or {}
    return Ontology([SlotSchema(name, (NONE,), bool(spec.get("categorical", True))) for name, spec in slots.items()])


def cmd_eval(args) -> int:
    pred_path = _existing(args.predictions, "predictions")
    try:
        payload = read_predictions(pred_path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if args.ontology:
        ontology = _ontology(args)
        if ontology.fingerprint() != payload.get("ontology_fingerprint"):
            raise MismatchError("ontology fingerprint does not match the prediction dump")
    else:
        ontology = _dump_ontology(payload)
    dialogues = _load(split_path(_existing(args.data, "data"), args.split))
    try:
        report = evaluate_predictions(payload, dialogues, ontology)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if args.out:
        with _AtomicDir(args.out) as out:
            write_report(report, out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dss", description="Dual slot selector dialogue state tracker.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--data", help="corpus file or directory with train/dev/test_dials.json")
        p.add_argument("--out", help="output location")
        if config:
            p.add_argument("--config", help="flat YAML/JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
            p.add_argument("--ablate", action="append", metavar="{no-preliminary,no-ultimate,selector-history,k=N}")
            p.add_argument("--ontology", help="ontology JSON (slot -> values)")
            p.add_argument("--schema", help="MultiWOZ 2.2 schema.json for categorical flags")

    p = sub.add_parser("stats", help="per-domain dialogue/turn counts")
    common(p, config=False)

    p = sub.add_parser("train", help="train both phases")
    common(p)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to train")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("track", help="run a checkpoint over dialogues")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=sorted(SPLIT_FILES), default="test")
    p.add_argument("--forcing", choices=["gold", "selector"])
    p.add_argument("--debug", action="store_true", help="include per-slot decision traces")

    p = sub.add_parser("eval", help="score a prediction dump")
    common(p)
    p.add_argument("--predictions")
    p.add_argument("--split", choices=sorted(SPLIT_FILES), default="test")
    return parser


COMMANDS = {"stats": cmd_stats, "train": cmd_train, "track": cmd_track, "eval": cmd_eval}


def _validate_ablations(parser, args):
    for a in getattr(args, "ablate", None) or []:
        ok = a in ("no-preliminary", "no-ultimate", "selector-history") or (a.startswith("k=") and a[2:].isdigit() and int(a[2:]) >= 1)
        if not ok:
            parser.error(f"invalid --ablate value {a!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate_ablations(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CLIError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
