"""``d3`` command line front end.

Every subcommand reads its settings from three layers: built-in defaults, an
optional TOML config (top-level keys plus a table named after the subcommand),
and command-line flags. ``--dump-settings`` prints the resolved settings as
TOML and exits; feeding that dump back through ``--config`` reproduces it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dictionary as dio
from .errors import D3Error, D3IOError, FormatError
from .mp import DenoiseConfig, Deterministic, Randomized, denoise_image, relative_residual
from .patches import default_stride, uncovered_margin

log = logging.getLogger("d3")


@dataclass(frozen=True)
class Setting:
    name: str
    type: type
    default: object
    help: str = ""


def _s(name, type_, default, help=""):
    return Setting(name, type_, default, help)


COMMON = [
    _s("seed", int, 0, "global RNG seed"),
    _s("threads", int, None, "worker threads (default: $D3_THREADS or 1)"),
]
DENOISE_KNOBS = [
    _s("kappa", int, None, "sparsity used at inference (default: every level)"),
    _s("stride", int, None, "patch stride (default: patch size / 4)"),
    _s("randomize", bool, False, "randomized atom selection"),
    _s("subsample", float, 0.2, "fraction of atoms sampled per level (randomized mode)"),
    _s("top_k", int, 2, "pick uniformly among this many best atoms (randomized mode)"),
]
LEARN_KNOBS = [
    _s("corpus", str, None, "image directory, or desk:N for N built-in photo crops"),
    _s("patch", int, 8, "patch size P"),
    _s("eta", int, 256, "atoms per level"),
    _s("kappa", int, 1, "number of levels"),
    _s("eps", float, 0.85, "admission threshold"),
    _s("saliency", str, "uniform", "uniform, gradmag or dir:PATH"),
    _s("max_attempts", int, None, "candidate draws per level (default: 200 * eta)"),
]
PAIR_KNOBS = [
    _s("clean", str, None, "directory of clean images"),
    _s("noisy", str, None, "directory of perturbed images with matching names (default: random-sign noise)"),
    _s("noise_budget", float, 0.06, "relative l2 norm of the synthesized noise"),
    _s("delta", float, 1e-4, "l-inf tolerance for a patch match"),
    _s("sample", int, 500, "images drawn (seeded) when more are available"),
    _s("mr_randomized", bool, False, "compute MR with the randomized transform"),
]
COMMANDS = {
    "learn": LEARN_KNOBS + [
        _s("out", str, None, "output dictionary file"),
        _s("report", str, None, "write the JSON build report here instead of stdout"),
    ],
    "denoise": [
        _s("dict", str, None, "dictionary file"),
        _s("input", str, None, "image file or directory"),
        _s("output", str, None, "output file or directory"),
    ] + DENOISE_KNOBS,
    "metrics": [_s("dict", str, None, "dictionary file")] + PAIR_KNOBS + DENOISE_KNOBS + [
        _s("report", str, None, "write the JSON report here instead of stdout"),
    ],
    "sweep": [
        _s("axis", str, "kappa", "kappa, patch_size or epsilon"),
        _s("values", str, "1,2,3,4,5", "comma-separated values"),
        _s("dict", str, None, "dictionary file (kappa sweeps)"),
        _s("out", str, "sweep", "output prefix for .csv and .svg"),
    ] + [k for k in LEARN_KNOBS if k.name != "kappa"] + [
        _s("learn_kappa", int, 2, "levels built per point (patch_size / epsilon sweeps)"),
    ] + PAIR_KNOBS + [k for k in DENOISE_KNOBS if k.name != "kappa"],
    "attack-eval": [
        _s("dict", str, None, "dictionary file"),
        _s("model", str, None, "classifier file"),
        _s("data", str, None, "labelled data: class-per-subdirectory DIR, cifar:PATH, blobs:N or desk:N"),
        _s("attack", str, "fgsm", "fgsm or deepfool"),
        _s("threat", str, "grey", "black, grey or white"),
        _s("budget", float, 0.06, "relative l2 norm of the perturbation"),
        _s("max_iter", int, 50, "DeepFool iterations"),
        _s("overshoot", float, 0.02, "DeepFool overshoot"),
        _s("surrogate", str, None, "surrogate classifier (black box)"),
        _s("undefended", str, None, "classifier for the no-defense column (default: --model)"),
        _s("limit", int, None, "evaluate only the first N samples"),
        _s("report", str, None, "write the JSON report here instead of stdout"),
    ] + DENOISE_KNOBS,
    "train": [
        _s("data", str, None, "labelled data (see attack-eval)"),
        _s("out", str, None, "output classifier file"),
        _s("arch", str, "mlp", "linear or mlp"),
        _s("hidden", int, 64, "hidden units (mlp)"),
        _s("epochs", int, 30, ""),
        _s("lr", float, 1e-2, "Adam learning rate"),
        _s("weight_decay", float, 1e-4, ""),
        _s("batch_size", int, 64, ""),
        _s("init", str, None, "classifier to fine-tune instead of a fresh one"),
        _s("dict", str, None, "train on T(x) built with this dictionary"),
    ] + DENOISE_KNOBS,
}
REQUIRED = {
    "learn": ("corpus", "out"),
    "denoise": ("dict", "input", "output"),
    "metrics": ("dict", "clean"),
    "sweep": ("clean",),
    "attack-eval": ("dict", "model", "data"),
    "train": ("data", "out"),
}


class UsageError(D3Error):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# settings ------------------------------------------------------------------

def _coerce(setting: Setting, value, origin: str):
    if value is None:
        return None
    if setting.type is bool:
        if isinstance(value, bool):
            return value
        raise FormatError(f"{origin}: {setting.name} must be true or false, got {value!r}")
    if setting.type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, setting.type) or isinstance(value, bool):
        raise FormatError(f"{origin}: {setting.name} must be {setting.type.__name__}, got {value!r}")
    return value


def load_config(path, command: str) -> dict:
    """Top-level keys and the ``[command]`` table of a TOML file (the table wins)."""
    import tomli

    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as exc:
        raise D3IOError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    known = {s.name: s for s in COMMON + COMMANDS[command]}
    anywhere = {s.name for knobs in COMMANDS.values() for s in knobs}
    merged = {}
    for top, scope in ((True, doc), (False, doc.get(command, {}))):
        for key, value in scope.items():
            if isinstance(value, dict):
                if key not in COMMANDS and key != "provenance":
                    raise FormatError(f"{path}: unknown table [{key}]")
                continue
            key = key.replace("-", "_")
            if key == "command":
                continue
            if key not in known:
                if top and key in anywhere:
                    continue  # shared config: a setting of another subcommand
                raise FormatError(f"{path}: unknown setting {key!r} for {command}")
            merged[key] = _coerce(known[key], value, str(path))
    return merged


def resolve_settings(command: str, args: argparse.Namespace) -> dict:
    settings = {s.name: s.default for s in COMMON + COMMANDS[command]}
    if args.config:
        settings.update(load_config(args.config, command))
    for s in COMMON + COMMANDS[command]:
        value = getattr(args, s.name, None)
        if value is not None:
            settings[s.name] = value
    if settings["threads"] is None:
        env = os.environ.get("D3_THREADS")
        try:
            settings["threads"] = int(env) if env else 1
        except ValueError as exc:
            raise UsageError(f"D3_THREADS must be an integer, got {env!r}") from exc
    if settings["threads"] < 1:
        raise UsageError(f"threads must be >= 1, got {settings['threads']}")
    return settings


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("nan" if math.isnan(value) else f"{'-' if value < 0 else ''}inf")
    if isinstance(value, int):
        return str(value)
    return json.dumps(str(value))


def settings_dump(command: str, settings: dict, provenance: dict | None = None) -> str:
    """TOML text of every resolved setting; unset optional paths are omitted."""
    lines = [f"command = {_toml_value(command)}"]
    for s in COMMON + COMMANDS[command]:
        value = settings.get(s.name)
        if value is not None:
            lines.append(f"{s.name} = {_toml_value(value)}")
    if provenance:
        lines.append("")
        lines.append("[provenance]")
        for key, value in provenance.items():
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def denoise_config(settings: dict, patch_size: int | None = None, seed: int | None = None) -> DenoiseConfig:
    mode = Deterministic()
    if settings["randomize"]:
        mode = Randomized(settings["subsample"], settings["top_k"], settings["seed"] if seed is None else seed)
    stride = settings["stride"]
    if stride is None and patch_size is not None:
        stride = default_stride(patch_size)
    return DenoiseConfig(kappa=settings.get("kappa"), mode=mode, stride=stride,
                         mr_delta=settings.get("delta", 1e-4))


def _resolve_denoise_knobs(settings: dict, dset) -> None:
    if "kappa" in settings and settings["kappa"] is None:
        settings["kappa"] = dset.kappa
    if settings["stride"] is None:
        settings["stride"] = default_stride(dset.patch_size)
    DenoiseConfig(kappa=settings.get("kappa")).resolve_kappa(dset)


def _dict_provenance(dset) -> dict:
    return {"dictionary": dset.fingerprint(), "corpus_hash": dset.corpus_hash.hex(),
            "dictionary_seed": dset.seed}


# data helpers --------------------------------------------------------------

def _pmap(fn, items, threads: int) -> list:
    """Ordered map, on a thread pool when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def load_corpus(spec: str, seed: int):
    """``(ids, images)`` from a directory or ``desk:N`` (built-in photo crops, 32x32)."""
    from .data import desk_corpus, read_directory

    if spec.startswith("desk:"):
        n = _count(spec[5:], spec)
        return [f"desk{i:04d}" for i in range(n)], desk_corpus(n, 32, seed=seed)
    return read_directory(spec)


def _count(text: str, spec: str) -> int:
    try:
        n = int(text)
    except ValueError as exc:
        raise UsageError(f"bad count in {spec!r}") from exc
    if n < 1:
        raise UsageError(f"count must be positive in {spec!r}")
    return n


def load_labelled(spec: str, seed: int):
    """``(images, labels)`` from ``cifar:PATH``, ``blobs:N``, ``desk:N`` or a class-per-subdirectory tree."""
    from .data import desk_instances, gaussian_blobs, read_cifar_binary, read_directory

    if spec.startswith("cifar:"):
        return read_cifar_binary(spec[6:])
    if spec.startswith("blobs:"):
        return gaussian_blobs(_count(spec[6:], spec), seed=seed)
    if spec.startswith("desk:"):
        return desk_instances(_count(spec[5:], spec), seed=seed)
    root = Path(spec)
    if not root.is_dir():
        raise D3IOError(f"not a directory: {root}")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise D3IOError(f"{root} has no class subdirectories")
    images, labels = [], []
    for k, sub in enumerate(classes):
        for img in read_directory(sub)[1]:
            images.append(img)
            labels.append(k)
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise FormatError(f"labelled images must share one shape, found {sorted(shapes)}")
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def _subsample(n: int, k: int, seed: int) -> np.ndarray:
    if n <= k:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


def load_pairs(settings: dict):
    """Clean images and (clean, perturbed) pairs, sampled with the global seed."""
    from .data import read_directory, read_image
    from .metrics import noise_pairs

    ids, clean = read_directory(settings["clean"])
    keep = _subsample(len(clean), settings["sample"], settings["seed"])
    ids = [ids[i] for i in keep]
    clean = [clean[i] for i in keep]
    if settings["noisy"]:
        noisy_dir = Path(settings["noisy"])
        by_stem = {}
        for p in sorted(noisy_dir.iterdir()) if noisy_dir.is_dir() else []:
            by_stem.setdefault(p.stem, p)
        if not noisy_dir.is_dir():
            raise D3IOError(f"not a directory: {noisy_dir}")
        missing = [i for i in ids if i not in by_stem]
        if missing:
            raise D3IOError(f"no perturbed image for {missing[0]!r} in {noisy_dir}")
        pairs = [(c, read_image(by_stem[i])) for i, c in zip(ids, clean)]
    else:
        pairs = noise_pairs(clean, settings["noise_budget"], seed=settings["seed"])
    return clean, pairs


def _emit_json(payload: dict, path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        try:
            Path(path).write_text(text + "\n")
        except OSError as exc:
            raise D3IOError(f"cannot write {path}: {exc}") from exc
    else:
        print(text)


# subcommands ---------------------------------------------------------------

def _learn_config(settings: dict, channels: int, kappa_key: str = "kappa"):
    from .dl import LearnConfig

    return LearnConfig(patch_size=settings["patch"], eta=settings["eta"], kappa=settings[kappa_key],
                       epsilon=settings["eps"], max_attempts=settings["max_attempts"],
                       seed=settings["seed"], channels=channels)


def cmd_learn(settings: dict, dump: bool) -> int:
    from .dl import build_dictionaries, corpus_hash
    from .saliency import make_provider

    if settings["max_attempts"] is None:
        settings["max_attempts"] = 200 * settings["eta"]
    if dump:
        provenance = {}
        if settings["corpus"]:
            provenance["corpus_hash"] = corpus_hash(load_corpus(settings["corpus"], settings["seed"])[1]).hex()
        print(settings_dump("learn", settings, provenance), end="")
        return 0
    ids, corpus = load_corpus(settings["corpus"], settings["seed"])
    provider = make_provider(settings["saliency"])
    result = build_dictionaries(corpus, provider, _learn_config(settings, corpus[0].shape[2]), ids)
    dio.save(result.dictionaries, settings["out"])
    report = result.report()
    report["fingerprint"] = result.dictionaries.fingerprint()
    report["out"] = settings["out"]
    _emit_json(report, settings["report"])
    return 0


def _warn_margin(shape, patch_size: int, stride: int, what: str) -> None:
    mh, mw = uncovered_margin(shape[0], shape[1], patch_size, stride)
    if mh or mw:
        log.warning("%s: bottom %d / right %d pixel margin not covered by any patch; copied unchanged",
                    what, mh, mw)


def cmd_denoise(settings: dict, dump: bool) -> int:
    from .data import list_images, read_image, write_image

    dset = dio.load(settings["dict"])
    _resolve_denoise_knobs(settings, dset)
    if dump:
        print(settings_dump("denoise", settings, _dict_provenance(dset)), end="")
        return 0
    src, dst = Path(settings["input"]), Path(settings["output"])
    if src.is_dir():
        inputs = list_images(src)
        if not inputs:
            raise D3IOError(f"no PNG/PPM images in {src}")
        try:
            dst.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise D3IOError(f"cannot create {dst}: {exc}") from exc
        outputs = [dst / p.name for p in inputs]
    else:
        inputs, outputs = [src], [dst]

    def work(job):
        i, path, out = job
        img = read_image(path)
        _warn_margin(img.shape, dset.patch_size, settings["stride"], path.name)
        y = denoise_image(dset, img, denoise_config(settings, dset.patch_size, settings["seed"] + i))
        write_image(y, out)
        return path.name, relative_residual(img, y)

    for name, res in _pmap(work, zip(range(len(inputs)), inputs, outputs), settings["threads"]):
        print(f"{name}\trelative_residual={res:.6f}")
    return 0


def cmd_metrics(settings: dict, dump: bool) -> int:
    from .metrics import config_fingerprint, matching_rate, reconstruction_error
    from .patches import extract_patches

    dset = dio.load(settings["dict"])
    _resolve_denoise_knobs(settings, dset)
    if dump:
        print(settings_dump("metrics", settings, _dict_provenance(dset)), end="")
        return 0
    clean, pairs = load_pairs(settings)
    cfg = denoise_config(settings, dset.patch_size)
    threads = settings["threads"]
    det = not settings["mr_randomized"]
    mr = float(np.mean(_pmap(lambda pr: matching_rate(dset, cfg, [pr], settings["delta"], det), pairs, threads)))
    re = reconstruction_error(dset, cfg, clean)
    n_patches = extract_patches(clean[0], dset.patch_size, settings["stride"]).n_patches
    report = {"mr": mr, "re": re, "quality": 1.0 - re, "n_images": len(clean),
              "n_patches_per_image": n_patches, "delta": settings["delta"],
              "fingerprint": config_fingerprint(dset, cfg)}
    _emit_json(report, settings["report"])
    return 0


def _parse_values(axis: str, text: str) -> list:
    cast = float if axis == "epsilon" else int
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --values {text!r} for axis {axis}") from exc
    if not values:
        raise UsageError("--values is empty")
    return values


def write_sweep_csv(rows, path) -> None:
    fields = ["axis", "value", "mr", "re", "quality", "n_images", "n_patches_per_image", "delta", "error"]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            w.writeheader()
            for row in rows:
                w.writerow({k: row.get(k, "") for k in fields})
    except OSError as exc:
        raise D3IOError(f"cannot write {path}: {exc}") from exc


def write_sweep_svg(rows, path) -> None:
    """Line chart of MR and 1 - RE against the swept value."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "d3"  # stable element ids
    xs = [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, [r["mr"] for r in rows], "o-", label="MR")
    ax.plot(xs, [r["quality"] for r in rows], "s-", label="1 - RE")
    ax.set_xlabel(rows[0]["axis"] if rows else "")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise D3IOError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def cmd_sweep(settings: dict, dump: bool) -> int:
    from .metrics import SWEEP_AXES, metric_sweep
    from .saliency import make_provider

    axis = settings["axis"]
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    values = _parse_values(axis, settings["values"])
    dset = corpus = ids = None
    provenance = {}
    if axis == "kappa":
        if not settings["dict"]:
            raise UsageError("a kappa sweep needs --dict")
        dset = dio.load(settings["dict"])
        provenance = _dict_provenance(dset)
        if settings["stride"] is None:
            settings["stride"] = default_stride(dset.patch_size)
    else:
        if not settings["corpus"]:
            raise UsageError(f"a {axis} sweep needs --corpus")
        if settings["max_attempts"] is None:
            settings["max_attempts"] = 200 * settings["eta"]
        if not dump:
            ids, corpus = load_corpus(settings["corpus"], settings["seed"])
    if dump:
        print(settings_dump("sweep", settings, provenance), end="")
        return 0
    clean, pairs = load_pairs(settings)
    cfg = denoise_config(settings, dset.patch_size if dset is not None else None)
    if axis == "patch_size":
        cfg = DenoiseConfig(mode=cfg.mode, stride=None, mr_delta=cfg.mr_delta)
    learn_cfg = None
    if corpus is not None:
        learn_cfg = _learn_config(settings, corpus[0].shape[2], "learn_kappa")
    provider = make_provider(settings["saliency"])
    rows = metric_sweep(clean, pairs, axis, values, cfg, dset=dset, corpus=corpus, learn_cfg=learn_cfg,
                        saliency=provider, delta=settings["delta"])
    prefix = settings["out"]
    write_sweep_csv(rows, f"{prefix}.csv")
    write_sweep_svg(rows, f"{prefix}.svg")
    for row in rows:
        if "error" in row:
            print(f"{axis}={row['value']}\terror: {row['error']}")
        else:
            print(f"{axis}={row['value']}\tmr={row['mr']:.4f}\tre={row['re']:.4f}")
    return 0


def cmd_attack_eval(settings: dict, dump: bool) -> int:
    from .attack import AttackSpec, ThreatModel, evaluate_defense, load_model

    dset = dio.load(settings["dict"])
    _resolve_denoise_knobs(settings, dset)
    threat = ThreatModel(settings["threat"]) if settings["threat"] in ("black", "grey", "white") else None
    if threat is None:
        raise UsageError(f"unknown threat {settings['threat']!r}")
    if threat is ThreatModel.BLACK and not settings["surrogate"]:
        raise UsageError("black-box evaluation needs --surrogate")
    if dump:
        print(settings_dump("attack-eval", settings, _dict_provenance(dset)), end="")
        return 0
    try:
        attack = AttackSpec(settings["attack"], settings["budget"], settings["max_iter"], settings["overshoot"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = load_model(settings["model"])
    surrogate = load_model(settings["surrogate"]) if settings["surrogate"] else None
    undefended = load_model(settings["undefended"]) if settings["undefended"] else None
    images, labels = load_labelled(settings["data"], settings["seed"])
    if settings["limit"]:
        images, labels = images[:settings["limit"]], labels[:settings["limit"]]
    cfg = denoise_config(settings, dset.patch_size)
    report = evaluate_defense(model, dset, cfg, images, labels, attack, threat, surrogate=surrogate,
                              seed=settings["seed"], undefended_model=undefended)
    out = report.as_dict()
    out.update(attack=attack.kind, threat=threat.value, budget=attack.budget,
               randomize=settings["randomize"], dictionary=dset.fingerprint())
    _emit_json(out, settings["report"])
    return 0


def cmd_train(settings: dict, dump: bool) -> int:
    from .attack import accuracy, load_model, save_model, train_toy, transform_dataset

    dset = None
    provenance = {}
    if settings["dict"]:
        dset = dio.load(settings["dict"])
        _resolve_denoise_knobs(settings, dset)
        provenance = _dict_provenance(dset)
    if dump:
        print(settings_dump("train", settings, provenance), end="")
        return 0
    images, labels = load_labelled(settings["data"], settings["seed"])
    if dset is not None:
        images = transform_dataset(dset, denoise_config(settings, dset.patch_size), images, settings["seed"])
    init = load_model(settings["init"]) if settings["init"] else None
    model = train_toy(images, labels, settings["arch"], epochs=settings["epochs"], lr=settings["lr"],
                      seed=settings["seed"], hidden=settings["hidden"], batch_size=settings["batch_size"],
                      weight_decay=settings["weight_decay"], init=init)
    save_model(model, settings["out"])
    print(json.dumps({"out": settings["out"], "train_accuracy": accuracy(model, images, labels),
                      "n": int(len(labels))}, sort_keys=True))
    return 0


def cmd_inspect(path: str) -> int:
    print(json.dumps(dio.summary(dio.load(path)), indent=2))
    return 0


HANDLERS = {
    "learn": cmd_learn,
    "denoise": cmd_denoise,
    "metrics": cmd_metrics,
    "sweep": cmd_sweep,
    "attack-eval": cmd_attack_eval,
    "train": cmd_train,
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="d3", description="Patch-dictionary denoising defense toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, knobs in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="TOML config; flags override it")
        p.add_argument("--dump-settings", action="store_true", help="print resolved settings as TOML and exit")
        for s in COMMON + knobs:
            if s.type is bool:
                p.add_argument(_flag(s.name), dest=s.name, action=argparse.BooleanOptionalAction,
                               default=None, help=s.help)
            else:
                p.add_argument(_flag(s.name), dest=s.name, type=s.type, default=None, help=s.help)
    p = sub.add_parser("inspect")
    p.add_argument("dict", help="dictionary file")
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s: %(message)s", stream=sys.stderr)
        if args.command == "inspect":
            return cmd_inspect(args.dict)
        settings = resolve_settings(args.command, args)
        if not args.dump_settings:
            missing = [_flag(k) for k in REQUIRED[args.command] if not settings.get(k)]
            if missing:
                raise UsageError(f"{args.command}: missing {', '.join(missing)}")
        return HANDLERS[args.command](settings, args.dump_settings)
    except D3Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
