"""Command-line pipeline: dataset -> train -> generate -> evaluate.

Every stage reads a flat ``section.key=value`` config file, writes its outputs
into the configured work directory and finishes by writing a JSON manifest.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .gddpm import Denoiser, build_noise_schedule, generate_features_batch, parse_layout, train_features
from .graph import (
    DatasetSpec,
    Graph,
    GraphError,
    estimate_bandwidth,
    impute_missing_features,
    largest_component,
    missing_mask,
    build_dataset,
    standardize_features,
)
from .graphrnn import GraphRNN, GraphRnnConfig, ModelCollapsed, sample_topologies, train_topology
from .io import (
    FormatError,
    atomic_write,
    fmt_real,
    format_stats,
    read_checkpoint,
    read_graph,
    read_graphs,
    write_checkpoint,
    write_graphs,
)
from .metrics import METRIC_NAMES, ensemble_report
from .nn import load_module_state, module_state

log = logging.getLogger("dkngen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

DATASET_FILE = "dataset.txt"
STATS_FILE = "stats.txt"
INFO_FILE = "dataset_info.json"
GENERATED_FILE = "generated.txt"
CHECKPOINTS = {"topology": "topology.ckpt", "features": "features.ckpt"}
LOSS_FILES = {"topology": "topology_loss.csv", "features": "features_loss.csv"}
GENERATE_CHUNK = 100


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------------------


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _names(v: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in v.split(",") if s.strip())


@dataclass
class PipelineConfig:
    main_graph: Path | None = None
    workdir: Path = Path("work")
    seed: int = 0
    # dataset
    n_graphs: int = 500
    node_count_mean: float = 30.0
    node_count_std: float = 3.0
    bandwidth_trials: int = 100_000
    bandwidth_percentile: float = 99.9
    impute_columns: tuple[str, ...] = ()
    zero_is_missing: bool = True
    # topology model
    m: int | None = None
    n_max: int | None = None
    graph_hidden: int = 48
    graph_layers: int = 4
    edge_layers: int = 4
    epochs_topology: int | None = None
    batch_topology: int = 16
    # feature model
    T: int = 2400
    beta_start: float = 1e-4
    beta_end: float = 0.02
    layout: str = "8/9/8"
    std_floor: float | None = None
    center_coordinates: bool = True
    epochs_features: int = 1201
    batch_features: int = 16
    # shared training
    lr: float = 1e-3
    dtype: str = "float32"
    checkpoint_every: int = 25
    # generation
    n_gen: int | None = None
    source: dict = field(default_factory=dict, repr=False)

    @property
    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(self.n_graphs, self.node_count_mean, self.node_count_std, stage_seed(self.seed, "dataset"))

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def topology_epoch_count(self) -> int:
        if self.epochs_topology is not None:
            return self.epochs_topology
        return self.dataset_spec.topology_epochs

    def snapshot(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "source":
                continue
            v = getattr(self, f.name)
            out[f.name] = str(v) if isinstance(v, Path) else (list(v) if isinstance(v, tuple) else v)
        return out


# config key -> (attribute, parser)
CONFIG_KEYS: dict[str, tuple[str, Callable]] = {
    "paths.main_graph": ("main_graph", Path),
    "paths.workdir": ("workdir", Path),
    "seed": ("seed", int),
    "dataset.n_graphs": ("n_graphs", int),
    "dataset.node_count_mean": ("node_count_mean", float),
    "dataset.node_count_std": ("node_count_std", float),
    "dataset.bandwidth_trials": ("bandwidth_trials", int),
    "dataset.bandwidth_percentile": ("bandwidth_percentile", float),
    "dataset.impute_columns": ("impute_columns", _names),
    "dataset.zero_is_missing": ("zero_is_missing", _bool),
    "graphrnn.m": ("m", int),
    "graphrnn.n_max": ("n_max", int),
    "graphrnn.graph_hidden": ("graph_hidden", int),
    "graphrnn.graph_layers": ("graph_layers", int),
    "graphrnn.edge_layers": ("edge_layers", int),
    "graphrnn.epochs": ("epochs_topology", int),
    "graphrnn.batch_size": ("batch_topology", int),
    "diffusion.T": ("T", int),
    "diffusion.beta_start": ("beta_start", float),
    "diffusion.beta_end": ("beta_end", float),
    "diffusion.layout": ("layout", str),
    "diffusion.std_floor": ("std_floor", float),
    "diffusion.center_coordinates": ("center_coordinates", _bool),
    "diffusion.epochs": ("epochs_features", int),
    "diffusion.batch_size": ("batch_features", int),
    "train.lr": ("lr", float),
    "train.dtype": ("dtype", str),
    "train.checkpoint_every": ("checkpoint_every", int),
    "generate.count": ("n_gen", int),
}


def parse_config(text: str, base: Path | None = None) -> PipelineConfig:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored.

    Relative paths resolve against ``base`` (the config file's directory).
    """
    cfg = PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected key=value", EXIT_USAGE)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise CliError(f"config line {lineno}: unknown key {key!r}", EXIT_USAGE)
        attr, parse = CONFIG_KEYS[key]
        try:
            value = parse(val)
        except ValueError as exc:
            raise CliError(f"config line {lineno}: bad value for {key}: {exc}", EXIT_USAGE) from None
        if isinstance(value, Path) and base is not None and not value.is_absolute():
            value = base / value
        setattr(cfg, attr, value)
        cfg.source[key] = val
    _validate(cfg)
    return cfg


def _validate(cfg: PipelineConfig) -> None:
    problems = []
    if cfg.dtype not in ("float32", "float64"):
        problems.append("train.dtype must be float32 or float64")
    for name in ("epochs_topology", "epochs_features"):
        v = getattr(cfg, name)
        if v is not None and v < 1:
            problems.append(f"{name} must be >= 1")
    if cfg.n_gen is not None and cfg.n_gen < 0:
        problems.append("generate.count must be >= 0")
    try:
        parse_layout(cfg.layout)
        cfg.dataset_spec
    except ValueError as exc:
        problems.append(str(exc))
    if problems:
        raise CliError("invalid config: " + "; ".join(problems), EXIT_USAGE)


def load_config(path, seed: int | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_USAGE) from None
    cfg = parse_config(text, path.parent)
    if seed is not None:
        cfg.seed = seed
    return cfg


def stage_seed(seed: int, stage: str) -> int:
    """64-bit seed for one stage, derived from the global seed and the stage name."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ----------------------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------------------


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg: PipelineConfig | None, stage: str, started: float, inputs, outputs, out_dir: Path) -> Path:
    manifest = {
        "stage": stage,
        "version": __version__,
        "seed": cfg.seed if cfg else None,
        "config": cfg.snapshot() if cfg else None,
        "wall_clock_s": round(time.time() - started, 3),
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs},
    }
    path = Path(out_dir) / f"manifest_{stage}.json"
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_loss_csv(path: Path, losses: list[float]) -> None:
    atomic_write(path, "epoch,loss\n" + "".join(f"{i + 1},{fmt_real(v)}\n" for i, v in enumerate(losses)))


def read_loss_csv(path: Path) -> list[float]:
    if not path.exists():
        return []
    rows = path.read_text(encoding="utf-8").splitlines()[1:]
    return [float(r.split(",")[1]) for r in rows if r]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path} (run the earlier stage first)", EXIT_DATA)
    return path


def _dataset_info(cfg: PipelineConfig) -> dict:
    path = _require(cfg.workdir / INFO_FILE, "dataset info")
    return json.loads(path.read_text(encoding="utf-8"))


def _topology_config(cfg: PipelineConfig, info: dict) -> GraphRnnConfig:
    return GraphRnnConfig(
        m=cfg.m if cfg.m is not None else int(info["m"]),
        n_max=cfg.n_max if cfg.n_max is not None else int(info["n_max"]),
        graph_layers=cfg.graph_layers,
        graph_hidden=cfg.graph_hidden,
        edge_layers=cfg.edge_layers,
    )


def _features_config(cfg: PipelineConfig, d: int, k: int) -> dict:
    return {
        "T": cfg.T,
        "beta_start": fmt_real(cfg.beta_start),
        "beta_end": fmt_real(cfg.beta_end),
        "d": d,
        "layout": "/".join(str(v) for v in parse_layout(cfg.layout)),
        "centered": k if cfg.center_coordinates else 0,
    }


# ----------------------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------------------


def prepare_main_graph(graph: Graph, cfg: PipelineConfig) -> Graph:
    if not graph.is_connected():
        before = graph.n
        graph = largest_component(graph)
        log.warning("main graph is not connected; keeping largest component (%d of %d nodes)", graph.n, before)
    if cfg.impute_columns:
        unknown = [c for c in cfg.impute_columns if c not in graph.feature_names]
        if unknown:
            raise CliError(f"impute columns not in main graph: {', '.join(unknown)}", EXIT_DATA)
        mask = missing_mask(graph, cfg.impute_columns, cfg.zero_is_missing)
        graph = impute_missing_features(graph, mask)
        log.info("imputed %d missing values", int(mask.sum()))
    return graph


def cmd_dataset(cfg: PipelineConfig) -> None:
    started = time.time()
    if cfg.main_graph is None:
        raise CliError("config lacks paths.main_graph", EXIT_USAGE)
    main = prepare_main_graph(read_graph(cfg.main_graph), cfg)
    spec = cfg.dataset_spec
    if spec.node_count_mean > main.n:
        raise CliError(f"mean node count {spec.node_count_mean} exceeds main graph size {main.n}", EXIT_DATA)
    dataset = build_dataset(main, spec)
    m = estimate_bandwidth(main, spec, cfg.bandwidth_trials, cfg.bandwidth_percentile)
    _, stats = standardize_features(dataset, cfg.std_floor)
    out = cfg.workdir
    write_graphs(out / DATASET_FILE, dataset)
    atomic_write(out / STATS_FILE, format_stats(stats))
    info = {"m": m, "n_max": spec.n_max, "n_graphs": len(dataset), "d": main.d, "k": main.k}
    atomic_write(out / INFO_FILE, json.dumps(info, indent=2, sort_keys=True) + "\n")
    outputs = [out / DATASET_FILE, out / STATS_FILE, out / INFO_FILE]
    write_manifest(cfg, "dataset", started, [cfg.main_graph], outputs, out)
    log.info("dataset: %d graphs, bandwidth m=%d", len(dataset), m)


def _resume_state(path: Path, kind: str, expected: dict) -> tuple[dict, dict, int]:
    _, config, params, _ = read_checkpoint(_require(path, "checkpoint"), kind)
    mismatched = [
        f"{k} (checkpoint {config.get(k)!r}, config {str(v)!r})"
        for k, v in expected.items()
        if config.get(k) != str(v)
    ]
    if mismatched:
        raise CliError("checkpoint does not match config: " + ", ".join(mismatched), EXIT_MODEL)
    return config, params, int(config.get("epochs_done", 0))


def cmd_train(cfg: PipelineConfig, which: str, resume: bool = False) -> None:
    started = time.time()
    out = cfg.workdir
    data_path = _require(out / DATASET_FILE, "dataset")
    dataset = read_graphs(data_path)
    ckpt_path = out / CHECKPOINTS[which]
    loss_path = out / LOSS_FILES[which]
    seed = stage_seed(cfg.seed, f"train-{which}")
    dtype = cfg.torch_dtype
    prior: list[float] = []
    start = 0

    if which == "topology":
        arch = _topology_config(cfg, _dataset_info(cfg))
        epochs = cfg.topology_epoch_count()
        expected = arch.as_dict()
        model = GraphRNN(arch, np.random.default_rng([seed, 0x1417]), dtype)
        stats = None
        batch = cfg.batch_topology
    else:
        _, stats = standardize_features(dataset, cfg.std_floor)
        dataset = [g.with_features(stats.forward(g.node_features)) for g in dataset]
        epochs = cfg.epochs_features
        expected = _features_config(cfg, dataset[0].d, dataset[0].k)
        model = Denoiser(dataset[0].d, cfg.layout, rng=np.random.default_rng([seed, 0xD1F]), dtype=dtype)
        schedule = build_noise_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        batch = cfg.batch_features

    if resume:
        _, params, start = _resume_state(ckpt_path, CHECKPOINT_KIND[which], expected)
        try:
            load_module_state(model, params)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_MODEL) from None
        prior = read_loss_csv(loss_path)[:start]
        log.info("resuming %s training at epoch %d", which, start)

    losses = list(prior)

    def save(epochs_done: int, m) -> None:
        config = {**expected, "epochs_done": epochs_done}
        write_checkpoint(ckpt_path, CHECKPOINT_KIND[which], config, module_state(m), stats)
        write_loss_csv(loss_path, losses)

    def on_epoch(epoch: int, value: float, m) -> None:
        losses.append(value)
        done = epoch + 1
        if cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0 and done < epochs:
            save(done, m)

    common = dict(model=model, start_epoch=start, lr=cfg.lr, dtype=dtype, on_epoch=on_epoch)
    if which == "topology":
        trained, _ = train_topology(dataset, arch, epochs, seed, batch_size=batch, **common)
    else:
        trained, _ = train_features(
            dataset,
            schedule,
            epochs,
            seed,
            layout=cfg.layout,
            batch_size=batch,
            centered_columns=int(expected["centered"]),
            **common,
        )
    save(max(epochs, start), trained)
    write_manifest(cfg, f"train_{which}", started, [data_path], [ckpt_path, loss_path], out)
    if losses:
        log.info("%s training done: loss %.5f -> %.5f", which, losses[0], losses[-1])


CHECKPOINT_KIND = {"topology": "graphrnn", "features": "gddpm"}


def load_topology_model(path: Path, dtype=torch.float32) -> tuple[GraphRNN, GraphRnnConfig]:
    _, config, params, _ = read_checkpoint(_require(path, "topology checkpoint"), "graphrnn")
    config = {k: v for k, v in config.items() if k != "epochs_done"}
    arch = GraphRnnConfig.from_dict(config)
    model = GraphRNN(arch, None, dtype)
    load_module_state(model, params)
    return model, arch


def load_feature_model(path: Path, dtype=torch.float32):
    _, config, params, stats = read_checkpoint(_require(path, "feature checkpoint"), "gddpm")
    if stats is None:
        raise CliError(f"{path}: checkpoint lacks feature stats", EXIT_MODEL)
    model = Denoiser(int(config["d"]), config["layout"], rng=None, dtype=dtype)
    load_module_state(model, params)
    schedule = build_noise_schedule(int(config["T"]), float(config["beta_start"]), float(config["beta_end"]))
    return model, schedule, stats, int(config.get("centered", 0))


def cmd_generate(cfg: PipelineConfig, count: int | None = None) -> None:
    started = time.time()
    out = cfg.workdir
    count = count if count is not None else (cfg.n_gen if cfg.n_gen is not None else cfg.n_graphs)
    info = _dataset_info(cfg)
    dtype = cfg.torch_dtype
    topo_model, arch = load_topology_model(out / CHECKPOINTS["topology"], dtype)
    feat_model, schedule, stats, centered = load_feature_model(out / CHECKPOINTS["features"], dtype)
    seed = stage_seed(cfg.seed, "generate")
    k = int(info.get("k", min(2, feat_model.d)))
    generated: list[Graph] = []
    for lo in range(0, count, GENERATE_CHUNK):
        idx = range(lo, min(count, lo + GENERATE_CHUNK))
        try:
            topologies = sample_topologies(topo_model, arch, [np.random.default_rng([seed, i, 0]) for i in idx])
        except ModelCollapsed as exc:
            raise CliError(f"generation of graphs {idx.start}..{idx.stop - 1}: {exc}", EXIT_MODEL) from None
        rngs = [np.random.default_rng([seed, i, 1]) for i in idx]
        generated += generate_features_batch(
            topologies, feat_model, schedule, stats, rngs, k=k, centered_columns=centered
        )
        log.info("generated %d / %d", len(generated), count)
    path = out / GENERATED_FILE
    header = f"#generated count={count} seed={cfg.seed}"
    write_graphs(path, generated, header=header)
    inputs = [out / CHECKPOINTS["topology"], out / CHECKPOINTS["features"]]
    write_manifest(cfg, "generate", started, inputs, [path], out)


def cmd_evaluate(ref: Path, gen: Path, out: Path, csv: bool = True) -> dict:
    started = time.time()
    set_a = read_graphs(_require(Path(ref), "reference set"))
    set_b = read_graphs(_require(Path(gen), "generated set"))
    if not set_a or not set_b:
        raise CliError("both graph sets must be nonempty", EXIT_DATA)
    report = ensemble_report(set_a, set_b)
    out = Path(out)
    outputs = [out / "report.txt"]
    atomic_write(outputs[0], report.format())
    if csv:
        for name, which in (("metrics_ref.csv", "a"), ("metrics_gen.csv", "b")):
            atomic_write(out / name, report.csv(which))
            outputs.append(out / name)
    write_manifest(None, "evaluate", started, [Path(ref), Path(gen)], outputs, out)
    medians = {n: (report.summaries[(n, "a")]["median"], report.summaries[(n, "b")]["median"]) for n in METRIC_NAMES}
    for name, (a, b) in medians.items():
        print(f"{name:20s} ref median {a:12.6g}  gen median {b:12.6g}")
    return medians


# ----------------------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global options are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the global seed of the config")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="dkngen", description="Conduit network generation pipeline.", parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("dataset", parents=[common], help="sample the training subgraphs")
    s.add_argument("--config", required=True)

    s = sub.add_parser("train", parents=[common], help="train one of the two models")
    s.add_argument("--config", required=True)
    s.add_argument("--model", required=True, choices=("topology", "features"))
    s.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")

    s = sub.add_parser("generate", parents=[common], help="sample new networks")
    s.add_argument("--config", required=True)
    s.add_argument("--count", type=int, default=None)

    s = sub.add_parser("evaluate", parents=[common], help="compare two graph sets")
    s.add_argument("--ref", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-csv", dest="csv", action="store_false", help="skip the per-graph metric tables")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    try:
        if args.command == "evaluate":
            cmd_evaluate(Path(args.ref), Path(args.gen), Path(args.out), args.csv)
            return EXIT_OK
        cfg = load_config(args.config, args.seed)
        if args.command == "dataset":
            cmd_dataset(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.model, args.resume)
        else:
            if args.count is not None and args.count < 0:
                parser.error("--count must be non-negative")
            cmd_generate(cfg, args.count)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FormatError, GraphError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelCollapsed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
