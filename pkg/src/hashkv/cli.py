"""Command-line pipelines: generate | train | eval | bench.

Settings come from built-in defaults, then an optional INI config file
(``--config``), then command-line flags. Every output carries the hash of
the resolved settings and the seed: JSON/JSONL reports in a leading
provenance record, CSV files in a ``#`` comment line, and the fixed-layout
binary files in a ``<file>.meta.json`` sidecar.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AttentionInstance, budget_from_rate, evaluate
from .bitcodes import nxor_scores, pack_bits, top_k_indices
from .errors import HashKVError, NumericError
from .hashers import DownProjEstimator, MlpHasher, load_hasher, qr_rotation_init, save_hasher
from .ranking import RankingLossConfig
from .synthkv import DumpSource, cosine_stats, make_cone_spec, read_dump, sample_sequence, write_dump
from .trainer import TrainConfig, train_hasher

log = logging.getLogger("hashkv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "global": {"seed": 0},
    "cone": {"dim": 128, "angular_spread": 0.3, "axis_cos": 0.0, "norm_mean": 16.0,
             "norm_std": 4.0, "outlier_rate": 0.0, "outlier_scale": 4.0},
    "generate": {"n": 2048, "out": "qk.splq"},
    "loss": {"beta": 1.0, "alpha": 3.0, "maskout": 0.98, "max_top": None, "max_oth": 512,
             "query_subsample": 16},
    "train": {"data": None, "hasher": "mlp", "hidden": 128, "bits": 128, "gamma": 64.0,
              "iters": 8192, "max_lr": 1e-3, "min_lr": 0.0, "warmup": 81, "weight_decay": 0.1,
              "grad_clip": 1.0, "batch": 1, "seq_len": 2048, "objective": "rank", "init": None,
              "out": "hasher.splh", "report": "train.jsonl"},
    "eval": {"data": None, "methods": "oracle", "budget_rate": 0.02, "checkpoints": "",
             "out": "eval.jsonl", "csv": None},
    "bench": {"sizes": "4096,65536,524288", "bits": 128, "trials": 30, "warmup": 3,
              "budget_rate": 0.02, "out": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def add_argument(self, *args, **kwargs):
        # dests are "section.key"; show only the key in help text
        dest = kwargs.get("dest", "")
        if "." in dest and "metavar" not in kwargs and "choices" not in kwargs:
            kwargs["metavar"] = dest.split(".", 1)[1].upper()
        return super().add_argument(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


def _coerce(text: str, default):
    if text.strip().lower() in ("", "none"):
        return None
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None:
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
    return text


def load_config(path: str | None, overrides: dict[str, dict]) -> dict[str, dict]:
    """Merge defaults, an optional INI file and explicit overrides."""
    cfg = {section: dict(values) for section, values in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in cfg:
                raise UsageError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                if key not in cfg[section]:
                    raise UsageError(f"unknown key {key!r} in [{section}]")
                cfg[section][key] = _coerce(text, DEFAULTS[section][key])
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                cfg[section][key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(command: str, cfg: dict, sections) -> dict:
    used = {s: cfg[s] for s in ("global", *sections)}
    return {"provenance": {"command": command, "config_hash": config_hash(used),
                           "seed": cfg["global"]["seed"], "version": __version__}}


def _write_sidecar(path: Path, prov: dict, extra: dict | None = None) -> None:
    meta = dict(prov["provenance"])
    meta.update(extra or {})
    Path(f"{path}.meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def _cone_spec(cfg):
    c = cfg["cone"]
    return make_cone_spec(int(c["dim"]), float(c["angular_spread"]), float(c["axis_cos"]),
                          float(c["norm_mean"]), float(c["norm_std"]), int(cfg["global"]["seed"]),
                          float(c["outlier_rate"]), float(c["outlier_scale"]))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict) -> int:
    spec = _cone_spec(cfg)
    n = int(cfg["generate"]["n"])
    queries, keys = sample_sequence(spec, n, seed=[cfg["global"]["seed"], 0x5E9])
    out = Path(cfg["generate"]["out"])
    write_dump(out, queries, keys)
    stats = cosine_stats(queries, keys)
    _write_sidecar(out, provenance("generate", cfg, ("cone", "generate")), stats)
    print(f"wrote {out}: {n} queries x {n} keys, d={spec.dim}")
    print(f"intra-cone mean cosine   {stats['intra_cos_mean']:.6f}")
    print(f"cross-cone mean |cosine| {stats['cross_abs_cos_mean']:.6f}")
    return EXIT_OK


def _loss_config(cfg) -> RankingLossConfig:
    c = cfg["loss"]
    opt = lambda v: None if v is None else int(v)  # noqa: E731
    return RankingLossConfig(float(c["beta"]), float(c["alpha"]), float(c["maskout"]),
                             opt(c["max_top"]), opt(c["max_oth"]), opt(c["query_subsample"]))


def _initial_hasher(cfg, d: int):
    t, seed = cfg["train"], int(cfg["global"]["seed"])
    if t["init"]:
        return load_hasher(t["init"])
    kind = t["hasher"]
    if kind == "mlp":
        return MlpHasher.init(d, int(t["hidden"]), int(t["bits"]), seed=seed, gamma=float(t["gamma"]))
    if kind == "linear":
        if int(t["bits"]) != d:
            raise UsageError("rotation-initialised linear hashers need bits == dim")
        return qr_rotation_init(d, seed, gamma=float(t["gamma"]))
    if kind == "downproj":
        return DownProjEstimator.init(d=d, seed=seed)
    raise UsageError(f"unknown hasher kind {kind!r} (mlp | linear | downproj)")


def cmd_train(cfg: dict) -> int:
    t = cfg["train"]
    if not t["data"]:
        raise UsageError("train needs --data (an SPLQ dump)")
    dump = read_dump(t["data"])
    source = DumpSource(dump, int(t["seq_len"]))
    hasher = _initial_hasher(cfg, dump.d)
    train_cfg = TrainConfig(num_iters=int(t["iters"]), max_lr=float(t["max_lr"]),
                            min_lr=float(t["min_lr"]), warmup_iters=min(int(t["warmup"]), int(t["iters"])),
                            weight_decay=float(t["weight_decay"]), grad_clip=float(t["grad_clip"]),
                            batch=int(t["batch"]), seed=int(cfg["global"]["seed"]))
    objective = t["objective"]
    if objective not in ("rank", "recon"):
        raise UsageError(f"--loss must be rank or recon, got {objective!r}")

    trained, report = train_hasher(hasher, source, _loss_config(cfg), train_cfg, objective,
                                   log_every=max(1, train_cfg.num_iters // 16))
    prov = provenance("train", cfg, ("loss", "train"))
    out = Path(t["out"])
    save_hasher(out, trained)
    _write_sidecar(out, prov, {"kind": trained.name, "objective": objective,
                               "iters": train_cfg.num_iters})
    with open(t["report"], "w") as fh:
        fh.write(json.dumps(prov, sort_keys=True) + "\n")
        fh.write(report.to_jsonl())

    losses = report.losses()
    print(f"trained {trained.name} hasher ({objective} loss) for {train_cfg.num_iters} iterations "
          f"in {report.wall_clock:.1f}s -> {out}")
    if losses.size >= 2:
        # disjoint windows, so short runs still compare start against end
        n_head = min(32, losses.size // 2)
        n_tail = min(512, losses.size - n_head)
        head, tail = losses[:n_head].mean(), losses[-n_tail:].mean()
        trend = "falling" if tail < head else "not falling"
        print(f"loss: first-{n_head} mean {head:.5f}, trailing-{n_tail} mean {tail:.5f} ({trend})")
    return EXIT_OK


def _parse_checkpoints(text: str) -> dict[str, str]:
    out = {}
    for item in filter(None, (s.strip() for s in (text or "").split(","))):
        if "=" not in item:
            raise UsageError(f"checkpoint spec {item!r} is not NAME=PATH")
        name, path = item.split("=", 1)
        out[name.strip()] = path.strip()
    return out


def cmd_eval(cfg: dict) -> int:
    e, seed = cfg["eval"], int(cfg["global"]["seed"])
    if not e["data"]:
        raise UsageError("eval needs --data (an SPLQ dump)")
    dump = read_dump(e["data"])
    if dump.n_queries != dump.n_keys:
        raise UsageError("eval treats the dump as one causal sequence; it needs n_queries == n_keys")
    methods = [m.strip() for m in str(e["methods"]).split(",") if m.strip()]
    paths = _parse_checkpoints(e["checkpoints"])
    hashers = {}
    for m in methods:
        if m == "oracle":
            continue
        if m in paths:
            hashers[m] = load_hasher(paths[m])
        elif m == "lsh":
            hashers[m] = qr_rotation_init(dump.d, seed)
        else:
            raise UsageError(f"method {m!r} needs a checkpoint (--checkpoint {m}=PATH)")

    # dumps carry no value rows; seeded Gaussian values give the output-error metric
    values = np.random.default_rng([seed, 0x7A1]).standard_normal(dump.keys.shape).astype(np.float32)
    inst = AttentionInstance.causal(dump.queries, dump.keys, values)
    rate = float(e["budget_rate"])
    report = evaluate(inst, methods, rate, hashers)

    prov = provenance("eval", cfg, ("eval",))
    with open(e["out"], "w") as fh:
        fh.write(json.dumps(prov, sort_keys=True) + "\n")
        fh.write(json.dumps({"budget": report.budget, "budget_rate": rate, "n": inst.n}, sort_keys=True) + "\n")
        for rec in report.records:
            fh.write(json.dumps(rec.summary(), sort_keys=True) + "\n")
    if e["csv"]:
        with open(e["csv"], "w") as fh:
            p = prov["provenance"]
            fh.write(f"# config_hash={p['config_hash']} seed={p['seed']}\n")
            fh.write("query," + ",".join(rec.method for rec in report.records) + "\n")
            for i in range(inst.Q.shape[0]):
                fh.write(f"{i}," + ",".join(f"{rec.per_query_iou[i]:.6f}" for rec in report.records) + "\n")

    print(f"n={inst.n} budget rate={rate} k={report.budget}")
    print(f"{'method':<12}{'kind':<10}{'mean IoU':>10}{'p10':>8}{'p50':>8}{'p90':>8}{'rel err':>10}")
    for rec in report.records:
        print(f"{rec.method:<12}{rec.kind:<10}{rec.mean_iou:>10.4f}{rec.iou_p10:>8.3f}"
              f"{rec.iou_p50:>8.3f}{rec.iou_p90:>8.3f}{rec.mean_rel_error:>10.4f}")
    return EXIT_OK


def _time_trials(fn, trials: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    times = np.empty(trials)
    for i in range(trials):
        start = time.perf_counter()
        fn()
        times[i] = time.perf_counter() - start
    return times


def run_bench(sizes, bits: int = 128, trials: int = 30, warmup: int = 3,
              budget_rate: float = 0.02, seed: int = 0) -> list[dict]:
    """Median wall-clock of packing and of one scan + top-k, per index size."""
    if trials < 1 or warmup < 0:
        raise UsageError("need trials >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        bits_matrix = rng.random((n, bits)) < 0.5
        index = pack_bits(bits_matrix)
        query = pack_bits(rng.random((1, bits)) < 0.5).row(0)
        k = budget_from_rate(n, budget_rate)
        ops = {
            "pack_bits": lambda: pack_bits(bits_matrix),
            "nxor_scores+top_k": lambda: top_k_indices(nxor_scores(query, index), k),
        }
        for op, fn in ops.items():
            t = _time_trials(fn, trials, warmup) * 1e6
            rows.append({"op": op, "n": n, "bits": bits, "k": k if op != "pack_bits" else None,
                         "trials": trials, "median_us": float(np.median(t)),
                         "p10_us": float(np.percentile(t, 10)), "p90_us": float(np.percentile(t, 90)),
                         "comparable_to_gpu_kernel": False})
    return rows


def cmd_bench(cfg: dict) -> int:
    b = cfg["bench"]
    sizes = [int(s) for s in str(b["sizes"]).split(",") if s.strip()]
    try:
        rows = run_bench(sizes, int(b["bits"]), int(b["trials"]), int(b["warmup"]),
                         float(b["budget_rate"]), int(cfg["global"]["seed"]))
    except MemoryError:
        print("bench: not enough memory for the requested sizes; try smaller --sizes", file=sys.stderr)
        return EXIT_DATA
    print("CPU/numpy timings; not comparable to the GPU kernel figure reported for the method.")
    print(f"{'op':<20}{'n':>9}{'bits':>6}{'median us':>12}{'p10 us':>12}{'p90 us':>12}")
    for r in rows:
        print(f"{r['op']:<20}{r['n']:>9}{r['bits']:>6}{r['median_us']:>12.1f}"
              f"{r['p10_us']:>12.1f}{r['p90_us']:>12.1f}")
    if b["out"]:
        with open(b["out"], "w") as fh:
            fh.write(json.dumps(provenance("bench", cfg, ("bench",)), sort_keys=True) + "\n")
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hashkv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int, dest="global.seed")

    g = sub.add_parser("generate", help="write a synthetic cone dump (SPLQ)")
    common(g)
    g.add_argument("--out", dest="generate.out")
    g.add_argument("--n", type=int, dest="generate.n", help="queries and keys per dump")
    g.add_argument("--dim", type=int, dest="cone.dim")
    g.add_argument("--spread", type=float, dest="cone.angular_spread", help="cone half-angle (rad)")
    g.add_argument("--axis-cos", type=float, dest="cone.axis_cos")
    g.add_argument("--outlier-rate", type=float, dest="cone.outlier_rate")

    t = sub.add_parser("train", help="train a hasher on a dump")
    common(t)
    t.add_argument("--data", dest="train.data")
    t.add_argument("--hasher", choices=["mlp", "linear", "downproj"], dest="train.hasher")
    t.add_argument("--init", dest="train.init", help="start from this SPLH checkpoint")
    t.add_argument("--iters", type=int, dest="train.iters")
    t.add_argument("--loss", choices=["rank", "recon"], dest="train.objective")
    t.add_argument("--lr", type=float, dest="train.max_lr")
    t.add_argument("--seq-len", type=int, dest="train.seq_len")
    t.add_argument("--bits", type=int, dest="train.bits")
    t.add_argument("--hidden", type=int, dest="train.hidden")
    t.add_argument("--query-subsample", type=int, dest="loss.query_subsample")
    t.add_argument("--max-oth", type=int, dest="loss.max_oth")
    t.add_argument("--out", dest="train.out")
    t.add_argument("--report", dest="train.report")

    e = sub.add_parser("eval", help="retrieval IoU and sparse-attention error on a dump")
    common(e)
    e.add_argument("--data", dest="eval.data")
    e.add_argument("--methods", dest="eval.methods", help="comma list, e.g. oracle,lsh,mlp")
    e.add_argument("--checkpoint", action="append", dest="checkpoints", metavar="NAME=PATH")
    e.add_argument("--budget-rate", type=float, dest="eval.budget_rate")
    e.add_argument("--out", dest="eval.out")
    e.add_argument("--csv", dest="eval.csv", help="per-query IoU CSV")

    b = sub.add_parser("bench", help="time packing and scan + top-k")
    common(b)
    b.add_argument("--sizes", dest="bench.sizes", help="comma list of index sizes")
    b.add_argument("--bits", type=int, dest="bench.bits")
    b.add_argument("--trials", type=int, dest="bench.trials")
    b.add_argument("--warmup", type=int, dest="bench.warmup")
    b.add_argument("--out", dest="bench.out")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def _overrides(args: argparse.Namespace) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for dest, value in vars(args).items():
        if "." in dest:
            section, key = dest.split(".", 1)
            out.setdefault(section, {})[key] = value
    if getattr(args, "checkpoints", None):
        out.setdefault("eval", {})["checkpoints"] = ",".join(args.checkpoints)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"hashkv {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"hashkv {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HashKVError, OSError, ValueError) as exc:
        print(f"hashkv {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
