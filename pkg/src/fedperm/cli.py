"""Command-line experiment runner.

Subcommands::

    fedperm train   --config run.json      metrics.csv + manifest.json
    fedperm bench   --config bench.json    bench.csv (encrypt / aggregate / decrypt timings)
    fedperm amplify --grid grid.json       amplification table on stdout or --out
    fedperm keygen  --bits 2048 --seed 0 --out keys/

Exit codes: 0 success, 1 I/O failure, 2 bad configuration or parameters.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import random
import subprocess
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from fedperm import __version__, kernels
from fedperm.datamodel import (
    Dataset,
    DataError,
    FormatError,
    dirichlet_partition,
    load_bundled_digits,
    load_idx,
    train_test_split,
)
from fedperm.fedcore import RUNNERS, ConfigError, FederationConfig
from fedperm.fedcore.protocol import RoundError
from fedperm.fedcore.records import write_manifest, write_metrics
from fedperm.paillier import (
    ParameterError,
    decrypt_many,
    deserialize_secret_key,
    keygen,
    seeded_rng,
    serialize_public_key,
    serialize_secret_key,
)
from fedperm.permute import gen_spec
from fedperm.pir import build_query, encode_upload, unshuffle_aggregate
from fedperm.privacy import DomainError, amplify, compose_strong, superwindow_epsilon

EXIT_OK, EXIT_IO, EXIT_CONFIG = 0, 1, 2

AMPLIFY_COLUMNS = ("k1", "k2", "d", "eps_d", "eps_w", "eps_round", "eps_total_T", "delta_total", "status")
BENCH_COLUMNS = (
    "k1", "k2", "d", "n", "key_bits", "enc_count", "dec_count", "enc_ms", "agg_ms", "dec_ms", "upload_bytes",
)


class UsageError(Exception):
    """Bad configuration file or arguments (exit code 2)."""


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """A ``train`` job: federation settings plus data and output plumbing.

    The file is a flat JSON object. Keys are the fields below together with
    every :class:`FederationConfig` field; anything else is rejected.
    Relative paths are resolved against the config file's directory.
    """

    algorithm: str = "fedperm"
    dataset: str = "bundled"  # "bundled" or "idx"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    test_fraction: float = 0.2
    alpha: float = 1.0
    data_seed: int = 0
    output_dir: str = "."
    secret_key: str | None = None
    record_timings: bool = False
    federation: FederationConfig = field(default_factory=FederationConfig)

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: Path = Path(".")) -> RunConfig:
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        own = {f.name for f in fields(cls)} - {"federation"}
        fed = FederationConfig.field_names()
        unknown = sorted(set(raw) - own - fed)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        fed_kwargs = {k: _parse_number(v) for k, v in raw.items() if k in fed}
        try:
            federation = FederationConfig(**fed_kwargs)
        except (ConfigError, TypeError) as exc:
            raise UsageError(str(exc)) from exc
        kwargs = {k: v for k, v in raw.items() if k in own}
        for key in ("train_images", "train_labels", "test_images", "test_labels", "secret_key", "output_dir"):
            if kwargs.get(key) is not None:
                kwargs[key] = str(base_dir / kwargs[key])
        kwargs.setdefault("output_dir", str(base_dir))
        cfg = cls(federation=federation, **kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, path.parent)

    def validate(self) -> None:
        if self.algorithm not in RUNNERS:
            raise UsageError(f"algorithm must be one of {sorted(RUNNERS)}")
        if self.dataset not in ("bundled", "idx"):
            raise UsageError("dataset must be 'bundled' or 'idx'")
        if not 0 < self.test_fraction < 1:
            raise UsageError("test_fraction must lie in (0, 1)")
        if not self.alpha > 0:
            raise UsageError("alpha must be positive")
        paths = [self.secret_key]
        if self.dataset == "idx":
            if self.train_images is None or self.train_labels is None:
                raise UsageError("dataset 'idx' needs train_images and train_labels")
            if (self.test_images is None) != (self.test_labels is None):
                raise UsageError("give both test_images and test_labels or neither")
            paths += [self.train_images, self.train_labels, self.test_images, self.test_labels]
        for p in paths:
            if p is not None and not Path(p).is_file():
                raise UsageError(f"file not found: {p}")

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "federation"}
        out.update(self.federation.to_dict())
        return out


def _parse_number(v: Any) -> Any:
    # JSON has no infinity literal; accept the strings "inf" / "Infinity"
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return math.inf
    return v


def prepare_data(cfg: RunConfig) -> tuple[list, Dataset]:
    """Load, split and Dirichlet-partition the data for ``cfg``."""
    if cfg.dataset == "bundled":
        full = load_bundled_digits()
        train, test = train_test_split(full, cfg.test_fraction, np.random.default_rng(cfg.data_seed))
    else:
        train = load_idx(cfg.train_images, cfg.train_labels)
        if cfg.test_images is not None:
            test = load_idx(cfg.test_images, cfg.test_labels)
        else:
            train, test = train_test_split(train, cfg.test_fraction, np.random.default_rng(cfg.data_seed))
    shards = dirichlet_partition(
        train, cfg.federation.num_clients, cfg.alpha, np.random.default_rng(cfg.data_seed + 1)
    )
    return shards, test


def run_experiment(cfg: RunConfig, threads: int | None = None):
    """Run ``cfg`` end to end and return the :class:`RunResult`."""
    fc = cfg.federation if threads is None else replace(cfg.federation, threads=threads)
    shards, test = prepare_data(cfg)
    runner = RUNNERS[cfg.algorithm]
    if cfg.algorithm == "fedperm" and cfg.secret_key is not None:
        keys = deserialize_secret_key(Path(cfg.secret_key).read_bytes())
        return runner(fc, shards, test, keys=keys)
    return runner(fc, shards, test)


def version_string() -> str:
    base = __version__
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return base
    return f"{base}+g{rev}" if rev else base


# --------------------------------------------------------------------------
# subcommands


def _progress(args, msg: str) -> None:
    if args.verbose:
        print(msg, flush=True)


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _progress(args, f"train: {cfg.algorithm}, T={cfg.federation.rounds}, kernels={kernels.BACKEND}")
    start = time.perf_counter()
    result = run_experiment(cfg, args.threads)
    for r in result.records:
        _progress(args, f"  round {r.round:3d}  acc={r.test_acc:.4f}  eps={r.eps_spent:.4g}")
    write_metrics(out / "metrics.csv", result.records, timings=cfg.record_timings)
    manifest = {
        "version": version_string(),
        "seed": cfg.federation.seed,
        "config": cfg.to_dict(),
        "kernels": kernels.BACKEND,
        "result": {
            "algorithm": result.algorithm,
            "rounds_run": len(result.records),
            "final_accuracy": result.final_accuracy,
            "stopped_early": result.stopped_early,
            **{k: (repr(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in result.meta.items()},
        },
        "wall_seconds": round(time.perf_counter() - start, 3),
    }
    write_manifest(out / "manifest.json", manifest)
    _progress(args, f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


def _grid(raw: dict[str, Any], keys: Sequence[str]) -> list[dict[str, Any]]:
    """Cartesian product over ``keys``; scalars act as one-element lists.

    A ``rows`` list of explicit points is used instead when present.
    """
    if "rows" in raw:
        rows = raw["rows"]
        if not isinstance(rows, list) or not all(isinstance(r, dict) for r in rows):
            raise UsageError("'rows' must be a list of objects")
        return rows
    axes = []
    for k in keys:
        v = raw.get(k)
        if v is None:
            axes.append([None])
        else:
            axes.append(v if isinstance(v, list) else [v])
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]


def _load_json(path: str) -> dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return raw


def _check_keys(raw: dict[str, Any], allowed: set[str], where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise UsageError(f"{where}: unknown keys {', '.join(unknown)}")


BENCH_KEYS = {"k1", "k2", "d", "n", "key_bits", "seed", "rows", "output_dir"}


def bench_row(k1: int, k2: int, d: int, n: int, keypair, seed: int = 0, threads: int = 1) -> dict[str, Any]:
    """Time one client query build, one n-client aggregation and one decryption."""
    if d % (k1 * k2):
        raise UsageError(f"k1*k2 = {k1 * k2} must divide d = {d}")
    pk, sk = keypair.public, keypair.secret
    rng = np.random.default_rng(seed)
    crypto = random.Random(seed)
    queries, values = [], []
    enc_ms = 0.0
    for _ in range(n):
        spec = gen_spec(d, k1, k2, rng)
        t0 = time.perf_counter()
        queries.append(build_query(pk, spec, crypto))
        enc_ms += (time.perf_counter() - t0) * 1e3
        values.append([int(v) for v in rng.integers(0, 2**32, size=d)])
    t0 = time.perf_counter()
    agg = unshuffle_aggregate(pk, queries, values, threads=threads)
    agg_ms = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    opened = decrypt_many(sk, agg.values[:d])
    dec_ms = (time.perf_counter() - t0) * 1e3
    return {
        "k1": k1, "k2": k2, "d": d, "n": n, "key_bits": pk.key_bits,
        "enc_count": queries[0].ciphertext_count,
        "dec_count": len(opened),
        "enc_ms": round(enc_ms / n, 3), "agg_ms": round(agg_ms, 3), "dec_ms": round(dec_ms, 3),
        "upload_bytes": len(encode_upload(values[0], queries[0])),
    }


def cmd_bench(args) -> int:
    raw = _load_json(args.config)
    _check_keys(raw, BENCH_KEYS, args.config)
    key_bits = int(raw.get("key_bits", 2048))
    seed = int(raw.get("seed", 0))
    try:
        keypair = keygen(key_bits, seeded_rng(seed))
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out or Path(args.config).parent / raw.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for point in _grid(raw, ("k1", "k2", "d", "n")):
        _check_keys(point, {"k1", "k2", "d", "n"}, "bench row")
        if any(point.get(k) is None for k in ("k1", "k2", "d")):
            raise UsageError("every bench point needs k1, k2 and d")
        k1, k2, d = (int(point[k]) for k in ("k1", "k2", "d"))
        n = int(point.get("n") or 1)
        row = bench_row(k1, k2, d, n, keypair, seed, args.threads or 1)
        _progress(args, f"bench k1={k1} k2={k2} d={d} n={n}: agg {row['agg_ms']:.1f} ms")
        rows.append(row)
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.DictWriter(f, BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


AMPLIFY_KEYS = {"k1", "k2", "d", "eps_d", "eps_wd", "delta", "delta_prime", "rounds", "constant", "rows"}


def amplify_rows(raw: dict[str, Any]) -> list[dict[str, Any]]:
    """Evaluate the amplification table described by a grid document.

    Per-round ``delta`` is the amplification delta; ``rounds`` and
    ``delta_prime`` drive strong composition. Points outside the validity
    region keep their row with ``status`` set and empty budget columns.
    """
    _check_keys(raw, AMPLIFY_KEYS, "amplify grid")
    delta = float(raw.get("delta", 1e-6))
    rounds = int(raw.get("rounds", 1))
    delta_prime = float(raw.get("delta_prime", 1e-6))
    constant = float(raw.get("constant", 1.0))
    if "eps_d" in raw and "eps_wd" in raw:
        raise UsageError("give eps_d or eps_wd, not both")
    eps_key = "eps_wd" if "eps_wd" in raw else "eps_d"
    out = []
    for p in _grid(raw, ("k1", "k2", "d", eps_key)):
        k1, k2, d = int(p["k1"]), int(p.get("k2") or 1), int(p["d"])
        eps_d = float(p["eps_d"]) if "eps_d" in p and p["eps_d"] is not None else float(p["eps_wd"]) * d
        row: dict[str, Any] = {"k1": k1, "k2": k2, "d": d, "eps_d": eps_d, "eps_w": superwindow_epsilon(eps_d, k1, k2)}
        try:
            if k1 * k2 > d:
                raise DomainError(f"k1*k2 = {k1 * k2} exceeds d = {d}")
            eps_round = amplify(eps_d, delta, k1, k2, constant)
            total, delta_total = compose_strong(eps_round, delta, rounds, delta_prime)
            row.update(eps_round=eps_round, eps_total_T=total, delta_total=delta_total, status="ok")
        except DomainError as exc:
            row.update(eps_round="", eps_total_T="", delta_total="", status=f"invalid: {exc}")
        out.append(row)
    return out


def cmd_amplify(args) -> int:
    rows = amplify_rows(_load_json(args.grid))
    buf = io.StringIO()
    w = csv.DictWriter(buf, AMPLIFY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    bad = sum(r["status"] != "ok" for r in rows)
    if bad:
        print(f"{bad} of {len(rows)} grid points lie outside the validity region", file=sys.stderr)
    return EXIT_OK


def cmd_keygen(args) -> int:
    try:
        kp = keygen(args.bits, seeded_rng(args.seed))
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "public.key").write_bytes(serialize_public_key(kp.public))
    (out / "secret.key").write_bytes(serialize_secret_key(kp.secret))
    _progress(args, f"keygen: {args.bits}-bit key {kp.public.key_id} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _default_threads() -> int:
    env = os.environ.get("FEDPERM_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"FEDPERM_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("FEDPERM_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="print progress lines to stdout")
    common.add_argument(
        "--threads", type=int, default=None, help="worker threads for aggregation (default: $FEDPERM_THREADS or all cores)"
    )

    ap = argparse.ArgumentParser(prog="fedperm", description="FedPerm simulator and privacy calculator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run one federated training job")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", parents=[common], help="time the encrypted pipeline over a (k1, k2, d, n) grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("amplify", parents=[common], help="tabulate amplified and composed budgets")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_amplify)

    p = sub.add_parser("keygen", parents=[common], help="write a Paillier keypair")
    p.add_argument("--bits", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for public.key and secret.key")
    p.set_defaults(func=cmd_keygen)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is None:
            args.threads = _default_threads()
        elif args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"fedperm {args.command}: {exc}", file=sys.stderr)
        return code


_CONFIG_ERRORS = (UsageError, ConfigError, DomainError, ParameterError, FormatError, DataError)


def _exit_code(exc: BaseException) -> int | None:
    """Exit code for a failure, looking through round-level wrappers."""
    if isinstance(exc, RoundError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, _CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    return None


if __name__ == "__main__":
    sys.exit(main())
