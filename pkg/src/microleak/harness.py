"""Experiment orchestration: config files, seeded sharded runs, artifacts.

Iterations are grouped into fixed 1024-sample shards. Each shard gets its
own machine and its own counter-based RNG stream keyed by (seed, shard), so
the samples are byte-identical no matter how many worker threads execute
the shards.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import (
    AttackDriver,
    AttackKind,
    AttackSpec,
    PP_KINDS,
    SW_PRIMABLE,
    get_driver,
)
from .leakage import (
    ChannelMatrix,
    LeakageReport,
    SampleSet,
    analyze,
    channel_matrix,
)
from .machine import (
    CacheGeometry,
    FenceVariant,
    KernelCosts,
    Latencies,
    MASK_ALL,
    MicroArchConfig,
    PadExceededError,
    measure_worst_case_pad,
)
from .uarch import WRITE_BACK, WRITE_THROUGH

SHARD_LEN = 1024


class ConfigError(Exception):
    pass


class ParseError(ConfigError):
    def __init__(self, line_no: int, message: str) -> None:
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class SchemaError(ConfigError):
    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"key {key!r}: {message}")


@dataclass
class ExperimentConfig:
    march: MicroArchConfig = field(default_factory=MicroArchConfig)
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(AttackKind.L1D))
    n_samples: int = 10000
    seed: int = 0
    trials: int = 1000
    bin_width: int = 1
    output_dir: str | None = None


def _parse_value(raw: str, line_no: int):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    try:
        return int(raw, 0)
    except ValueError:
        raise ParseError(line_no, f"expected integer or quoted string, got {raw!r}")


def _parse_pairs(text: str) -> dict[str, object]:
    pairs: dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ParseError(line_no, "expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ParseError(line_no, "empty key")
        if key in pairs:
            raise ParseError(line_no, f"duplicate key {key!r}")
        pairs[key] = _parse_value(raw, line_no)
    return pairs


_INT_KEYS = {
    "l1d.sets", "l1d.ways", "l1d.line_bytes",
    "l1i.sets", "l1i.ways", "l1i.line_bytes",
    "tlb.entries", "bht.entries", "btb.entries", "wbuf.capacity",
    "page_shift", "pipe_depth",
    "latencies.t_hit", "latencies.t_miss", "latencies.t_wb_per_line",
    "latencies.t_mispredict", "latencies.t_tlb_miss",
    "latencies.t_pipeline_flush", "latencies.t_fence_drain",
    "latencies.t_microreset_assert", "latencies.t_replay",
    "kernel.clint_reconfig", "kernel.schedule", "kernel.thread_switch",
    "attack.sw_rounds", "attack.slice_budget", "attack.select_mask",
    "n_samples", "seed", "m0.trials", "analysis.bin_width",
}

_STR_KEYS = {"l1d.policy", "mh_trace", "attack.kind", "attack.mitigation",
             "output_dir"}


def _want_int(key: str, value: object) -> int:
    if not isinstance(value, int):
        raise SchemaError(key, f"expected an integer, got {value!r}")
    return value


def _want_str(key: str, value: object) -> str:
    if not isinstance(value, str):
        raise SchemaError(key, f"expected a quoted string, got {value!r}")
    return value


def load_config(text: str) -> ExperimentConfig:
    pairs = _parse_pairs(text)
    for key in pairs:
        if key not in _INT_KEYS and key not in _STR_KEYS and key != "attack.pad":
            raise SchemaError(key, "unknown key")

    def take_int(key: str, default: int) -> int:
        if key in pairs:
            return _want_int(key, pairs.pop(key))
        return default

    def take_str(key: str, default: str) -> str:
        if key in pairs:
            return _want_str(key, pairs.pop(key))
        return default

    base = MicroArchConfig()
    policy = take_str("l1d.policy", base.write_policy)
    if policy not in (WRITE_THROUGH, WRITE_BACK):
        raise SchemaError("l1d.policy",
                          f"must be {WRITE_THROUGH!r} or {WRITE_BACK!r}")
    mh_trace = take_str("mh_trace", base.mh_trace)
    if mh_trace not in ("auto", "on", "off"):
        raise SchemaError("mh_trace", "must be \"auto\", \"on\" or \"off\"")
    try:
        march = MicroArchConfig(
            l1d=CacheGeometry(take_int("l1d.sets", base.l1d.sets),
                              take_int("l1d.ways", base.l1d.ways),
                              take_int("l1d.line_bytes", base.l1d.line_bytes)),
            l1i=CacheGeometry(take_int("l1i.sets", base.l1i.sets),
                              take_int("l1i.ways", base.l1i.ways),
                              take_int("l1i.line_bytes", base.l1i.line_bytes)),
            write_policy=policy,
            latencies=Latencies(
                t_hit=take_int("latencies.t_hit", 1),
                t_miss=take_int("latencies.t_miss", 20),
                t_wb_per_line=take_int("latencies.t_wb_per_line", 8),
                t_mispredict=take_int("latencies.t_mispredict", 5),
                t_tlb_miss=take_int("latencies.t_tlb_miss", 40),
                t_pipeline_flush=take_int("latencies.t_pipeline_flush", 6),
                t_fence_drain=take_int("latencies.t_fence_drain", 16),
                t_microreset_assert=take_int("latencies.t_microreset_assert", 16),
                t_replay=take_int("latencies.t_replay", 3000)),
            kernel=KernelCosts(
                clint_reconfig=take_int("kernel.clint_reconfig", 1800),
                schedule=take_int("kernel.schedule", 800),
                thread_switch=take_int("kernel.thread_switch", 320)),
            tlb_entries=take_int("tlb.entries", base.tlb_entries),
            bht_entries=take_int("bht.entries", base.bht_entries),
            btb_entries=take_int("btb.entries", base.btb_entries),
            wbuf_capacity=take_int("wbuf.capacity", base.wbuf_capacity),
            page_shift=take_int("page_shift", base.page_shift),
            pipe_depth=take_int("pipe_depth", base.pipe_depth),
            mh_trace=mh_trace,
        )
    except ValueError as exc:
        raise SchemaError("march", str(exc))

    kind_raw = take_str("attack.kind", AttackKind.L1D.value)
    try:
        kind = AttackKind(kind_raw)
    except ValueError:
        raise SchemaError("attack.kind",
                          f"unknown attack {kind_raw!r}")
    mit_raw = take_str("attack.mitigation", FenceVariant.MICRORESET.value)
    try:
        mitigation = FenceVariant(mit_raw)
    except ValueError:
        raise SchemaError("attack.mitigation",
                          f"unknown mitigation {mit_raw!r}")

    pad: int | None
    if "attack.pad" in pairs:
        raw_pad = pairs.pop("attack.pad")
        if raw_pad == "auto":
            pad = None
        elif isinstance(raw_pad, int):
            if raw_pad < 0:
                raise SchemaError("attack.pad", "must be >= 0 or \"auto\"")
            pad = raw_pad
        else:
            raise SchemaError("attack.pad",
                              f"must be an integer or \"auto\", got {raw_pad!r}")
    else:
        pad = None

    sw_rounds = take_int("attack.sw_rounds", 1)
    if sw_rounds < 1:
        raise SchemaError("attack.sw_rounds", "must be >= 1")
    slice_budget = take_int("attack.slice_budget", 60000)
    select_mask = take_int("attack.select_mask", MASK_ALL)
    if select_mask & ~MASK_ALL:
        raise SchemaError("attack.select_mask", "has reserved bits set")
    if mitigation == FenceVariant.SW_PRIME and kind not in SW_PRIMABLE:
        raise SchemaError("attack.mitigation",
                          f"sw_prime cannot reach {kind.value}")

    attack = AttackSpec(kind=kind, mitigation=mitigation, pad=pad,
                        sw_rounds=sw_rounds, slice_budget=slice_budget,
                        select_mask=select_mask)

    n_samples = take_int("n_samples", 10000)
    if n_samples < 1:
        raise SchemaError("n_samples", "must be >= 1")
    trials = take_int("m0.trials", 1000)
    if trials < 1:
        raise SchemaError("m0.trials", "must be >= 1")
    bin_width = take_int("analysis.bin_width", 1)
    if bin_width < 1:
        raise SchemaError("analysis.bin_width", "must be >= 1")
    out = take_str("output_dir", "")

    return ExperimentConfig(march=march, attack=attack, n_samples=n_samples,
                            seed=take_int("seed", 0), trials=trials,
                            bin_width=bin_width,
                            output_dir=out if out else None)


def load_config_file(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return load_config(fh.read())


def config_fingerprint(ec: ExperimentConfig) -> str:
    """Stable 16-hex-digit fingerprint over every effective setting."""
    doc = {
        "march": repr(ec.march),
        "attack": repr(ec.attack),
        "n_samples": ec.n_samples,
        "seed": ec.seed,
        "trials": ec.trials,
        "bin_width": ec.bin_width,
    }
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _run_shard(driver: AttackDriver, secrets: np.ndarray,
               first_iteration: int) -> np.ndarray:
    machine = driver.new_machine()
    times = np.empty(secrets.size, dtype=np.int64)
    for j, s in enumerate(secrets):
        try:
            times[j] = driver.run_iteration(machine, int(s))
        except PadExceededError as exc:
            raise PadExceededError(exc.overshoot, first_iteration + j)
    return times


def _shard_secrets(seed: int, shard: int, count: int, space: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence((seed, shard))))
    return rng.integers(0, space, size=count, dtype=np.int64)


def run_experiment(ec: ExperimentConfig,
                   jobs: int = 1) -> tuple[SampleSet, LeakageReport]:
    driver = get_driver(ec.attack, ec.march)
    if driver.pad > 0:
        # Preflight: a pad below the calibrated floor is a misconfiguration
        # and must surface before any samples are collected, as iteration 0.
        floor = measure_worst_case_pad(ec.march, ec.attack.mitigation,
                                       ec.attack.select_mask, driver.sw_ops)
        if driver.pad < floor:
            raise PadExceededError(floor - driver.pad, 0)

    n = ec.n_samples
    n_shards = -(-n // SHARD_LEN)
    shard_secrets = [
        _shard_secrets(ec.seed, i, min(SHARD_LEN, n - i * SHARD_LEN),
                       driver.space)
        for i in range(n_shards)
    ]
    if jobs > 1 and n_shards > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_shard, driver, shard_secrets[i],
                                   i * SHARD_LEN)
                       for i in range(n_shards)]
            shard_times = [f.result() for f in futures]
    else:
        shard_times = [_run_shard(driver, shard_secrets[i], i * SHARD_LEN)
                       for i in range(n_shards)]

    samples = SampleSet(
        secrets=np.concatenate(shard_secrets),
        times=np.concatenate(shard_times),
        meta={
            "seed": ec.seed,
            "config_fingerprint": config_fingerprint(ec),
            "attack": ec.attack.kind.value,
            "mitigation": ec.attack.mitigation.value,
            "n": n,
        },
    )
    report = analyze(samples, trials=ec.trials, seed=ec.seed,
                     bin_width=ec.bin_width)
    if ec.output_dir:
        write_artifacts(ec, samples, report)
    return samples, report


def sweep(ec: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """One (M, M0, verdict) cell per attack x mitigation x write policy.

    Software priming has no architected reach into the TLBs or predictors,
    so those cells are reported as n/a rather than run.
    """
    rows: list[dict] = []
    for policy in (WRITE_THROUGH, WRITE_BACK):
        march = replace(ec.march, write_policy=policy)
        for kind in PP_KINDS:
            for mitigation in FenceVariant:
                row = {"attack": kind.value, "mitigation": mitigation.value,
                       "policy": policy}
                if mitigation == FenceVariant.SW_PRIME and kind not in SW_PRIMABLE:
                    row.update(m_mb=None, m0_mb=None, verdict="n/a")
                    rows.append(row)
                    continue
                cell = replace(ec, march=march, output_dir=None,
                               attack=replace(ec.attack, kind=kind,
                                              mitigation=mitigation))
                _, report = run_experiment(cell, jobs=jobs)
                row.update(m_mb=report.m_mb, m0_mb=report.m0_mb,
                           verdict=report.verdict)
                rows.append(row)
    return rows


# ----------------------------------------------------------------------
# artifacts

def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_samples_csv(samples: SampleSet, path: str) -> None:
    lines = ["iteration,secret,time_cycles"]
    for i in range(samples.n):
        lines.append(f"{i},{samples.secrets[i]},{samples.times[i]}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_samples_csv(path: str) -> SampleSet:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "iteration,secret,time_cycles":
            raise ConfigError(f"{path}: unrecognized samples header {header!r}")
        secrets = []
        times = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{line_no}: expected 3 columns")
            secrets.append(int(parts[1]))
            times.append(int(parts[2]))
    if not secrets:
        raise ConfigError(f"{path}: no sample rows")
    return SampleSet(secrets=np.array(secrets, dtype=np.int64),
                     times=np.array(times, dtype=np.int64))


def write_matrix_csv(matrix: ChannelMatrix, path: str) -> None:
    header = "bin," + ",".join(str(int(s)) for s in matrix.secret_values)
    lines = [header]
    for j, t in enumerate(matrix.time_bins):
        probs = ",".join(repr(float(matrix.p[i, j]))
                         for i in range(matrix.secret_values.size))
        lines.append(f"{int(t)},{probs}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_matrix_csv(path: str) -> ChannelMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if not cols or cols[0] != "bin":
            raise ConfigError(f"{path}: unrecognized matrix header")
        secrets = np.array([int(c) for c in cols[1:]], dtype=np.int64)
        bins = []
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            bins.append(int(parts[0]))
            rows.append([float(x) for x in parts[1:]])
    if not rows:
        raise ConfigError(f"{path}: no matrix rows")
    p = np.array(rows, dtype=np.float64).T  # stored bins-by-secrets
    return ChannelMatrix(secret_values=secrets,
                         time_bins=np.array(bins, dtype=np.int64), p=p)


def report_json(report: LeakageReport, seed: int, fingerprint: str) -> str:
    doc = {
        "m_mb": report.m_mb,
        "m0_mb": report.m0_mb,
        "n": report.n,
        "trials": report.trials,
        "verdict": report.verdict,
        "seed": seed,
        "config_fingerprint": fingerprint,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_sweep_csv(rows: list[dict], path: str) -> None:
    lines = ["attack,mitigation,policy,m_mb,m0_mb,verdict"]
    for row in rows:
        m = "" if row["m_mb"] is None else repr(row["m_mb"])
        m0 = "" if row["m0_mb"] is None else repr(row["m0_mb"])
        lines.append(f"{row['attack']},{row['mitigation']},{row['policy']},"
                     f"{m},{m0},{row['verdict']}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def write_artifacts(ec: ExperimentConfig, samples: SampleSet,
                    report: LeakageReport) -> dict[str, str]:
    from .render import render_heatmap

    out = ec.output_dir or "microleak_out"
    paths = {
        "samples": os.path.join(out, "samples.csv"),
        "matrix": os.path.join(out, "matrix.csv"),
        "report": os.path.join(out, "report.json"),
        "heatmap": os.path.join(out, "heatmap.ppm"),
    }
    matrix = channel_matrix(samples, ec.bin_width)
    write_samples_csv(samples, paths["samples"])
    write_matrix_csv(matrix, paths["matrix"])
    _atomic_write(paths["report"],
                  report_json(report, ec.seed, config_fingerprint(ec)).encode())
    render_heatmap(matrix, paths["heatmap"])
    return paths
