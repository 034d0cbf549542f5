"""End-to-end verification of the channel and mitigation claims.

Eleven numbered checks, one per test, each printing a single PASS/FAIL
summary line so a full run reads as a checklist. These run the complete
pipeline at the default desk scale (10k samples, 1000 shuffle trials).
"""

import io
import math
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import replace

import numpy as np
import pytest

from microleak.attacks import AttackDriver, AttackKind, AttackSpec, PP_KINDS
from microleak.cli import main
from microleak.harness import ExperimentConfig, run_experiment
from microleak.leakage import (
    SampleSet,
    mutual_information,
    rank_correlation,
)
from microleak.machine import (
    Domain,
    FenceVariant,
    Machine,
    MicroArchConfig,
    cond_branch,
    data_base,
    encode_ops,
    fetch_at,
    read,
    worst_case_total,
    write,
    code_base,
)
from microleak.uarch import WRITE_BACK, WRITE_THROUGH

POLICIES = (WRITE_THROUGH, WRITE_BACK)


CHECKLIST: list[str] = []


def emit(number, name, ok, detail):
    line = f"C{number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    CHECKLIST.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def lab():
    """Memoized experiment runner shared by all checks."""
    cache = {}

    def cell(kind, mitigation, policy, pad=0, trace="auto", n=10000, seed=0):
        key = (kind, mitigation, policy, pad, trace, n, seed)
        if key not in cache:
            march = MicroArchConfig(write_policy=policy, mh_trace=trace)
            spec = AttackSpec(kind, mitigation, pad=pad)
            ec = ExperimentConfig(march=march, attack=spec, n_samples=n,
                                  seed=seed)
            cache[key] = run_experiment(ec, jobs=4)
        return cache[key]

    return cell


def test_c1_open_channels(lab):
    parts = []
    ok = True
    for kind in PP_KINDS:
        worst = math.inf
        for policy in POLICIES:
            samples, report = lab(kind, FenceVariant.NONE, policy)
            ratio = (math.inf if report.m0_mb == 0
                     else report.m_mb / report.m0_mb)
            worst = min(worst, ratio)
            ok = ok and report.verdict == "channel" and ratio >= 10.0
        parts.append(f"{kind.value} {worst:.2f}x")
    rho = min(
        rank_correlation(lab(AttackKind.L1D, FenceVariant.NONE, p)[0].secrets,
                         lab(AttackKind.L1D, FenceVariant.NONE, p)[0].times)
        for p in POLICIES)
    ok = ok and rho >= 0.9
    emit(1, "open channels need M >= 10*M0",
         ok, "min M/M0 " + ", ".join(parts) + f"; spearman(l1d) {rho:.3f}")


def test_c2_software_priming_narrows_but_keeps_the_channel(lab):
    _, base = lab(AttackKind.L1D, FenceVariant.NONE, WRITE_THROUGH)
    _, sw = lab(AttackKind.L1D, FenceVariant.SW_PRIME, WRITE_THROUGH)
    ok = sw.verdict == "channel" and sw.m_mb < base.m_mb
    emit(2, "sw priming leaves a strictly smaller channel", ok,
         f"M {sw.m_mb:.1f} < unmitigated {base.m_mb:.1f}, verdict {sw.verdict}")


def test_c3_basic_flush_keeps_a_residual_channel(lab):
    _, report = lab(AttackKind.L1D, FenceVariant.BASIC_FLUSH, WRITE_THROUGH)

    def digest_after(secret):
        drv = AttackDriver(
            AttackSpec(AttackKind.L1D, FenceVariant.BASIC_FLUSH, pad=0),
            MicroArchConfig())
        m = drv.new_machine()
        m.run_encoded(drv.prime)
        m.context_switch(FenceVariant.BASIC_FLUSH, Domain.TROJAN)
        m.run_encoded(drv.trojan_slice(secret))
        m.context_switch(FenceVariant.BASIC_FLUSH, Domain.SPY)
        return m.state_digest("non_architectural")

    distinct = digest_after(5) != digest_after(1200)
    ok = report.verdict == "channel" and distinct
    emit(3, "basic flush leaves history in hidden state", ok,
         f"M {report.m_mb:.1f} mb, verdict {report.verdict}, "
         f"post-flush digests differ: {distinct}")


def test_c4_full_flush_leaks_only_through_the_refill_trace(lab):
    _, traced = lab(AttackKind.L1D, FenceVariant.FULL_FLUSH, WRITE_THROUGH,
                    trace="on")
    _, silent = lab(AttackKind.L1D, FenceVariant.FULL_FLUSH, WRITE_THROUGH,
                    trace="off")
    ok = (traced.verdict == "channel"
          and silent.verdict == "consistent_with_no_channel")
    emit(4, "full flush channel tracks the refill trace toggle", ok,
         f"traced M {traced.m_mb:.1f} -> {traced.verdict}; "
         f"untraced M {silent.m_mb:.1f} -> {silent.verdict}")


def test_c5_microreset_closes_every_probe_channel(lab):
    bad = []
    for kind in PP_KINDS:
        for policy in POLICIES:
            samples, report = lab(kind, FenceVariant.MICRORESET, policy,
                                  pad=None)
            flat = np.unique(samples.times).size == 1
            if report.verdict != "consistent_with_no_channel" or not flat:
                bad.append(f"{kind.value}/{policy}")
    emit(5, "microreset closes all five probe channels", not bad,
         "all 10 cells constant-time and no-channel" if not bad
         else "leaking cells: " + ", ".join(bad))


def test_c6_microreset_lands_in_one_state_regardless_of_history():
    cfg = MicroArchConfig(write_policy=WRITE_BACK)
    target = Machine(cfg).state_digest("non_architectural")
    rng = np.random.Generator(np.random.Philox(2024))
    digests = set()
    sd, sc = data_base(Domain.SPY), code_base(Domain.SPY)
    for _ in range(1000):
        m = Machine(cfg)
        picks = rng.integers(0, 4, size=rng.integers(1, 200))
        offs = rng.integers(0, 1 << 16, size=picks.size)
        ops = []
        for p, off in zip(picks, offs):
            off = int(off)
            if p == 0:
                ops.append(read(sd + off))
            elif p == 1:
                ops.append(write(sd + off))
            elif p == 2:
                ops.append(fetch_at(sc + off))
            else:
                ops.append(cond_branch(sc + 4 * (off % 256), bool(off & 1)))
        m.run_encoded(encode_ops(ops))
        m.context_switch(FenceVariant.MICRORESET, Domain.TROJAN)
        digests.add(m.state_digest("non_architectural"))
    ok = digests == {target}
    emit(6, "microreset digest is history-independent", ok,
         f"{len(digests)} distinct digest(s) over 1000 random histories")


def test_c7_switch_latency_channel_and_its_padding(lab):
    wb = MicroArchConfig(write_policy=WRITE_BACK)

    sweep = []
    drv = AttackDriver(AttackSpec(AttackKind.CS_LATENCY, FenceVariant.NONE,
                                  pad=0), wb)
    for s in range(0, 256, 8):
        sweep.append(drv.run_iteration(drv.new_machine(), s))
    monotone = all(a <= b for a, b in zip(sweep, sweep[1:]))
    _, open_rep = lab(AttackKind.CS_LATENCY, FenceVariant.NONE, WRITE_BACK)
    a_ok = monotone and open_rep.verdict == "channel"

    _, raw = lab(AttackKind.CS_LATENCY, FenceVariant.MICRORESET, WRITE_BACK)
    b_ok = raw.verdict == "channel" and raw.m_mb >= 7000.0

    padded_samples, padded = lab(AttackKind.CS_LATENCY,
                                 FenceVariant.MICRORESET, WRITE_BACK, pad=None)
    c_ok = (np.unique(padded_samples.times).size == 1
            and padded.verdict == "consistent_with_no_channel")

    emit(7, "switch-latency channel opens, saturates, then pads shut",
         a_ok and b_ok and c_ok,
         f"open: monotone={monotone}, {open_rep.verdict}; "
         f"unpadded microreset M {raw.m_mb:.1f} >= 7000; "
         f"padded constant={c_ok}")


def test_c8_switch_cost_is_affine_in_dirty_lines():
    cfg = MicroArchConfig(write_policy=WRITE_BACK)
    base = data_base(Domain.TROJAN)
    fits = []
    for d in (0, 64, 512, 2048):
        m = Machine(cfg)
        m.current_domain = Domain.TROJAN
        ops = [write(base + (i % 256) * 16 + (i // 256) * 4096)
               for i in range(d)]
        m.run_encoded(encode_ops(ops))
        cost, _, _ = m.apply_fence(FenceVariant.MICRORESET)
        fits.append(cost == 32 + 8 * d)
    worst = worst_case_total(cfg, FenceVariant.MICRORESET)
    bracket = 20000 <= worst <= 24000
    emit(8, "microreset cost fits 32 + 8*dirty exactly", all(fits) and bracket,
         f"residual zero at d in (0,64,512,2048); worst case {worst} "
         f"in [20000, 24000]")


def test_c9_estimator_fixed_points():
    s = [0, 1, 2, 3] * 25
    ident = mutual_information(SampleSet(s, [10 * v for v in s]))
    const = mutual_information(SampleSet(s, [7] * 100))
    skew = mutual_information(SampleSet([0, 0, 1, 1], [5, 6, 5, 5]))
    want = 311.2781244591329
    ok = (abs(ident - 2000.0) <= 2000.0 * 1e-9
          and const == 0.0
          and abs(skew - want) <= want * 1e-9)
    emit(9, "mutual information fixed points", ok,
         f"identity {ident:.1f} mb, constant {const}, "
         f"asymmetric {skew:.10f} mb")


def test_c10_artifacts_are_byte_identical(tmp_path):
    conf = tmp_path / "exp.conf"
    conf.write_text('attack.kind = "dtlb"\n'
                    'attack.mitigation = "none"\n'
                    'attack.pad = 0\n'
                    'n_samples = 4096\n'
                    'm0.trials = 300\n'
                    'seed = 21\n')
    outs = []
    for name, jobs in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / name
        with redirect_stdout(io.StringIO()):
            assert main(["run", str(conf), "--out", str(out),
                         "--jobs", str(jobs)]) == 0
        outs.append(out)
    files = ("samples.csv", "matrix.csv", "report.json", "heatmap.ppm")
    same = all((outs[0] / f).read_bytes() == (o / f).read_bytes()
               for f in files for o in outs[1:])
    emit(10, "reruns and sharding are byte-identical", same,
         "4 artifacts x {repeat, jobs=4} all equal" if same
         else "artifact bytes diverged")


def test_c11_undersized_pad_aborts_with_the_iteration(tmp_path):
    base = ('attack.kind = "cs_latency"\n'
            'attack.mitigation = "microreset"\n'
            'l1d.policy = "write_back"\n'
            'n_samples = 50\n')
    conf = tmp_path / "cal.conf"
    conf.write_text(base)
    buf = io.StringIO()
    with redirect_stdout(buf):
        assert main(["pad-calibrate", str(conf)]) == 0
    calibrated = int(buf.getvalue().splitlines()[1].split("=")[1])

    tight = tmp_path / "tight.conf"
    tight.write_text(base + f"attack.pad = {calibrated - 1}\n")
    err = io.StringIO()
    with redirect_stdout(io.StringIO()), redirect_stderr(err):
        code = main(["run", str(tight)])
    message = err.getvalue().strip()
    ok = code == 3 and "iteration 0" in message and "missed by 1" in message
    emit(11, "pad one cycle under calibration exits 3", ok,
         f"exit {code}, stderr {message!r}")
