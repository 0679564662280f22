"""Randomized piecewise traces and their comparison against the per-sample scanners."""
import numpy as np

from ibrpen.criteria import CriteriaConfig, check_frequency, check_interfaces, check_voltage

import oracles

STEPS = (1 / 240, 1 / 120, 0.01, 0.005)


def _segments(rng, n, below, above, boundary_lengths):
    """Alternate runs under and over a threshold; most run lengths sit on its boundary.

    A quarter of the runs draw from the union of both level sets so adjacent
    runs can also merge or touch the threshold exactly.
    """
    out = []
    under = bool(rng.random() < 0.5)
    while sum(len(s) for s in out) < n:
        if rng.random() < 0.6:
            length = int(rng.choice(boundary_lengths))
        else:
            length = int(rng.integers(1, max(boundary_lengths) + 2))
        pool = below if under else above
        if rng.random() < 0.25:
            pool = list(below) + list(above)
        out.append(np.full(length, float(rng.choice(pool))))
        under = not under
    return np.concatenate(out)[:n]


def random_case(rng):
    dt = float(rng.choice(STEPS))
    cfg = CriteriaConfig(recovery_deadline=float(rng.choice([20.0, 1.0, 0.5])))
    n_f = round(cfg.freq_max_duration / dt)
    n70 = round(cfg.dip70_max / dt)
    n80 = round(cfg.dip80_max / dt)
    n = int(rng.integers(2, n80 + 60)) if rng.random() < 0.5 else int(rng.integers(n80 + 4, n80 + 60))
    buses = int(rng.integers(1, 4))
    time = np.arange(n) * dt

    f_below = [cfg.freq_floor - 0.3, cfg.freq_floor - 1e-9]
    f_above = [cfg.freq_floor, cfg.freq_floor + 0.2, 60.0]
    freq = np.column_stack([_segments(rng, n, f_below, f_above, [n_f - 1, n_f, n_f + 1])
                            for _ in range(buses)])

    v0 = rng.uniform(0.9, 1.1, buses)
    # levels at exactly 0.7 and 0.8 of initial count as not below
    rel_below = [0.5, 0.69, 0.75]
    rel_above = [cfg.dip70_fraction, cfg.dip80_fraction, 0.9, 1.0]
    lengths = [n70 - 1, n70, n70 + 1, n80 - 1, n80, n80 + 1]
    vm = np.column_stack([
        _segments(rng, n, [r * v0[j] for r in rel_below], [r * v0[j] for r in rel_above], lengths)
        for j in range(buses)
    ])
    k_clear = int(rng.integers(0, n)) if rng.random() < 0.3 else int(rng.integers(0, max(n // 8, 1)))
    if rng.random() < 0.3:
        # plant an 80% dip of boundary length right after clearing, framed by recovered samples
        length = n80 + int(rng.integers(-1, 2))
        a = k_clear + int(rng.integers(0, 3))
        j = int(rng.integers(0, buses))
        vm[a:a + length, j] = 0.75 * v0[j]
        vm[a + length:a + length + 1, j] = v0[j]
        if 0 < a <= n:
            vm[a - 1, j] = v0[j]
    limit = 500.0
    mva = np.cumsum(rng.normal(0.0, 30.0, n)) + rng.uniform(300.0, 520.0)
    return dict(dt=dt, cfg=cfg, time=time, freq=freq, vm=vm, v0=v0, k_clear=k_clear, mva=mva,
                limit=limit, n_f=n_f, n70=n70, n80=n80)


def compare(tc):
    """Return a list of mismatch descriptions (empty when checkers and scanners agree)."""
    dt, cfg, time = tc["dt"], tc["cfg"], tc["time"]
    n = time.size
    buses = [str(j) for j in range(tc["freq"].shape[1])]
    bad = []

    got = {(int(v.element), round(v.onset_s / dt), round(v.worst / dt))
           for v in check_frequency(time, tc["freq"], buses, cfg)}
    want = set(oracles.scan_frequency(tc["freq"], cfg.freq_floor, tc["n_f"]))
    if got != want:
        bad.append(("freq", got ^ want))

    k = tc["k_clear"]
    got_v = set()
    for v in check_voltage(time, tc["vm"], tc["v0"], buses, float(time[k]), cfg):
        length = None if v.category == "v_recovery" else round(v.worst / dt)
        got_v.add((v.category, int(v.element), round(v.onset_s / dt), length))
    deadline_idx = min(k + round(cfg.recovery_deadline / dt), n - 1)
    want_v = set(oracles.scan_voltage(tc["vm"], tc["v0"], k, deadline_idx, cfg.recovery_fraction,
                                      cfg.dip70_fraction, tc["n70"], cfg.dip80_fraction, tc["n80"]))
    if got_v != want_v:
        bad.append(("voltage", got_v ^ want_v))

    iv = check_interfaces(time, tc["mva"][:, None], ["T"], {"T": tc["limit"]})
    ref = oracles.scan_overflow(tc["mva"], tc["limit"])
    if ref is None:
        if iv:
            bad.append(("tie", iv))
    elif len(iv) != 1 or iv[0].worst != ref[0] or round(iv[0].onset_s / dt) != ref[1]:
        bad.append(("tie", iv, ref))
    return bad


def fuzz(n_traces, seed):
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(n_traces):
        tc = random_case(rng)
        bad = compare(tc)
        if bad:
            failures.append((tc, bad))
    return failures
