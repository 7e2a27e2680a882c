"""Sifted-key generation, the plan library and the batch experiment runner."""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PLAN_DIR_ENV = "AIRQKD_PLAN_DIR"


def _key(seed) -> np.ndarray:
    if isinstance(seed, (tuple, list)):
        parts = [int(s) for s in seed]
    else:
        parts = [int(seed)]
    if len(parts) > 2 or any(p < 0 or p >= 1 << 64 for p in parts):
        raise ValueError("seed must be one or two non-negative 64-bit integers")
    parts += [0] * (2 - len(parts))
    return np.array(parts, dtype=np.uint64)


def make_rng(seed) -> np.random.Generator:
    """Philox4x64-10 keyed directly by ``(root_seed, index)``, counter at 0."""
    return np.random.Generator(np.random.Philox(key=_key(seed)))


def rand_pair(n: int, e_mu: float, seed):
    """Return ``(k_a, k_b)`` with ``k_b = k_a ^ e``, ``e`` i.i.d. Bernoulli(e_mu)."""
    if not 0.0 <= e_mu < 0.5:
        raise ValueError("e_mu must lie in [0, 0.5)")
    rng = make_rng(seed)
    k_a = rng.integers(0, 2, size=n, dtype=np.uint8)
    e = (rng.random(n) < e_mu).astype(np.uint8)
    return k_a, k_a ^ e


# -- plan library ----------------------------------------------------------------


def default_plan_dir() -> Path:
    return Path(os.environ.get(PLAN_DIR_ENV, "plans"))


def _fmt(x: float) -> str:
    return f"{x:g}"


class PlanLibrary:
    """Directory of plan files and cached error profiles."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else default_plan_dir()

    def plan_path(self, n, e_mu, r_max, eps_target, d=64, L=16, t=10_000, seed=0) -> Path:
        name = f"plan_n{n}_e{_fmt(e_mu)}_r{r_max}_eps{_fmt(eps_target)}_d{d}_L{L}_t{t}_s{seed}.json"
        return self.root / name

    def profile_path(self, n, e_mu, method, fidelity) -> Path:
        return self.root / f"profile_n{n}_e{_fmt(e_mu)}_{method}_{fidelity}.json"

    def profile(self, n, e_mu, method="degrading", fidelity=None, build=True):
        from .construction import construct_profile
        from .plan import profile_from_bytes, profile_to_bytes

        fid = fidelity if fidelity is not None else (64 if method == "degrading" else 10_000)
        path = self.profile_path(n, e_mu, method, fid)
        if path.exists():
            return profile_from_bytes(path.read_bytes())
        if not build:
            raise FileNotFoundError(path)
        prof = construct_profile(n, e_mu, method, fid)
        self.root.mkdir(parents=True, exist_ok=True)
        path.write_bytes(profile_to_bytes(prof))
        return prof

    def population(self, n, e_mu, fidelity=32, resolution=40, build=True, log=None):
        """Histogram profile for block lengths too long for a per-channel one."""
        from .construction import population_profile
        from .plan import population_from_bytes, population_to_bytes

        path = self.root / f"population_n{n}_e{_fmt(e_mu)}_{fidelity}_{resolution}.json"
        if path.exists():
            return population_from_bytes(path.read_bytes())
        if not build:
            raise FileNotFoundError(path)
        t0 = time.perf_counter()
        pop = population_profile(n, e_mu, fidelity, resolution)
        if log:
            log(f"population n={n} e_mu={e_mu:g}: {pop.p_e.size} buckets in {time.perf_counter() - t0:.0f} s")
        self.root.mkdir(parents=True, exist_ok=True)
        path.write_bytes(population_to_bytes(pop))
        return pop

    def plan(self, n, e_mu, r_max=4, eps_target=1e-8, d=64, L=16, t=10_000, seed=0, beta=None,
             build=True, mc=None, log=None):
        from .plan import FrozenPlan, build_plan

        path = self.plan_path(n, e_mu, r_max, eps_target, d, L, t, seed)
        if path.exists():
            return FrozenPlan.load(path)
        if not build:
            raise FileNotFoundError(f"no plan at {path} and building is disabled")
        prof = self.profile(n, e_mu)
        plan = build_plan(n, e_mu, r_max, eps_target, beta, t, d, L, seed, profile=prof, mc=mc, log=log)
        self.root.mkdir(parents=True, exist_ok=True)
        plan.save(path)
        return plan


# -- trials --------------------------------------------------------------------


@dataclass
class TrialRecord:
    seed: tuple
    rounds_used: int
    success: bool
    leaked_bits: int
    keys_match: bool
    wall_time: float


def run_trials(plan, trials: int, root_seed: int = 0, e_mu: float | None = None,
               transport: str = "queue") -> list:
    """``trials`` full sessions on fresh key pairs seeded ``(root_seed, j)``.

    ``e_mu`` is the channel the keys are drawn from (default: the plan's).
    """
    from .protocol import SUCCESS, run_session

    if trials < 1:
        raise ValueError("trials must be at least 1")
    ch = plan.e_mu if e_mu is None else e_mu
    out = []
    for j in range(trials):
        t0 = time.perf_counter()
        k_a, k_b = rand_pair(plan.n, ch, (root_seed, j))
        a, b, _ = run_session(k_a, k_b, plan, transport, session_id=j)
        if a.status != b.status or a.rounds_used != b.rounds_used or a.leaked_bits != b.leaked_bits:
            raise RuntimeError(f"trial {j}: the two sides disagree on the outcome")
        ok = a.status == SUCCESS
        match = ok and b.k_ir is not None and bool(np.array_equal(a.k_ir, b.k_ir))
        out.append(TrialRecord((root_seed, j), a.rounds_used, ok, a.leaked_bits, match,
                               time.perf_counter() - t0))
    return out


@dataclass(frozen=True)
class CellResult:
    n: int
    e_mu: float
    trials: int
    failures: int
    mismatches: int
    mean_rounds: float
    mean_leaked: float
    f_measured: float
    f_predicted: float
    rounds_predicted: float


def summarize(plan, records) -> CellResult:
    from .analytics import average_rounds, binary_entropy, efficiency

    leaked = np.array([r.leaked_bits for r in records], dtype=np.float64)
    rounds = np.array([r.rounds_used for r in records], dtype=np.float64)
    fails = sum(1 for r in records if not r.success)
    mism = sum(1 for r in records if r.success and not r.keys_match)
    # leaked_bits already counts the tag
    f_meas = float(leaked.mean()) / (plan.n * binary_entropy(plan.e_mu))
    model = plan.round_model()
    return CellResult(plan.n, plan.e_mu, len(records), fails, mism, float(rounds.mean()), float(leaked.mean()),
                      f_meas, efficiency(model), average_rounds(model))


# -- experiments ---------------------------------------------------------------


@dataclass
class ExperimentSpec:
    n: list = field(default_factory=lambda: [1 << 13])
    e_mu: list = field(default_factory=lambda: [0.02])
    r_max: int = 4
    eps_target: float = 1e-4
    trials: int = 1000
    root_seed: int = 0
    list_size: int = 16
    crc_len: int = 64
    t: int = 10_000
    beta: int | None = None
    fmt: str = "text"
    plan_dir: str | None = None
    build: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if any(not 0.0 < e < 0.5 for e in self.e_mu):
            raise ValueError("every e_mu must lie in (0, 0.5)")
        if self.fmt not in ("text", "csv"):
            raise ValueError("format must be text or csv")


def run_experiment(spec: ExperimentSpec, log=None) -> list:
    lib = PlanLibrary(spec.plan_dir)
    cells = []
    for n in spec.n:
        for e in spec.e_mu:
            plan = lib.plan(n, e, spec.r_max, spec.eps_target, spec.crc_len, spec.list_size, spec.t,
                            spec.root_seed, spec.beta, build=spec.build, log=log)
            # session keys come from a stream disjoint from the plan's trials
            recs = run_trials(plan, spec.trials, root_seed=spec.root_seed + 1)
            cells.append(summarize(plan, recs))
            if log:
                log(f"n={n} e_mu={e} done")
    return cells


CSV_FIELDS = ("n", "e_mu", "trials", "failures", "mismatches", "mean_rounds", "mean_leaked",
              "f_measured", "f_predicted", "rounds_predicted")


def cells_to_csv(cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for c in cells:
        w.writerow([getattr(c, k) if not isinstance(getattr(c, k), float) else repr(getattr(c, k))
                    for k in CSV_FIELDS])
    return buf.getvalue()


def _pivot(cells, attr, title, fmt="{:.3f}"):
    ns = sorted({c.n for c in cells})
    es = sorted({c.e_mu for c in cells})
    get = {(c.n, c.e_mu): getattr(c, attr) for c in cells}
    head = ["n \\ E_mu"] + [f"{e:g}" for e in es]
    rows = [[f"2^{n.bit_length() - 1}"] + [fmt.format(get[(n, e)]) if (n, e) in get else "-" for e in es]
            for n in ns]
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = [title, "  ".join(h.rjust(wd) for h, wd in zip(head, widths))]
    lines += ["  ".join(x.rjust(wd) for x, wd in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def cells_to_text(cells) -> str:
    parts = [
        _pivot(cells, "f_measured", "reconciliation efficiency (measured)"),
        _pivot(cells, "f_predicted", "reconciliation efficiency (predicted)"),
        _pivot(cells, "mean_rounds", "average rounds (measured)"),
        _pivot(cells, "rounds_predicted", "average rounds (predicted)"),
        _pivot(cells, "failures", "failed sessions", "{:d}"),
    ]
    return "\n\n".join(parts) + "\n"


def format_cells(cells, fmt: str = "text") -> str:
    return cells_to_csv(cells) if fmt == "csv" else cells_to_text(cells)
