"""Command line: plan management, batch runs, two-process sessions, reports."""

from __future__ import annotations

import configparser
import json
import socket
import sys
from pathlib import Path

import click

from . import analytics
from .harness import ExperimentSpec, PlanLibrary, format_cells, rand_pair, run_experiment
from .plan import FrozenPlan

# config keys that apply to each subcommand (option names, underscores)
_CONFIG_SCOPES = {
    "run": {"n", "e_mu", "r_max", "eps_target", "trials", "seed", "list_size", "crc_len", "t", "beta",
            "format", "plan_dir", "build"},
    "build": {"n", "e_mu", "r_max", "eps_target", "seed", "list_size", "crc_len", "t", "beta", "plan_dir",
              "workers"},
    "report": {"format"},
    "serve": {"host", "port", "e_mu", "seed"},
    "connect": {"host", "port", "e_mu", "seed"},
}


def load_config(path) -> dict:
    """``key = value`` lines (``#`` comments); an optional ``[section]`` header is ignored."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[airqkd]\n" + text
    cp = configparser.ConfigParser()
    cp.read_string(text)
    out = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            out[k.replace("-", "_")] = v
    return out


# config keys whose click parameter has a different name
_PARAM_NAMES = {"format": "fmt"}


def _default_map(cfg: dict) -> dict:
    scoped = {name: {_PARAM_NAMES.get(k, k): v for k, v in cfg.items() if k in keys}
              for name, keys in _CONFIG_SCOPES.items()}
    return {
        "run": scoped["run"],
        "plan": {"build": scoped["build"]},
        "report": scoped["report"],
        "serve": scoped["serve"],
        "connect": scoped["connect"],
    }


def _int_list(s) -> list:
    out = []
    for part in str(s).split(","):
        part = part.strip()
        if part.startswith("2^"):
            out.append(1 << int(part[2:]))
        elif part:
            out.append(int(part))
    return out


def _float_list(s) -> list:
    return [float(p) for p in str(s).split(",") if p.strip()]


def _n_value(s) -> int:
    vals = _int_list(s)
    if len(vals) != 1:
        raise click.BadParameter("expected a single block length")
    return vals[0]


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="key = value defaults file")
@click.pass_context
def main(ctx, config):
    """Appending polar-code information reconciliation."""
    if config:
        ctx.default_map = _default_map(load_config(config))


@main.group()
def plan():
    """Build and inspect frozen-vector plans."""


@plan.command("build")
@click.option("--n", "n", default="8192", help="block length (e.g. 8192 or 2^13)")
@click.option("--e-mu", "e_mu", type=float, default=0.02)
@click.option("--r-max", "r_max", type=int, default=4)
@click.option("--eps-target", "eps_target", type=float, default=1e-8)
@click.option("--t", "t", type=int, default=10_000, help="trials per measured candidate")
@click.option("--beta", type=int, default=None, help="sweep step (default ceil(n/400))")
@click.option("--crc-len", "crc_len", type=int, default=64)
@click.option("--list-size", "list_size", type=int, default=16)
@click.option("--seed", type=int, default=0)
@click.option("--workers", type=int, default=1)
@click.option("--plan-dir", "plan_dir", default=None, help="plan library (default $AIRQKD_PLAN_DIR or ./plans)")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="also write the plan here")
def plan_build(n, e_mu, r_max, eps_target, t, beta, crc_len, list_size, seed, workers, plan_dir, out):
    from .plan import MeasureConfig

    n = _n_value(n)
    lib = PlanLibrary(plan_dir)
    mc = MeasureConfig(t=t, root_seed=seed, list_size=list_size, crc_len=crc_len, workers=workers)
    p = lib.plan(n, e_mu, r_max, eps_target, crc_len, list_size, t, seed, beta, mc=mc,
                 log=lambda s: click.echo(s, err=True))
    path = lib.plan_path(n, e_mu, r_max, eps_target, crc_len, list_size, t, seed)
    if out:
        p.save(out)
        path = out
    click.echo(f"{path} {p.hash()}")


@plan.command("show")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def plan_show(path):
    p = FrozenPlan.load(path)
    click.echo(f"n            {p.n}")
    click.echo(f"e_mu         {p.e_mu:g}")
    click.echo(f"r_max        {p.r_max}")
    click.echo(f"eps_target   {p.eps_target:g}")
    click.echo(f"crc_len      {p.crc_len}")
    click.echo(f"list_size    {p.list_size}")
    click.echo(f"profile      {p.method}/{p.fidelity} {p.profile_checksum[:16]}")
    click.echo(f"sweep        beta={p.beta} t={p.t} seed={p.root_seed}")
    for i, (q, e, s) in enumerate(zip(p.cuts, p.eps, p.eps_source), 1):
        click.echo(f"round {i}      q={q:<8d} |V|={p.vector(i).size:<8d} eps={e:.4g} ({s})")
    click.echo(_report_text(analytics.report(p.round_model())))
    click.echo(f"hash         {p.hash()}")


@plan.command("hash")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def plan_hash(path):
    click.echo(FrozenPlan.load(path).hash())


def _report_text(r) -> str:
    lines = [
        f"efficiency   {r.efficiency:.4f}",
        f"avg_rounds   {r.avg_rounds:.4f}",
        f"eps_overall  {r.eps_overall:.4g} (loose bound {r.eps_loose:.4g})",
        "p_stop       " + " ".join(f"{x:.4g}" for x in r.p_stop),
        "leakage      " + " ".join(f"{x:.1f}" for x in r.leakage),
    ]
    return "\n".join(lines)


@main.command()
@click.option("--n", "n", default="8192", help="comma list of block lengths")
@click.option("--e-mu", "e_mu", default="0.02", help="comma list of QBERs")
@click.option("--r-max", "r_max", type=int, default=4)
@click.option("--eps-target", "eps_target", type=float, default=1e-4)
@click.option("--trials", type=int, default=1000)
@click.option("--seed", type=int, default=0)
@click.option("--list-size", "list_size", type=int, default=16)
@click.option("--crc-len", "crc_len", type=int, default=64)
@click.option("--t", "t", type=int, default=10_000)
@click.option("--beta", type=int, default=None)
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text")
@click.option("--plan-dir", "plan_dir", default=None)
@click.option("--build/--no-build", default=True, help="build missing plans")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def run(n, e_mu, r_max, eps_target, trials, seed, list_size, crc_len, t, beta, fmt, plan_dir, build, out):
    """Run reconciliation sessions over a (n, e_mu) grid and tabulate them."""
    try:
        spec = ExperimentSpec(_int_list(n), _float_list(e_mu), r_max, eps_target, trials, seed, list_size,
                              crc_len, t, beta, fmt, plan_dir, build)
        cells = run_experiment(spec, log=lambda s: click.echo(s, err=True))
    except (ValueError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc)) from None
    text = format_cells(cells, fmt)
    if out:
        Path(out).write_text(text)
    click.echo(text, nl=False)


@main.command()
@click.argument("plans", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text")
def report(plans, fmt):
    """Closed-form performance of one or more plans."""
    if not plans:
        raise click.UsageError("give at least one plan file")
    rows = []
    for path in plans:
        p = FrozenPlan.load(path)
        r = analytics.report(p.round_model())
        rows.append((path, p, r))
    if fmt == "csv":
        click.echo("plan,n,e_mu,r_max,efficiency,avg_rounds,eps_overall,eps_loose")
        for path, p, r in rows:
            click.echo(f"{path},{p.n},{p.e_mu!r},{p.r_max},{r.efficiency!r},{r.avg_rounds!r},"
                       f"{r.eps_overall!r},{r.eps_loose!r}")
        return
    for path, p, r in rows:
        click.echo(f"{path}: n={p.n} e_mu={p.e_mu:g} r_max={p.r_max}")
        click.echo(_report_text(r))


# -- two-process mode ------------------------------------------------------------


def _load_key(key_file, seed, trial, e_mu, n, side):
    if key_file:
        from .polar import unpack_bits

        return unpack_bits(Path(key_file).read_bytes(), n)
    k_a, k_b = rand_pair(n, e_mu, (seed, trial))
    return k_a if side == "alice" else k_b


def _emit(outcome, transcript_path, transcript):
    if transcript_path:
        Path(transcript_path).write_bytes(b"".join(transcript))
    click.echo(json.dumps({
        "status": outcome.status,
        "rounds_used": outcome.rounds_used,
        "leaked_bits": outcome.leaked_bits,
        "reason": outcome.reason,
    }, sort_keys=True))


_key_options = [
    click.option("--plan", "plan_path", required=True, type=click.Path(exists=True, dir_okay=False)),
    click.option("--host", default="127.0.0.1"),
    click.option("--port", type=int, default=7410),
    click.option("--key-file", type=click.Path(exists=True, dir_okay=False), default=None,
                 help="sifted key, packed LSB-first"),
    click.option("--e-mu", "e_mu", type=float, default=None,
                 help="channel QBER for generated keys (default: plan's)"),
    click.option("--seed", type=int, default=0),
    click.option("--trial", type=int, default=0),
    click.option("--session-id", type=int, default=0),
    click.option("--transcript", type=click.Path(dir_okay=False), default=None,
                 help="write the frames this side sent"),
]


def _with_key_options(f):
    for opt in reversed(_key_options):
        f = opt(f)
    return f


@main.command()
@_with_key_options
def serve(plan_path, host, port, key_file, e_mu, seed, trial, session_id, transcript):
    """Play Alice: wait for Bob, then run one session."""
    from .protocol import AliceSession, StreamTransport, alice_loop

    p = FrozenPlan.load(plan_path)
    k = _load_key(key_file, seed, trial, p.e_mu if e_mu is None else e_mu, p.n, "alice")
    with socket.create_server((host, port)) as srv:
        click.echo(f"listening on {host}:{srv.getsockname()[1]}", err=True)
        conn, _ = srv.accept()
    link = StreamTransport(conn)
    try:
        out = alice_loop(AliceSession(k, p, session_id), link, hello=True)
    finally:
        link.close()
    _emit(out, transcript, link.transcript)
    sys.exit(0 if out.status == "success" else 1)


@main.command()
@_with_key_options
def connect(plan_path, host, port, key_file, e_mu, seed, trial, session_id, transcript):
    """Play Bob: connect to Alice and run one session."""
    from .protocol import BobSession, StreamTransport, bob_loop

    p = FrozenPlan.load(plan_path)
    k = _load_key(key_file, seed, trial, p.e_mu if e_mu is None else e_mu, p.n, "bob")
    try:
        conn = socket.create_connection((host, port), timeout=30)
        conn.settimeout(None)
    except OSError as exc:
        raise click.ClickException(f"cannot connect: {exc}") from None
    link = StreamTransport(conn)
    try:
        out = bob_loop(BobSession(k, p, session_id), link, hello=True)
    finally:
        link.close()
    _emit(out, transcript, link.transcript)
    sys.exit(0 if out.status == "success" else 1)


if __name__ == "__main__":
    main()
