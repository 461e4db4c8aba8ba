"""Command-line entry point: gradcheck, efficacy benchmark, unrolled training.

Configuration comes from defaults, an optional JSON config file, and explicit
flags, in increasing precedence. Unknown config keys are rejected. Exit
codes: 0 success, 1 tolerance/assertion failure, 2 usage or config error.
Reports embed the resolved configuration so outputs are self-describing.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from .backward import GradMode, StabilityParams
from .experiments import UnrolledConfig, run_efficacy, train_unrolled
from .oracle import FdSpec, finite_difference
from .svt import ThresholdSpec, svt
from .tape import Tape

__all__ = ["RunConfig", "cmd_efficacy", "cmd_gradcheck", "cmd_train", "main"]

_MODE_NAMES = ("exact", "tf", "clip", "taylor", "inv")


@dataclass
class RunConfig:
    """Resolved settings for one CLI invocation."""

    command: str = ""
    modes: tuple[str, ...] = ("tf", "clip", "taylor", "inv")
    mode: str = "inv"
    t: float | None = None
    clamp: float | None = None
    clip_value: float = 1e16
    taylor_k: int = 9
    precision: str = "single"
    seed: int = 3407
    seeds: tuple[int, ...] | None = None
    trials: int = 100
    cases: tuple[int, ...] = (1, 2)
    workflows: tuple[int, ...] = (1, 2, 3)
    size: tuple[int, int] = (10, 10)
    basis: str = "rotated"
    output: str | None = None
    format: str = "csv"
    threads: int | None = None
    steps: int = 200
    algorithm: str = "admm"
    n_unroll: int = 5
    lr: float = 0.05
    inject_duplicates: float = 0.0
    checks: int = 25
    tolerance: float = 1e-5

    def __post_init__(self):
        for m in self.modes:
            if m not in _MODE_NAMES:
                raise ValueError(f"unknown mode {m!r}")
        if self.mode not in _MODE_NAMES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if self.format not in ("csv", "json"):
            raise ValueError("format must be 'csv' or 'json'")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.checks < 1:
            raise ValueError("checks must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if len(self.size) != 2 or min(self.size) < 1:
            raise ValueError("size must be two positive integers")
        if not 0.0 <= self.inject_duplicates <= 1.0:
            raise ValueError("inject-duplicates must be in [0, 1]")

    def grad_mode(self, variant: str | None = None) -> GradMode:
        return GradMode(
            variant or self.mode,
            clip_value=self.clip_value,
            taylor_k=self.taylor_k,
            stability=StabilityParams(t=self.t, clamp=self.clamp),
        )

    def resolved(self) -> dict:
        d = asdict(self)
        for key in ("modes", "cases", "workflows", "size", "seeds"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def _load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise SystemExit(f"error: cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise SystemExit(f"error: config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise SystemExit(f"error: config {path} must be a JSON object")
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise SystemExit(f"error: unknown config keys: {', '.join(unknown)}")
    for key in ("modes", "cases", "workflows", "seeds", "size"):
        if key in raw and raw[key] is not None:
            raw[key] = tuple(raw[key])
    return raw


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise SystemExit(f"error: cannot write {path}: {e.strerror}") from e


# -- gradcheck ---------------------------------------------------------------


def _separated_matrix(rng: np.random.Generator, n: int, complex_: bool):
    """Random n x n double matrix whose singular values are >= 0.3 apart."""
    s = np.linspace(2.0, 2.0 + 0.5 * (n - 1), n) + rng.uniform(0, 0.1, n)
    if complex_:
        q1, _ = np.linalg.qr(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
        q2, _ = np.linalg.qr(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    else:
        q1, _ = np.linalg.qr(rng.standard_normal((n, n)))
        q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q1 * s[None, :]) @ q2.conj().T, s


def _gradcheck_case(op: str, rng: np.random.Generator, cfg: RunConfig, complex_: bool):
    """One FD-vs-analytic check; returns (fd rel err, exact-vs-inv rel gap)."""
    n = int(rng.integers(4, 8))
    A, svals = _separated_matrix(rng, n, complex_)
    tape = Tape()
    a = tape.input("A")
    extra: dict[str, np.ndarray] = {}
    if op == "sum_singular_values":
        loss = tape.sum_singular_values(tape.svd(a))
    elif op == "reconstruct":
        f = tape.svd(a)
        sv = tape.soft_threshold_vector(f, tau=float(np.sort(svals)[1] * 0.5))
        z = tape.input("Z")
        extra["Z"] = np.zeros_like(A)
        loss = tape.mse_loss(tape.reconstruct(f, sv), z)
    elif op == "svt":
        # the L1 loss has kinks at zero entries; redraw until the output is
        # safely away from them at the FD step size
        use_soft = rng.random() < 0.5
        for _ in range(50):
            sd = np.sort(svals)
            spec = (
                ThresholdSpec.soft(float((sd[1] + sd[2]) / 2))
                if use_soft
                else ThresholdSpec.hard_tail(2)
            )
            B, _, _ = svt(A, spec)
            if float(np.abs(B).min()) > 1e-4:
                break
            A, svals = _separated_matrix(rng, n, complex_)
        loss = tape.l1_loss(tape.svt(a, spec))
    elif op == "chain":
        z = tape.input("Z")
        extra["Z"] = np.zeros_like(A)
        p = tape.parameter_scalar("c")
        extra["c"] = 0.7
        mask = rng.random((n, n)) < 0.6
        h = tape.hadamard(a, a)
        m1 = tape.matmul(a, tape.conj_transpose(a))
        s2 = tape.sub(tape.add(m1, h), a)
        loss = tape.mse_loss(tape.scale_by_param(tape.mask_project(s2, mask), p), z)
    else:  # pragma: no cover
        raise ValueError(op)

    def loss_fn(x):
        return tape.forward({"A": x, **extra})[loss]

    fd = finite_difference(loss_fn, A, FdSpec())
    values = tape.forward({"A": A, **extra})
    g_exact = tape.backward(values, loss, cfg.grad_mode("exact")).by_name("A")
    g_inv = tape.backward(values, loss, cfg.grad_mode("inv")).by_name("A")
    ref = max(float(np.linalg.norm(fd)), 1e-30)
    fd_err = float(np.linalg.norm(g_inv - fd)) / ref
    mode_gap = float(np.linalg.norm(g_inv - g_exact)) / max(float(np.linalg.norm(g_exact)), 1e-30)
    if op == "chain":
        c = np.array([extra["c"]], dtype=np.float64)

        def loss_c(cv):
            return tape.forward({"A": A, "Z": extra["Z"], "c": float(cv[0])})[loss]

        fd_c = finite_difference(loss_c, c, FdSpec())
        g_c = tape.backward(values, loss, cfg.grad_mode("inv")).by_name("c")
        fd_err = max(fd_err, abs(float(fd_c[0]) - g_c) / max(abs(float(fd_c[0])), 1e-30))
    return fd_err, mode_gap


def cmd_gradcheck(cfg: RunConfig) -> int:
    """FD and double-precision cross-checks over a random suite; exit 1 on
    any worst-case relative error above the tolerance."""
    ops = ("sum_singular_values", "reconstruct", "svt", "chain")
    results = []
    failed = False
    print(f"gradcheck seed={cfg.seed} checks={cfg.checks} tolerance={cfg.tolerance:g}")
    for op_index, op in enumerate(ops):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, op_index])))
        worst_fd = 0.0
        worst_gap = 0.0
        for i in range(cfg.checks):
            fd_err, mode_gap = _gradcheck_case(op, rng, cfg, complex_=(i % 2 == 1))
            worst_fd = max(worst_fd, fd_err)
            worst_gap = max(worst_gap, mode_gap)
        ok = worst_fd <= cfg.tolerance
        failed = failed or not ok
        results.append({"op": op, "worst_fd_rel_err": worst_fd, "exact_inv_gap": worst_gap, "ok": ok})
        print(
            f"op={op} worst_fd_rel_err={worst_fd:.3e} exact_inv_gap={worst_gap:.3e} "
            f"{'ok' if ok else 'FAIL'}"
        )
    status = "FAIL" if failed else "PASS"
    print(f"gradcheck: {status}")
    if cfg.output:
        _write_text(
            cfg.output,
            json.dumps({"config": cfg.resolved(), "results": results}, sort_keys=True) + "\n",
        )
    return 1 if failed else 0


# -- efficacy ----------------------------------------------------------------


def cmd_efficacy(cfg: RunConfig) -> int:
    modes = [cfg.grad_mode(name) for name in cfg.modes]
    seeds = cfg.seeds if cfg.seeds is not None else (cfg.seed,)
    try:
        report = run_efficacy(
            cfg.trials,
            modes,
            cases=cfg.cases,
            workflows=cfg.workflows,
            seeds=seeds,
            size=cfg.size,
            basis=cfg.basis,
            threads=cfg.threads,
        )
    except ValueError as e:
        raise SystemExit(f"error: {e}") from e
    report.config.update({"command": "efficacy", "clip_value": cfg.clip_value})
    if cfg.format == "json":
        _write_text(cfg.output, json.dumps(report.to_json_dict(), sort_keys=True) + "\n")
    else:
        _write_text(cfg.output, report.to_csv_text())
    return 0


# -- train -------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    ucfg = UnrolledConfig(
        size=cfg.size,
        n_unroll=cfg.n_unroll,
        algorithm=cfg.algorithm,
        steps=cfg.steps,
        lr=cfg.lr,
        inject_rate=cfg.inject_duplicates,
        mode=cfg.grad_mode(),
        precision=cfg.precision,
        seed=cfg.seed,
    )
    params, log = train_unrolled(ucfg)
    _write_text(cfg.output, log.to_jsonl(config_line=cfg.resolved()))
    if log.halted:
        steps = log.nonfinite_steps()
        print(
            f"training halted: non-finite parameter after step {steps[-1] if steps else '?'}",
            file=sys.stderr,
        )
    return 0


# -- argument plumbing -------------------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("size must look like 10x10")
    return (int(parts[0]), int(parts[1]))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svdgrad",
        description="SVD gradient benchmarks: gradcheck, duplicate-spectrum efficacy, unrolled training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int, help="master seed (default 3407)")
        p.add_argument("--t", type=float, dest="t", help="classification threshold parameter")
        p.add_argument("--clamp", type=float, help="clamp for 1/sigma style quantities")
        p.add_argument("--clip-value", type=float, dest="clip_value")
        p.add_argument("--taylor-k", type=int, dest="taylor_k")
        p.add_argument("--output", "-o", help="output path ('-' for stdout)")

    g = sub.add_parser("gradcheck", help="finite-difference and cross-mode gradient checks")
    common(g)
    g.add_argument("--checks", type=int, help="cases per op group")
    g.add_argument("--tolerance", type=float, help="max allowed FD relative error")

    e = sub.add_parser("efficacy", help="cumulative gradient-MSE benchmark")
    common(e)
    e.add_argument("--trials", type=int, help="trials per cell")
    e.add_argument("--modes", type=_str_list, help="comma list from tf,clip,taylor,inv")
    e.add_argument("--cases", type=_int_list, help="comma list from 1,2")
    e.add_argument("--workflows", type=_int_list, help="comma list from 1,2,3")
    e.add_argument("--seeds", type=_int_list, help="comma list of master seeds")
    e.add_argument("--size", type=_size, help="matrix size, e.g. 10x10")
    e.add_argument("--basis", choices=("identity", "rotated"))
    e.add_argument("--format", choices=("csv", "json"))
    e.add_argument("--threads", type=int)

    t = sub.add_parser("train", help="train an unrolled completion solver")
    common(t)
    t.add_argument("--mode", choices=_MODE_NAMES)
    t.add_argument("--algorithm", choices=("admm", "pgd"))
    t.add_argument("--steps", type=int)
    t.add_argument("--n-unroll", type=int, dest="n_unroll")
    t.add_argument("--lr", type=float)
    t.add_argument("--inject-duplicates", type=float, dest="inject_duplicates")
    t.add_argument("--precision", choices=("single", "double"))
    t.add_argument("--size", type=_size, help="matrix size, e.g. 20x20")
    return parser


def _resolve(argv: list[str] | None) -> RunConfig:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    provided = {k: v for k, v in vars(ns).items() if v is not None and k != "config"}
    merged: dict = {}
    if ns.command == "train":
        merged["size"] = (20, 20)
    if ns.config:
        merged.update(_load_config_file(ns.config))
    merged.update(provided)
    try:
        return RunConfig(**merged)
    except (TypeError, ValueError) as e:
        raise SystemExit(f"error: invalid configuration: {e}") from e


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = _resolve(argv)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return 2
        raise
    handlers = {"gradcheck": cmd_gradcheck, "efficacy": cmd_efficacy, "train": cmd_train}
    try:
        return handlers[cfg.command](cfg)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
