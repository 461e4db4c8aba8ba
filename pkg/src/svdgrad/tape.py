"""Minimal reverse-mode tape over dense matrix operations.

A Tape is built once (construction order is the topological order), then
`forward` binds inputs/parameters and caches every node value, and `backward`
accumulates cotangents in reverse order. The SVD backward mode is pluggable
per `backward` call, so one cached forward can be differentiated under
several modes — the paired design the gradient benchmarks rely on.

Complex convention throughout: dL = Re tr(cot^H dX) for a real scalar loss.
Parameters are real scalars only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import GradMode, svd_vjp
from .linalg import SvdFactors, ensure_matrix, real_dtype_of, svd as _svd
from .svt import SvtCache, ThresholdSpec, kept_mask, svt as _svt, svt_vjp

__all__ = ["GradientSet", "Node", "Tape"]

_LOSS_OPS = ("l1_loss", "mse_loss", "sum_singular_values")


@dataclass(frozen=True)
class Node:
    idx: int
    op: str
    parents: tuple[int, ...]
    name: str | None = None
    extra: dict | None = None


@dataclass
class GradientSet:
    """Cotangents keyed by node id, with name lookup for inputs/parameters."""

    cotangents: dict[int, object]
    names: dict[str, int]
    nonfinite_nodes: list[int] = field(default_factory=list)

    def by_id(self, idx: int):
        return self.cotangents.get(idx)

    def by_name(self, name: str):
        return self.cotangents.get(self.names[name])

    def all_finite(self) -> bool:
        for g in self.cotangents.values():
            arr = np.asarray(g)
            if not np.isfinite(arr).all():
                return False
        return True


class _FactorCotangent:
    """Accumulator for (Ubar, sbar, Vbar) flowing into an svd node."""

    __slots__ = ("Ubar", "sbar", "Vbar")

    def __init__(self, factors: SvdFactors, dtype):
        m, k = factors.U.shape
        n = factors.V.shape[0]
        self.Ubar = np.zeros((m, k), dtype=dtype)
        self.Vbar = np.zeros((n, k), dtype=dtype)
        self.sbar = np.zeros(k, dtype=real_dtype_of(dtype))


class Tape:
    """Append-only computation graph; freeze implicitly by not adding nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.names: dict[str, int] = {}

    # -- construction -----------------------------------------------------

    def _append(self, op, parents=(), name=None, extra=None) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise ValueError(f"parent id {p} out of range for op {op!r}")
        idx = len(self.nodes)
        if name is not None:
            if name in self.names:
                raise ValueError(f"duplicate node name {name!r}")
            self.names[name] = idx
        self.nodes.append(Node(idx=idx, op=op, parents=tuple(parents), name=name, extra=extra))
        return idx

    def input(self, name: str) -> int:
        return self._append("input", name=name)

    def parameter_scalar(self, name: str) -> int:
        return self._append("parameter_scalar", name=name)

    def matmul(self, a: int, b: int) -> int:
        return self._append("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._append("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._append("sub", (a, b))

    def scale_by_param(self, x: int, p: int) -> int:
        if self.nodes[p].op != "parameter_scalar":
            raise ValueError("scale_by_param expects a parameter_scalar node")
        return self._append("scale_by_param", (x, p))

    def conj_transpose(self, a: int) -> int:
        return self._append("conj_transpose", (a,))

    def hadamard(self, a: int, b: int) -> int:
        return self._append("hadamard", (a, b))

    def mask_project(self, a: int, mask: np.ndarray) -> int:
        mask = np.asarray(mask, dtype=bool)
        return self._append("mask_project", (a,), extra={"mask": mask})

    def svd(self, a: int) -> int:
        return self._append("svd", (a,))

    def svt(self, a: int, spec: ThresholdSpec | None = None, tau_param: int | None = None) -> int:
        """Singular value thresholding node; tau either fixed or a parameter."""
        if (spec is None) == (tau_param is None):
            raise ValueError("svt needs exactly one of spec or tau_param")
        if tau_param is not None:
            if self.nodes[tau_param].op != "parameter_scalar":
                raise ValueError("tau_param must be a parameter_scalar node")
            return self._append("svt", (a, tau_param))
        return self._append("svt", (a,), extra={"spec": spec})

    def reconstruct(self, svd_node: int, s_node: int | None = None) -> int:
        """U diag(s) V^H from an svd node, spectrum optionally overridden."""
        if self.nodes[svd_node].op != "svd":
            raise ValueError("reconstruct expects an svd node")
        parents = (svd_node,) if s_node is None else (svd_node, s_node)
        return self._append("reconstruct", parents)

    def soft_threshold_vector(self, svd_node: int, tau: float | None = None, tau_param: int | None = None) -> int:
        """max(s - tau, 0) applied to an svd node's spectrum."""
        if self.nodes[svd_node].op != "svd":
            raise ValueError("soft_threshold_vector expects an svd node")
        if (tau is None) == (tau_param is None):
            raise ValueError("soft_threshold_vector needs exactly one of tau or tau_param")
        if tau_param is not None:
            if self.nodes[tau_param].op != "parameter_scalar":
                raise ValueError("tau_param must be a parameter_scalar node")
            return self._append("soft_threshold_vector", (svd_node, tau_param))
        return self._append("soft_threshold_vector", (svd_node,), extra={"tau": float(tau)})

    def l1_loss(self, a: int) -> int:
        return self._append("l1_loss", (a,))

    def mse_loss(self, a: int, b: int) -> int:
        return self._append("mse_loss", (a, b))

    def sum_singular_values(self, svd_node: int) -> int:
        if self.nodes[svd_node].op != "svd":
            raise ValueError("sum_singular_values expects an svd node")
        return self._append("sum_singular_values", (svd_node,))

    # -- forward ----------------------------------------------------------

    def forward(self, bindings: dict[str, object]) -> list:
        """Evaluate every node; returns the cached value list for backward."""
        values: list = [None] * len(self.nodes)
        for node in self.nodes:
            v = [self.value_of(values, p) for p in node.parents]
            op = node.op
            if op in ("input", "parameter_scalar"):
                if node.name not in bindings:
                    raise ValueError(f"unbound {op} node {node.name!r}")
                bound = bindings[node.name]
                if op == "parameter_scalar":
                    bound = float(bound)
                else:
                    bound = ensure_matrix(bound, node.name)
                values[node.idx] = bound
            elif op == "matmul":
                values[node.idx] = v[0] @ v[1]
            elif op == "add":
                values[node.idx] = v[0] + v[1]
            elif op == "sub":
                values[node.idx] = v[0] - v[1]
            elif op == "scale_by_param":
                values[node.idx] = np.asarray(v[1], dtype=real_dtype_of(v[0].dtype)) * v[0]
            elif op == "conj_transpose":
                values[node.idx] = v[0].conj().T
            elif op == "hadamard":
                values[node.idx] = v[0] * v[1]
            elif op == "mask_project":
                mask = node.extra["mask"]
                if mask.shape != v[0].shape:
                    raise ValueError(f"mask shape {mask.shape} vs value {v[0].shape}")
                values[node.idx] = v[0] * mask.astype(v[0].dtype)
            elif op == "svd":
                values[node.idx] = _svd(v[0])
            elif op == "svt":
                spec = node.extra["spec"] if node.extra else ThresholdSpec.soft(v[1])
                B, factors, s_hat = _svt(v[0], spec)
                values[node.idx] = _SvtValue(B, SvtCache(v[0], factors, s_hat, spec))
            elif op == "reconstruct":
                factors: SvdFactors = v[0]
                s_used = factors.s if len(v) == 1 else v[1]
                values[node.idx] = factors.reconstruct(s_used)
            elif op == "soft_threshold_vector":
                factors = v[0]
                tau = node.extra["tau"] if node.extra else float(v[1])
                rdt = factors.s.dtype
                values[node.idx] = np.maximum(factors.s - np.asarray(tau, dtype=rdt), np.asarray(0, dtype=rdt))
            elif op == "l1_loss":
                values[node.idx] = float(np.abs(v[0]).sum())
            elif op == "mse_loss":
                if v[0].shape != v[1].shape:
                    raise ValueError(f"mse_loss shape mismatch {v[0].shape} vs {v[1].shape}")
                d = v[0] - v[1]
                values[node.idx] = float(np.mean(np.abs(d) ** 2))
            elif op == "sum_singular_values":
                values[node.idx] = float(v[0].s.sum())
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")
        return values

    def value_of(self, values: list, idx: int):
        """Consumer-visible value of a node (svt nodes expose the matrix)."""
        v = values[idx]
        return v.B if isinstance(v, _SvtValue) else v

    # -- backward ---------------------------------------------------------

    def backward(self, values: list, loss: int, mode: GradMode, seed_cotangent: float = 1.0) -> GradientSet:
        """Reverse accumulation from `loss` (a real scalar node) down to leaves."""
        if not isinstance(values[loss], float):
            raise ValueError("loss node must evaluate to a real scalar")
        cot: dict[int, object] = {loss: float(seed_cotangent)}
        nonfinite: list[int] = []

        def acc(idx: int, g):
            prev = cot.get(idx)
            node = self.nodes[idx]
            if node.op == "svd":
                if prev is None:
                    prev = _FactorCotangent(values[idx], g[3])
                    cot[idx] = prev
                Ub, sb, Vb = g[0], g[1], g[2]
                if Ub is not None:
                    prev.Ubar = prev.Ubar + Ub
                if sb is not None:
                    prev.sbar = prev.sbar + sb
                if Vb is not None:
                    prev.Vbar = prev.Vbar + Vb
            else:
                cot[idx] = g if prev is None else prev + g

        for node in reversed(self.nodes):
            g = cot.get(node.idx)
            if g is None:
                continue
            if isinstance(g, _FactorCotangent):
                if not (
                    np.isfinite(g.Ubar).all()
                    and np.isfinite(g.sbar).all()
                    and np.isfinite(g.Vbar).all()
                ):
                    nonfinite.append(node.idx)
            elif not np.isfinite(np.asarray(g)).all():
                nonfinite.append(node.idx)
            op = node.op
            v = [self.value_of(values, p) for p in node.parents]
            if op in ("input", "parameter_scalar"):
                continue
            elif op == "matmul":
                acc(node.parents[0], g @ v[1].conj().T)
                acc(node.parents[1], v[0].conj().T @ g)
            elif op == "add":
                acc(node.parents[0], g)
                acc(node.parents[1], g)
            elif op == "sub":
                acc(node.parents[0], g)
                acc(node.parents[1], -g)
            elif op == "scale_by_param":
                c = np.asarray(v[1], dtype=real_dtype_of(v[0].dtype))
                acc(node.parents[0], c * g)
                acc(node.parents[1], float(np.real(np.vdot(v[0], g))))
            elif op == "conj_transpose":
                acc(node.parents[0], g.conj().T)
            elif op == "hadamard":
                acc(node.parents[0], g * v[1].conj())
                acc(node.parents[1], g * v[0].conj())
            elif op == "mask_project":
                acc(node.parents[0], g * node.extra["mask"].astype(g.dtype))
            elif op == "svd":
                fc: _FactorCotangent = g
                factors: SvdFactors = values[node.idx]
                Abar = svd_vjp(v[0], factors, fc.Ubar, fc.sbar, fc.Vbar, mode)
                acc(node.parents[0], Abar)
            elif op == "svt":
                cache: SvtCache = values[node.idx].cache
                Abar, taubar = svt_vjp(g, cache, mode)
                acc(node.parents[0], Abar)
                if len(node.parents) == 2:
                    acc(node.parents[1], taubar)
            elif op == "reconstruct":
                factors = v[0]
                s_used = factors.s if len(v) == 1 else v[1]
                s_d = s_used.astype(g.dtype, copy=False)
                Ubar = (g @ factors.V) * s_d[None, :]
                Vbar = (g.conj().T @ factors.U) * s_d[None, :]
                sbar = np.real(np.einsum("ij,ij->j", factors.U.conj(), g @ factors.V))
                sbar = sbar.astype(real_dtype_of(g.dtype), copy=False)
                if len(node.parents) == 1:
                    acc(node.parents[0], (Ubar, sbar, Vbar, g.dtype))
                else:
                    acc(node.parents[0], (Ubar, None, Vbar, g.dtype))
                    acc(node.parents[1], sbar)
            elif op == "soft_threshold_vector":
                factors = v[0]
                tau = node.extra["tau"] if node.extra else float(v[1])
                spec = ThresholdSpec.soft(tau)
                kept = kept_mask(factors.s, spec)
                sbar = np.where(kept, g, np.asarray(0, dtype=g.dtype))
                acc(node.parents[0], (None, sbar, None, factors.U.dtype))
                if len(node.parents) == 2:
                    acc(node.parents[1], float(-g[kept].sum()))
            elif op == "l1_loss":
                x = v[0]
                with np.errstate(invalid="ignore", divide="ignore"):
                    sgn = np.where(x == 0, np.asarray(0, dtype=x.dtype), x / np.abs(x))
                acc(node.parents[0], np.asarray(g, dtype=real_dtype_of(x.dtype)) * sgn)
            elif op == "mse_loss":
                d = v[0] - v[1]
                scale = np.asarray(2.0 * g / d.size, dtype=real_dtype_of(d.dtype))
                acc(node.parents[0], scale * d)
                acc(node.parents[1], -scale * d)
            elif op == "sum_singular_values":
                factors = v[0]
                sbar = np.full(factors.s.shape, g, dtype=factors.s.dtype)
                acc(node.parents[0], (None, sbar, None, factors.U.dtype))
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")

        out: dict[int, object] = {}
        for idx, g in cot.items():
            if isinstance(g, _FactorCotangent):
                continue
            out[idx] = g
        return GradientSet(cotangents=out, names=dict(self.names), nonfinite_nodes=nonfinite)


class _SvtValue:
    """Forward value of an svt node: the matrix plus cached products."""

    __slots__ = ("B", "cache")

    def __init__(self, B: np.ndarray, cache: SvtCache):
        self.B = B
        self.cache = cache

    @property
    def shape(self):
        return self.B.shape

    @property
    def dtype(self):
        return self.B.dtype
