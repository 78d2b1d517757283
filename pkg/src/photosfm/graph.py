"""Factor-graph container and sparse Levenberg-Marquardt optimizer.

Variables are keyed by (kind, index) and updated through their kind's
retraction: poses via the SE(3) lift, unit vectors (normals, Sun directions)
via the trigonometric sphere retraction, everything else additively with
positivity clamps on albedos and image scales. Factors are duck-typed records
exposing ``keys()``, ``dim`` and ``linearize(values) -> Residual``.

The normal equations are assembled as a sparse stacked Jacobian (structure
cached across iterations, values refilled), J^T J is formed by sparse matmul
and solved by dense Cholesky below a size threshold or sparse LU above it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .factors import (
    PhotoclinometryFactor,
    ReprojectionFactor,
    SmoothnessFactor,
    batch_photoclinometry,
    batch_reprojection,
    batch_smoothness,
)
from .manifold import Pose, pose_retract, s2_retract

_DENSE_LIMIT = 2000
_ALBEDO_FLOOR = 1e-4
_SCALE_FLOOR = 1e-6


class DuplicateKeyError(KeyError):
    pass


class SingularSystemError(RuntimeError):
    """Damped normal equations failed to factor at the damping ceiling."""


class VarKind(Enum):
    POSE = "pose"
    LANDMARK = "landmark"
    NORMAL = "normal"
    SUN = "sun"
    ALBEDO = "albedo"
    IMAGE_SCALE = "image_scale"
    IMAGE_BIAS = "image_bias"


LOCAL_DIM = {
    VarKind.POSE: 6,
    VarKind.LANDMARK: 3,
    VarKind.NORMAL: 2,
    VarKind.SUN: 2,
    VarKind.ALBEDO: 1,
    VarKind.IMAGE_SCALE: 1,
    VarKind.IMAGE_BIAS: 1,
}

_SORT_ORDER = {kind: i for i, kind in enumerate(VarKind)}


@dataclass(frozen=True, eq=False)
class VariableKey:
    kind: VarKind
    index: int

    def __post_init__(self):
        # Keys are hashed on every Jacobian-block lookup; cache the hash.
        object.__setattr__(self, "_hash", hash((self.kind, self.index)))

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return (self is other
                or (isinstance(other, VariableKey)
                    and self.kind is other.kind and self.index == other.index))

    def sort_key(self):
        return (_SORT_ORDER[self.kind], self.index)

    def __repr__(self):
        return f"{self.kind.value}[{self.index}]"


def pose_key(i: int) -> VariableKey:
    return VariableKey(VarKind.POSE, i)


def landmark_key(j: int) -> VariableKey:
    return VariableKey(VarKind.LANDMARK, j)


def normal_key(j: int) -> VariableKey:
    return VariableKey(VarKind.NORMAL, j)


def sun_key(k: int) -> VariableKey:
    return VariableKey(VarKind.SUN, k)


def albedo_key(j: int) -> VariableKey:
    return VariableKey(VarKind.ALBEDO, j)


def scale_key(k: int) -> VariableKey:
    return VariableKey(VarKind.IMAGE_SCALE, k)


def bias_key(k: int) -> VariableKey:
    return VariableKey(VarKind.IMAGE_BIAS, k)


@dataclass
class NormalSystem:
    """Gauss-Newton normal equations J^T J x = -J^T r over unfrozen variables."""

    hessian: scipy.sparse.csr_matrix
    gradient: np.ndarray
    cost: float
    offsets: dict[VariableKey, int]
    total_dim: int
    n_active_residuals: int


class Termination(Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    STALLED_LAMBDA = "stalled_lambda"


@dataclass
class LMConfig:
    max_iter: int = 100
    lambda0: float = 1e-4
    lambda_factor: float = 10.0
    rel_cost_tol: float = 1e-8
    abs_grad_tol: float = 1e-10
    lambda_max: float = 1e12
    # Treat a cost this small as fully converged (relevant only for noiseless
    # problems, whose relative decrease never falls below rel_cost_tol).
    abs_cost_tol: float = 1e-14
    trace_path: str | None = None


@dataclass
class OptimizerReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_trace: list[float]
    lambda_trace: list[float]
    termination: Termination

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "cost_trace": self.cost_trace,
            "lambda_trace": self.lambda_trace,
            "termination": self.termination.value,
        }


class FactorGraph:
    """Bipartite container of typed variables and factor records."""

    def __init__(self):
        self.values: dict[VariableKey, object] = {}
        self.factors: list = []
        self.frozen: set[VariableKey] = set()
        self._structure = None

    # -- construction -------------------------------------------------------

    def add_variable(self, key: VariableKey, value) -> None:
        if key in self.values:
            raise DuplicateKeyError(f"variable {key} already present")
        self.values[key] = value
        self._structure = None

    def add_factor(self, factor) -> None:
        for key in factor.keys():
            if key not in self.values:
                raise KeyError(f"factor references unknown variable {key}")
        self.factors.append(factor)
        self._structure = None

    def freeze(self, key: VariableKey) -> None:
        if key not in self.values:
            raise KeyError(f"cannot freeze unknown variable {key}")
        self.frozen.add(key)
        self._structure = None

    def local_dim(self, key: VariableKey) -> int:
        return LOCAL_DIM[key.kind]

    def total_local_dim(self) -> int:
        return sum(LOCAL_DIM[k.kind] for k in self.values if k not in self.frozen)

    def ordering(self) -> dict[VariableKey, int]:
        """Column offsets of unfrozen variables, sorted by (kind, index)."""
        offsets = {}
        off = 0
        for key in sorted((k for k in self.values if k not in self.frozen),
                          key=VariableKey.sort_key):
            offsets[key] = off
            off += LOCAL_DIM[key.kind]
        return offsets

    # -- evaluation ---------------------------------------------------------

    def evaluate_cost(self) -> float:
        return sum(f.linearize(self.values).cost for f in self.factors)

    def _batch_kind(self, factor):
        """Grouping key for vectorized linearization, or None for the
        per-factor path (also used for factors touching frozen variables)."""
        if any(k in self.frozen for k in factor.keys()):
            return None
        if type(factor) is ReprojectionFactor:
            return ("reproj",)
        if type(factor) is PhotoclinometryFactor:
            return ("photo", factor.model)
        if type(factor) is SmoothnessFactor:
            return ("smooth",)
        return None

    def _build_structure(self):
        """Static COO pattern of the stacked Jacobian, cached until the graph
        changes. Per-factor value slices are refilled each linearization;
        batchable factor groups additionally carry gather/scatter indices."""
        offsets = self.ordering()
        rows, cols = [], []
        generic = []  # (factor, row_offset, [(key, vals_pos, dim)])
        groups: dict = {}
        row_off = 0
        nnz = 0
        for f in self.factors:
            entry = []
            start = nnz
            for key in f.keys():
                d = LOCAL_DIM[key.kind]
                if key in self.frozen:
                    entry.append((key, -1, d))
                    continue
                c = offsets[key]
                rows.append(np.repeat(np.arange(row_off, row_off + f.dim), d))
                cols.append(np.tile(np.arange(c, c + d), f.dim))
                entry.append((key, nnz, d))
                nnz += f.dim * d
            kind = self._batch_kind(f)
            if kind is None:
                generic.append((f, row_off, entry))
            else:
                groups.setdefault(kind, []).append((f, row_off, start))
            row_off += f.dim
        batches = [self._build_batch(kind, members)
                   for kind, members in groups.items()]
        self._structure = {
            "offsets": offsets,
            "rows": np.concatenate(rows) if rows else np.zeros(0, dtype=int),
            "cols": np.concatenate(cols) if cols else np.zeros(0, dtype=int),
            "nnz": nnz,
            "n_rows": row_off,
            "generic": generic,
            "batches": batches,
            "total_dim": sum(LOCAL_DIM[k.kind] for k in offsets),
        }
        return self._structure

    @staticmethod
    def _index_roles(factors, roles):
        """Unique value keys per role plus per-factor gather indices."""
        unique: dict = {}
        index = {}
        for role, key_fn in roles.items():
            seen: dict = {}
            idx = np.empty(len(factors), dtype=int)
            for i, f in enumerate(factors):
                key = key_fn(f)
                pos = seen.get(key)
                if pos is None:
                    pos = len(seen)
                    seen[key] = pos
                idx[i] = pos
            unique[role] = list(seen)
            index[role] = idx
        return unique, index

    def _build_batch(self, kind, members):
        factors = [m[0] for m in members]
        f0 = factors[0]
        dim = f0.dim
        width = sum(LOCAL_DIM[k.kind] for k in f0.keys()) * dim
        row_offs = np.array([m[1] for m in members])
        starts = np.array([m[2] for m in members])
        batch = {
            "kind": kind[0],
            "rows_scatter": row_offs[:, None] + np.arange(dim),
            "vals_scatter": starts[:, None] + np.arange(width),
            "dim": dim,
        }
        if kind[0] == "reproj":
            unique, index = self._index_roles(factors, {
                "pose": lambda f: f.pose_key, "lm": lambda f: f.landmark_key})
            batch["static"] = {
                "pixels": np.array([f.meas.pixel for f in factors]),
                "sqrt_info": np.array([f.meas.sqrt_info for f in factors]),
                "fx": np.array([f.intrinsics.fx for f in factors]),
                "fy": np.array([f.intrinsics.fy for f in factors]),
                "cx": np.array([f.intrinsics.cx for f in factors]),
                "cy": np.array([f.intrinsics.cy for f in factors]),
            }
        elif kind[0] == "photo":
            roles = {"pose": lambda f: f.pose_key, "sun": lambda f: f.sun_key,
                     "lm": lambda f: f.landmark_key,
                     "normal": lambda f: f.normal_key,
                     "albedo": lambda f: f.albedo_key}
            if not f0.model.calibrated:
                roles["scale"] = lambda f: f.scale_key
                roles["bias"] = lambda f: f.bias_key
            unique, index = self._index_roles(factors, roles)
            batch["model"] = f0.model
            batch["static"] = {
                "brightness": np.array([f.meas.brightness for f in factors]),
                "sigma_i": np.array([f.meas.brightness_sigma for f in factors]),
            }
        else:
            unique, index = self._index_roles(factors, {
                "lm": lambda f: f.landmark_key, "normal": lambda f: f.normal_key,
                "nbr": lambda f: f.neighbor_key})
            batch["static"] = {"weights": np.array([f.weight for f in factors])}
        batch["unique"] = unique
        batch["index"] = index
        return batch

    @staticmethod
    def _gather(values, unique_keys, index):
        return np.array([values[k] for k in unique_keys])[index]

    def _run_batch(self, batch, values):
        unique, index = batch["unique"], batch["index"]
        static = batch["static"]
        if batch["kind"] == "reproj":
            poses = [values[k] for k in unique["pose"]]
            rot = np.array([p.R for p in poses])[index["pose"]]
            t_cam = np.array([p.t for p in poses])[index["pose"]]
            lms = self._gather(values, unique["lm"], index["lm"])
            return batch_reprojection(rot, t_cam, lms, static["fx"], static["fy"],
                                      static["cx"], static["cy"],
                                      static["pixels"], static["sqrt_info"])
        if batch["kind"] == "photo":
            poses = [values[k] for k in unique["pose"]]
            rot = np.array([p.R for p in poses])[index["pose"]]
            t_cam = np.array([p.t for p in poses])[index["pose"]]
            suns = self._gather(values, unique["sun"], index["sun"])
            lms = self._gather(values, unique["lm"], index["lm"])
            normals = self._gather(values, unique["normal"], index["normal"])
            albedos = self._gather(values, unique["albedo"], index["albedo"])
            model = batch["model"]
            if model.calibrated:
                scales = np.ones(len(lms))
                biases = np.zeros(len(lms))
            else:
                scales = self._gather(values, unique["scale"], index["scale"])
                biases = self._gather(values, unique["bias"], index["bias"])
            return batch_photoclinometry(model, rot, t_cam, suns, lms, normals,
                                         albedos, scales, biases,
                                         static["brightness"], static["sigma_i"])
        lms = self._gather(values, unique["lm"], index["lm"])
        normals = self._gather(values, unique["normal"], index["normal"])
        nbrs = self._gather(values, unique["nbr"], index["nbr"])
        return batch_smoothness(lms, normals, nbrs, static["weights"])

    def linearize(self, values=None) -> NormalSystem:
        """Assemble J^T J and J^T r over active factors at the given values
        (defaults to the graph's current values)."""
        if not self.values:
            raise ValueError("cannot linearize an empty graph")
        values = self.values if values is None else values
        st = self._structure or self._build_structure()
        vals = np.zeros(st["nnz"])
        resid = np.zeros(st["n_rows"])
        cost = 0.0
        n_active = 0
        for batch in st["batches"]:
            r, bvals, active = self._run_batch(batch, values)
            resid[batch["rows_scatter"]] = r
            vals[batch["vals_scatter"]] = bvals
            cost += 0.5 * float(np.sum(r * r))
            n_active += int(active.sum()) * batch["dim"]
        for f, row_off, entry in st["generic"]:
            res = f.linearize(values)
            cost += res.cost
            if not res.active:
                continue
            n_active += f.dim
            resid[row_off:row_off + f.dim] = res.r
            for key, pos, d in entry:
                if pos >= 0:
                    vals[pos:pos + f.dim * d] = res.jac[key].ravel()
        n = st["total_dim"]
        jac = scipy.sparse.csr_matrix(
            (vals, (st["rows"], st["cols"])), shape=(st["n_rows"], n))
        hessian = (jac.T @ jac).tocsr()
        gradient = jac.T @ resid
        return NormalSystem(hessian, gradient, cost, st["offsets"], n, n_active)

    # -- update -------------------------------------------------------------

    def retracted_values(self, step: np.ndarray, offsets) -> dict:
        """New value dict with the local step applied through each retraction."""
        new_values = dict(self.values)
        for key, off in offsets.items():
            d = LOCAL_DIM[key.kind]
            delta = step[off:off + d]
            v = self.values[key]
            if key.kind is VarKind.POSE:
                new_values[key] = pose_retract(v, delta)
            elif key.kind in (VarKind.NORMAL, VarKind.SUN):
                new_values[key] = s2_retract(v, delta)
            elif key.kind is VarKind.ALBEDO:
                new_values[key] = max(float(v + delta[0]), _ALBEDO_FLOOR)
            elif key.kind is VarKind.IMAGE_SCALE:
                new_values[key] = max(float(v + delta[0]), _SCALE_FLOOR)
            elif key.kind is VarKind.IMAGE_BIAS:
                new_values[key] = float(v + delta[0])
            else:
                new_values[key] = v + delta
        return new_values


def _solve_damped(hessian, gradient, lam: float) -> np.ndarray:
    """Solve (H + lam * diag(H)) x = -g. Raises on a non-factorable system."""
    diag = hessian.diagonal().copy()
    # Zero columns (variables untouched by any active factor) still need a
    # nonzero damped diagonal to keep the system factorable.
    diag[diag <= 0.0] = 1.0
    n = hessian.shape[0]
    damped = hessian + scipy.sparse.diags(lam * diag)
    if n < _DENSE_LIMIT:
        try:
            c, low = scipy.linalg.cho_factor(damped.toarray())
            return scipy.linalg.cho_solve((c, low), -gradient)
        except scipy.linalg.LinAlgError as exc:
            raise SingularSystemError(str(exc)) from exc
    try:
        lu = scipy.sparse.linalg.splu(damped.tocsc(),
                                      permc_spec="MMD_AT_PLUS_A")
        return lu.solve(-gradient)
    except RuntimeError as exc:
        raise SingularSystemError(str(exc)) from exc


def optimize_lm(graph: FactorGraph, config: LMConfig | None = None):
    """Levenberg-Marquardt with multiplicative damping on the J^T J diagonal.

    Steps are applied through each kind's retraction; rejected steps restore
    the previous values and raise the damping. Returns the (mutated) graph and
    an OptimizerReport with per-iteration cost and damping traces.
    """
    config = config or LMConfig()
    if graph.total_local_dim() == 0:
        raise ValueError("no unfrozen variables to optimize")

    trace_file = open(config.trace_path, "w") if config.trace_path else None

    def trace(record):
        if trace_file:
            trace_file.write(json.dumps(record) + "\n")

    system = graph.linearize()
    cost = system.cost
    initial_cost = cost
    cost_trace = [cost]
    lambda_trace = []
    lam = config.lambda0
    termination = Termination.MAX_ITER
    iterations = 0

    try:
        for iteration in range(config.max_iter):
            iterations = iteration + 1
            if (np.abs(system.gradient).max() < config.abs_grad_tol
                    or cost < config.abs_cost_tol):
                termination = Termination.CONVERGED
                iterations = iteration
                break
            accepted = False
            while True:
                lambda_trace.append(lam)
                try:
                    step = _solve_damped(system.hessian, system.gradient, lam)
                except SingularSystemError:
                    if lam >= config.lambda_max:
                        raise
                    lam *= config.lambda_factor
                    continue
                candidate = graph.retracted_values(step, system.offsets)
                cand_system = graph.linearize(candidate)
                trace({"iteration": iteration, "cost": cand_system.cost,
                       "lambda": lam, "accepted": bool(cand_system.cost < cost)})
                if cand_system.cost < cost:
                    rel_decrease = (cost - cand_system.cost) / max(cost, 1e-300)
                    graph.values = candidate
                    system = cand_system
                    cost = cand_system.cost
                    cost_trace.append(cost)
                    lam = max(lam / config.lambda_factor, 1e-12)
                    accepted = True
                    if (rel_decrease < config.rel_cost_tol
                            or cost < config.abs_cost_tol):
                        termination = Termination.CONVERGED
                    break
                lam *= config.lambda_factor
                if lam > config.lambda_max:
                    termination = Termination.STALLED_LAMBDA
                    break
            if not accepted or termination is not Termination.MAX_ITER:
                break
    finally:
        if trace_file:
            trace_file.close()

    report = OptimizerReport(
        iterations=iterations,
        initial_cost=initial_cost,
        final_cost=cost,
        cost_trace=cost_trace,
        lambda_trace=lambda_trace,
        termination=termination,
    )
    return graph, report
