"""Run orchestration shared by the CLI commands.

A run is described by a JSON config with explicit keys (mesh, case, features,
model, schedule, seed). Paper defaults are baked in per case kind: the 3D
electrostatic recipe uses the noisy-solution input with Adam(50 @ 1e-4) +
L-BFGS(100 @ 2e-3); the 2D elasticity recipe uses the boundary-condition
field with Adam(5000 @ 5e-3). Every artifact a command writes is bitwise
reproducible for a fixed config and seed; wall-clock timings go to a separate
timing.json so the deterministic outputs stay byte-stable.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import femkernel as fem
from . import graphnet as gn
from . import mesh as pmesh
from . import optim as po
from . import physics as ph
from . import refsolver as rs


class ConfigError(ValueError):
    pass


_CASE_DEFAULTS = {
    "electrostatic": {
        "bc": {"g1": 0.0, "g2": 0.01},
        "features": {"recipe": ["noisy_solution"], "noise_level": 0.2,
                     "noise_smoothing": 5, "noise_seed": 0},
        "schedule": {"adam_epochs": 50, "adam_lr": 1e-4,
                     "lbfgs_epochs": 100, "lbfgs_lr": 2e-3,
                     "lbfgs_inner": 20, "lbfgs_line_search": "armijo",
                     "loss": "hybrid"},
    },
    "elasticity2d": {
        "bc": {"g1": (1.0, 0.0), "g2": (-1.0, 0.0)},
        "lam": 1.0, "mu": 1.0,
        "features": {"recipe": ["bc_field"]},
        "schedule": {"adam_epochs": 5000, "adam_lr": 5e-3,
                     "lbfgs_epochs": 0, "lbfgs_lr": 2e-3,
                     "lbfgs_inner": 20, "lbfgs_line_search": "armijo",
                     "loss": "hybrid"},
    },
}

_MODEL_DEFAULTS = {"kind": "graph", "hidden_width": 64, "mlp_layers": 2,
                   "n_processors": 3, "split_decoder": False}


@dataclass
class RunConfig:
    mesh: dict
    case: dict
    features: dict
    model: dict
    schedule: dict
    seed: int

    def canonical(self) -> str:
        payload = {"mesh": self.mesh, "case": self.case, "features": self.features,
                   "model": self.model, "schedule": self.schedule, "seed": self.seed}
        return json.dumps(payload, sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def make_config(raw: dict) -> RunConfig:
    """Fill a raw config dict with per-case defaults and validate it."""
    raw = copy.deepcopy(raw)
    case = raw.get("case", {})
    kind = case.get("kind")
    if kind not in _CASE_DEFAULTS:
        raise ConfigError(
            f"case.kind must be one of {sorted(_CASE_DEFAULTS)}, got {kind!r}")
    defaults = _CASE_DEFAULTS[kind]
    case.setdefault("bc", copy.deepcopy(defaults["bc"]))
    if kind == "elasticity2d":
        case.setdefault("lam", defaults["lam"])
        case.setdefault("mu", defaults["mu"])

    mesh_spec = raw.get("mesh")
    if not mesh_spec or ("generator" not in mesh_spec and "path" not in mesh_spec):
        raise ConfigError("config needs mesh.generator (+ params) or mesh.path")

    features = {**copy.deepcopy(defaults["features"]), **raw.get("features", {})}
    for channel in features["recipe"]:
        if channel not in ("bc_field", "noisy_solution"):
            raise ConfigError(f"unknown feature channel {channel!r}")
    if not features["recipe"]:
        raise ConfigError("feature recipe is empty")

    schedule = {**copy.deepcopy(defaults["schedule"]), **raw.get("schedule", {})}
    if schedule["loss"] not in ("hybrid", "mae"):
        raise ConfigError(f"schedule.loss must be 'hybrid' or 'mae', got {schedule['loss']!r}")
    model = {**copy.deepcopy(_MODEL_DEFAULTS), **raw.get("model", {})}
    return RunConfig(mesh=mesh_spec, case=case, features=features, model=model,
                     schedule=schedule, seed=int(raw.get("seed", 0)))


def load_config(path, seed_override=None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    return make_config(raw)


def get_mesh(config: RunConfig) -> pmesh.Mesh:
    if "path" in config.mesh:
        return pmesh.load_mesh(config.mesh["path"])
    return pmesh.generate_mesh(config.mesh["generator"],
                               config.mesh.get("params", []))


def build_case(mesh: pmesh.Mesh, config: RunConfig) -> ph.PhysicsCase:
    kind = config.case["kind"]
    bc = {tag: value for tag, value in config.case["bc"].items()}
    if kind == "electrostatic":
        return ph.make_electrostatic_case(mesh, bc)
    return ph.make_elasticity_case(mesh, bc, lam=config.case["lam"],
                                   mu=config.case["mu"])


def solve_reference(mesh: pmesh.Mesh, config: RunConfig) -> np.ndarray:
    kind = config.case["kind"]
    bc = config.case["bc"]
    if kind == "electrostatic":
        return rs.solve_laplace(mesh, bc)
    return rs.solve_elasticity(mesh, bc, lam=config.case["lam"], mu=config.case["mu"])


def build_features(mesh: pmesh.Mesh, case: ph.PhysicsCase, config: RunConfig,
                   u_true: np.ndarray) -> np.ndarray:
    """Assemble the node-feature matrix from the configured recipe channels."""
    columns = []
    for channel in config.features["recipe"]:
        if channel == "bc_field":
            columns.append(case.dirichlet_values)
        else:
            noisy = rs.make_noisy_input(
                mesh, u_true, level=config.features["noise_level"],
                smoothing_steps=config.features["noise_smoothing"],
                seed=config.features["noise_seed"])
            columns.append(noisy.reshape(mesh.n_nodes, -1))
    feats = np.concatenate(columns, axis=1)
    if config.model["kind"] == "coord_mlp":
        feats = np.concatenate([mesh.coords, feats], axis=1)
    return feats


def model_config(mesh: pmesh.Mesh, case: ph.PhysicsCase, config: RunConfig,
                 features: np.ndarray) -> gn.ModelConfig:
    return gn.ModelConfig(
        node_in_dim=features.shape[1],
        edge_in_dim=mesh.dim + 1,
        out_channels=case.n_channels,
        hidden_width=config.model["hidden_width"],
        mlp_layers=config.model["mlp_layers"],
        n_processors=config.model["n_processors"],
        kind=config.model["kind"],
        split_decoder=config.model["split_decoder"])


def train_schedule(config: RunConfig) -> po.TrainSchedule:
    s = config.schedule
    return po.TrainSchedule(
        adam_epochs=s["adam_epochs"], adam_lr=s["adam_lr"],
        lbfgs_epochs=s["lbfgs_epochs"], lbfgs_lr=s["lbfgs_lr"],
        lbfgs_inner=s["lbfgs_inner"], lbfgs_line_search=s["lbfgs_line_search"],
        physics_weight=0.0 if s["loss"] == "mae" else 1.0,
        data_weight=1.0)


def _write_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_history_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "phase", "stat_u", "stat_lambda", "data", "total"])
        for row in po.history_rows(history):
            writer.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])


def _metrics(u_pred: np.ndarray, u_true: np.ndarray) -> dict:
    return {
        "relative_l1": ph.relative_error(u_pred, u_true, "l1"),
        "relative_l2": ph.relative_error(u_pred, u_true, "l2"),
        "relative_mse": ph.relative_mse(u_pred, u_true),
    }


def run_solve(config: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    mesh = get_mesh(config)
    u_true = solve_reference(mesh, config)
    stiffness = (fem.assemble_stiffness(mesh) if config.case["kind"] == "electrostatic"
                 else fem.assemble_elastic_stiffness(mesh, config.case["lam"],
                                                     config.case["mu"]))
    k = 1 if config.case["kind"] == "electrostatic" else mesh.dim
    dofs, _ = rs._dirichlet_dofs(mesh, config.case["bc"], k)
    residual = rs.system_residual(stiffness.matrix, u_true.reshape(-1), dofs)
    rs.save_field(u_true, out / "u_star.pigfield")
    report = {
        "config_hash": config.hash,
        "n_nodes": mesh.n_nodes,
        "residual": residual,
        "min_value": float(u_true.min()),
        "max_value": float(u_true.max()),
    }
    _write_json(report, out / "report.json")
    _write_json({"wall_time_s": time.perf_counter() - t0}, out / "timing.json")
    return report


def run_train(config: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    mesh = get_mesh(config)
    case = build_case(mesh, config)
    u_true = solve_reference(mesh, config)
    features = build_features(mesh, case, config, u_true)
    graph = pmesh.mesh_to_graph(mesh, features)
    params = gn.init_model(model_config(mesh, case, config, features), seed=config.seed)
    params = gn.fit_standardizer(params, graph)

    schedule = train_schedule(config)
    diverged = None
    try:
        params, history = po.train(case, graph, u_true, params, schedule)
    except po.TrainingDivergedError as exc:
        _write_history_csv(exc.history, out / "loss.csv")
        _write_json({"config_hash": config.hash, "diverged": True,
                     "message": str(exc)}, out / "metrics.json")
        raise
    _write_history_csv(history, out / "loss.csv")
    gn.save_checkpoint(params, out / "checkpoint.npz")

    u_pred, _ = gn.predict(params, graph)
    rs.save_field(u_pred, out / "u_pred.pigfield")
    metrics = _metrics(u_pred, u_true)
    metrics.update({
        "config_hash": config.hash,
        "seed": config.seed,
        "n_nodes": mesh.n_nodes,
        "n_epochs": len(history),
        "final_loss": history[-1].report.total if history else None,
    })
    _write_json(metrics, out / "metrics.json")
    _write_json({"wall_time_s": time.perf_counter() - t0}, out / "timing.json")
    return metrics


def run_eval(checkpoint_path, config: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    params = gn.load_checkpoint(checkpoint_path)
    mesh = get_mesh(config)
    case = build_case(mesh, config)
    u_true = solve_reference(mesh, config)
    features = build_features(mesh, case, config, u_true)
    if features.shape[1] != params.config.node_in_dim:
        raise ad.ShapeMismatchError(
            f"checkpoint expects {params.config.node_in_dim} input channels, "
            f"config produces {features.shape[1]}")
    graph = pmesh.mesh_to_graph(mesh, features)
    u_pred, _ = gn.predict(params, graph)
    rs.save_field(u_pred, out / "u_pred.pigfield")
    metrics = _metrics(u_pred, u_true)
    metrics.update({"config_hash": config.hash, "n_nodes": mesh.n_nodes})
    _write_json(metrics, out / "metrics.json")
    _write_json({"wall_time_s": time.perf_counter() - t0}, out / "timing.json")
    return metrics


# ---------------------------------------------------------------------------
# autodiff-gap demonstration


_PHI_SPECS = {
    "x1_squared": (lambda x: x ** 2, lambda x: 2.0 * x),
    "sin_x1": (np.sin, np.cos),
}


def _strip_mesh(nx: int, width: float = 2.0, height: float = 0.1) -> pmesh.Mesh:
    base = pmesh.rectangle_mesh(nx, 1)
    coords = base.coords * np.array([width, height])
    return pmesh.make_mesh(2, coords, base.elements, base.boundary_facets,
                           base.boundary_tags, validate=False)


def missing_link_derivative(alpha: float, beta: float, gamma: float,
                            phi, x: float) -> float:
    """Differentiate M = alpha*phi + beta*x + gamma on a tape where phi enters
    as a plain constant: the tape has no recorded link from phi back to x, so
    the derivative collapses to beta."""
    tape = ad.Tape()
    xv = tape.input(np.array([x]))
    phiv = tape.constant(np.array([phi(x)]))
    m = ad.add(tape, ad.add(tape, ad.scale(tape, phiv, alpha),
                            ad.scale(tape, xv, beta)),
               tape.constant(np.array([gamma])))
    tape.backward(ad.reduce_sum(tape, ad.reshape(tape, m, (1, 1))))
    return float(xv.grad[0])


def fem_kernel_derivative(alpha: float, beta: float, gamma: float, phi,
                          points, nx: int) -> np.ndarray:
    """x-derivative of the nodal field M via the element-gradient kernel."""
    mesh = _strip_mesh(nx)
    nodal = alpha * phi(mesh.coords[:, 0]) + beta * mesh.coords[:, 0] + gamma
    grads = fem.element_gradients(mesh, nodal)
    centroids = mesh.coords[mesh.elements].mean(axis=1)
    out = np.empty(len(points))
    for i, x in enumerate(points):
        element = int(np.argmin(np.abs(centroids[:, 0] - x)))
        out[i] = grads[element, 0]
    return out


def run_demo_gap(alpha: float = 2.0, beta: float = 3.0, gamma: float = 0.0,
                 phi_spec: str = "x1_squared", points=(0.5, 1.0, 1.5),
                 refinements=(8, 16, 32, 64, 128), out_dir=None) -> dict:
    """Contrast the true, chain-rule-with-missing-link, and FEM-kernel
    derivatives of the linear model M(phi, x) = alpha*phi(x) + beta*x + gamma."""
    if phi_spec not in _PHI_SPECS:
        raise ConfigError(f"unknown phi spec {phi_spec!r} (want one of {sorted(_PHI_SPECS)})")
    phi, dphi = _PHI_SPECS[phi_spec]
    points = np.asarray(points, dtype=np.float64)

    true = alpha * dphi(points) + beta
    missing = np.array([missing_link_derivative(alpha, beta, gamma, phi, x)
                        for x in points])
    finest = fem_kernel_derivative(alpha, beta, gamma, phi, points, max(refinements))

    errors = []
    h_values = []
    for nx in refinements:
        fem_vals = fem_kernel_derivative(alpha, beta, gamma, phi, points, nx)
        errors.append(float(np.abs(fem_vals - true).max()))
        h_values.append(2.0 / nx)
    log_h = np.log(np.asarray(h_values))
    log_e = np.log(np.maximum(np.asarray(errors), 1e-300))
    order = float(np.polyfit(log_h, log_e, 1)[0])

    rows = [{"x": float(x), "true": float(t), "missing_link": float(m),
             "fem_kernel": float(f)}
            for x, t, m, f in zip(points, true, missing, finest)]
    report = {
        "alpha": alpha, "beta": beta, "gamma": gamma, "phi": phi_spec,
        "rows": rows,
        "refinement_h": h_values,
        "refinement_error": errors,
        "observed_order": order,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(report, out / "demo_gap.json")
        with open(out / "demo_gap.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "true", "missing_link", "fem_kernel"])
            for row in rows:
                writer.writerow([repr(row["x"]), repr(row["true"]),
                                 repr(row["missing_link"]), repr(row["fem_kernel"])])
    return report


def format_demo_gap(report: dict) -> str:
    lines = [f"linear model M(phi, x) = {report['alpha']}*phi(x) + "
             f"{report['beta']}*x + {report['gamma']},  phi = {report['phi']}",
             f"{'x':>8} {'true dM/dx':>12} {'missing-link':>13} {'fem kernel':>12}"]
    for row in report["rows"]:
        lines.append(f"{row['x']:>8.3f} {row['true']:>12.6f} "
                     f"{row['missing_link']:>13.6f} {row['fem_kernel']:>12.6f}")
    lines.append(f"fem-kernel convergence order under refinement: "
                 f"{report['observed_order']:.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablation


ABLATION_VARIANTS = ("full", "mae_only", "coord_mlp")


def run_ablation(train_config: RunConfig, eval_config: RunConfig, out_dir) -> dict:
    """Train the full model, the MAE-only model, and the coordinate MLP on the
    training geometry; evaluate all three on the test geometry."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = []
    for variant in ABLATION_VARIANTS:
        raw = json.loads(train_config.canonical())
        if variant == "mae_only":
            raw["schedule"]["loss"] = "mae"
        if variant == "coord_mlp":
            raw["model"]["kind"] = "coord_mlp"
            raw["model"]["hidden_width"] = 128
        cfg_train = make_config(raw)
        raw_eval = json.loads(eval_config.canonical())
        raw_eval["schedule"] = raw["schedule"]
        raw_eval["model"] = raw["model"]
        cfg_eval = make_config(raw_eval)

        variant_dir = out / variant
        try:
            train_metrics = run_train(cfg_train, variant_dir)
            eval_metrics = run_eval(variant_dir / "checkpoint.npz", cfg_eval,
                                    variant_dir / "eval")
            rows.append({"variant": variant, "diverged": False,
                         "train_relative_l1": train_metrics["relative_l1"],
                         "test_relative_l1": eval_metrics["relative_l1"]})
        except (po.TrainingDivergedError, po.NonFiniteGradientError) as exc:
            rows.append({"variant": variant, "diverged": True,
                         "message": str(exc),
                         "train_relative_l1": None, "test_relative_l1": None})

    by_name = {row["variant"]: row for row in rows}
    orderings = {}
    if not any(row["diverged"] for row in rows):
        mlp_test = by_name["coord_mlp"]["test_relative_l1"]
        full_test = by_name["full"]["test_relative_l1"]
        mae_test = by_name["mae_only"]["test_relative_l1"]
        orderings = {
            "mlp_worse_than_full": mlp_test > full_test,
            "mlp_worse_than_mae": mlp_test > mae_test,
            "hybrid_not_worse_than_mae": full_test <= mae_test,
        }
    table = {"rows": rows, "orderings": orderings,
             "config_hash": train_config.hash}
    _write_json(table, out / "ablation.json")
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "diverged", "train_relative_l1", "test_relative_l1"])
        for row in rows:
            writer.writerow([row["variant"], row["diverged"],
                             repr(row["train_relative_l1"]) if row["train_relative_l1"] is not None else "",
                             repr(row["test_relative_l1"]) if row["test_relative_l1"] is not None else ""])
    _write_json({"wall_time_s": time.perf_counter() - t0}, out / "timing.json")
    return table


def format_ablation(table: dict) -> str:
    lines = [f"{'variant':>10} {'train rel L1':>13} {'test rel L1':>12}"]
    for row in table["rows"]:
        if row["diverged"]:
            lines.append(f"{row['variant']:>10} {'diverged':>13} {'-':>12}")
        else:
            lines.append(f"{row['variant']:>10} {row['train_relative_l1']:>13.5f} "
                         f"{row['test_relative_l1']:>12.5f}")
    for name, ok in table["orderings"].items():
        lines.append(f"ordering {name}: {'ok' if ok else 'VIOLATED'}")
    return "\n".join(lines)
