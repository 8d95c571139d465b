"""Closed-loop experiment orchestration and the benchmark metric suite.

An experiment runs the full pipeline for one (controller, seed) pair: build
the true plant (optionally with its uncertain third-mass parameters drawn
from the box, so the parametric uncertainty is real), collect exciting data
from it, estimate disturbance residuals against the nominal hybrid model,
then close the loop for T_run steps with extra disturbances injected during
a configured interval (inflated process noise plus a step force on the third
mass). Everything is seeded through named substreams so records are
bit-reproducible and the plant/noise realizations are shared across
controllers for paired comparisons.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .ambiguity import AmbiguitySpec, estimate_residuals
from .controllers import (
    ControllerConfig,
    DataBlocks,
    DeepcController,
    MdrController,
    MdrModel,
    OracleController,
    TerminalBox,
)
from .errors import ConfigError, DimensionMismatch, NonPositiveBase
from .plant import (
    MSD_N_KNOWN,
    MSD_P_KNOWN,
    MsdParams,
    NoiseSpec,
    ThetaBox,
    collect_data_full,
    msd_discrete_hybrid,
    partition_hybrid,
    sample_theta,
)
from .trajkit import Signal, persistently_exciting

CONTROLLER_IDS = ("deepc", "mdr", "oracle")

# Named seed substreams; shared streams must not depend on the controller id.
_STREAM_PLANT = 0
_STREAM_DATA = 1
_STREAM_NOISE = 2
_STREAM_SCENARIO = 3


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = 1
    plant: MsdParams = field(default_factory=MsdParams)
    theta_box: ThetaBox = field(default_factory=ThetaBox)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(0.1, 0.01))
    Ts: float = 0.1
    T_data: int = 150
    excitation_amplitude: float = 1.0
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    T_run: int = 150
    disturbance_interval: tuple[int, int] = (5, 15)
    disturbance_noise_inflation: float = 10.0
    disturbance_step_force: tuple[float, ...] = (0.0, 0.0, 1.0)
    reference: tuple[float, ...] = (1.0, 1.0, 1.0)
    sample_plant_theta: bool = True
    seeds: tuple[int, ...] = tuple(range(10))
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        lo, hi = self.disturbance_interval
        if not (0 <= lo <= hi <= self.T_run):
            raise ConfigError("disturbance interval must satisfy 0 <= start <= end <= T_run")

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(config_to_dict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class RunRecord:
    u: np.ndarray  # (T, m)
    y: np.ndarray  # (T, p)
    r: np.ndarray  # (T, p)
    stage_cost: np.ndarray  # (T,)
    controller_id: str
    seed: int
    config_digest: str
    dist_start: int
    fallback_count: int = 0

    def __post_init__(self) -> None:
        T = self.u.shape[0]
        if not (self.y.shape[0] == self.r.shape[0] == self.stage_cost.shape[0] == T):
            raise DimensionMismatch("run record series must have equal lengths")


@dataclass(frozen=True)
class MetricsReport:
    total_cost: float
    max_output_deviation: float
    settling_time_steps: int
    peak_to_peak: float

    def to_dict(self) -> dict:
        return {
            "total_cost": self.total_cost,
            "max_output_deviation": self.max_output_deviation,
            "settling_time_steps": self.settling_time_steps,
            "peak_to_peak": self.peak_to_peak,
        }


def total_cost(rec: RunRecord, Q: np.ndarray, R: np.ndarray) -> float:
    """Accumulated realized stage cost sum ||y-r||_Q^2 + ||u||_R^2."""
    err = rec.y - rec.r
    val = np.einsum("ti,ij,tj->", err, Q, err)
    val += np.einsum("ti,ij,tj->", rec.u, R, rec.u)
    return float(val)


def max_output_deviation(rec: RunRecord) -> float:
    return float(np.abs(rec.y - rec.r).max())


def settling_time(rec: RunRecord, band_fraction: float = 0.05) -> int:
    """First step after which every later sample stays inside the band.

    The band is ``band_fraction`` of the largest reference magnitude (with a
    tiny floor for zero references); returns the run length if the output
    never settles.
    """
    if band_fraction <= 0:
        raise DimensionMismatch("band_fraction must be positive")
    T = rec.y.shape[0]
    thresh = band_fraction * max(float(np.abs(rec.r).max()), 1e-6)
    ok = (np.abs(rec.y - rec.r) <= thresh).all(axis=1)
    # last violation determines settling
    bad = np.flatnonzero(~ok)
    if bad.size == 0:
        return 0
    last_bad = int(bad[-1])
    return T if last_bad == T - 1 else last_bad + 1


def peak_to_peak(rec: RunRecord) -> float:
    """Largest per-channel output swing from the disturbance onset onward."""
    tail = rec.y[rec.dist_start :]
    if tail.shape[0] == 0:
        tail = rec.y
    return float((tail.max(axis=0) - tail.min(axis=0)).max())


def improvement(base: float, new: float) -> float:
    """Relative improvement of ``new`` over ``base`` in percent."""
    if base <= 0:
        raise NonPositiveBase(f"baseline must be positive, got {base}")
    return 100.0 * (base - new) / base


def metrics_report(rec: RunRecord, cfg: ExperimentConfig) -> MetricsReport:
    return MetricsReport(
        total_cost=total_cost(rec, cfg.controller.Q, cfg.controller.R),
        max_output_deviation=max_output_deviation(rec),
        settling_time_steps=settling_time(rec),
        peak_to_peak=peak_to_peak(rec),
    )


def _stream_seed(seed: int, stream: int, extra: int | None = None) -> int:
    key = [int(seed), int(stream)] + ([int(extra)] if extra is not None else [])
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def run_experiment(cfg: ExperimentConfig, controller_id: str, seed: int) -> RunRecord:
    """Offline data collection plus the closed receding-horizon loop.

    The true plant's uncertain parameters are drawn from the box per seed
    (when ``sample_plant_theta`` is set) while the controllers keep the
    nominal model; the disturbance interval inflates process noise and adds
    the step force to the plant input. Deterministic per (config, controller,
    seed), and the plant/noise streams are controller-independent.
    """
    if controller_id not in CONTROLLER_IDS:
        raise ConfigError(f"unknown controller {controller_id!r}")
    ctrl_cfg = cfg.controller
    n_k, p_k = MSD_N_KNOWN, MSD_P_KNOWN

    theta_true = cfg.plant
    if cfg.sample_plant_theta:
        theta_true = sample_theta(
            cfg.theta_box, _stream_seed(seed, _STREAM_PLANT), nominal=cfg.plant
        )
    truth = msd_discrete_hybrid(theta_true, cfg.Ts)
    part_true = partition_hybrid(truth, n_k, p_k)

    # offline phase: excite the true plant, verify excitation, build blocks
    n_u = truth.n - n_k
    pe_order = ctrl_cfg.T_ini + ctrl_cfg.N + n_u
    u_d, xs_d, y_d = collect_data_full(
        truth, part_true, cfg.T_data, cfg.excitation_amplitude, cfg.noise,
        rng_seed=_stream_seed(seed, _STREAM_DATA), pe_order=pe_order,
    )
    y_u_d = Signal(y_d.data[:, p_k:])
    blocks = DataBlocks.from_data(u_d, y_u_d, ctrl_cfg.T_ini, ctrl_cfg.N)

    model = MdrModel.from_plant(cfg.plant, cfg.Ts, cfg.theta_box)
    w_dist, v_dist = estimate_residuals(
        model.nominal, u_d, y_d, Signal(xs_d.data[:, :n_k]), a_y=model.a_y
    )
    spec_w = AmbiguitySpec(w_dist, ctrl_cfg.eps_w)
    spec_v = AmbiguitySpec(v_dist, ctrl_cfg.eps_v)

    if controller_id == "oracle":
        controller = OracleController(truth, ctrl_cfg)
    elif controller_id == "deepc":
        controller = DeepcController(model, blocks, ctrl_cfg)
    else:
        controller = MdrController(model, blocks, ctrl_cfg, spec_w, spec_v)

    # online phase
    T = cfg.T_run
    p, m = truth.p, truth.m
    r_step = np.asarray(cfg.reference, dtype=float)
    r_window = Signal(np.tile(r_step, (ctrl_cfg.N, 1)))
    rng_noise = np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_NOISE])
    )
    w_base = rng_noise.normal(size=(T, truth.n))
    v_base = rng_noise.normal(size=(T, p))
    step_force = np.asarray(cfg.disturbance_step_force, dtype=float)
    lo_d, hi_d = cfg.disturbance_interval

    x = np.zeros(truth.n)
    u_series = np.zeros((T, m))
    y_series = np.zeros((T, p))
    r_series = np.tile(r_step, (T, 1))
    costs = np.zeros(T)
    for k in range(T):
        in_dist = lo_d <= k <= hi_d
        y_k = truth.Cd @ x + cfg.noise.sigma_v * v_base[k]
        known = x if controller_id == "oracle" else x[:n_k]
        step = controller.receding_step(
            y_k, known, r_window,
            rng_seed=_stream_seed(seed, _STREAM_SCENARIO, k),
        )
        u_k = step.u_applied
        err = y_k - r_step
        costs[k] = float(err @ ctrl_cfg.Q @ err + u_k @ ctrl_cfg.R @ u_k)
        u_series[k] = u_k
        y_series[k] = y_k
        sigma_w = cfg.noise.sigma_w * (cfg.disturbance_noise_inflation if in_dist else 1.0)
        u_plant = u_k + (step_force if in_dist else 0.0)
        x = truth.Ad @ x + truth.Bd @ u_plant + sigma_w * w_base[k]
    return RunRecord(
        u=u_series, y=y_series, r=r_series, stage_cost=costs,
        controller_id=controller_id, seed=seed, config_digest=cfg.digest(),
        dist_start=lo_d, fallback_count=controller.fallback_count,
    )


RUN_CSV_HEADER = "step,u0,u1,u2,y0,y1,y2,r0,r1,r2,stage_cost"


def record_to_csv(rec: RunRecord) -> str:
    """Run record as CSV text with the documented column layout."""
    out = io.StringIO()
    print(RUN_CSV_HEADER, file=out)
    T = rec.u.shape[0]
    for k in range(T):
        cells = (
            [str(k)]
            + [f"{v:.17g}" for v in rec.u[k]]
            + [f"{v:.17g}" for v in rec.y[k]]
            + [f"{v:.17g}" for v in rec.r[k]]
            + [f"{rec.stage_cost[k]:.17g}"]
        )
        print(",".join(cells), file=out)
    return out.getvalue()


def record_from_csv(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read back (u, y, r, stage_cost) arrays from a run CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader if row]
    arr = np.asarray(rows)
    m = sum(1 for h in header if h.startswith("u"))
    p = sum(1 for h in header if h.startswith("y"))
    return arr[:, :m], arr[:, m : m + p], arr[:, m + p : m + 2 * p], arr[:, -1]


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """JSON-ready dictionary mirror of the experiment configuration."""
    ctrl = cfg.controller
    return {
        "schema_version": cfg.schema_version,
        "plant": asdict(cfg.plant),
        "theta_box": {"k3_range": list(cfg.theta_box.k3_range),
                      "c3_range": list(cfg.theta_box.c3_range)},
        "noise": {"sigma_w": cfg.noise.sigma_w, "sigma_v": cfg.noise.sigma_v},
        "Ts": cfg.Ts,
        "T_data": cfg.T_data,
        "excitation_amplitude": cfg.excitation_amplitude,
        "controller": {
            "T_ini": ctrl.T_ini,
            "N": ctrl.N,
            "Q_diag": list(np.diag(ctrl.Q)),
            "R_diag": list(np.diag(ctrl.R)),
            "lambda_g": ctrl.lambda_g,
            "lambda_y": ctrl.lambda_y,
            "u_bounds": None if ctrl.u_bounds is None else
                [list(ctrl.u_bounds[0]), list(ctrl.u_bounds[1])],
            "y_bounds": None if ctrl.y_bounds is None else
                [list(ctrl.y_bounds[0]), list(ctrl.y_bounds[1])],
            "terminal_radius": None if ctrl.terminal_mode is None else
                ctrl.terminal_mode.radius,
            "M": ctrl.M,
            "eps_w": ctrl.eps_w,
            "eps_v": ctrl.eps_v,
            "integral_action": ctrl.integral_action,
            "k_integral": ctrl.k_integral,
            "solver_tol": ctrl.solver_tol,
            "solver_max_iter": ctrl.solver_max_iter,
        },
        "T_run": cfg.T_run,
        "disturbance_interval": list(cfg.disturbance_interval),
        "disturbance_noise_inflation": cfg.disturbance_noise_inflation,
        "disturbance_step_force": list(cfg.disturbance_step_force),
        "reference": list(cfg.reference),
        "sample_plant_theta": cfg.sample_plant_theta,
        "seeds": list(cfg.seeds),
        "out_dir": cfg.out_dir,
    }


_REQUIRED_KEYS = set(config_to_dict(ExperimentConfig()).keys())
_REQUIRED_CTRL_KEYS = set(config_to_dict(ExperimentConfig())["controller"].keys())


def config_from_dict(data: dict) -> ExperimentConfig:
    """Strict parse: unknown keys rejected, all keys required."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = set(data.keys()) - _REQUIRED_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = _REQUIRED_KEYS - set(data.keys())
    if missing:
        raise ConfigError(f"missing config keys: {sorted(missing)}")
    if data["schema_version"] != 1:
        raise ConfigError(f"unsupported schema_version {data['schema_version']}")
    ctrl = data["controller"]
    unknown = set(ctrl.keys()) - _REQUIRED_CTRL_KEYS
    if unknown:
        raise ConfigError(f"unknown controller keys: {sorted(unknown)}")
    missing = _REQUIRED_CTRL_KEYS - set(ctrl.keys())
    if missing:
        raise ConfigError(f"missing controller keys: {sorted(missing)}")
    try:
        controller = ControllerConfig(
            T_ini=int(ctrl["T_ini"]),
            N=int(ctrl["N"]),
            Q=np.diag([float(v) for v in ctrl["Q_diag"]]),
            R=np.diag([float(v) for v in ctrl["R_diag"]]),
            lambda_g=float(ctrl["lambda_g"]),
            lambda_y=float(ctrl["lambda_y"]),
            u_bounds=None if ctrl["u_bounds"] is None else (
                np.asarray(ctrl["u_bounds"][0], dtype=float),
                np.asarray(ctrl["u_bounds"][1], dtype=float),
            ),
            y_bounds=None if ctrl["y_bounds"] is None else (
                np.asarray(ctrl["y_bounds"][0], dtype=float),
                np.asarray(ctrl["y_bounds"][1], dtype=float),
            ),
            terminal_mode=None if ctrl["terminal_radius"] is None else
                TerminalBox(float(ctrl["terminal_radius"])),
            M=int(ctrl["M"]),
            eps_w=float(ctrl["eps_w"]),
            eps_v=float(ctrl["eps_v"]),
            integral_action=bool(ctrl["integral_action"]),
            k_integral=float(ctrl["k_integral"]),
            solver_tol=float(ctrl["solver_tol"]),
            solver_max_iter=int(ctrl["solver_max_iter"]),
        )
        return ExperimentConfig(
            schema_version=int(data["schema_version"]),
            plant=MsdParams(**{k: float(v) for k, v in data["plant"].items()}),
            theta_box=ThetaBox(
                tuple(float(v) for v in data["theta_box"]["k3_range"]),
                tuple(float(v) for v in data["theta_box"]["c3_range"]),
            ),
            noise=NoiseSpec(float(data["noise"]["sigma_w"]), float(data["noise"]["sigma_v"])),
            Ts=float(data["Ts"]),
            T_data=int(data["T_data"]),
            excitation_amplitude=float(data["excitation_amplitude"]),
            controller=controller,
            T_run=int(data["T_run"]),
            disturbance_interval=tuple(int(v) for v in data["disturbance_interval"]),
            disturbance_noise_inflation=float(data["disturbance_noise_inflation"]),
            disturbance_step_force=tuple(float(v) for v in data["disturbance_step_force"]),
            reference=tuple(float(v) for v in data["reference"]),
            sample_plant_theta=bool(data["sample_plant_theta"]),
            seeds=tuple(int(v) for v in data["seeds"]),
            out_dir=str(data["out_dir"]),
        )
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def default_config() -> ExperimentConfig:
    """The shipped benchmark configuration (the paper-protocol defaults)."""
    return ExperimentConfig()
