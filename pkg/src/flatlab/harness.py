"""Run configuration, preset execution, and the construction certificate table."""

from __future__ import annotations

import csv
import math
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import constructions as C
from .analysis import classification_summary, mse_test_loss, neuron_report
from .data import (LabeledDataset, build_complete_xor_set, sample_circle, sample_fresh_xor,
                   sample_uniform_ball, sample_xor, write_csv, xor_test_set)
from .losses import LossKind
from .models import ArchSpec, write_checkpoint
from .optimizers import TrainConfig, TrajectoryLog, train
from .plotting import emit_plot
from .presets import REDUCED_WIDTH, ExperimentPreset, Stage, get_preset
from .sharpness import PreconditionWarning, exact_trace, full_fd_trace, loss_closure

OUT_ENV = "FLATLAB_OUT"
TEST_SIZE = 10_000
TEST_SEED = 12345


class ConfigError(ValueError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "flatlab_runs"))


@dataclass(frozen=True)
class RunConfig:
    kind: str = "NoBias"
    depth: int = 2
    width: int = REDUCED_WIDTH
    d: int = 30
    n: int = 100
    activation: str = "relu"
    ln_eps: float = 0.01
    loss: str = "mse"
    data: str = "xor"
    stages: tuple = ()
    proj_radius: Optional[float] = None
    seed: int = 0
    log_every: Optional[int] = None
    init: str = "uniform"
    preset: Optional[str] = None
    scale: float = 1.0

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec(self.kind, self.width, self.d, self.depth, self.activation, self.ln_eps)

    def train_configs(self):
        out = []
        loss = LossKind.parse(self.loss)
        for st in self.stages:
            every = self.log_every or max(1, st.epochs // 50)
            out.append(TrainConfig(learning_rate=st.lr, weight_decay=st.wd, sam_rho=st.rho,
                                   batch_size=st.batch, epochs=st.epochs,
                                   projection_radius=self.proj_radius, seed=self.seed,
                                   log_every=every, loss=loss, init=self.init))
        return out

    def to_text(self) -> str:
        lines = [f"preset={self.preset or ''}", f"scale={self.scale:g}", f"arch={self.kind}",
                 f"depth={self.depth}", f"m={self.width}", f"d={self.d}", f"n={self.n}",
                 f"act={self.activation}", f"ln_eps={self.ln_eps:.17g}", f"loss={self.loss}",
                 f"data={self.data}", f"init={self.init}", f"seed={self.seed}",
                 f"proj_radius={'' if self.proj_radius is None else f'{self.proj_radius:g}'}",
                 f"log_every={self.log_every or ''}"]
        for st in self.stages:
            b = "n" if st.batch is None else st.batch
            lines.append(f"stage={st.lr:g},{st.rho:g},{b},{st.wd:g},{st.epochs}")
        return "\n".join(lines) + "\n"


def from_preset(preset: ExperimentPreset, scale: float = 1.0, seed: int = 0,
                width: Optional[int] = None) -> RunConfig:
    if not 0 < scale <= 1:
        raise ConfigError("scale must lie in (0, 1]")
    arch = preset.arch(scale, width)
    stages = tuple(replace(st, epochs=st.scaled_epochs(scale)) for st in preset.stages)
    return RunConfig(kind=preset.kind, depth=preset.depth, width=arch.width, d=preset.d,
                     n=preset.n, activation=preset.activation, ln_eps=preset.ln_eps,
                     loss=preset.loss, data=preset.data, stages=stages,
                     proj_radius=preset.proj_radius, seed=seed, init=preset.init,
                     preset=preset.id, scale=scale)


_SINGLE_STAGE = ("lr", "wd", "rho", "batch", "epochs")
_KEYS = {"arch", "depth", "m", "d", "n", "act", "ln_eps", "loss", "lr", "wd", "rho", "batch",
         "epochs", "proj_radius", "seed", "log_every", "preset", "scale", "stage", "data", "init"}


def _parse_batch(v):
    return None if v in ("n", "full", "") else int(v)


def parse_config(items) -> RunConfig:
    """Build a RunConfig from ``key=value`` lines (a string or an iterable).

    ``preset=<id>`` (with optional ``scale``) seeds every field; remaining
    keys override it.  ``stage=lr,rho,batch,wd,epochs`` lines replace the
    stage list; single-stage keys (lr, wd, rho, batch, epochs) edit a single
    stage in place.
    """
    if isinstance(items, str):
        items = items.splitlines()
    kv = {}
    stage_lines = []
    for raw in items:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        if k == "stage":
            stage_lines.append(v)
        else:
            kv[k] = v
    seed = int(kv.get("seed", 0))
    width = int(kv["m"]) if kv.get("m") else None
    if kv.get("preset"):
        cfg = from_preset(get_preset(kv["preset"]), float(kv.get("scale", 1.0)), seed, width)
    else:
        cfg = RunConfig(seed=seed, scale=float(kv.get("scale", 1.0)))
        if width is not None:
            cfg = replace(cfg, width=width)
    fields = {}
    conv = {"arch": ("kind", str), "depth": ("depth", int), "d": ("d", int), "n": ("n", int),
            "act": ("activation", str), "ln_eps": ("ln_eps", float), "loss": ("loss", str),
            "data": ("data", str), "init": ("init", str)}
    for k, (name, fn) in conv.items():
        if kv.get(k):
            fields[name] = fn(kv[k])
    if "proj_radius" in kv:
        fields["proj_radius"] = float(kv["proj_radius"]) if kv["proj_radius"] else None
    if kv.get("log_every"):
        fields["log_every"] = int(kv["log_every"])
    cfg = replace(cfg, **fields)
    if stage_lines:
        stages = []
        for s in stage_lines:
            parts = [p.strip() for p in s.split(",")]
            if len(parts) != 5:
                raise ConfigError(f"stage needs lr,rho,batch,wd,epochs: {s!r}")
            stages.append(Stage(float(parts[0]), float(parts[1]), _parse_batch(parts[2]),
                                float(parts[3]), int(float(parts[4]))))
        cfg = replace(cfg, stages=tuple(stages))
    if any(k in kv for k in _SINGLE_STAGE):
        if len(cfg.stages) > 1:
            raise ConfigError("single-stage keys cannot edit a staged preset; use stage= lines")
        base = cfg.stages[0] if cfg.stages else Stage(0.01, 0.0, None, 0.0, 1000)
        ch = {}
        for k, name, fn in (("lr", "lr", float), ("wd", "wd", float), ("rho", "rho", float),
                            ("epochs", "epochs", lambda v: int(float(v)))):
            if k in kv:
                ch[name] = fn(kv[k])
        if "batch" in kv:
            ch["batch"] = _parse_batch(kv["batch"])
        cfg = replace(cfg, stages=(replace(base, **ch),))
    cfg.arch  # validates the architecture fields
    if cfg.data not in ("xor", "ball", "circle"):
        raise ConfigError(f"unknown data source {cfg.data!r}")
    return cfg


def datasets(cfg: RunConfig):
    """(train, test) for a run; the test draw is independent of the run seed."""
    if cfg.data == "xor":
        return sample_xor(cfg.d, cfg.n, cfg.seed), xor_test_set(cfg.d, TEST_SIZE, TEST_SEED)
    if cfg.data == "ball":
        return (sample_uniform_ball(cfg.d, cfg.n, cfg.seed),
                sample_uniform_ball(cfg.d, TEST_SIZE, TEST_SEED))

    def label(v):
        return v[1]

    return (sample_circle(cfg.n, label, d=cfg.d, seed=cfg.seed),
            sample_circle(TEST_SIZE, label, d=cfg.d, seed=TEST_SEED))


@dataclass
class RunResult:
    directory: Path
    params: object
    log: TrajectoryLog
    train: LabeledDataset
    test: LabeledDataset
    config: RunConfig
    final_trace: Optional[float] = None
    test_mse: float = math.nan


def run_config(cfg: RunConfig, out_dir=None, plots: bool = True, monitor=None) -> RunResult:
    """Execute every stage of ``cfg`` and persist the run directory.

    ``monitor`` is forwarded to ``train`` for every stage.
    """
    spec = cfg.arch
    train_set, test_set = datasets(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = None
    log = TrajectoryLog()
    offset = 0
    for k, tc in enumerate(cfg.train_configs()):
        params, part = train(spec, train_set, test_set, tc, init=params, rng=rng,
                             epoch_offset=offset, log_start=(k == 0), monitor=monitor)
        log.extend(part)
        offset += tc.epochs
    result = RunResult(Path(out_dir) if out_dir else None, params, log, train_set, test_set, cfg)
    if params is not None:
        result.test_mse = mse_test_loss(spec, params, test_set, reference=train_set)
        loss = LossKind.parse(cfg.loss)
        if loss.variant != "truncated":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", PreconditionWarning)
                try:
                    result.final_trace = exact_trace(spec, params, train_set, loss)
                except ValueError:
                    result.final_trace = None
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.txt").write_text(cfg.to_text())
        write_csv(train_set, d / "train.csv")
        log.write_csv(d / "trajectory.csv")
        if params is not None:
            write_checkpoint(spec, params, d / "final.ckpt")
        if plots and len(log):
            emit_plot(d / "trajectory.csv", ["train_loss", "test_loss"], d / "loss.svg",
                      log_y=True, title="loss")
            emit_plot(d / "trajectory.csv", ["zero_one_error"], d / "error.svg",
                      title="test zero-one error")
            emit_plot(d / "trajectory.csv", ["hutchinson_trace", "jac_surrogate"],
                      d / "sharpness.svg", title="sharpness")
    return result


def run_directory(preset_id: str, scale: float, seed: int, root=None) -> Path:
    root = Path(root) if root is not None else output_root()
    return root / preset_id / f"seed{seed}_scale{scale:g}"


def run_preset(preset_id: str, scale: float = 1.0, seed: int = 0, root=None,
               width: Optional[int] = None, plots: bool = True) -> RunResult:
    preset = get_preset(preset_id)
    out = run_directory(preset_id, scale, seed, root)
    if not preset.trains:
        return _construction_preset(preset, seed, out)
    cfg = from_preset(preset, scale, seed, width)
    result = run_config(cfg, out, plots)
    if "neuron_report" in preset.extras:
        rep = neuron_report(result.params)
        rep.write_csv(out / "neurons.csv")
        (out / "neurons.txt").write_text(rep.summary() + "\n")
    return result


def _construction_preset(preset, seed, out):
    out.mkdir(parents=True, exist_ok=True)
    ds = sample_circle(preset.n, lambda v: 1.0 if v[0] * v[1] >= 0 else -1.0, d=preset.d,
                       seed=seed)
    spec, params = C.memorize_bias(ds)
    cert = C.certify(preset.construction, spec, params, ds)
    write_certificates([cert], out / "certificate.csv")
    write_csv(ds, out / "train.csv")
    write_checkpoint(spec, params, out / "final.ckpt")
    (out / "activation_regions.svg").write_text(activation_region_svg(spec, params, ds))
    return RunResult(out, params, TrajectoryLog(), ds, ds, None)


def activation_region_svg(spec, params, ds, size=400, grid=80) -> str:
    """Unit-square raster of which neuron is active, with the data points on top."""
    lim = 1.5
    cells = []
    palette = ["#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94", "#f7b6d2",
               "#dbdb8d", "#9edae5", "#c7c7c7"]
    step = 2 * lim / grid
    px = size / grid
    for a in range(grid):
        for b in range(grid):
            x = np.array([-lim + (a + 0.5) * step, lim - (b + 0.5) * step])
            act = C.hidden_activations(spec, params, x[None, :])[0][0]
            if act.max() > 0:
                c = palette[int(np.argmax(act)) % len(palette)]
                cells.append(f'<rect x="{a * px:.2f}" y="{b * px:.2f}" width="{px:.2f}" '
                             f'height="{px:.2f}" fill="{c}"/>')
    pts = []
    for x, y in zip(ds.inputs, ds.labels):
        cx = (x[0] + lim) / (2 * lim) * size
        cy = (lim - x[1]) / (2 * lim) * size
        pts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="4" '
                   f'fill="{"black" if y > 0 else "white"}" stroke="black"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
            f'<rect width="{size}" height="{size}" fill="white"/>\n'
            + "\n".join(cells + pts) + "\n</svg>\n")


# certificate table --------------------------------------------------------

CERT_COLUMNS = C.ConstructionCertificate.FIELDS + ("checked", "passed")
GAP_TOL = 1e-4
RESIDUAL_TOL = 1e-8


def write_certificates(certs, path, checked=None, passed=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CERT_COLUMNS)
        for k, c in enumerate(certs):
            row = c.csv_row()
            ch = True if checked is None else checked[k]
            ok = "" if passed is None else passed[k]
            w.writerow([_fmt(row[f]) for f in C.ConstructionCertificate.FIELDS] + [ch, ok])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.12g}"
    return "" if v is None else v


CONSTRUCTION_KINDS = ("memorize_bias", "memorize_bias_depth3", "good_xor_bias",
                      "good_xor_bias_printed", "memorize_simln", "bad_simln_xor",
                      "good_simln_xor", "good_sbn_xor", "good_polygon", "good_circle")


def build_construction(kind: str, d: int, n: int, seed: int = 0, ln_eps: float = 1.0,
                       sbn_scale: float = 100.0):
    """(spec, params, train, eval set, metric) for a named construction."""
    if kind in ("memorize_bias", "memorize_bias_depth3", "memorize_simln", "bad_simln_xor"):
        ds = sample_xor(d, n, seed, distinct=True)
        ev = sample_fresh_xor(d, 1000, ds, seed + 1)
        if kind == "memorize_bias":
            spec, p = C.memorize_bias(ds)
        elif kind == "memorize_bias_depth3":
            spec, p = C.memorize_bias(ds, depth=3)
        elif kind == "memorize_simln":
            spec, p = C.memorize_simln(ds, ln_eps)
        else:
            spec, p = C.bad_simln_xor(ds, ln_eps)
        return spec, p, ds, ev, "zero-one"
    if kind in ("good_xor_bias", "good_xor_bias_printed", "good_simln_xor"):
        ds = xor_test_set(d, TEST_SIZE, TEST_SEED)
        if kind == "good_simln_xor":
            spec, p = C.good_simln_xor(d, ln_eps)
        else:
            spec, p = C.good_xor_bias(d, r_mode="printed" if kind.endswith("printed") else "equality")
        return spec, p, ds, ds, "zero-one"
    if kind == "good_sbn_xor":
        ds = build_complete_xor_set(d)
        spec, p = C.good_sbn_xor(ds, sbn_scale)
        return spec, p, ds, xor_test_set(d, TEST_SIZE, TEST_SEED), "zero-one"
    if kind == "good_polygon":
        rng = np.random.default_rng(seed)
        k = max(3, min(n, 12))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        labs = rng.choice(np.array([-1.0, 1.0]), size=k)

        def label(v):
            a = np.mod(np.arctan2(v[1], v[0]), 2 * np.pi)
            return labs[int(np.argmin(np.abs(np.angle(np.exp(1j * (ang - a))))))]

        heads = np.column_stack([np.cos(ang), np.sin(ang)])
        pad = np.full((k, d - 2), 1.0 / np.sqrt(d - 2)) if d > 2 else np.zeros((k, 0))
        X = np.tile(np.column_stack([heads, pad]), (max(1, n // k), 1))
        ds = LabeledDataset(X, np.array([label(v) for v in X[:, :2]]), "circle")
        spec, p = C.good_polygon(ds, 2)
        return spec, p, ds, ds, "zero-one"
    if kind == "good_circle":
        def label(v):
            return v[1]

        ds = sample_circle(n, label, R=2.0 if d > 2 else 1.0, d=d, seed=seed)
        ev = sample_circle(TEST_SIZE, label, R=2.0 if d > 2 else 1.0, d=d, seed=seed + 1)
        spec, p = C.good_circle(ds)
        return spec, p, ds, ev, "mse"
    raise ConfigError(f"unknown construction {kind!r}; known: {', '.join(CONSTRUCTION_KINDS)}")


@dataclass
class VerifyRow:
    certificate: C.ConstructionCertificate
    checked: bool
    passed: bool


def verify_all(d_small: int = 10, n_small: int = 40, seed: int = 0, transform=None,
               ln_eps: float = 1.0):
    """Certificate for every construction; returns (rows, all_passed).

    ``good_xor_bias_printed`` is a discrepancy report and is not checked.
    The SimBN row carries the trace sweep over first-layer scales 1, 10,
    100 and passes when it is strictly decreasing with the last value
    within GAP_TOL of the limit.  ``transform(kind, spec, params)`` may
    alter parameters before certification (sensitivity control).
    """
    if d_small > 12:
        raise ConfigError("verify_all is sized for d <= 12")
    rows = []
    for kind in CONSTRUCTION_KINDS:
        spec, p, ds, ev, metric = build_construction(kind, d_small, n_small, seed, ln_eps)
        if transform is not None:
            p = transform(kind, spec, p)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PreconditionWarning)
            cert = C.certify(kind, spec, p, ds, ev, metric=metric)
        checked = kind != "good_xor_bias_printed"
        ok = cert.interpolation_residual <= RESIDUAL_TOL and cert.relative_gap <= GAP_TOL
        if kind == "good_sbn_xor":
            sweep = []
            for s in (1.0, 10.0, 100.0):
                sp, ps = C.good_sbn_xor(ds, s)
                if transform is not None:
                    ps = transform(kind, sp, ps)
                sweep.append(exact_trace(sp, ps, ds, tol=np.inf))
            cert.note = "scale sweep traces " + " > ".join(f"{t:.6g}" for t in sweep)
            ok = ok and all(a > b for a, b in zip(sweep, sweep[1:]))
        if kind == "good_xor_bias_printed":
            cert.note = f"printed r=(d^2+1)^(1/4); excess over minimum {cert.relative_gap:.4g}"
        rows.append(VerifyRow(cert, checked, bool(ok)))
    return rows, all(r.passed for r in rows if r.checked)


def sweep(preset_id: str, seeds, scale: float = 1.0, workers: int = 2, root=None):
    """Independent runs of one preset over several seeds, indexed in one CSV."""
    root = Path(root) if root is not None else output_root()
    root.mkdir(parents=True, exist_ok=True)
    index = root / f"{preset_id}_sweep.csv"
    lock = threading.Lock()
    with open(index, "w", newline="") as fh:
        csv.writer(fh).writerow(["seed", "directory", "train_loss", "zero_one_error",
                                 "hutchinson_trace"])

    def one(seed):
        res = run_preset(preset_id, scale, seed, root)
        last = res.log.last if len(res.log) else {}
        with lock, open(index, "a", newline="") as fh:
            csv.writer(fh).writerow([seed, res.directory, last.get("train_loss", ""),
                                     last.get("zero_one_error", ""),
                                     last.get("hutchinson_trace", "")])
        return res

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, seeds))
    return results, index


def fd_check(spec, params, ds, loss=None):
    loss = loss or LossKind("mse")
    return full_fd_trace(loss_closure(spec, ds, loss), params.flatten())


def summarize(result: RunResult) -> str:
    last = result.log.last
    err, mse = classification_summary(result.config.arch, result.params, result.test,
                                      reference=result.train)
    return (f"epoch {last['epoch']}: train loss {last['train_loss']:.4g}, "
            f"test zero-one {err:.4f}, test mse {mse:.4g}, "
            f"hutchinson {last['hutchinson_trace']:.4g}")
