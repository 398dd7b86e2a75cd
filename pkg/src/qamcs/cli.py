"""Command-line harness tying the pipeline together.

Subcommands, one per pipeline stage:

    phantom      generate a ground-truth speed-of-sound map
    acquire      raster-scan the phantom through the echo simulator
    sample       build a sampling operator and measure a map
    reconstruct  solve one sampled problem with a chosen method
    train        fit an unfolded model on synthetic phantoms
    eval         score a reconstruction against a reference map
    compare      run every configured method end to end and emit a report

Configuration is a TOML file with one section per module; every
hyperparameter of the default experiment (compression ratio 0.25, 6
unfolded iterations, learning rate 1e-4, batch size 32, 100 epochs)
surfaces as a key.  All randomness is seeded from the config, so a given
config file always produces bit-identical outputs; ``--seed`` rederives
every section seed from one master value.

Exit codes: 0 on success, 1 when any method fails, 2 on configuration
errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import amp as amp_mod
from . import metrics as metrics_mod
from . import qamsim, sampling, unfolded
from .core import ParametricMap, block_partition, load_map, map_to_csv, save_map, save_mask

METHODS = ("amp-soft", "amp-cauchy", "unfolded", "unfolded-trainedA")
SAMPLING_KINDS = ("gaussian", "identity", "spiral", "random", "raster")


class ConfigError(ValueError):
    pass


class MethodError(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "phantom": {
        "rows": 64,
        "cols": 64,
        "n_inclusions": 3,
        "value_max": 1650.0,
        "seed": 7,
        "thickness": 6e-6,
        "coupling_speed": 1480.0,
    },
    "pulse": {
        "f0": 500e6,
        "fractional_bandwidth": 0.6,
        "fs": 4e9,
        "duration": 1e-7,
    },
    "acquire": {
        "noise_std": 0.0,
        "seed": 23,
        "rf_export": False,
    },
    "sampling": {
        "kind": "gaussian",
        "ratio": 0.25,
        "seed": 11,
        "block_size": 16,
        "noise_std": 0.0,
        "per_method": {"amp-cauchy": "spiral"},
    },
    "amp": {
        "max_iters": 150,
        "tol": 1e-6,
        "onsager": False,
        "normalize": True,
        "tau": 1.0,
        "levels": 3,
        "lam": None,
        "workers": 1,
    },
    "unfolded": {
        "iterations": 6,
        "channels": 8,
        "seed": 3,
        "center": 1500.0,
        "scale": 100.0,
        "kernel_scale": 0.05,
    },
    "train": {
        "batch_size": 32,
        "learning_rate": 1e-4,
        "epochs": 100,
        "seed": 5,
        "n_train": 16,
    },
    "report": {
        "timing": True,
    },
    "methods": list(METHODS),
}


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: dict(DEFAULT_CONFIG))

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def methods(self):
        return list(self.raw["methods"])

    def validate(self):
        r = self.raw
        if not r["methods"]:
            raise ConfigError("methods list must not be empty")
        for m in r["methods"]:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if not 0.0 < r["sampling"]["ratio"] <= 1.0:
            raise ConfigError("sampling ratio must be in (0, 1]")
        if r["sampling"]["kind"] not in SAMPLING_KINDS:
            raise ConfigError(f"unknown sampling kind {r['sampling']['kind']!r}")
        for m, kind in r["sampling"].get("per_method", {}).items():
            if kind not in SAMPLING_KINDS:
                raise ConfigError(f"unknown sampling kind {kind!r} for method {m!r}")
        if r["train"]["epochs"] < 1 or r["train"]["batch_size"] < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if r["train"]["learning_rate"] < 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if r["unfolded"]["iterations"] < 1:
            raise ConfigError("unfolded.iterations must be >= 1")
        return self


def load_config(path=None, seed_override=None) -> ExperimentConfig:
    raw = dict(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                user = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        raw = _merge(raw, user)
    if seed_override is not None:
        raw = _merge(
            raw,
            {
                "phantom": {"seed": seed_override},
                "acquire": {"seed": seed_override + 1},
                "sampling": {"seed": seed_override + 2},
                "unfolded": {"seed": seed_override + 3},
                "train": {"seed": seed_override + 4},
            },
        )
    return ExperimentConfig(raw).validate()


# ---------------------------------------------------------------------------
# Pipeline pieces
# ---------------------------------------------------------------------------


def _make_phantom(cfg, seed=None):
    p = cfg["phantom"]
    return qamsim.generate_phantom(
        rows=p["rows"],
        cols=p["cols"],
        n_inclusions=p["n_inclusions"],
        value_max=p["value_max"],
        seed=p["seed"] if seed is None else seed,
        thickness=p["thickness"],
        c0=p["coupling_speed"],
    )


def _make_pulse(cfg):
    p = cfg["pulse"]
    return qamsim.synth_reference(
        p["f0"], p["fractional_bandwidth"], p["fs"], p["duration"]
    )


def _make_operator(cfg, kind, rows, cols):
    s = cfg["sampling"]
    b = s["block_size"]
    n = b * b
    if kind == "gaussian":
        m = max(1, int(round(s["ratio"] * n)))
        return sampling.gaussian_matrix(m, n, seed=s["seed"])
    if kind == "identity":
        return sampling.identity_matrix(n)
    if kind == "spiral":
        return sampling.spiral_mask(rows, cols, s["ratio"])
    if kind == "random":
        return sampling.random_mask(rows, cols, s["ratio"], seed=s["seed"])
    if kind == "raster":
        return sampling.raster_mask(rows, cols, s["ratio"])
    raise ConfigError(f"unknown sampling kind {kind!r}")


def _denoiser_from_config(cfg, kind):
    a = cfg["amp"]
    if kind == "soft":
        return amp_mod.DenoiserSpec(
            kind="soft_wavelet", lam=a["lam"], tau=a["tau"], levels=a["levels"]
        )
    return amp_mod.DenoiserSpec(kind="cauchy_map", levels=max(1, a["levels"]))


def _train_dataset(cfg):
    t = cfg["train"]
    base = cfg["phantom"]["seed"] + 1000
    return [
        _make_phantom(cfg, seed=base + i).sos_map.data for i in range(t["n_train"])
    ]


def _train_unfolded(cfg, trainable_a: bool):
    u = cfg["unfolded"]
    s = cfg["sampling"]
    model = unfolded.init_model(
        k=u["iterations"],
        block_size=s["block_size"],
        ratio=s["ratio"],
        channels=u["channels"],
        seed=u["seed"],
        trainable_a=trainable_a,
        deblock=trainable_a,
        center=u["center"],
        scale=u["scale"],
        kernel_scale=u["kernel_scale"],
        matrix_seed=s["seed"],
    )
    t = cfg["train"]
    config = unfolded.TrainConfig(
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        epochs=t["epochs"],
        seed=t["seed"],
    )
    return unfolded.train_model(model, _train_dataset(cfg), config)


def run_method(cfg, method, truth: ParametricMap, trained=None):
    """Sample the ground truth and reconstruct it with one method.

    ``trained`` optionally carries a pre-trained model for the unfolded
    methods.  Returns ``(reconstruction, sampling_kind, achieved_ratio)``.
    """
    s = cfg["sampling"]
    kind = s.get("per_method", {}).get(method, s["kind"])
    op = _make_operator(cfg, kind, truth.rows, truth.cols)
    ratio = sampling.compression_ratio(op)

    if method in ("amp-soft", "amp-cauchy"):
        problem = sampling.build_problem(
            truth, op, noise_std=s["noise_std"], seed=s["seed"]
        )
        den = _denoiser_from_config(cfg, "soft" if method == "amp-soft" else "cauchy")
        a = cfg["amp"]
        recon, _ = amp_mod.amp_reconstruct(
            problem,
            den,
            max_iters=a["max_iters"],
            onsager=a["onsager"],
            tol=a["tol"],
            workers=a["workers"],
            normalize=a["normalize"],
        )
        return recon, kind, ratio

    if method in ("unfolded", "unfolded-trainedA"):
        if isinstance(op, sampling.BinaryMask):
            raise MethodError("mask sampling is incompatible with the block-based model")
        model = trained
        if model is None:
            model, _ = _train_unfolded(cfg, trainable_a=(method == "unfolded-trainedA"))
        problem = sampling.build_problem(
            truth, model.a, noise_std=s["noise_std"], seed=s["seed"]
        )
        recon = unfolded.unfolded_forward(problem.y, model, problem.grid)
        return recon, kind, sampling.compression_ratio(model.a)

    raise MethodError(f"unknown method {method!r}")


@dataclass
class ReportRow:
    method: str
    sampling: str = ""
    ratio: float = float("nan")
    psnr_db: float = float("nan")
    rmse: float = float("nan")
    ssim: float = float("nan")
    seconds: float = 0.0
    error: str = ""


def compare_methods(cfg: ExperimentConfig, out_dir) -> list:
    """Run every configured method; one :class:`ReportRow` per method.

    A failing method contributes a row carrying its error message; the
    remaining methods still run.  Artifacts (ground truth, reconstructions,
    checkpoints, loss curves) land under ``out_dir`` with fixed names.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = _make_phantom(cfg).sos_map
    save_map(truth, out / "truth.qamp")
    timing = bool(cfg["report"]["timing"])

    trained = {}
    rows = []
    for method in cfg.methods:
        t0 = time.perf_counter()
        row = ReportRow(method=method)
        try:
            if method in ("unfolded", "unfolded-trainedA") and method not in trained:
                model, curve = _train_unfolded(
                    cfg, trainable_a=(method == "unfolded-trainedA")
                )
                trained[method] = model
                unfolded.save_model(model, out / f"model_{method}.qamu")
                unfolded.loss_curve_to_csv(curve, out / f"loss_{method}.csv")
            recon, kind, ratio = run_method(
                cfg, method, truth, trained=trained.get(method)
            )
            save_map(recon, out / f"recon_{method}.qamp")
            report = metrics_mod.evaluate(truth, recon)
            row.sampling = kind
            row.ratio = ratio
            row.psnr_db = report.psnr_db
            row.rmse = report.rmse
            row.ssim = report.ssim
        except Exception as exc:  # method isolation: record and continue
            row.error = f"{type(exc).__name__}: {exc}"
        row.seconds = time.perf_counter() - t0 if timing else 0.0
        rows.append(row)
    export_report(rows, out / "report.csv")
    return rows


def export_report(rows, path) -> None:
    """CSV report, stable column order, 'inf' literal for infinite PSNR.

    The ``error`` column is appended only when some row actually failed, so
    clean reports keep the exact seven-column header.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to export")
    fmt = metrics_mod.format_metric
    with_error = any(r.error for r in rows)
    with open(path, "w") as fh:
        header = "method,sampling,ratio,psnr_db,rmse,ssim,seconds"
        fh.write(header + (",error\n" if with_error else "\n"))
        for r in rows:
            if r.error:
                fields = [r.method, r.sampling, "", "", "", "", fmt(r.seconds), r.error]
                fh.write(",".join(fields) + "\n")
                continue
            fields = [
                r.method,
                r.sampling,
                fmt(r.ratio),
                fmt(r.psnr_db),
                fmt(r.rmse),
                fmt(r.ssim),
                fmt(r.seconds),
            ]
            if with_error:
                fields.append("")
            fh.write(",".join(fields) + "\n")


def parse_report(path) -> list:
    """Read back an :func:`export_report` CSV into ReportRow objects."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            rec = dict(zip(header, parts))
            if rec.get("error"):
                rows.append(
                    ReportRow(
                        method=rec["method"],
                        sampling=rec["sampling"],
                        seconds=float(rec["seconds"]),
                        error=rec["error"],
                    )
                )
                continue
            rows.append(
                ReportRow(
                    method=rec["method"],
                    sampling=rec["sampling"],
                    ratio=float(rec["ratio"]),
                    psnr_db=float(rec["psnr_db"]),
                    rmse=float(rec["rmse"]),
                    ssim=float(rec["ssim"]),
                    seconds=float(rec["seconds"]),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_phantom(cfg, out: Path, args) -> int:
    phantom = _make_phantom(cfg)
    save_map(phantom.sos_map, out / "phantom.qamp")
    map_to_csv(phantom.sos_map, out / "phantom.csv")
    print(f"phantom {phantom.sos_map.rows}x{phantom.sos_map.cols} -> {out / 'phantom.qamp'}")
    return 0


def _cmd_acquire(cfg, out: Path, args) -> int:
    phantom = _make_phantom(cfg)
    pulse = _make_pulse(cfg)
    a = cfg["acquire"]
    result = qamsim.acquire_and_map(
        phantom, pulse, noise_std=a["noise_std"], seed=a["seed"]
    )
    save_map(phantom.sos_map, out / "phantom.qamp")
    save_map(result.sos_map, out / "acquired.qamp")
    if a["rf_export"]:
        cube = _rf_cube(phantom, pulse, a)
        qamsim.save_rf_cube(cube, pulse.fs, pulse.f0, out / "rf_cube.f32")
    print(
        f"acquired map -> {out / 'acquired.qamp'} "
        f"({result.n_unresolved} unresolved pixels)"
    )
    return 0


def _rf_cube(phantom, pulse, acquire_cfg):
    sos = phantom.sos_map.data
    n = len(pulse.samples)
    cube = np.empty((sos.shape[0], sos.shape[1], n), dtype=np.float32)
    for i in range(sos.shape[0]):
        for j in range(sos.shape[1]):
            dt = 2.0 * phantom.thickness / sos[i, j]
            rec = qamsim.synth_echo(
                pulse, qamsim.EchoParams(a1=0.3, a2=0.5, t1=20e-9, t2=20e-9 + dt)
            )
            samples = rec.samples
            if acquire_cfg["noise_std"] > 0:
                rng = np.random.default_rng([acquire_cfg["seed"], i, j])
                samples = samples + acquire_cfg["noise_std"] * rng.standard_normal(n)
            cube[i, j] = samples
    return cube


def _cmd_sample(cfg, out: Path, args) -> int:
    if args.map:
        truth = load_map(args.map)
        if not isinstance(truth, ParametricMap):
            raise ConfigError("--map must point at a v1 map file")
    else:
        truth = _make_phantom(cfg).sos_map
    s = cfg["sampling"]
    op = _make_operator(cfg, s["kind"], truth.rows, truth.cols)
    save_map(truth, out / "truth.qamp")
    if isinstance(op, sampling.MeasurementMatrix):
        save_map(ParametricMap(op.entries, unit="matrix"), out / "operator.qamp")
        y, _ = sampling.apply_sampling(truth, op, noise_std=s["noise_std"], seed=s["seed"])
        save_map(ParametricMap(y, unit="measurements"), out / "measurements.qamp")
    else:
        save_mask(op.cells, out / "operator.qamp", unit=op.pattern_kind)
        y = sampling.apply_sampling(truth, op, noise_std=s["noise_std"], seed=s["seed"])
        save_map(ParametricMap(y[None, :], unit="measurements"), out / "measurements.qamp")
    with open(out / "meta.toml", "w") as fh:
        fh.write(
            f'kind = "{s["kind"]}"\nrows = {truth.rows}\ncols = {truth.cols}\n'
            f"block_size = {s['block_size']}\nratio = {s['ratio']!r}\n"
            f"noise_std = {s['noise_std']!r}\nseed = {s['seed']}\n"
        )
    print(f"operator + measurements -> {out}")
    return 0


def _cmd_reconstruct(cfg, out: Path, args) -> int:
    src = Path(args.input)
    with open(src / "meta.toml", "rb") as fh:
        meta = tomllib.load(fh)
    loaded = load_map(src / "operator.qamp")
    y_map = load_map(src / "measurements.qamp")
    method = args.method or "amp-soft"
    if isinstance(loaded, ParametricMap):
        op = sampling.MeasurementMatrix(loaded.data)
        y = y_map.data
        blocks, grid = block_partition(
            np.zeros((meta["rows"], meta["cols"])), meta["block_size"]
        )
        problem = sampling.CsProblem(operator=op, y=y, noise_std=meta["noise_std"], grid=grid)
    else:
        cells, kind = loaded
        op = sampling.BinaryMask(cells, kind if kind in sampling.MASK_KINDS else "random")
        problem = sampling.CsProblem(operator=op, y=y_map.data[0], noise_std=meta["noise_std"])

    if method in ("unfolded", "unfolded-trainedA"):
        if not args.model:
            raise ConfigError("unfolded reconstruction needs --model <checkpoint>")
        if problem.grid is None:
            raise MethodError("mask sampling is incompatible with the block-based model")
        model = unfolded.load_model(args.model)
        a_file = op.entries
        a_model = model.a.entries
        if a_file.shape != a_model.shape:
            raise MethodError("operator shape does not match the checkpoint matrix")
        # the checkpoint matrix may be a rescaled copy of the sampling matrix
        # (spectral normalization at init); map the measurements to its scale
        scale = float(a_model.ravel() @ a_file.ravel()) / float(a_file.ravel() @ a_file.ravel())
        if np.linalg.norm(a_model - scale * a_file) > 1e-9 * np.linalg.norm(a_model):
            raise MethodError("measurements were taken with a different operator than the checkpoint's")
        recon = unfolded.unfolded_forward(scale * problem.y, model, problem.grid)
        trace = []
    else:
        den = _denoiser_from_config(cfg, "soft" if method == "amp-soft" else "cauchy")
        a = cfg["amp"]
        recon, trace = amp_mod.amp_reconstruct(
            problem,
            den,
            max_iters=a["max_iters"],
            onsager=a["onsager"],
            tol=a["tol"],
            workers=a["workers"],
            normalize=a["normalize"],
        )
    save_map(recon, out / f"recon_{method}.qamp")
    if trace:
        amp_mod.trace_to_csv(trace, out / f"trace_{method}.csv")
    truth_path = src / "truth.qamp"
    if truth_path.exists():
        truth = load_map(truth_path)
        report = metrics_mod.evaluate(truth, recon)
        metrics_mod.reports_to_csv([(method, "synthetic", report)], out / "metrics.csv")
        print(
            f"{method}: psnr={metrics_mod.format_metric(report.psnr_db)} dB "
            f"rmse={report.rmse:.4g} ssim={report.ssim:.4f}"
        )
    print(f"reconstruction -> {out / f'recon_{method}.qamp'}")
    return 0


def _cmd_train(cfg, out: Path, args) -> int:
    method = args.method or "unfolded"
    if method not in ("unfolded", "unfolded-trainedA"):
        raise ConfigError("train supports the unfolded methods only")
    model, curve = _train_unfolded(cfg, trainable_a=(method == "unfolded-trainedA"))
    unfolded.save_model(model, out / f"model_{method}.qamu")
    unfolded.loss_curve_to_csv(curve, out / f"loss_{method}.csv")
    print(
        f"trained {method}: {len(curve)} steps, final loss {curve[-1][2]:.6g} "
        f"-> {out / f'model_{method}.qamu'}"
    )
    return 0


def _cmd_eval(cfg, out: Path, args) -> int:
    ref = load_map(args.ref)
    test = load_map(args.test)
    if not (isinstance(ref, ParametricMap) and isinstance(test, ParametricMap)):
        raise ConfigError("eval expects v1 map files")
    report = metrics_mod.evaluate(ref, test)
    metrics_mod.reports_to_csv(
        [(args.method or "eval", args.label, report)], out / "metrics.csv"
    )
    print(
        f"psnr={metrics_mod.format_metric(report.psnr_db)} dB "
        f"rmse={report.rmse:.6g} ssim={report.ssim:.6f}"
    )
    return 0


def _cmd_compare(cfg, out: Path, args) -> int:
    methods = cfg.methods
    if args.method:
        if args.method not in methods:
            raise ConfigError(f"method {args.method!r} not in configured methods")
        cfg.raw["methods"] = [args.method]
    rows = compare_methods(cfg, out)
    for r in rows:
        if r.error:
            print(f"{r.method}: ERROR {r.error}")
        else:
            print(
                f"{r.method}: sampling={r.sampling} ratio={r.ratio:.3f} "
                f"psnr={metrics_mod.format_metric(r.psnr_db)} dB "
                f"rmse={r.rmse:.4g} ssim={r.ssim:.4f}"
            )
    print(f"report -> {out / 'report.csv'}")
    return 1 if any(r.error for r in rows) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qamcs",
        description="Compressive-sensing reconstruction toolkit for acoustic-microscopy maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("phantom", _cmd_phantom),
        ("acquire", _cmd_acquire),
        ("sample", _cmd_sample),
        ("reconstruct", _cmd_reconstruct),
        ("train", _cmd_train),
        ("eval", _cmd_eval),
        ("compare", _cmd_compare),
    ):
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed overriding config seeds")
        p.add_argument("--method", help="method name (filter/selector)")
        if name == "sample":
            p.add_argument("--map", help="measure this QAMP map instead of a fresh phantom")
        if name == "reconstruct":
            p.add_argument("--in", dest="input", required=True, help="sample output directory")
            p.add_argument("--model", help="QAMU checkpoint for unfolded methods")
        if name == "eval":
            p.add_argument("--ref", required=True)
            p.add_argument("--test", required=True)
            p.add_argument("--label", default="synthetic")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return args.func(cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
